"""Benchmark harness: MAP-initialised attacks against the RGF and random-start baselines.

Each trained model takes a turn as the black-box victim while the remaining
models act as white-box surrogates for MAP training.  Reports carry one
aggregate row per (victim, method) plus one row per attacked sample.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import model_zoo
from .black_box_attack import (AttackConfig, AttackResult, BlackBoxOracle, attack,
                               attack_baseline_random, attack_baseline_rgf, random_init)
from .errors import ConfigError
from .map_trainer import (MapTrainConfig, Perturbation, load_map, map_training_pool, save_map,
                          train_map)
from .model_zoo import Dataset, DatasetSpec
from .nn_core import LabeledBatch, Model, dumps_model

log = logging.getLogger(__name__)

METHODS = ("rgf", "random", "map")
CSV_COLUMNS = ("victim", "method", "success_rate", "avg_queries", "avg_l2", "n_samples")
THREADS_ENV = "MAP_ATTACK_THREADS"

# class split used for the cross-class check: MAPs learn on one group, attacks hit the other
UNIVERSAL_MAP_CLASSES = (2, 3, 4, 5, 6, 7)
UNIVERSAL_ATTACK_CLASSES = (0, 1, 8, 9)
UNIVERSAL_TARGET = 9


@dataclass(frozen=True)
class BenchConfig:
    victim_id: int = 0
    surrogate_ids: Tuple[int, ...] = (1, 2, 3, 4)
    methods: Tuple[str, ...] = METHODS
    target: int = 6
    budget: int = 600
    seed: int = 0
    n_attacked: int = 200
    exclude_target: bool = True
    # Restrict MAP training / attacked samples to these classes (None = all).
    map_classes: Optional[Tuple[int, ...]] = None
    attack_classes: Optional[Tuple[int, ...]] = None
    attack: AttackConfig = AttackConfig()
    map_train: MapTrainConfig = MapTrainConfig()
    dataset: DatasetSpec = DatasetSpec()
    data_dir: Optional[str] = None
    model_dir: Optional[str] = None
    cache_dir: Optional[str] = None
    out: Optional[str] = None
    workers: int = 1

    def resolved(self) -> "BenchConfig":
        """Push the top-level target/budget/seed into the nested configs."""
        return replace(
            self,
            attack=replace(self.attack, target=self.target, budget=max(self.budget, 1), seed=self.seed),
            map_train=replace(self.map_train, seed=self.seed, train_classes=self.map_classes),
        )

    def validate(self, n_models: Optional[int] = None) -> None:
        if self.victim_id in self.surrogate_ids:
            raise ConfigError(f"victim {self.victim_id} is also listed as a surrogate")
        if not self.surrogate_ids and any(m in ("map", "random") for m in self.methods):
            raise ConfigError("MAP training needs at least one surrogate")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.budget < 0 or self.n_attacked < 0:
            raise ConfigError("budget and n_attacked must be non-negative")
        if n_models is not None:
            for i in (self.victim_id, *self.surrogate_ids):
                if not 0 <= i < n_models:
                    raise ConfigError(f"model id {i} outside [0, {n_models})")


@dataclass(frozen=True)
class SampleRow:
    victim: int
    method: str
    index: int
    label: int
    success: bool
    queries: int
    l2: float
    iterations: int


@dataclass(frozen=True)
class ReportRow:
    victim: int
    method: str
    success_rate: float
    avg_queries: float
    avg_l2: Optional[float]
    n_samples: int
    successes: int


@dataclass
class BenchReport:
    rows: List[ReportRow] = field(default_factory=list)
    samples: List[SampleRow] = field(default_factory=list)

    def row(self, victim: int, method: str) -> ReportRow:
        for r in self.rows:
            if r.victim == victim and r.method == method:
                return r
        raise KeyError((victim, method))

    def extend(self, other: "BenchReport") -> None:
        self.rows.extend(other.rows)
        self.samples.extend(other.samples)


def aggregate(victim: int, method: str, samples: Sequence[SampleRow]) -> ReportRow:
    n = len(samples)
    wins = [s for s in samples if s.success]
    return ReportRow(
        victim=victim,
        method=method,
        success_rate=len(wins) / n if n else 0.0,
        avg_queries=sum(s.queries for s in samples) / n if n else 0.0,
        avg_l2=sum(s.l2 for s in wins) / len(wins) if wins else None,
        n_samples=n,
        successes=len(wins),
    )


# -- inputs -----------------------------------------------------------------


def load_or_build(config: BenchConfig) -> Tuple[Dataset, List[Model]]:
    """Dataset and model zoo from the configured directories, or freshly built defaults."""
    if config.data_dir and Path(config.data_dir, "train.txt").exists():
        data = model_zoo.load_dataset(config.data_dir)
    else:
        data = model_zoo.gen_dataset(config.dataset)
    if config.model_dir and Path(config.model_dir).is_dir():
        models = load_model_dir(config.model_dir)
    else:
        models = model_zoo.train_default_models(data)
    return data, models


def load_model_dir(directory) -> List[Model]:
    """Load ``model_0.txt``, ``model_1.txt``, ... in index order."""
    paths = sorted(Path(directory).glob("model_*.txt"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise ConfigError(f"no model_<i>.txt files in {directory}")
    return [model_zoo.load_model(p) for p in paths]


def _map_cache_key(config: BenchConfig, surrogates: Sequence[Model], pool: LabeledBatch) -> str:
    h = hashlib.sha256()
    h.update(repr(config.map_train).encode())
    h.update(str(config.target).encode())
    for m in surrogates:
        h.update(dumps_model(m).encode())
    h.update(pool.inputs.tobytes())
    h.update(pool.labels.tobytes())
    return h.hexdigest()[:24]


def obtain_map(config: BenchConfig, data: Dataset, surrogates: Sequence[Model]) -> Perturbation:
    """Train (or fetch from the on-disk cache) the MAP for the config's surrogate set and target."""
    pool = map_training_pool(config.map_train, data, config.target)
    if config.cache_dir:
        path = Path(config.cache_dir) / f"map_{_map_cache_key(config, surrogates, pool)}.txt"
        if path.exists():
            return load_map(path)
    v = train_map(config.map_train, surrogates, pool, config.target)
    if config.cache_dir:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_map(v, path)
    return v


def attacked_indices(config: BenchConfig, data: Dataset, victim: Model) -> np.ndarray:
    """Test-split samples to attack.

    Keeps samples outside the target class (and inside ``attack_classes``) that
    the victim classifies correctly; the screening queries are not charged to
    any attack.  A seeded draw then picks ``n_attacked`` of them.
    """
    labels = data.test.labels
    keep = np.ones(labels.size, dtype=bool)
    if config.exclude_target:
        keep &= labels != config.target
    if config.attack_classes is not None:
        keep &= np.isin(labels, np.asarray(config.attack_classes))
    idx = np.flatnonzero(keep)
    if idx.size:
        screen = BlackBoxOracle(victim)
        preds = np.argmax(screen.probabilities(data.test.inputs[idx]), axis=1)
        idx = idx[preds == labels[idx]]
    chosen = np.random.default_rng([config.seed, 0x5E1]).permutation(idx)[: config.n_attacked]
    return np.sort(chosen)


def sample_seed(master: int, index: int) -> int:
    """Per-sample RNG seed; independent of execution order and worker count."""
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


# -- attack execution -------------------------------------------------------

_WORKER: Dict = {}


def _worker_init(victim, v, attack_cfg, budget, methods, victim_id):
    _WORKER.update(victim=victim, v=v, attack=attack_cfg, budget=budget, methods=methods,
                   victim_id=victim_id)


def _run_sample(job) -> List[SampleRow]:
    index, label, x = job
    w = _WORKER
    cfg = replace(w["attack"], seed=sample_seed(w["attack"].seed, index))
    rows = []
    for method in w["methods"]:
        if w["budget"] == 0:
            res = _transfer_only(w["victim"], x, method, w["v"], cfg)
        else:
            oracle = BlackBoxOracle(w["victim"], budget=w["budget"])
            if method == "map":
                res = attack(oracle, x, w["v"], cfg)
            elif method == "random":
                res = attack_baseline_random(oracle, x, cfg, w["v"].norm_inf)
            else:
                res = attack_baseline_rgf(oracle, x, cfg)
            assert res.queries_used == oracle.query_count
        rows.append(SampleRow(w["victim_id"], method, int(index), int(label), bool(res.success),
                              int(res.queries_used), float(res.l2_distortion), int(res.iterations)))
    return rows


def _transfer_only(victim, x, method, v, cfg):
    """Zero-budget evaluation: only the starting point is checked, and the check is free."""
    if method == "map":
        start = np.clip(x + v.v, 0.0, 1.0)
    elif method == "random":
        start = np.clip(x + random_init(x.size, v.norm_inf, cfg.seed), 0.0, 1.0)
    else:
        start = x
    ok = BlackBoxOracle(victim).label(start) == cfg.target
    return AttackResult(ok, 0, start, float(np.linalg.norm(start - x)), 0)


def worker_count(config: BenchConfig) -> int:
    n = max(1, config.workers)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def _execute(jobs, init_args, workers: int) -> List[SampleRow]:
    if workers <= 1 or len(jobs) < 2:
        _worker_init(*init_args)
        try:
            return [row for job in jobs for row in _run_sample(job)]
        finally:
            _WORKER.clear()
    chunk = max(1, len(jobs) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=init_args) as pool:
        return [row for rows in pool.map(_run_sample, jobs, chunksize=chunk) for row in rows]


def run_benchmark(config: BenchConfig, data: Optional[Dataset] = None,
                  models: Optional[Sequence[Model]] = None,
                  perturbation: Optional[Perturbation] = None) -> BenchReport:
    """Attack ``n_attacked`` test samples with every configured method against one victim."""
    config.validate()
    config = config.resolved()
    if data is None or models is None:
        built_data, built_models = load_or_build(config)
        data = data if data is not None else built_data
        models = models if models is not None else built_models
    config.validate(len(models))
    victim = models[config.victim_id]
    surrogates = [models[i] for i in config.surrogate_ids]

    v = perturbation
    if v is None and any(m in ("map", "random") for m in config.methods):
        v = obtain_map(config, data, surrogates)
    if v is not None and v.target != config.target:
        raise ConfigError(f"MAP targets {v.target}, benchmark targets {config.target}")

    idx = attacked_indices(config, data, victim)
    jobs = [(int(i), int(data.test.labels[i]), data.test.inputs[i]) for i in idx]
    init_args = (victim, v, config.attack, config.budget, tuple(config.methods), config.victim_id)
    samples = _execute(jobs, init_args, worker_count(config))

    samples.sort(key=lambda s: (config.methods.index(s.method), s.index))
    report = BenchReport(samples=samples)
    for method in config.methods:
        report.rows.append(aggregate(config.victim_id, method, [s for s in samples if s.method == method]))
    return report


def rotation_configs(config: BenchConfig, n_models: int) -> List[BenchConfig]:
    """One config per victim, with every other model as a surrogate."""
    return [
        replace(config, victim_id=k, surrogate_ids=tuple(i for i in range(n_models) if i != k))
        for k in range(n_models)
    ]


def run_rotation(config: BenchConfig, data: Optional[Dataset] = None,
                 models: Optional[Sequence[Model]] = None) -> BenchReport:
    if data is None or models is None:
        data, models = load_or_build(config.resolved())
    report = BenchReport()
    for cfg in rotation_configs(config, len(models)):
        report.extend(run_benchmark(cfg, data, models))
    return report


def universality_config(config: BenchConfig = BenchConfig()) -> BenchConfig:
    """Cross-class defaults: MAP set and attacked set scaled like the 600/1000 case."""
    return replace(
        config,
        target=UNIVERSAL_TARGET,
        map_classes=UNIVERSAL_MAP_CLASSES,
        attack_classes=UNIVERSAL_ATTACK_CLASSES,
        map_train=replace(config.map_train, inner_batch=360, meta_batch=600),
    )


def run_universality_benchmark(config: BenchConfig, data: Optional[Dataset] = None,
                               models: Optional[Sequence[Model]] = None,
                               rotate: bool = False) -> BenchReport:
    """MAP trained only on ``map_classes``; attacks only on the disjoint ``attack_classes``."""
    if config.map_classes is None or config.attack_classes is None:
        raise ConfigError("universality benchmark needs both map_classes and attack_classes")
    overlap = set(config.map_classes) & set(config.attack_classes)
    if overlap:
        raise ConfigError(f"MAP-training and attacked classes overlap: {sorted(overlap)}")
    if rotate:
        return run_rotation(config, data, models)
    return run_benchmark(config, data, models)


# -- report files -----------------------------------------------------------


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.4f}"


def report_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        writer.writerow([r.victim, r.method, _fmt(r.success_rate), _fmt(r.avg_queries),
                         _fmt(r.avg_l2), r.n_samples])
    return buf.getvalue()


def report_json(report: BenchReport) -> str:
    rows = [
        {"victim": r.victim, "method": r.method, "success_rate": round(r.success_rate, 4),
         "avg_queries": r.avg_queries, "avg_l2": r.avg_l2, "n_samples": r.n_samples}
        for r in report.rows
    ]
    return json.dumps({"rows": rows, "samples": [asdict(s) for s in report.samples]}, indent=1) + "\n"


def parse_report_json(text: str) -> BenchReport:
    """Inverse of :func:`report_json`; aggregates are recomputed exactly from the samples."""
    doc = json.loads(text)
    samples = [SampleRow(**s) for s in doc["samples"]]
    rows = [
        aggregate(r["victim"], r["method"],
                  [s for s in samples if s.victim == r["victim"] and s.method == r["method"]])
        for r in doc["rows"]
    ]
    return BenchReport(rows=rows, samples=samples)


def write_report(report: BenchReport, path, format: str = "json") -> None:
    if format not in ("csv", "json"):
        raise ConfigError(f"unknown report format {format!r}")
    text = report_csv(report) if format == "csv" else report_json(report)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# -- flat config files ------------------------------------------------------

_NESTED = {"attack": AttackConfig, "map_train": MapTrainConfig, "dataset": DatasetSpec}


def _coerce(raw: str, current, name: str):
    raw = raw.strip()
    if raw.lower() in ("none", "") and not isinstance(current, str):
        return None
    if isinstance(current, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple) or name.endswith(("_ids", "_classes", "methods")):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(items) if name.endswith("methods") else tuple(int(s) for s in items)
    return raw


def apply_overrides(config: BenchConfig, pairs: Iterable[Tuple[str, str]]) -> BenchConfig:
    """Apply ``key = value`` pairs; nested fields use dotted keys such as ``attack.sigma``."""
    top = {f.name for f in fields(BenchConfig)}
    for key, raw in pairs:
        head, _, sub = key.partition(".")
        try:
            if sub:
                if head not in _NESTED:
                    raise ConfigError(f"unknown config section {head!r}")
                nested = getattr(config, head)
                if sub not in {f.name for f in fields(_NESTED[head])}:
                    raise ConfigError(f"unknown key {key!r}")
                value = _coerce(raw, getattr(nested, sub), sub)
                config = replace(config, **{head: replace(nested, **{sub: value})})
            else:
                if key not in top or key in _NESTED:
                    raise ConfigError(f"unknown key {key!r}")
                config = replace(config, **{key: _coerce(raw, getattr(config, key), key)})
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from None
    return config


def parse_config_text(text: str) -> List[Tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path, base: BenchConfig = BenchConfig()) -> BenchConfig:
    return apply_overrides(base, parse_config_text(Path(path).read_text()))


def config_lines(config: BenchConfig) -> List[str]:
    """Resolved config in the same flat ``key = value`` format :func:`load_config` reads."""
    out = []
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in _NESTED:
            for g in fields(value):
                out.append(f"{f.name}.{g.name} = {_show(getattr(value, g.name))}")
        else:
            out.append(f"{f.name} = {_show(value)}")
    return out


def _show(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return "none" if value is None else str(value)
