"""Synthetic 8x8 dataset, surrogate/victim training and model persistence."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from . import nn_core
from .errors import ConfigError, ParseError, ShapeError, UnsupportedVersionError
from .nn_core import Affine, LabeledBatch, Model, Relu, load_model, save_model

__all__ = [
    "DatasetSpec", "Dataset", "Architecture", "TrainHyper", "UnderTrainedWarning",
    "DEFAULT_ARCHITECTURES", "gen_dataset", "init_model", "train_model", "accuracy",
    "train_default_models", "save_model", "load_model", "save_dataset", "load_dataset",
]

log = logging.getLogger(__name__)

DATA_MAGIC = "MAPDATA"
DATA_VERSION = "v1"


class UnderTrainedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    class_count: int = 10
    input_dim: int = 64
    per_class: int = 200
    test_per_class: int = 50
    cluster_spread: float = 0.3
    # half-amplitude of the +/- template pattern around mid-grey
    template_contrast: float = 0.2


@dataclass(frozen=True)
class Dataset:
    train: LabeledBatch
    test: LabeledBatch
    class_count: int
    value_range: Tuple[float, float] = (0.0, 1.0)

    @property
    def input_dim(self) -> int:
        return self.train.inputs.shape[1]


def _class_templates(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    signs = rng.choice((-1.0, 1.0), size=(spec.class_count, spec.input_dim))
    return np.clip(0.5 + spec.template_contrast * signs, 0.0, 1.0)


def _draw_split(templates, per_class, spread, rng) -> LabeledBatch:
    c, d = templates.shape
    labels = np.repeat(np.arange(c), per_class)
    noise = rng.standard_normal((labels.size, d))
    x = np.clip(templates[labels] + spread * noise, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return LabeledBatch(x[order], labels[order])


def gen_dataset(spec: DatasetSpec) -> Dataset:
    """Gaussian clusters around per-class sign templates, clipped to [0, 1].

    Train and test are drawn from independent child streams of ``spec.seed``.
    """
    if spec.class_count < 3:
        raise ConfigError("class_count must be >= 3 so a target differs from the source class")
    if spec.input_dim < 1 or spec.per_class < 1 or spec.test_per_class < 0:
        raise ConfigError("input_dim and per_class must be positive")
    if spec.cluster_spread < 0:
        raise ConfigError("cluster_spread must be non-negative")
    template_ss, train_ss, test_ss = np.random.SeedSequence(spec.seed).spawn(3)
    templates = _class_templates(spec, np.random.default_rng(template_ss))
    train = _draw_split(templates, spec.per_class, spec.cluster_spread, np.random.default_rng(train_ss))
    test = _draw_split(templates, spec.test_per_class, spec.cluster_spread, np.random.default_rng(test_ss))
    return Dataset(train=train, test=test, class_count=spec.class_count)


@dataclass(frozen=True)
class Architecture:
    hidden: Tuple[int, ...]
    seed: int = 0


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.05
    epochs: int = 50
    batch_size: int = 8
    accuracy_floor: float = 0.85


# Five distinct MLPs standing in for the five CNNs of the attack experiments.
DEFAULT_ARCHITECTURES: Tuple[Architecture, ...] = (
    Architecture((128, 64), seed=11),
    Architecture((64, 64), seed=22),
    Architecture((96, 48, 32), seed=33),
    Architecture((128, 128), seed=44),
    Architecture((64, 32, 32), seed=55),
)


def init_model(arch: Architecture, input_dim: int, class_count: int) -> Model:
    """He-normal weights, zero biases."""
    dims = (input_dim, *arch.hidden, class_count)
    if any(int(d) < 1 for d in dims):
        raise ShapeError(f"non-positive layer width in {dims}")
    rng = np.random.default_rng(arch.seed)
    layers: List = []
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        if i:
            layers.append(Relu())
        w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        layers.append(Affine(w, np.zeros(n_out)))
    return Model(tuple(layers))


def accuracy(model: Model, batch: LabeledBatch) -> float:
    if len(batch) == 0:
        warnings.warn("accuracy of an empty batch is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.mean(nn_core.predict_batch(model, batch.inputs) == batch.labels))


def train_model(arch: Architecture, data: Dataset, hyper: TrainHyper = TrainHyper()) -> Model:
    """Minibatch SGD on ``data.train``; warns if ``data.test`` accuracy ends below the floor."""
    model = init_model(arch, data.input_dim, data.class_count)
    rng = np.random.default_rng([arch.seed, 1])
    n = len(data.train)
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            batch = data.train.take(order[start:start + hyper.batch_size])
            model = nn_core.sgd_step(model, nn_core.grad_params(model, batch), hyper.lr)
    if hyper.epochs > 0 and len(data.test):
        acc = accuracy(model, data.test)
        log.info("trained %s: test accuracy %.4f", arch.hidden, acc)
        if acc < hyper.accuracy_floor:
            warnings.warn(
                f"model {arch.hidden} (seed {arch.seed}) reached {acc:.4f} < {hyper.accuracy_floor}",
                UnderTrainedWarning,
                stacklevel=2,
            )
    return model


def train_default_models(data: Dataset, hyper: TrainHyper = TrainHyper(),
                         archs: Sequence[Architecture] = DEFAULT_ARCHITECTURES) -> List[Model]:
    return [train_model(a, data, hyper) for a in archs]


# -- dataset files ----------------------------------------------------------


def dumps_batch(batch: LabeledBatch, class_count: int) -> str:
    n, d = batch.inputs.shape
    lines = [f"{DATA_MAGIC} {DATA_VERSION} {n} {d} {class_count}"]
    for x, y in zip(batch.inputs, batch.labels):
        lines.append(" ".join([str(int(y))] + [repr(float(v)) for v in x]))
    return "\n".join(lines) + "\n"


def loads_batch(text: str) -> Tuple[LabeledBatch, int]:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty dataset file", 1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != DATA_MAGIC:
        raise ParseError(f"header must read '{DATA_MAGIC} v1 <n> <input_dim> <class_count>'", 1)
    if head[1] != DATA_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset file version {head[1]!r}")
    try:
        n, d, c = (int(v) for v in head[2:])
    except ValueError:
        raise ParseError("header counts must be integers", 1) from None
    if len(lines) - 1 < n:
        raise ParseError(f"expected {n} samples, file ends after {len(lines) - 1}", len(lines) + 1)
    inputs = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        lineno = i + 2
        parts = lines[i + 1].split()
        if len(parts) != d + 1:
            raise ParseError(f"expected label plus {d} values, found {len(parts)} fields", lineno)
        try:
            labels[i] = int(parts[0])
            inputs[i] = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"bad field ({exc})", lineno) from None
        if not 0 <= labels[i] < c:
            raise ParseError(f"label {labels[i]} outside [0, {c})", lineno)
    if any(l.strip() for l in lines[n + 1:]):
        raise ParseError("trailing content after last sample", n + 2)
    return LabeledBatch(inputs, labels), c


def save_dataset(data: Dataset, directory) -> None:
    """Writes ``train.txt`` and ``test.txt`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "test"):
        (directory / f"{name}.txt").write_text(dumps_batch(getattr(data, name), data.class_count))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    train, c_train = loads_batch((directory / "train.txt").read_text())
    test, c_test = loads_batch((directory / "test.txt").read_text())
    if c_train != c_test:
        raise ParseError("train and test files disagree on class_count", 1)
    return Dataset(train=train, test=test, class_count=c_train)
