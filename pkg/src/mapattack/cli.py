"""Command-line entry point: ``mapattack <subcommand> [flags]``.

Typical pipeline::

    mapattack gen-data --out work/data
    mapattack train-models --data work/data --out work/models
    mapattack train-map --data work/data --models work/models --victim 0 --out work/map.txt
    mapattack bench --data work/data --models work/models --rotate --out work/report.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench, model_zoo
from .black_box_attack import (AttackConfig, BlackBoxOracle, attack, attack_baseline_random,
                               attack_baseline_rgf)
from .errors import MapAttackError
from .map_trainer import MapTrainConfig, load_map, save_map, train_map

log = logging.getLogger("mapattack")


def _print_config(title: str, items) -> None:
    print(f"# {title}")
    for key, value in items:
        print(f"{key} = {value}")
    sys.stdout.flush()


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master random seed")
    p.add_argument("--budget", type=int, default=None, help="query budget per attacked sample")
    p.add_argument("--target", type=int, default=None, help="target class t")
    p.add_argument("--out", default=None, help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def _id_list(text: str) -> tuple:
    return tuple(int(s) for s in text.split(",") if s.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapattack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate the synthetic 8x8 dataset")
    _common(p)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--test-per-class", type=int, default=None)
    p.add_argument("--spread", type=float, default=None, help="cluster spread (noise std)")
    p.add_argument("--contrast", type=float, default=None, help="template half-amplitude")
    p.add_argument("--classes", type=int, default=None)

    p = sub.add_parser("train-models", help="train the five-model zoo")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("train-map", help="train a meta adversarial perturbation on surrogates")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="directory holding model_<i>.txt")
    p.add_argument("--victim", type=int, default=0, help="model excluded from the surrogate set")
    p.add_argument("--surrogates", type=_id_list, default=None, help="comma-separated model ids")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--epsilon-inf", type=float, default=None)
    p.add_argument("--train-classes", type=_id_list, default=None)

    p = sub.add_parser("attack", help="attack one test sample")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="victim weight file")
    p.add_argument("--map", default=None, help="MAP file (method 'map')")
    p.add_argument("--index", type=int, default=0, help="test-split sample index")
    p.add_argument("--method", choices=bench.METHODS, default="map")
    p.add_argument("--epsilon-l2", type=float, default=None)

    for name, helptext in (("bench", "targeted-attack benchmark"),
                           ("bench-universal", "cross-class universality benchmark")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--config", default=None, help="flat 'key = value' config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--data", default=None, help="dataset directory (generated if absent)")
        p.add_argument("--models", default=None, help="model directory (trained if absent)")
        p.add_argument("--victim", type=int, default=None)
        p.add_argument("--surrogates", type=_id_list, default=None)
        p.add_argument("--rotate", action="store_true", help="let every model take a turn as victim")
        p.add_argument("--methods", default=None, help="comma-separated subset of rgf,random,map")
        p.add_argument("--n-attacked", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--cache-dir", default=None, help="reuse trained MAPs across runs")
        p.add_argument("--format", choices=("json", "csv"), default=None,
                       help="report format (default: from --out suffix, else json)")
    return parser


def _gen_data(args) -> int:
    spec = model_zoo.DatasetSpec()
    overrides = {"seed": args.seed, "per_class": args.per_class, "test_per_class": args.test_per_class,
                 "cluster_spread": args.spread, "template_contrast": args.contrast,
                 "class_count": args.classes}
    spec = replace(spec, **{k: v for k, v in overrides.items() if v is not None})
    out = args.out or "data"
    _print_config("gen-data", [*vars(spec).items(), ("out", out)])
    data = model_zoo.gen_dataset(spec)
    model_zoo.save_dataset(data, out)
    print(f"wrote {len(data.train)} train / {len(data.test)} test samples to {out}")
    return 0


def _train_models(args) -> int:
    hyper = model_zoo.TrainHyper()
    overrides = {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size}
    hyper = replace(hyper, **{k: v for k, v in overrides.items() if v is not None})
    out = Path(args.out or "models")
    archs = model_zoo.DEFAULT_ARCHITECTURES
    if args.seed is not None:
        archs = tuple(replace(a, seed=a.seed + args.seed) for a in archs)
    _print_config("train-models", [*vars(hyper).items(), ("data", args.data), ("out", out),
                                   ("architectures", [(a.hidden, a.seed) for a in archs])])
    data = model_zoo.load_dataset(args.data)
    out.mkdir(parents=True, exist_ok=True)
    for i, arch in enumerate(archs):
        model = model_zoo.train_model(arch, data, hyper)
        model_zoo.save_model(model, out / f"model_{i}.txt")
        print(f"model_{i} {arch.hidden}: test accuracy {model_zoo.accuracy(model, data.test):.4f}")
    return 0


def _train_map(args) -> int:
    cfg = MapTrainConfig()
    overrides = {"seed": args.seed, "alpha": args.alpha, "beta": args.beta, "epochs": args.epochs,
                 "epsilon_inf": args.epsilon_inf, "train_classes": args.train_classes}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    target = 6 if args.target is None else args.target
    data = model_zoo.load_dataset(args.data)
    models = bench.load_model_dir(args.models)
    surrogate_ids = args.surrogates or tuple(i for i in range(len(models)) if i != args.victim)
    if args.victim in surrogate_ids:
        raise MapAttackError(f"victim {args.victim} is also listed as a surrogate")
    out = args.out or "map.txt"
    _print_config("train-map", [*vars(cfg).items(), ("target", target),
                                ("surrogate_ids", surrogate_ids), ("out", out)])
    v = train_map(cfg, [models[i] for i in surrogate_ids], data, target)
    save_map(v, out)
    print(f"wrote MAP (L-inf {v.norm_inf:.4f}, L2 {np.linalg.norm(v.v):.4f}) to {out}")
    return 0


def _attack(args) -> int:
    cfg = AttackConfig()
    overrides = {"seed": args.seed, "budget": args.budget, "target": args.target,
                 "epsilon_l2": args.epsilon_l2}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    _print_config("attack", [*vars(cfg).items(), ("method", args.method), ("index", args.index)])
    data = model_zoo.load_dataset(args.data)
    victim = model_zoo.load_model(args.model)
    x = data.test.inputs[args.index]
    oracle = BlackBoxOracle(victim, budget=cfg.budget)
    if args.method == "rgf":
        res = attack_baseline_rgf(oracle, x, cfg)
    else:
        if not args.map:
            raise MapAttackError(f"method {args.method!r} needs --map")
        v = load_map(args.map)
        res = attack(oracle, x, v, cfg) if args.method == "map" else \
            attack_baseline_random(oracle, x, cfg, v.norm_inf)
    summary = {"index": args.index, "label": int(data.test.labels[args.index]), "method": args.method,
               "success": res.success, "queries_used": res.queries_used,
               "l2_distortion": res.l2_distortion, "iterations": res.iterations}
    text = json.dumps(summary, indent=1)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _bench(args, universal: bool) -> int:
    config = bench.BenchConfig()
    if universal:
        config = bench.universality_config(config)
    if args.config:
        config = bench.load_config(args.config, config)
    pairs = []
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise MapAttackError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append((key.strip(), value.strip()))
    config = bench.apply_overrides(config, pairs)
    overrides = {"seed": args.seed, "budget": args.budget, "target": args.target, "out": args.out,
                 "data_dir": args.data, "model_dir": args.models, "victim_id": args.victim,
                 "surrogate_ids": args.surrogates, "n_attacked": args.n_attacked,
                 "workers": args.workers, "cache_dir": args.cache_dir,
                 "methods": tuple(args.methods.split(",")) if args.methods else None}
    config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    data, models = bench.load_or_build(config.resolved())
    if args.victim is not None and args.surrogates is None:
        others = tuple(i for i in range(len(models)) if i != args.victim)
        config = replace(config, surrogate_ids=others)

    title = "bench-universal" if universal else "bench"
    _print_config(title, [line.split(" = ", 1) for line in bench.config_lines(config.resolved())]
                  + [("rotate", args.rotate)])
    if universal:
        report = bench.run_universality_benchmark(config, data, models, rotate=args.rotate)
    elif args.rotate:
        report = bench.run_rotation(config, data, models)
    else:
        report = bench.run_benchmark(config, data, models)

    sys.stdout.write(bench.report_csv(report))
    if config.out:
        fmt = args.format or ("csv" if str(config.out).endswith(".csv") else "json")
        bench.write_report(report, config.out, fmt)
        print(f"wrote {fmt} report to {config.out}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "gen-data": _gen_data,
        "train-models": _train_models,
        "train-map": _train_map,
        "attack": _attack,
        "bench": lambda a: _bench(a, universal=False),
        "bench-universal": lambda a: _bench(a, universal=True),
    }
    try:
        return handlers[args.command](args)
    except (MapAttackError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


cli_main = main
