"""Meta adversarial perturbation (MAP) training over a white-box surrogate ensemble.

Each minibatch iteration runs three steps:

1. adapt: ``v' = v - alpha * mean_i grad_v L(f_i, B + v, t)`` (repeatable ``inner_steps`` times),
2. meta:  ``v  = v - beta  * mean_i grad L(f_i, B' + v', t)`` on a freshly sampled ``B'``,
3. clamp ``v`` into the L-infinity ball of radius ``epsilon_inf``.

The meta step is first order: the gradient is taken at ``v'`` and applied to ``v``.

Ensemble members are usually :class:`~mapattack.nn_core.Model` values.  Any
object exposing ``perturbation_gradient(inputs, v, target)`` and
``perturbation_loss(inputs, v, target)`` can stand in for a model, which is
how closed-form checks plug in analytic losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import nn_core
from .errors import ConfigError, DomainError, ParseError, ShapeError, UnsupportedVersionError
from .model_zoo import Dataset
from .nn_core import LabeledBatch, Model

MAP_MAGIC = "MAPVEC"
MAP_VERSION = "v1"


@dataclass(frozen=True, eq=False)
class Perturbation:
    v: np.ndarray
    epsilon_inf: float
    target: int

    def __post_init__(self):
        v = np.array(self.v, dtype=np.float64).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "v", v)
        if self.epsilon_inf < 0:
            raise ConfigError("epsilon_inf must be non-negative")
        if v.size and np.max(np.abs(v)) > self.epsilon_inf:
            raise DomainError("perturbation exceeds its L-infinity budget")

    @property
    def norm_inf(self) -> float:
        return float(np.max(np.abs(self.v))) if self.v.size else 0.0


@dataclass(frozen=True)
class MapTrainConfig:
    alpha: float = 0.01
    beta: float = 0.01
    epochs: int = 20
    inner_batch: int = 600
    meta_batch: int = 1000
    epsilon_inf: float = 0.16
    seed: int = 0
    inner_steps: int = 1
    # Samples per class drawn from the train split to form the MAP training set (None = all).
    per_class: Optional[int] = 100
    # Restrict MAP training data to these classes (cross-class universality protocol).
    train_classes: Optional[Tuple[int, ...]] = None
    exclude_target: bool = False

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0 or self.epsilon_inf <= 0:
            raise ConfigError("alpha, beta and epsilon_inf must be positive")
        if self.inner_batch < 1 or self.meta_batch < 1 or self.inner_steps < 1:
            raise ConfigError("batch sizes and inner_steps must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


class SurrogateEnsemble:
    """Non-empty, dimension-consistent collection of white-box surrogates."""

    def __init__(self, models: Sequence):
        models = tuple(models)
        if not models:
            raise ConfigError("surrogate ensemble needs at least one model")
        dims = {(m.input_dim, m.class_count) for m in models}
        if len(dims) != 1:
            raise ShapeError(f"surrogates disagree on (input_dim, class_count): {sorted(dims)}")
        self.models = models
        self.input_dim, self.class_count = dims.pop()

    def __len__(self) -> int:
        return len(self.models)

    def __iter__(self):
        return iter(self.models)


def _as_ensemble(ens) -> SurrogateEnsemble:
    return ens if isinstance(ens, SurrogateEnsemble) else SurrogateEnsemble(ens)


def _member_gradient(member, inputs: np.ndarray, v: np.ndarray, target: int) -> np.ndarray:
    if isinstance(member, Model):
        batch = LabeledBatch(inputs + v, np.full(inputs.shape[0], target))
        # rows already carry the 1/batch factor of the mean loss
        return nn_core.grad_input(member, batch, target).sum(axis=0)
    return np.asarray(member.perturbation_gradient(inputs, v, target), dtype=np.float64)


def _member_loss(member, inputs: np.ndarray, v: np.ndarray, target: int) -> float:
    if isinstance(member, Model):
        return nn_core.loss(member, LabeledBatch(inputs + v, np.full(inputs.shape[0], target)), target)
    return float(member.perturbation_loss(inputs, v, target))


def ensemble_gradient(ens, inputs, v, target: int) -> np.ndarray:
    """Mean over surrogates of the gradient of the batch-mean targeted loss w.r.t. ``v``.

    Terms are reduced in ensemble order so results are bit-reproducible.
    """
    ens = _as_ensemble(ens)
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise DomainError("perturbation gradient needs a non-empty 2-d batch")
    v = np.asarray(v, dtype=np.float64)
    total = np.zeros(ens.input_dim)
    for member in ens:
        total = total + _member_gradient(member, inputs, v, target)
    return total / len(ens)


def ensemble_loss(ens, inputs, v, target: int) -> float:
    """Mean over surrogates of the batch-mean targeted cross-entropy at ``inputs + v``."""
    ens = _as_ensemble(ens)
    inputs = np.asarray(inputs, dtype=np.float64)
    return sum(_member_loss(m, inputs, np.asarray(v, dtype=np.float64), target) for m in ens) / len(ens)


def _inputs_of(batch) -> np.ndarray:
    return batch.inputs if isinstance(batch, LabeledBatch) else np.asarray(batch, dtype=np.float64)


def _unpack(v, target: Optional[int]) -> Tuple[np.ndarray, int]:
    if isinstance(v, Perturbation):
        return v.v, v.target if target is None else target
    if target is None:
        raise ConfigError("a bare vector needs an explicit target")
    return np.asarray(v, dtype=np.float64), target


def adapt_step(v, ens, batch, alpha: float, target: Optional[int] = None) -> np.ndarray:
    """One inner adaptation step; returns the adapted vector ``v'``."""
    base, target = _unpack(v, target)
    return base - alpha * ensemble_gradient(ens, _inputs_of(batch), base, target)


def meta_step(v, v_adapted, ens, meta_batch, beta: float,
              target: Optional[int] = None) -> np.ndarray:
    """First-order meta update: gradient at ``v_adapted`` applied to ``v``.

    Returns the unprojected vector; ``train_map`` clamps after each meta update.
    """
    base, target = _unpack(v, target)
    g = ensemble_gradient(ens, _inputs_of(meta_batch), np.asarray(v_adapted, dtype=np.float64), target)
    return base - beta * g


def project_linf(v, epsilon_inf: float) -> np.ndarray:
    return np.clip(np.asarray(v, dtype=np.float64), -epsilon_inf, epsilon_inf)


def map_training_pool(config: MapTrainConfig, data: Dataset, target: int) -> LabeledBatch:
    """Select the MAP training set from ``data.train`` following the config's class rules."""
    labels = data.train.labels
    keep = np.ones(labels.size, dtype=bool)
    if config.train_classes is not None:
        keep &= np.isin(labels, np.asarray(config.train_classes))
    if config.exclude_target:
        keep &= labels != target
    idx = np.flatnonzero(keep)
    if config.per_class is not None:
        # first per_class samples of each class in stored order (the split is pre-shuffled)
        idx = np.concatenate(
            [idx[labels[idx] == c][: config.per_class] for c in np.unique(labels[idx])]
        ) if idx.size else idx
        idx = np.sort(idx)
    return data.train.take(idx)


def train_map(config: MapTrainConfig, ens, data, target: int,
              init: Optional[np.ndarray] = None) -> Perturbation:
    """Train a MAP for ``target``.

    ``data`` is a :class:`Dataset` (pool selected by :func:`map_training_pool`)
    or a :class:`LabeledBatch` used as-is.  Without ``init`` the vector starts
    uniform on ``[-eps/10, eps/10]``, drawn first from the ``config.seed`` stream.
    """
    if isinstance(ens, (list, tuple)) and not ens:
        raise ConfigError("surrogate ensemble needs at least one model")
    ens = _as_ensemble(ens)
    if config.epsilon_inf < 0:
        raise ConfigError("epsilon_inf must be non-negative")
    if config.epsilon_inf > 0:
        config.validate()
    if not 0 <= target < ens.class_count:
        raise DomainError(f"target {target} outside [0, {ens.class_count})")
    pool = data if isinstance(data, LabeledBatch) else map_training_pool(config, data, target)
    n = len(pool)
    if n == 0:
        raise DomainError("MAP training set is empty")

    eps = config.epsilon_inf
    rng = np.random.default_rng(config.seed)
    start = rng.uniform(-eps / 10, eps / 10, ens.input_dim)
    if init is not None:
        start = np.asarray(init, dtype=np.float64).reshape(ens.input_dim)
    v = Perturbation(project_linf(start, eps), eps, target)
    if eps == 0:
        return v

    meta_size = min(config.meta_batch, n)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.inner_batch):
            batch = pool.inputs[order[lo:lo + config.inner_batch]]
            adapted = v.v
            for _ in range(config.inner_steps):
                adapted = adapt_step(adapted, ens, batch, config.alpha, target)
            meta_inputs = pool.inputs[rng.choice(n, size=meta_size, replace=False)]
            v = Perturbation(project_linf(meta_step(v, adapted, ens, meta_inputs, config.beta), eps),
                             eps, target)
    return v


# -- MAP files --------------------------------------------------------------


def dumps_map(p: Perturbation) -> str:
    head = f"{MAP_MAGIC} {MAP_VERSION} {p.v.size} {p.target} {p.epsilon_inf!r}"
    return head + "\n" + " ".join(repr(float(x)) for x in p.v) + "\n"


def loads_map(text: str) -> Perturbation:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty MAP file", 1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != MAP_MAGIC:
        raise ParseError(f"header must read '{MAP_MAGIC} v1 <input_dim> <target> <epsilon_inf>'", 1)
    if head[1] != MAP_VERSION:
        raise UnsupportedVersionError(f"unsupported MAP file version {head[1]!r}")
    try:
        d, target, eps = int(head[2]), int(head[3]), float(head[4])
    except ValueError:
        raise ParseError("bad header field", 1) from None
    values = " ".join(lines[1:]).split()
    if len(values) != d:
        raise ParseError(f"expected {d} values, found {len(values)}", 2)
    try:
        v = np.array([float(x) for x in values])
    except ValueError as exc:
        raise ParseError(f"bad number ({exc})", 2) from None
    return Perturbation(v, eps, target)


def save_map(p: Perturbation, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps_map(p))


def load_map(path) -> Perturbation:
    with open(path, encoding="ascii") as fh:
        return loads_map(fh.read())
