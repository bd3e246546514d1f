"""Score-based targeted black-box attack with RGF gradient estimates and momentum.

The victim is reachable only through :class:`BlackBoxOracle`, which returns
class probabilities and counts every row it scores as one query.  The attack
loss is the targeted cross-entropy ``-log p_t``.

Query schedule of :func:`attack`: one query for the initial check of
``clip(x + v)``, then ``q + 1`` per iteration (``q`` probes plus the check of
the new iterate).  The probabilities returned by a check also supply the
base loss ``f(x)`` of the next gradient estimate, so no point is scored twice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn_core
from .errors import ConfigError, DomainError
from .map_trainer import Perturbation

# probabilities are floored here before taking logs
_P_FLOOR = 1e-300


class BudgetExhausted(Exception):
    """Raised by the oracle when a request would exceed the query budget."""

    def __init__(self, used: int, budget: int, requested: int):
        super().__init__(f"query budget exhausted: {used} used of {budget}, {requested} requested")
        self.used = used
        self.budget = budget
        self.requested = requested


class BlackBoxOracle:
    """Query-only view of a victim classifier.

    ``budget=None`` means unmetered: calls are still counted but never refused.
    """

    __slots__ = ("_scores", "_count", "budget")

    def __init__(self, model: nn_core.Model, budget: Optional[int] = None):
        def scores(x: np.ndarray) -> np.ndarray:
            return np.exp(nn_core.log_softmax(nn_core.forward(model, x)))

        self._scores = scores
        self._count = 0
        self.budget = budget

    @property
    def query_count(self) -> int:
        return self._count

    @property
    def remaining(self) -> float:
        return math.inf if self.budget is None else self.budget - self._count

    def probabilities(self, x) -> np.ndarray:
        """Class probabilities for one input (1-d) or a batch of rows (2-d); costs one query per row."""
        x = np.asarray(x, dtype=np.float64)
        rows = x.reshape(1, -1) if x.ndim == 1 else x
        n = rows.shape[0]
        if n > self.remaining:
            raise BudgetExhausted(self._count, self.budget, n)
        self._count += n
        p = self._scores(rows)
        return p[0] if x.ndim == 1 else p

    def label(self, x) -> int:
        return int(np.argmax(self.probabilities(np.asarray(x, dtype=np.float64).reshape(-1))))


@dataclass(frozen=True)
class AttackConfig:
    sigma: float = 0.1
    q: int = 14
    gamma: float = 0.015
    eta: float = 0.01
    max_iters: int = 100
    epsilon_l2: float = 2.0
    budget: int = 600
    seed: int = 0
    target: int = 6

    def validate(self) -> None:
        if self.sigma <= 0 or self.gamma <= 0:
            raise ConfigError("sigma and gamma must be positive")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.q < 1 or self.budget < 1:
            raise ConfigError("q and budget must be >= 1")
        if self.max_iters < 0 or self.epsilon_l2 < 0:
            raise ConfigError("max_iters and epsilon_l2 must be non-negative")


@dataclass
class AttackResult:
    success: bool
    queries_used: int
    adversarial: Optional[np.ndarray]
    l2_distortion: float
    iterations: int
    exhausted: bool = False


def _loss_from_probs(p: np.ndarray, t: int):
    return -np.log(np.maximum(p[..., t], _P_FLOOR))


def query_loss(oracle: BlackBoxOracle, x, t: int) -> float:
    """Targeted loss ``-log p_t(x)`` from a single oracle query."""
    return float(_loss_from_probs(oracle.probabilities(np.asarray(x, dtype=np.float64).reshape(-1)), t))


def unit_directions(rng: np.random.Generator, q: int, d: int) -> np.ndarray:
    """``q`` i.i.d. directions uniform on the unit sphere in ``R^d``."""
    u = rng.standard_normal((q, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def rgf_estimate(oracle: BlackBoxOracle, x, t: int, sigma: float, q: int,
                 rng: np.random.Generator, base_loss: Optional[float] = None) -> np.ndarray:
    """Random gradient-free estimate ``mean_k (f(x + sigma u_k) - f(x)) / sigma * u_k``.

    Costs ``q + 1`` queries, or ``q`` when the caller already knows ``base_loss``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    u = unit_directions(rng, q, x.size)
    if base_loss is None:
        if oracle.remaining < q + 1:
            raise BudgetExhausted(oracle.query_count, oracle.budget, q + 1)
        base_loss = query_loss(oracle, x, t)
    probes = _loss_from_probs(oracle.probabilities(x + sigma * u), t)
    coeff = (probes - base_loss) / sigma
    return coeff @ u / q


def momentum_step(x_i, x_prev, g_hat, gamma: float, eta: float) -> np.ndarray:
    """``x_i - gamma * sign(g_hat) + eta * (x_i - x_prev)``, with ``sign(0) = 0``."""
    x_i = np.asarray(x_i, dtype=np.float64)
    return x_i - gamma * np.sign(g_hat) + eta * (x_i - np.asarray(x_prev, dtype=np.float64))


def project_l2(x, x_orig, epsilon_l2: float) -> np.ndarray:
    """Pull ``x - x_orig`` into the L2 ball of radius ``epsilon_l2``, then clip to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    x_orig = np.asarray(x_orig, dtype=np.float64)
    delta = x - x_orig
    norm = np.linalg.norm(delta)
    if norm <= epsilon_l2:
        return np.clip(x, 0.0, 1.0)
    scale = epsilon_l2 / norm
    for k in range(64):
        out = np.clip(x_orig + delta * scale, 0.0, 1.0)
        # rounding can leave the result just outside the ball; shrink until it is inside
        measured = np.linalg.norm(out - x_orig)
        if measured <= epsilon_l2:
            break
        scale *= (epsilon_l2 / measured) * (1.0 - 2.0 ** k * 1e-16)
    return out


def attack(oracle: BlackBoxOracle, x, v: Optional[Perturbation], config: AttackConfig) -> AttackResult:
    """Targeted attack on ``x`` toward ``config.target``, optionally starting from ``x + v``.

    Never raises on an exhausted budget: the result carries ``success=False``.
    """
    config.validate()
    t = config.target
    x_orig = np.asarray(x, dtype=np.float64).reshape(-1)
    if x_orig.size == 0 or x_orig.min() < 0.0 or x_orig.max() > 1.0:
        raise DomainError("input must be non-empty and lie in [0, 1]")
    if v is not None and v.target != t:
        raise ConfigError(f"perturbation was trained for target {v.target}, attack targets {t}")

    rng = np.random.default_rng(config.seed)
    start_queries = oracle.query_count
    x_cur = np.clip(x_orig + v.v, 0.0, 1.0) if v is not None else x_orig.copy()

    def result(success, x_final, iterations, exhausted=False):
        return AttackResult(
            success=success,
            queries_used=oracle.query_count - start_queries,
            adversarial=x_final,
            l2_distortion=float(np.linalg.norm(x_final - x_orig)),
            iterations=iterations,
            exhausted=exhausted,
        )

    def left():
        return min(oracle.remaining, config.budget - (oracle.query_count - start_queries))

    if left() < 1:
        return result(False, x_cur, 0, exhausted=True)
    p = oracle.probabilities(x_cur)
    if int(np.argmax(p)) == t:
        return result(True, x_cur, 0)

    base = float(_loss_from_probs(p, t))
    x_prev = x_cur
    iterations = 0
    for _ in range(config.max_iters):
        if left() < config.q + 1:
            return result(False, x_cur, iterations, exhausted=True)
        g_hat = rgf_estimate(oracle, x_cur, t, config.sigma, config.q, rng, base_loss=base)
        x_next = project_l2(momentum_step(x_cur, x_prev, g_hat, config.gamma, config.eta),
                            x_orig, config.epsilon_l2)
        p = oracle.probabilities(x_next)
        iterations += 1
        x_prev, x_cur = x_cur, x_next
        if int(np.argmax(p)) == t:
            return result(True, x_cur, iterations)
        base = float(_loss_from_probs(p, t))
    return result(False, x_cur, iterations)


def attack_baseline_rgf(oracle: BlackBoxOracle, x, config: AttackConfig) -> AttackResult:
    return attack(oracle, x, None, config)


def random_init(d: int, norm_match: float, seed: int) -> np.ndarray:
    """Uniform draw on ``[-1, 1]^d`` rescaled to L-infinity norm ``norm_match``.

    Uses a stream separate from the attack's own RNG so the iterations see the
    same directions as an uninitialised run.
    """
    r = np.random.default_rng([seed, 0x52414E44]).uniform(-1.0, 1.0, d)
    k = int(np.argmax(np.abs(r)))
    r = np.clip(r * (norm_match / abs(r[k])), -norm_match, norm_match)
    r[k] = math.copysign(norm_match, r[k])
    return r


def attack_baseline_random(oracle: BlackBoxOracle, x, config: AttackConfig,
                           norm_match: float) -> AttackResult:
    """Attack from a random start with the same L-infinity norm as a trained MAP."""
    if norm_match < 0:
        raise ConfigError("norm_match must be non-negative")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    r = random_init(x.size, norm_match, config.seed)
    return attack(oracle, x, Perturbation(r, norm_match, config.target), config)


__all__ = [
    "AttackConfig", "AttackResult", "BlackBoxOracle", "BudgetExhausted", "attack",
    "attack_baseline_random", "attack_baseline_rgf", "momentum_step", "project_l2",
    "query_loss", "random_init", "rgf_estimate", "unit_directions",
]
