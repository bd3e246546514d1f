"""Reference computations kept independent of the code under test."""

import math

import numpy as np

from mapattack.nn_core import Affine, Model, Relu

FD_STEP = 1e-5


def ref_logits(model: Model, x) -> np.ndarray:
    """Per-sample forward pass with explicit loops over units."""
    h = [float(v) for v in x]
    for layer in model.layers:
        if isinstance(layer, Relu):
            h = [v if v > 0 else 0.0 for v in h]
            continue
        w, b = layer.weight, layer.bias
        h = [math.fsum([h[i] * w[i, j] for i in range(w.shape[0])]) + b[j] for j in range(w.shape[1])]
    return np.array(h)


def ref_loss(model: Model, inputs, labels) -> float:
    total = 0.0
    for x, y in zip(inputs, labels):
        z = ref_logits(model, x)
        m = max(z)
        total += m + math.log(math.fsum(math.exp(v - m) for v in z)) - z[int(y)]
    return total / len(labels)


def preactivation_margin(model: Model, inputs) -> float:
    """Smallest |pre-activation| feeding any ReLU; finite differences are only valid away from 0."""
    margin = math.inf
    h = np.asarray(inputs, dtype=np.float64)
    for layer in model.layers:
        if isinstance(layer, Relu):
            margin = min(margin, float(np.min(np.abs(h))))
            h = np.maximum(h, 0.0)
        else:
            h = h @ layer.weight + layer.bias
    return margin


def central_diff(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-5) -> np.ndarray:
    """Componentwise |a - b| / max(|a|, |b|, floor).

    Rounding in a central difference at h = 1e-5 is about 1e-11 absolute, so
    components below the floor are compared on an absolute scale.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_model(rng: np.random.Generator, max_dim: int = 16, classes=None) -> Model:
    depth = int(rng.integers(1, 4))
    dims = [int(rng.integers(2, max_dim + 1)) for _ in range(depth)]
    dims.append(int(classes or rng.integers(3, max_dim + 1)))
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        if i:
            layers.append(Relu())
        layers.append(Affine(rng.standard_normal((a, b)) / math.sqrt(a), 0.1 * rng.standard_normal(b)))
    return Model(tuple(layers))


class QuadraticMock:
    """Surrogate whose targeted loss is 0.5 * ||v - c||^2 regardless of the batch."""

    def __init__(self, c, class_count: int = 10):
        self.c = np.asarray(c, dtype=np.float64)
        self.input_dim = self.c.size
        self.class_count = class_count
        self.calls = 0

    def perturbation_gradient(self, inputs, v, target):
        self.calls += 1
        return np.asarray(v, dtype=np.float64) - self.c

    def perturbation_loss(self, inputs, v, target):
        return 0.5 * float(np.sum((np.asarray(v) - self.c) ** 2))


class LinearLossOracle:
    """Oracle stand-in whose targeted loss -log p_t(x) equals g . x exactly (up to rounding)."""

    def __init__(self, g, t: int = 0, classes: int = 2, offset: float = 50.0):
        self.g = np.asarray(g, dtype=np.float64)
        self.t, self.classes, self.offset = t, classes, offset
        self.query_count = 0
        self.budget = None
        self.remaining = math.inf

    def probabilities(self, x):
        x = np.asarray(x, dtype=np.float64)
        rows = x.reshape(1, -1) if x.ndim == 1 else x
        self.query_count += rows.shape[0]
        p = np.zeros((rows.shape[0], self.classes))
        # offset keeps p_t below 1 for the inputs these tests use
        p[:, self.t] = np.exp(-(rows @ self.g + self.offset))
        return p[0] if x.ndim == 1 else p

    def loss(self, x):
        return float(np.asarray(x) @ self.g + self.offset)


def five_point_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Fourth-order central stencil; error near 1e-12 for smooth f of unit scale."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        vals = []
        for k in (2, 1, -1, -2):
            flat[i] = old + k * h
            vals.append(f(x))
        flat[i] = old
        gflat[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g
