"""Minimal feed-forward network engine in float64 numpy.

Models are immutable: every array held by a layer is read-only, and training
produces new ``Model`` values instead of mutating existing ones.  That makes
``forward`` and the gradient functions safe to call from several threads on a
shared model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, ParseError, ShapeError, UnsupportedVersionError

FORMAT_MAGIC = "MAPNN"
FORMAT_VERSION = "v1"


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Affine:
    """``y = x @ weight + bias`` with ``weight`` of shape (in, out)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w, b = _frozen(self.weight), _frozen(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ShapeError(f"affine weight {w.shape} incompatible with bias {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class Relu:
    pass


Layer = Union[Affine, Relu]
# One entry per layer: (dweight, dbias) for Affine, None for Relu.
ParamGrads = Tuple[Optional[Tuple[np.ndarray, np.ndarray]], ...]


@dataclass(frozen=True, eq=False)
class Model:
    layers: Tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        affines = [l for l in layers if isinstance(l, Affine)]
        if not affines:
            raise ShapeError("model needs at least one affine layer")
        if not isinstance(layers[-1], Affine):
            raise ShapeError("last layer must be affine (identity logits)")
        for prev, nxt in zip(affines, affines[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def input_dim(self) -> int:
        return next(l for l in self.layers if isinstance(l, Affine)).in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    def params_equal(self, other: "Model") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if type(a) is not type(b):
                return False
            if isinstance(a, Affine) and not (
                np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            ):
                return False
        return True


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = _frozen(self.inputs)
        if x.ndim != 2:
            raise ShapeError(f"batch inputs must be 2-d, got shape {x.shape}")
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        y.setflags(write=False)
        if y.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.inputs[idx], self.labels[idx])


def dense_model(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> Model:
    """Stack affine layers with a ReLU between consecutive ones."""
    layers = []
    for i, (w, b) in enumerate(zip(weights, biases)):
        if i:
            layers.append(Relu())
        layers.append(Affine(w, b))
    return Model(tuple(layers))


def _as_batch(model: Model, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected inputs of shape [batch, {model.input_dim}], got {x.shape}")
    return x


def _forward_cached(model: Model, x: np.ndarray):
    cache = []
    h = x
    for layer in model.layers:
        cache.append(h)
        if isinstance(layer, Affine):
            h = h @ layer.weight + layer.bias
        else:
            h = np.maximum(h, 0.0)
    return h, cache


def forward(model: Model, inputs) -> np.ndarray:
    """Raw logits, shape [batch, class_count]."""
    logits, _ = _forward_cached(model, _as_batch(model, inputs))
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    n, c = logits.shape
    if n == 0:
        raise DomainError("cross_entropy needs a non-empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def _backward(model: Model, cache, dout: np.ndarray, want_params: bool):
    grads = [None] * len(model.layers)
    g = dout
    for i in range(len(model.layers) - 1, -1, -1):
        layer, h = model.layers[i], cache[i]
        if isinstance(layer, Affine):
            if want_params:
                grads[i] = (h.T @ g, g.sum(axis=0))
            g = g @ layer.weight.T
        else:
            g = g * (h > 0.0)
    return g, tuple(grads)


def _labels_for(batch: LabeledBatch, target: Optional[int]) -> np.ndarray:
    if target is None:
        return batch.labels
    return np.full(len(batch), int(target), dtype=np.int64)


def grad_input(model: Model, batch: LabeledBatch, target: Optional[int] = None) -> np.ndarray:
    """Gradient of the mean cross-entropy toward ``target`` w.r.t. each input row.

    ``target=None`` uses the batch's own labels.  Summing the rows gives the
    gradient w.r.t. a perturbation added to every input.
    """
    x = _as_batch(model, batch.inputs)
    logits, cache = _forward_cached(model, x)
    _, dlogits = cross_entropy(logits, _labels_for(batch, target))
    dx, _ = _backward(model, cache, dlogits, want_params=False)
    return dx


def loss(model: Model, batch: LabeledBatch, target: Optional[int] = None) -> float:
    return cross_entropy(forward(model, batch.inputs), _labels_for(batch, target))[0]


def grad_params(model: Model, batch: LabeledBatch) -> ParamGrads:
    """Gradient of the mean cross-entropy w.r.t. every parameter, aligned with ``model.layers``."""
    x = _as_batch(model, batch.inputs)
    logits, cache = _forward_cached(model, x)
    _, dlogits = cross_entropy(logits, batch.labels)
    _, grads = _backward(model, cache, dlogits, want_params=True)
    return grads


def sgd_step(model: Model, grads: ParamGrads, lr: float) -> Model:
    if len(grads) != len(model.layers):
        raise ShapeError(f"{len(grads)} gradient entries for {len(model.layers)} layers")
    layers = []
    for layer, g in zip(model.layers, grads):
        if isinstance(layer, Relu):
            if g is not None:
                raise ShapeError("relu layer has no parameters")
            layers.append(layer)
            continue
        dw, db = g
        if np.shape(dw) != layer.weight.shape or np.shape(db) != layer.bias.shape:
            raise ShapeError("gradient shapes do not match parameters")
        layers.append(Affine(layer.weight - lr * np.asarray(dw), layer.bias - lr * np.asarray(db)))
    return Model(tuple(layers))


def predict(model: Model, x) -> int:
    """Argmax class for a single input; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return int(np.argmax(forward(model, x)[0]))


def predict_batch(model: Model, inputs) -> np.ndarray:
    return np.argmax(forward(model, inputs), axis=1)


# -- weight files -----------------------------------------------------------


def dumps_model(model: Model) -> str:
    n_layers = len(model.layers)
    lines = [f"{FORMAT_MAGIC} {FORMAT_VERSION} {model.input_dim} {model.class_count} {n_layers}"]
    for layer in model.layers:
        if isinstance(layer, Relu):
            lines.append("relu")
            continue
        lines.append(f"affine {layer.in_dim} {layer.out_dim}")
        for row in layer.weight:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(repr(float(v)) for v in layer.bias))
    return "\n".join(lines) + "\n"


def _floats(line: str, count: int, lineno: int):
    parts = line.split()
    if len(parts) != count:
        raise ParseError(f"expected {count} values, found {len(parts)}", lineno)
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(f"bad number ({exc})", lineno) from None


def loads_model(text: str) -> Model:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty model file", 1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != FORMAT_MAGIC:
        raise ParseError(f"header must read '{FORMAT_MAGIC} v1 <input_dim> <class_count> <layer_count>'", 1)
    if head[1] != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported model file version {head[1]!r}")
    try:
        input_dim, class_count, n_layers = (int(v) for v in head[2:])
    except ValueError:
        raise ParseError("header dimensions must be integers", 1) from None

    pos = 1

    def next_line() -> Tuple[str, int]:
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of file", pos + 1)
        pos += 1
        return lines[pos - 1], pos

    layers = []
    for _ in range(n_layers):
        line, lineno = next_line()
        tokens = line.split()
        if tokens == ["relu"]:
            layers.append(Relu())
        elif len(tokens) == 3 and tokens[0] == "affine":
            try:
                n_in, n_out = int(tokens[1]), int(tokens[2])
            except ValueError:
                raise ParseError("affine dims must be integers", lineno) from None
            rows = []
            for _ in range(n_in):
                row_line, row_no = next_line()
                rows.append(_floats(row_line, n_out, row_no))
            bias_line, bias_no = next_line()
            bias = _floats(bias_line, n_out, bias_no)
            w = np.array(rows, dtype=np.float64).reshape(n_in, n_out)
            layers.append(Affine(w, np.array(bias, dtype=np.float64)))
        else:
            raise ParseError(f"unknown layer descriptor {line!r}", lineno)
    if any(l.strip() for l in lines[pos:]):
        raise ParseError("trailing content after last layer", pos + 1)
    try:
        model = Model(tuple(layers))
    except ShapeError as exc:
        raise ParseError(str(exc), 1) from None
    if model.input_dim != input_dim or model.class_count != class_count:
        raise ParseError("header dimensions disagree with layers", 1)
    return model


def save_model(model: Model, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> Model:
    with open(path, encoding="ascii") as fh:
        return loads_model(fh.read())
