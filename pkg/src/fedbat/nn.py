"""Small dense classifiers with hand-written backprop.

Parameters are stored one flat vector per dense layer (weight matrix in
row-major order, then the bias). The same layer grouping is what the
binarizer and the wire format see, so a layer shares one step size across
its weight and bias.

:func:`forward` evaluates an architecture in one of three modes:

* ``Plain()``: at the parameters ``w`` themselves,
* ``Shifted(m)``: at ``w + m``, gradients flow to ``m``,
* ``Binarized(m, steps, rng)``: at ``w + S(m, alpha)``, gradients flow to
  ``m`` and to each layer's ``alpha_e`` through the straight-through rules.

Any object exposing ``forward(params, batch) -> (loss, cache)`` and
``backward(cache) -> grads`` can be used as an architecture.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .binarizer import STOCHASTIC, BinarizerOps, StepSizeParam
from .tensor import DimensionError, SeededRng


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense", "relu" or "softmax-xent"
    in_dim: int
    out_dim: int

    @property
    def n_params(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim if self.kind == "dense" else 0


class MLP:
    """Fully connected ReLU network with a softmax cross-entropy head.

    ``sizes = [d_in, h_1, ..., h_k, n_classes]``; ``[d, C]`` is multinomial
    logistic regression.
    """

    def __init__(self, sizes: Sequence[int]):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        specs = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            specs.append(LayerSpec("dense", a, b))
            if i < len(sizes) - 2:
                specs.append(LayerSpec("relu", b, b))
        specs.append(LayerSpec("softmax-xent", sizes[-1], sizes[-1]))
        self.specs = tuple(specs)
        self.dense = [s for s in specs if s.kind == "dense"]

    def __repr__(self) -> str:
        return f"MLP({self.sizes})"

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    @property
    def layer_sizes(self) -> list[int]:
        return [s.n_params for s in self.dense]

    def init_params(self, rng: SeededRng) -> list[np.ndarray]:
        """He-scaled normal weights, zero biases."""
        layers = []
        for s in self.dense:
            w = rng.normal_array(s.out_dim * s.in_dim) * np.sqrt(2.0 / s.in_dim)
            layers.append(np.concatenate([w, np.zeros(s.out_dim)]))
        return layers

    def unpack(self, params: Sequence[np.ndarray]):
        if len(params) != len(self.dense):
            raise DimensionError(f"expected {len(self.dense)} layers, got {len(params)}")
        out = []
        for s, p in zip(self.dense, params):
            if p.size != s.n_params:
                raise DimensionError(f"layer needs {s.n_params} values, got {p.size}")
            k = s.out_dim * s.in_dim
            out.append((p[:k].reshape(s.out_dim, s.in_dim), p[k:]))
        return out

    def logits(self, params, X: np.ndarray) -> np.ndarray:
        h = X
        wb = self.unpack(params)
        for i, (W, b) in enumerate(wb):
            h = h @ W.T + b
            if i < len(wb) - 1:
                h = np.maximum(h, 0.0)
        return h

    def forward(self, params, batch):
        X, y = batch
        if X.ndim != 2 or X.shape[1] != self.sizes[0]:
            raise DimensionError(f"inputs must be (n, {self.sizes[0]}), got {X.shape}")
        y = np.asarray(y)
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("label out of range")
        wb = self.unpack(params)
        acts = [X]
        h = X
        for i, (W, b) in enumerate(wb):
            h = h @ W.T + b
            if i < len(wb) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        loss, probs = softmax_xent(h, y)
        return loss, (wb, acts, probs, y)

    def backward(self, cache) -> list[np.ndarray]:
        wb, acts, probs, y = cache
        n = y.size
        delta = probs.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads = [None] * len(wb)
        for i in range(len(wb) - 1, -1, -1):
            W, _ = wb[i]
            gW = delta.T @ acts[i]
            gb = delta.sum(axis=0)
            grads[i] = np.concatenate([gW.reshape(-1), gb])
            if i > 0:
                delta = (delta @ W) * (acts[i] > 0.0)
        return grads

    def batches(self, data, batch_size: int, rng: SeededRng) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Endless minibatches, reshuffled at the start of every local epoch."""
        n = len(data)
        while True:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                yield data.features[idx], data.labels[idx]


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    logp = z[np.arange(y.size), y] - np.log(denom[:, 0])
    return float(-logp.mean()), probs


@dataclass
class GlobalModel:
    arch: object
    layers: list[np.ndarray]

    def copy(self) -> "GlobalModel":
        return GlobalModel(self.arch, [p.copy() for p in self.layers])

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.layers)


@dataclass(frozen=True)
class Plain:
    pass


@dataclass(frozen=True)
class Shifted:
    m: list[np.ndarray]


@dataclass(frozen=True)
class Binarized:
    m: list[np.ndarray]
    steps: list[StepSizeParam]
    rng: SeededRng
    ops: BinarizerOps = STOCHASTIC


@dataclass
class ForwardCache:
    mode: object
    inner: object
    arch: object
    records: list | None = None
    consumed: bool = False


@dataclass
class Gradients:
    """Gradients for the trainable parameters of a mode.

    ``params`` holds one block per layer (w.r.t. ``w`` in plain mode, ``m``
    otherwise); ``alpha_e`` is set only in binarized mode.
    """

    params: list[np.ndarray]
    alpha_e: list[float] | None = None


def forward(model: GlobalModel, mode, batch) -> tuple[float, ForwardCache]:
    w = model.layers
    records = None
    if isinstance(mode, Plain):
        theta = w
    elif isinstance(mode, Shifted):
        _check_aligned(w, mode.m)
        theta = [wl + ml for wl, ml in zip(w, mode.m)]
    elif isinstance(mode, Binarized):
        _check_aligned(w, mode.m)
        if len(mode.steps) != len(w):
            raise DimensionError("one step size per layer required")
        theta, records = [], []
        for wl, ml, st in zip(w, mode.m, mode.steps):
            mhat, rec = mode.ops.forward(ml, st, mode.rng)
            theta.append(wl + mhat)
            records.append(rec)
    else:
        raise TypeError(f"unknown forward mode {mode!r}")
    loss, inner = model.arch.forward(theta, batch)
    return loss, ForwardCache(mode=mode, inner=inner, arch=model.arch, records=records)


def backward(cache: ForwardCache) -> Gradients:
    if cache.consumed:
        raise StaleCacheError("forward cache already used for a backward pass")
    cache.consumed = True
    g_theta = cache.arch.backward(cache.inner)
    mode = cache.mode
    if not isinstance(mode, Binarized):
        return Gradients(params=g_theta)
    gm, ga = [], []
    for g, ml, st, rec in zip(g_theta, mode.m, mode.steps, cache.records):
        a, b = mode.ops.backward(g, ml, st, rec)
        gm.append(a)
        ga.append(b)
    return Gradients(params=gm, alpha_e=ga)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], eta: float) -> list[np.ndarray]:
    _check_aligned(params, grads)
    return [p - eta * g for p, g in zip(params, grads)]


def evaluate(model: GlobalModel, dataset) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) of the model on a labeled dataset.

    Ties in the argmax go to the lowest class index.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    z = model.arch.logits(model.layers, dataset.features)
    loss, _ = softmax_xent(z, dataset.labels)
    acc = float(np.mean(np.argmax(z, axis=1) == dataset.labels))
    return acc, loss


def _check_aligned(a, b):
    if len(a) != len(b) or any(np.shape(x) != np.shape(y) for x, y in zip(a, b)):
        raise DimensionError("parameter blocks are not aligned")
