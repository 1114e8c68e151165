"""Minimal reverse-mode autodiff with just enough ops for small MLP training.

Forward evaluation has a fast numpy-only path (``mlp_forward``); training
builds a tape of ``Tensor`` nodes and backpropagates through it. Batched
inputs use the leading axis as the batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from commrl.rng import RngStream


class ShapeError(ValueError):
    """Dimension mismatch with an explicit shape report."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "_parents", "_bw", "_consumed")

    def __init__(self, data, parents=(), bw=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._bw = bw
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar loss through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError(
                "backward already called on this recording; re-run forward first"
            )
        self._consumed = True
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w.T + b for x of shape (B, in), w of shape (out, in)."""
    xd = _as_array(x)
    if xd.shape[-1] != w.data.shape[1]:
        raise ShapeError(
            f"linear: input has {xd.shape[-1]} features, weight expects "
            f"{w.data.shape[1]} (weight shape {w.data.shape})"
        )
    out = xd @ w.data.T + b.data
    parents = tuple(p for p in (x, w, b) if isinstance(p, Tensor))

    def bw(g):
        if isinstance(x, Tensor):
            x.accumulate(g @ w.data)
        w.accumulate(g.T @ xd)
        b.accumulate(g.sum(axis=0) if g.ndim > 1 else g)

    return Tensor(out, parents, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x.accumulate(g * mask)

    return Tensor(x.data * mask, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        x.accumulate(g * (1.0 - out * out))

    return Tensor(out, (x,), bw)


def add(x: Tensor, y) -> Tensor:
    yd = _as_array(y)
    parents = tuple(p for p in (x, y) if isinstance(p, Tensor))

    def bw(g):
        if isinstance(x, Tensor):
            x.accumulate(g)
        if isinstance(y, Tensor):
            y.accumulate(g)

    return Tensor(x.data + yd, parents, bw)


def sub(x, y) -> Tensor:
    xd, yd = _as_array(x), _as_array(y)
    parents = tuple(p for p in (x, y) if isinstance(p, Tensor))

    def bw(g):
        if isinstance(x, Tensor):
            x.accumulate(g)
        if isinstance(y, Tensor):
            y.accumulate(-g)

    return Tensor(xd - yd, parents, bw)


def mul(x, y) -> Tensor:
    xd, yd = _as_array(x), _as_array(y)
    parents = tuple(p for p in (x, y) if isinstance(p, Tensor))

    def bw(g):
        if isinstance(x, Tensor):
            x.accumulate(g * yd)
        if isinstance(y, Tensor):
            y.accumulate(g * xd)

    return Tensor(xd * yd, parents, bw)


def scale(x: Tensor, s: float) -> Tensor:
    def bw(g):
        x.accumulate(g * s)

    return Tensor(x.data * s, (x,), bw)


def concat(parts: list, axis: int = -1) -> Tensor:
    datas = [_as_array(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    parents = tuple(p for p in parts if isinstance(p, Tensor))

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Tensor):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate(g[tuple(idx)])

    return Tensor(out, parents, bw)


def tslice(x: Tensor, sl: slice) -> Tensor:
    """Slice along the last axis."""
    def bw(g):
        full = np.zeros_like(x.data)
        full[..., sl] = g
        x.accumulate(full)

    return Tensor(x.data[..., sl], (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        x.accumulate(np.full_like(x.data, float(g) / n))

    return Tensor(x.data.mean(), (x,), bw)


def ssum(x: Tensor) -> Tensor:
    def bw(g):
        x.accumulate(np.full_like(x.data, float(g)))

    return Tensor(x.data.sum(), (x,), bw)


# ---------------------------------------------------------------------------
# MLP parameters
# ---------------------------------------------------------------------------


@dataclass
class MLPParams:
    """Weights of a feedforward net: hidden nonlinearity + affine output.

    Layer l maps in_l -> out_l with weight shape (out_l, in_l).
    """

    layer_sizes: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"

    def leaves(self) -> list[Tensor]:
        return self.weights + self.biases

    def zero_grads(self) -> None:
        for t in self.leaves():
            t.zero_grad()

    def copy(self) -> "MLPParams":
        return MLPParams(
            list(self.layer_sizes),
            [Tensor(w.data.copy()) for w in self.weights],
            [Tensor(b.data.copy()) for b in self.biases],
            self.activation,
        )


def init_mlp(layer_sizes: list[int], rng: RngStream, activation: str = "relu") -> MLPParams:
    """Uniform fan-in scaled init: each entry in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    if len(layer_sizes) < 2 or any(s <= 0 for s in layer_sizes):
        raise ShapeError(f"layer_sizes must be >=2 positive ints, got {layer_sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, (fan_out, fan_in))))
        biases.append(Tensor(rng.uniform(-bound, bound, fan_out)))
    return MLPParams(list(layer_sizes), weights, biases, activation)


_ACTS = {"relu": lambda h: np.maximum(h, 0.0), "tanh": np.tanh}


def mlp_forward(params: MLPParams, x: np.ndarray) -> np.ndarray:
    """Fast inference path; no recording."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.layer_sizes[0]:
        raise ShapeError(
            f"input has {x.shape[-1]} features, net expects {params.layer_sizes[0]} "
            f"(layer_sizes {params.layer_sizes})"
        )
    act = _ACTS[params.activation]
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = act(h @ w.data.T + b.data)
    return h @ params.weights[-1].data.T + params.biases[-1].data


def mlp_forward_t(params: MLPParams, x) -> Tensor:
    """Recorded forward pass; ``x`` may be a Tensor or a constant array."""
    act = relu if params.activation == "relu" else tanh
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = act(linear(h, w, b))
    return linear(h, params.weights[-1], params.biases[-1])


# ---------------------------------------------------------------------------
# Adam and soft target updates
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MLPParams, lr: float = 0.001) -> "AdamState":
        leaves = params.leaves()
        return cls(
            m=[np.zeros_like(t.data) for t in leaves],
            v=[np.zeros_like(t.data) for t in leaves],
            lr=lr,
        )


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        return [g * factor for g in grads]
    return grads


def adam_step(
    params: MLPParams,
    state: AdamState,
    grads: list[np.ndarray] | None = None,
    clip: float = 0.0,
) -> None:
    """One in-place Adam update; grads default to each leaf's accumulated .grad."""
    leaves = params.leaves()
    if grads is None:
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    if len(grads) != len(leaves):
        raise ShapeError(f"expected {len(leaves)} gradient arrays, got {len(grads)}")
    for i, (t, g) in enumerate(zip(leaves, grads)):
        if g.shape != t.data.shape:
            raise ShapeError(
                f"grad {i} shape {g.shape} does not match param shape {t.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in leaf {i}")
    if clip > 0:
        grads = clip_global_norm(grads, clip)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for leaf, g, m, v in zip(leaves, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        leaf.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def soft_update(target: MLPParams, source: MLPParams, tau: float) -> None:
    """target <- tau*source + (1-tau)*target, elementwise, in place."""
    if target.layer_sizes != source.layer_sizes:
        raise ShapeError(
            f"architecture mismatch: {target.layer_sizes} vs {source.layer_sizes}"
        )
    for tgt, src in zip(target.leaves(), source.leaves()):
        tgt.data *= 1.0 - tau
        tgt.data += tau * src.data


# ---------------------------------------------------------------------------
# Straight-Through Gumbel-Softmax
# ---------------------------------------------------------------------------


@dataclass
class GumbelSample:
    hard: np.ndarray  # one-hot rows
    soft: np.ndarray  # simplex rows


def gumbel_noise(rng: RngStream, shape) -> np.ndarray:
    u = np.clip(rng.uniform(size=shape), 1e-10, 1.0 - 1e-10)
    return -np.log(-np.log(u))


def _soft_hard(logits: np.ndarray, g: np.ndarray, beta: float):
    z = (logits + g) * beta
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    soft = e / e.sum(axis=-1, keepdims=True)
    hard = np.zeros_like(soft)
    idx = np.argmax(logits + g, axis=-1)
    np.put_along_axis(hard, np.expand_dims(idx, -1), 1.0, axis=-1)
    return soft, hard


def gumbel_softmax(logits: np.ndarray, beta: float, rng: RngStream) -> GumbelSample:
    """Draw a hard one-hot plus its soft relaxation at inverse temperature beta."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    g = gumbel_noise(rng, logits.shape)
    soft, hard = _soft_hard(logits, g, beta)
    return GumbelSample(hard=hard, soft=soft)


def onehot_argmax(logits: np.ndarray) -> np.ndarray:
    """Greedy one-hot, no noise."""
    logits = np.asarray(logits, dtype=np.float64)
    hard = np.zeros_like(logits)
    idx = np.argmax(logits, axis=-1)
    np.put_along_axis(hard, np.expand_dims(idx, -1), 1.0, axis=-1)
    return hard


def st_gumbel(logits: Tensor, beta: float, rng: RngStream) -> Tensor:
    """Recorded straight-through sample: forward is hard, backward uses soft.

    d soft_i / d logit_j = beta * soft_i * (delta_ij - soft_j), so upstream g
    maps to beta * soft * (g - <g, soft>).
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    g_noise = gumbel_noise(rng, logits.data.shape)
    soft, hard = _soft_hard(logits.data, g_noise, beta)

    def bw(g):
        inner = (g * soft).sum(axis=-1, keepdims=True)
        logits.accumulate(beta * soft * (g - inner))

    return Tensor(hard, (logits,), bw)
