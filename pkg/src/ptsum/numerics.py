"""Dense tensor core with reverse-mode gradients.

Small numpy-backed autograd: each operation records its parents and a
backward closure on the produced tensor; ``backward`` replays the graph
once in reverse topological order. Values are stored in 32-bit floats by
default (64-bit available for verification work); gradients and reduction
accumulators are always 64-bit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array plus optional gradient bookkeeping.

    ``data`` is a numpy array (float32 or float64); ``grad`` is filled in
    float64 by ``backward``. Tensors are treated as immutable once they
    participate in a graph; only leaf parameters are updated in place by
    the optimizer, between graph builds.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    b = _wrap(b, a)

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    b = _wrap(b, a)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _result(a.data * b.data, (a, b), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; ``kind`` is sigmoid, tanh, or relu."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation kind: {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    # exp on the negative half-line only, for stability at |x| up to 1e3
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _result(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _result(out, (x,), backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    out = np.maximum(x.data, floor)

    def backward(g):
        return (g * (x.data > floor),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def linear_map(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out_features, in_features).

    ``x`` may carry leading batch/time axes; the contraction is over its
    last axis.
    """
    if x.data.shape[-1] != w.data.shape[-1]:
        raise ValueError(
            f"linear_map shape mismatch: input {x.data.shape} vs weight {w.data.shape}"
        )
    out = x.data @ w.data.T
    if b is not None:
        if b.data.shape != (w.data.shape[0],):
            raise ValueError(
                f"linear_map bias shape {b.data.shape} does not match weight {w.data.shape}"
            )
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        gx = (g @ w.data).astype(np.float64, copy=False)
        gw = g2.T @ x2
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0, dtype=np.float64))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(parts), backward)


def stack_time(steps: Sequence[Tensor]) -> Tensor:
    """Stack per-step (B, H) states into (B, T, H)."""
    steps = list(steps)
    out = np.stack([s.data for s in steps], axis=1)

    def backward(g):
        return tuple(g[:, t] for t in range(len(steps)))

    return _result(out, tuple(steps), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _result(out, (x,), backward)


def dot_last(x: Tensor, v: Tensor) -> Tensor:
    """Contract the last axis of ``x`` with vector ``v``: (B, N, H)·(H,) -> (B, N)."""
    out = x.data @ v.data

    def backward(g):
        gx = g[..., None] * v.data
        gv = g.reshape(-1) @ x.data.reshape(-1, x.data.shape[-1])
        return (gx, gv)

    return _result(out, (x, v), backward)


def weighted_sum_time(weights: Tensor, states: Tensor) -> Tensor:
    """Attention-weighted sum: (B, N) x (B, N, H) -> (B, H)."""
    out = np.einsum("bn,bnh->bh", weights.data, states.data)

    def backward(g):
        gw = np.einsum("bh,bnh->bn", g, states.data, dtype=np.float64)
        gs = weights.data[:, :, None] * g[:, None, :]
        return (gw, gs)

    return _result(out, (weights, states), backward)


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of (V, E) ``table``; ``ids`` is an int array of any shape."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros(table.data.shape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _result(out, (table,), backward)


def gather_time(states: Tensor, positions: np.ndarray) -> Tensor:
    """Per-row time gather: out[b] = states[b, positions[b], :]."""
    positions = np.asarray(positions)
    rows = np.arange(states.data.shape[0])
    out = states.data[rows, positions]

    def backward(g):
        gs = np.zeros(states.data.shape, dtype=np.float64)
        gs[rows, positions] = g
        return (gs,)

    return _result(out, (states,), backward)


def gather_index(probs: Tensor, index: np.ndarray) -> Tensor:
    """Per-row column gather: out[b] = probs[b, index[b]]."""
    index = np.asarray(index)
    rows = np.arange(probs.data.shape[0])
    out = probs.data[rows, index]

    def backward(g):
        gp = np.zeros(probs.data.shape, dtype=np.float64)
        gp[rows, index] = g
        return (gp,)

    return _result(out, (probs,), backward)


def scatter_sum(values: Tensor, slots: np.ndarray, num_slots: int) -> Tensor:
    """Sum (B, N) ``values`` into (B, num_slots) buckets given by ``slots``."""
    slots = np.asarray(slots)
    batch, n = values.data.shape
    out = np.zeros((batch, num_slots), dtype=values.data.dtype)
    rows = np.repeat(np.arange(batch), n)
    np.add.at(out, (rows, slots.reshape(-1)), values.data.reshape(-1))

    def backward(g):
        return (np.take_along_axis(g, slots, axis=1),)

    return _result(out, (values,), backward)


def time_reverse(states: Tensor, lengths: np.ndarray) -> Tensor:
    """Reverse each row's first ``lengths[b]`` positions, leaving the padded
    tail in place. Self-inverse, so the backward pass reuses the same
    permutation."""
    perm = _reverse_permutation(states.data.shape[:2], lengths)
    rows = np.arange(states.data.shape[0])[:, None]
    out = states.data[rows, perm]

    def backward(g):
        return (g[rows, perm],)

    return _result(out, (states,), backward)


def _reverse_permutation(shape_bn: tuple[int, int], lengths: np.ndarray) -> np.ndarray:
    batch, n = shape_bn
    idx = np.tile(np.arange(n), (batch, 1))
    lens = np.asarray(lengths)[:, None]
    rev = lens - 1 - idx
    return np.where(idx < lens, rev, idx)


def reverse_ids(ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Plain-array counterpart of ``time_reverse`` for token id matrices."""
    perm = _reverse_permutation(ids.shape, lengths)
    return ids[np.arange(ids.shape[0])[:, None], perm]


# ---------------------------------------------------------------------------
# reductions and softmax
# ---------------------------------------------------------------------------


def softmax(scores: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis with optional boolean mask.

    Masked positions come out exactly 0; the remaining entries are computed
    with max-subtraction and a 64-bit sum, so rows normalize to 1 even for
    inputs of magnitude 1e3.
    """
    d = scores.data
    if mask is None:
        m = np.ones(d.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != d.shape:
            raise ValueError(f"mask shape {m.shape} != scores shape {d.shape}")
    if not m.any(axis=-1).all():
        raise ValueError("softmax: some row has every position masked")
    shifted = np.where(m, d, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted, where=m, out=np.zeros_like(d))
    total = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    out = (e / total).astype(d.dtype)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True, dtype=np.float64)
        return (out * (g - inner),)

    return _result(out, (scores,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.data.shape),)

    return _result(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate gradients of scalar ``root`` into ``.grad`` of every
    reachable tensor that requires them. Each node is visited exactly once."""
    if root.data.size != 1:
        raise ValueError("backward expects a scalar loss tensor")
    if not root.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones(root.data.shape, dtype=np.float64)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            # accumulation reassigns rather than mutates, so views are safe
            g = np.asarray(g, dtype=np.float64)
            parent.grad = g if parent.grad is None else parent.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# verification oracles
# ---------------------------------------------------------------------------


def l2_norm(grads: Iterable[np.ndarray]) -> float:
    """Global Euclidean norm over a collection of gradient arrays."""
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    max_entries_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients of ``loss_fn`` against central
    differences; returns the max relative error over checked entries.

    ``loss_fn`` must be a deterministic closure over ``params``. Differences
    are taken on 64-bit copies of the parameter values (the parameters
    themselves should be float64 for the comparison to be meaningful).
    """
    zero_grads(params)
    base = loss_fn()
    if not np.isfinite(base.data):
        raise ValueError("grad_check: loss is not finite")
    backward(base)
    analytic = [
        np.zeros(p.data.shape, dtype=np.float64) if p.grad is None else p.grad
        for p in params
    ]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        if p.data.ndim > 0 and flat.base is None:
            raise ValueError("grad_check: parameter storage must be contiguous")
        n = flat.size
        if max_entries_per_tensor is not None and n > max_entries_per_tensor:
            entries = rng.choice(n, size=max_entries_per_tensor, replace=False)
        else:
            entries = range(n)
        for k in entries:
            orig = flat[k]
            flat[k] = orig + eps
            with no_grad():
                hi = float(loss_fn().data)
            flat[k] = orig - eps
            with no_grad():
                lo = float(loss_fn().data)
            flat[k] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ValueError("grad_check: perturbed loss is not finite")
            cd = (hi - lo) / (2.0 * eps)
            an = float(ga.reshape(-1)[k])
            rel = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            worst = max(worst, rel)
    return worst
