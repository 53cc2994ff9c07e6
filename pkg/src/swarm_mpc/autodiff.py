"""Reverse-mode automatic differentiation over dense float64 arrays, plus Adam.

Matrix products go through ``np.einsum(optimize=False)`` rather than BLAS:
einsum computes every output element with a fixed accumulation order, so a
row's result never depends on its position in the stack.  The model relies on
that to make graph forward passes bit-exact under node permutations.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

Array = np.ndarray


class AutodiffError(Exception):
    pass


class ShapeMismatchError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


_GRAD_ENABLED = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _mm(a: Array, b: Array) -> Array:
    # position-stable 2-D matrix product (see module docstring)
    return np.einsum("ij,jk->ik", a, b, optimize=False)


class TapeNode:
    """One recorded operation: op name, parent tensors and the pullback."""

    __slots__ = ("op", "parents", "vjp", "consumed")

    def __init__(
        self,
        op: str,
        parents: tuple["Tensor", ...],
        vjp: Callable[[Array], tuple[Array | None, ...]] | None,
    ) -> None:
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.consumed = False


class Tensor:
    """Dense float64 array, optionally attached to the tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, requires_grad: bool = False, node: TapeNode | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        if node is not None:
            self.node = node
        elif requires_grad:
            self.node = TapeNode("leaf", (), None)
        else:
            self.node = None

    @classmethod
    def _wrap(cls, data: Array, node: TapeNode | None) -> "Tensor":
        # fast path for op outputs: finiteness already checked in _make
        t = object.__new__(cls)
        t.data = data
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # arithmetic sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __getitem__(self, key):
        return _slice(self, key)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(op: str, out: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op {op!r} produced non-finite values")
    if _GRAD_ENABLED and any(p.node is not None for p in parents):
        return Tensor._wrap(out, TapeNode(op, parents, vjp))
    return Tensor._wrap(out, None)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# core ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul shapes {a.shape} x {b.shape}")
    out = _mm(a.data, b.data)
    return _make(
        "matmul",
        out,
        (a, b),
        lambda g: (_mm(g, b.data.T), _mm(a.data.T, g)),
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(ts), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g: Array):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(ts)))

    return _make("stack", out, tuple(ts), vjp)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _make("relu", out, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def cos(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def tan(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tan(a.data)
    return _make("tan", out, (a,), lambda g: (g * (1.0 + out * out),))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = a.data * a.data
    return _make("square", out, (a,), lambda g: (g * 2.0 * a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(a.data)

    def vjp(g: Array):
        # subgradient 0 at exactly zero keeps the pullback finite
        d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
        return (g * d,)

    return _make("sqrt", out, (a,), vjp)


def reciprocal(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", over="ignore"):
        out = np.reciprocal(a.data)
    return _make("reciprocal", out, (a,), lambda g: (-g * out * out,))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = a.data / b.data

    def vjp(g: Array):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return (ga, gb)

    return _make("div", out, (a, b), vjp)


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def wrap_to_pi(a: Tensor) -> Tensor:
    """Wrap angles into (-pi, pi]; the shift is by a constant multiple of 2pi,
    so the pullback is the identity."""
    a = as_tensor(a)
    out = a.data - 2.0 * np.pi * np.ceil((a.data - np.pi) / (2.0 * np.pi))
    return _make("wrap_to_pi", out, (a,), lambda g: (g,))


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make("sum", out, (a,), vjp)


def tmean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return scale(tsum(a), 1.0 / a.size)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _slice(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g: Array):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _make("slice", out, (a,), vjp)


def take(a: Tensor, indices: Array, axis: int = 0) -> Tensor:
    """Gather rows by integer index (axis 0 only); scatter-adds on the way back."""
    if axis != 0:
        raise ShapeMismatchError("take supports axis=0 only")
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def vjp(g: Array):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make("take", out, (a,), vjp)


def index_add(base: Tensor, indices: Array, values: Tensor) -> Tensor:
    """Copy of `base` with `values` rows added at `indices` (axis 0)."""
    base, values = as_tensor(base), as_tensor(values)
    idx = np.asarray(indices, dtype=np.intp)
    out = base.data.copy()
    np.add.at(out, idx, values.data)
    return _make("index_add", out, (base, values), lambda g: (g, g[idx]))


# ---------------------------------------------------------------------------
# fused ops: single tape nodes for hot compositions (dispatch overhead is a
# real cost at this model scale)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one node."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(f"affine shapes {x.shape} x {w.shape}")
    out = _mm(x.data, w.data) + b.data

    def vjp(g: Array):
        return (_mm(g, w.data.T), _mm(x.data.T, g), g.sum(axis=0))

    return _make("affine", out, (x, w, b), vjp)


def pair_concat(z: Tensor, src: Array, dst: Array) -> Tensor:
    """Edge rows [z[dst], z[dst] - z[src]] in one gather."""
    zd = z.data[dst]
    out = np.concatenate([zd, zd - z.data[src]], axis=1)
    width = z.shape[1]

    def vjp(g: Array):
        g_self = g[:, :width]
        g_rel = g[:, width:]
        gz = np.zeros(z.shape)
        np.add.at(gz, dst, g_self + g_rel)
        np.add.at(gz, src, -g_rel)
        return (gz,)

    return _make("pair_concat", out, (z,), vjp)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row dot product of two equal-shape 2-D tensors."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"row_dot shapes {a.shape} vs {b.shape}")
    out = np.einsum("ij,ij->i", a.data, b.data, optimize=False)

    def vjp(g: Array):
        col = g[:, None]
        return (col * b.data, col * a.data)

    return _make("row_dot", out, (a, b), vjp)


def weighted_rows(alpha: Tensor, values: Tensor) -> Tensor:
    """Weighted sum over the middle axis: (B, m) x (B, m, d) -> (B, d)."""
    if alpha.data.ndim != 2 or values.data.ndim != 3 or alpha.shape != values.shape[:2]:
        raise ShapeMismatchError(f"weighted_rows shapes {alpha.shape} vs {values.shape}")
    out = np.einsum("bm,bmd->bd", alpha.data, values.data, optimize=False)

    def vjp(g: Array):
        g_alpha = np.einsum("bd,bmd->bm", g, values.data, optimize=False)
        g_values = alpha.data[:, :, None] * g[:, None, :]
        return (g_alpha, g_values)

    return _make("weighted_rows", out, (alpha, values), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor, leaves: Sequence[Tensor]) -> list[Array]:
    """Accumulate d(root)/d(leaf) for every leaf; zeros for leaves the root
    does not depend on.  The tape is consumed: a second call through the same
    nodes raises TapeError.
    """
    if root.data.size != 1:
        raise ShapeMismatchError(f"backward root must be scalar, got shape {root.shape}")

    grads: dict[int, Array] = {}
    if root.node is None:
        return [np.zeros(leaf.shape) for leaf in leaves]

    # iterative post-order topological sort over tensors reachable from root;
    # leaves carry no cached state, so only interior nodes can be consumed
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        if t.node.consumed and t.node.vjp is not None:
            raise TapeError("tape already consumed; rebuild the graph before calling backward again")
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))

    grads[id(root)] = np.ones(root.shape)
    for t in reversed(order):
        node = t.node
        if node.vjp is None:
            continue  # leaf: keep its accumulated gradient for collection
        node.consumed = True
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if p.node is None or pg is None:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    return [grads.get(id(leaf), np.zeros(leaf.shape)) for leaf in leaves]


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class AdamState:
    """Moment accumulators for one parameter list."""

    lr: float = 0.01
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)
    # per-parameter learning-rate multipliers; Adam normalises gradient scale
    # away, so slowing a parameter group down requires scaling its lr, not
    # its gradients
    lr_scales: list[float] | None = None

    @classmethod
    def for_params(
        cls,
        params: Sequence[Tensor],
        lr: float = 0.01,
        weight_decay: float = 1e-6,
        lr_scales: Sequence[float] | None = None,
    ) -> "AdamState":
        if lr_scales is not None and len(lr_scales) != len(params):
            raise ShapeMismatchError("lr_scales length must match params")
        return cls(
            lr=lr,
            weight_decay=weight_decay,
            m=[np.zeros(p.shape) for p in params],
            v=[np.zeros(p.shape) for p in params],
            lr_scales=list(lr_scales) if lr_scales is not None else None,
        )


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[Array]) -> None:
    """In-place decoupled-weight-decay Adam update."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ShapeMismatchError("adam_step: params/grads/state length mismatch")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeMismatchError(f"adam_step: grad shape {g.shape} vs param {p.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        lr = state.lr if state.lr_scales is None else state.lr * state.lr_scales[i]
        if state.weight_decay != 0.0:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
