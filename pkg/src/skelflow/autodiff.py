"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a row-major numpy float64 array plus an optional backward
closure. The primitive set is deliberately small: batched matmul, axis swap,
reshape, slice/concat, elementwise add/mul and scalar scaling, softmax over
one axis, layer-norm statistics, SiLU/sigmoid, gather of embedding rows,
rotary rotation of feature pairs, and reductions. Everything else in the
package is composed from these.

Every exposed operation validates that its output is finite and raises
NumericsError on the first NaN/Inf. Backward traversal is reverse
topological order, which is fixed for a given graph, so gradient
accumulation is deterministic run to run.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "NumericsError", "Tensor", "no_grad", "constant", "parameter",
    "add", "sub", "mul", "scale", "add_bias", "broadcast_to", "matmul",
    "transpose", "reshape", "slice_axis", "concat", "tsum", "tmean",
    "softmax", "layer_norm", "sigmoid", "silu", "gather_rows", "rope_tables",
    "rope_rotate", "sinusoidal_embedding", "GradReport", "finite_diff_check",
]


class NumericsError(RuntimeError):
    """Raised when an operation produces NaN/Inf or violates a shape contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _finite_or_raise(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite value produced by op '{op}'")


class Tensor:
    """Dense float64 array node in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # -- autodiff -----------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep from this node.

        A scalar output seeds with 1.0; non-scalar outputs require an
        explicit seed of matching shape.
        """
        if seed is None:
            if self.data.size != 1:
                raise NumericsError("backward() without seed requires scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise NumericsError("backward seed shape mismatch")

        # Iterative post-order topological sort; id() keys avoid __eq__ games.
        order: list = []
        seen: set = set()
        stack: list = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, ax1: int = -2, ax2: int = -1):
        return transpose(self, ax1, ax2)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _track(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _make(data: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
    _finite_or_raise(data, op)
    out = Tensor(data)
    if backward is not None and _track(*parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise NumericsError(f"add shape mismatch {a.shape} vs {b.shape}")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise NumericsError(f"sub shape mismatch {a.shape} vs {b.shape}")
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise NumericsError(f"mul shape mismatch {a.shape} vs {b.shape}")
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(data, "mul", (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(data, "scale", (a,), backward)


def shift(a: Tensor, s: float) -> Tensor:
    """Add a python scalar (the only scalar-tensor broadcast allowed)."""
    s = float(s)
    data = a.data + s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)

    return _make(data, "shift", (a,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading axes; b must match x's last axis."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise NumericsError(f"add_bias expects b of shape ({x.shape[-1]},), got {b.shape}")
    data = x.data + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            axes = tuple(range(g.ndim - 1))
            b._accumulate(g.sum(axis=axes) if axes else g)

    return _make(data, "add_bias", (x, b), backward)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; gradient sums over the expanded axes."""
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise NumericsError(f"broadcast_to {x.shape} -> {shape}: {e}") from None

    in_shape = x.shape
    pad = len(shape) - len(in_shape)
    sum_axes = tuple(
        i for i in range(len(shape))
        if i < pad or in_shape[i - pad] == 1 and shape[i] != 1
    )

    def backward(g):
        if x.requires_grad:
            red = g.sum(axis=sum_axes, keepdims=True) if sum_axes else g
            x._accumulate(red.reshape(in_shape))

    return _make(data, "broadcast_to", (x,), backward)


# -- shape ops ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)
    in_shape = x.shape

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(in_shape))

    return _make(data, "reshape", (x,), backward)


def transpose(x: Tensor, ax1: int = -2, ax2: int = -1) -> Tensor:
    data = np.swapaxes(x.data, ax1, ax2).copy()

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.swapaxes(g, ax1, ax2))

    return _make(data, "transpose", (x,), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.ndim))
    data = x.data[idx].copy()

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accumulate(full)

    return _make(data, "slice_axis", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    sizes = [t.shape[ax] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = tuple(
                    slice(None) if i != ax else slice(offset, offset + n)
                    for i in range(g.ndim)
                )
                t._accumulate(g[idx])
            offset += n

    return _make(data, "concat", tuple(tensors), backward)


# -- matmul -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m), or batched (..., n, k) @ (..., k, m) with equal
    leading dims. No silent broadcasting of batch axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul requires >=2-D operands")
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise NumericsError(f"matmul inner dim mismatch {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                k = a.shape[-1]
                m = g.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, m))

        return _make(data, "matmul", (a, b), backward)

    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise NumericsError(f"matmul batch dims mismatch {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul inner dim mismatch {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, "matmul", (a, b), backward)


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            gg = g
            if not keepdims:
                for a in sorted(axes):
                    gg = np.expand_dims(gg, a)
            x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return _make(data, "sum", (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return scale(tsum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# -- nonlinearities -------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            x._accumulate(data * (g - dot))

    return _make(data, "softmax", (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv
    n = x.shape[-1]

    def backward(g):
        if x.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * data).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (g - gm - data * gy))

    return _make(data, "layer_norm", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return _make(data, "sigmoid", (x,), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * sig * (1.0 + x.data * (1.0 - sig)))

    return _make(data, "silu", (x,), backward)


# -- lookups / embeddings --------------------------------------------------------

def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of a (V, E) table by an integer index array."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise NumericsError("gather_rows expects a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError("gather_rows index out of range")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(acc)

    return _make(data, "gather_rows", (table,), backward)


def rope_tables(positions: np.ndarray, dim: int, base: float = 10000.0):
    """cos/sin tables for rotary rotation: shape (len(positions), dim//2)."""
    if dim % 2 != 0:
        raise NumericsError("rotary rotation requires an even feature dim")
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dim)
    ang = positions[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved feature pairs of x (..., n, dim) by per-position angles.

    cos/sin have shape (n, dim//2). The rotation is orthogonal, so the
    backward pass applies the inverse rotation to the gradient.
    """
    if x.shape[-1] != 2 * cos.shape[-1] or x.shape[-2] != cos.shape[0]:
        raise NumericsError(f"rope_rotate table shape {cos.shape} does not match input {x.shape}")
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    data = np.empty_like(x.data)
    data[..., 0::2] = xe * cos - xo * sin
    data[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        if x.requires_grad:
            ge = g[..., 0::2]
            go = g[..., 1::2]
            out = np.empty_like(g)
            out[..., 0::2] = ge * cos + go * sin
            out[..., 1::2] = -ge * sin + go * cos
            x._accumulate(out)

    return _make(data, "rope_rotate", (x,), backward)


def sinusoidal_embedding(values: np.ndarray, dim: int, max_freq: float = 1000.0) -> np.ndarray:
    """Sin/cos features of scalars in [0, 1]; plain array, no gradient path.

    Frequencies are log-spaced in [1, max_freq] so nearby values stay
    distinguishable on a 1/100 grid.
    """
    if dim % 2 != 0:
        raise NumericsError("sinusoidal embedding dim must be even")
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), half))
    ang = values[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    _finite_or_raise(out, "sinusoidal_embedding")
    return out


# -- finite-difference gradient checking -------------------------------------------

@dataclass
class GradReport:
    """Result of comparing reverse-mode gradients against central differences."""

    max_rel_error: float
    worst_parameter: str
    per_parameter_errors: Dict[str, float] = field(default_factory=dict)
    checked_elements: int = 0

    def ok(self, threshold: float = 1e-4) -> bool:
        return self.max_rel_error < threshold


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-5,
    top_elements: Optional[int] = None,
    random_elements: int = 0,
    seed: int = 0,
) -> GradReport:
    """Compare analytic gradients of a scalar loss to central differences.

    loss_fn rebuilds the loss from the live parameter tensors on every call.
    With top_elements=None every element of every parameter is checked;
    otherwise the top_elements largest-|gradient| entries per tensor plus
    random_elements seeded-random entries are checked (large models).
    Relative error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    rng = np.random.default_rng(seed)
    per_param: Dict[str, float] = {}
    worst = ("", 0.0)
    checked = 0

    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = analytic[name].reshape(-1)
        n = flat.size
        if top_elements is None:
            idxs = np.arange(n)
        else:
            k = min(top_elements, n)
            top = np.argsort(-np.abs(g))[:k]
            extra = rng.integers(0, n, size=min(random_elements, n)) if random_elements else np.empty(0, dtype=int)
            idxs = np.unique(np.concatenate([top, extra.astype(int)]))
        worst_here = 0.0
        for i in idxs:
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            with no_grad():
                lp = loss_fn().item()
            flat[i] = orig - h
            with no_grad():
                lm = loss_fn().item()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = g[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst_here = max(worst_here, err)
            checked += 1
        per_param[name] = worst_here
        if worst_here >= worst[1]:
            worst = (name, worst_here)

    return GradReport(
        max_rel_error=worst[1],
        worst_parameter=worst[0],
        per_parameter_errors=per_param,
        checked_elements=checked,
    )
