"""Dense tensors with reverse-mode automatic differentiation.

Small tape-based engine over numpy, covering exactly the op set the
segmentation model and its losses need: matmul (batched), broadcasting
elementwise arithmetic, GELU, sigmoid, softplus, row softmax, layer norm,
transpose/reshape/slice/concat, sum/mean reductions and fixed bilinear 2x
upsampling. float32 is the training dtype; build graphs in float64 when
running gradient checks.

Forward values are validated for finiteness (NaN/Inf raises
NumericFaultError rather than propagating silently). Graph execution is
single threaded and deterministic: identical inputs give bitwise identical
forward and backward results.
"""

from __future__ import annotations

import functools
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DeterminismError, NumericFaultError, ShapeError

DEFAULT_DTYPE = np.float32

# Finite checks on every op output; flip off only for throwaway experiments.
CHECK_FINITE = True

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _check_finite(out: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(out).all():
        raise NumericFaultError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional real array, optionally tracked by the autodiff tape.

    `data` is treated as immutable once the tensor participates in a
    forward pass; optimizers may swap leaf data between steps. `grad`
    holds the accumulated gradient (same shape as data) after backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.isfinite(arr).all():
            raise NumericFaultError("tensor created from non-finite data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Backpropagate from this scalar, accumulating into leaf .grad."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        run_backward(self)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = any(p.requires_grad for p in parents)
    t.grad = None
    if t.requires_grad:
        t._parents = parents
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    t._op = op
    return t


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError(f"{op}: needs a Tensor operand")
    if not isinstance(a, Tensor):
        a = _coerce(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _coerce(b, a.dtype)
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _node(-a.data, (a,), backward, "neg")


# -- matmul ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward, "matmul")


# -- activations -----------------------------------------------------------


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # exponentiate negative magnitudes only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = _sigmoid_stable(x)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), backward, "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU x * Phi(x) via the error function."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * phi_cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return ((g * (phi_cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _node(out, (a,), backward, "gelu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow. Gradient is sigmoid(x)."""
    x = a.data
    out = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype, copy=False)

    def backward(g):
        return ((g * _sigmoid_stable(x)).astype(x.dtype, copy=False),)

    return _node(out, (a,), backward, "softplus")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((out * (g - dot)).astype(x.dtype, copy=False),)

    return _node(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned scale and shift."""
    x = a.data
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm: scale/shift must be ({d},), got {scale.shape} and {shift.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * scale.data + shift.data).astype(x.dtype, copy=False)

    def backward(g):
        gxhat = g * scale.data
        gscale = (g * xhat).reshape(-1, d).sum(axis=0)
        gshift = g.reshape(-1, d).sum(axis=0)
        mean_g = gxhat.mean(axis=-1, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - mean_g - xhat * mean_gx)
        return (
            gx.astype(x.dtype, copy=False),
            gscale.astype(x.dtype, copy=False),
            gshift.astype(x.dtype, copy=False),
        )

    return _node(out, (a, scale, shift), backward, "layer_norm")


# -- shape ops ---------------------------------------------------------------


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), backward, "reshape")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _node(out, (a,), backward, "broadcast_to")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _node(a.data[idx].copy(), (a,), backward, "slice_axis")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i, t in enumerate(tensors):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _node(out, tuple(tensors), backward, "concat")


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=True),)

    return _node(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(g2, a.shape) / n).astype(a.dtype, copy=False),)

    return _node(np.asarray(out), (a,), backward, "mean")


# -- fixed bilinear 2x upsampling ---------------------------------------------


@functools.lru_cache(maxsize=32)
def _upsample_matrix(n: int, dtype_str: str) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel-centered, edge clamped."""
    dtype = np.dtype(dtype_str)
    u = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = o / 2.0 - 0.25
        i0 = int(np.floor(src))
        frac = src - i0
        lo = min(max(i0, 0), n - 1)
        hi = min(max(i0 + 1, 0), n - 1)
        u[o, lo] += 1.0 - frac
        u[o, hi] += frac
    return u


def upsample2x(a: Tensor) -> Tensor:
    """Fixed (non-learned) bilinear 2x upsampling of the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"upsample2x: needs >=2-D input, got {a.shape}")
    h, w = a.shape[-2], a.shape[-1]
    ur = _upsample_matrix(h, a.dtype.str)
    uc = _upsample_matrix(w, a.dtype.str)
    out = ur @ a.data @ uc.T

    def backward(g):
        return (ur.T @ g @ uc,)

    return _node(out, (a,), backward, "upsample2x")


# -- backward engine -----------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-mode visitation order: every node's inputs precede it."""
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
    return order


def run_backward(root: Tensor) -> None:
    if root.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Backpropagate and return gradients keyed by parameter name.

    Parameters not reached by the loss get explicit zero gradients.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype))
        for name, p in params.items()
    }


# -- finite-difference gradient checking ----------------------------------------


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    `f` must be deterministic and the parameters float64 (the 64-bit
    checking mode); relative error uses max(1e-8, |g_fd|) as denominator.
    """
    if eps <= 0:
        raise ContractError(f"finite_difference_check: eps must be > 0, got {eps}")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"finite_difference_check: param {name!r} must be float64")

    v1 = float(f(params).data)
    v2 = float(f(params).data)
    if v1 != v2:
        raise DeterminismError(f"objective not deterministic: {v1!r} != {v2!r}")

    auto = backward(f(params), params)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g_auto = auto[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(params).data)
            flat[i] = orig - eps
            down = float(f(params).data)
            flat[i] = orig
            g_fd = (up - down) / (2.0 * eps)
            rel = abs(g_auto[i] - g_fd) / max(1e-8, abs(g_fd))
            worst = max(worst, rel)
    return worst
