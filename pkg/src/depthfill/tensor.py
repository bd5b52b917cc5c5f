"""Minimal reverse-mode autodiff on dense numpy buffers.

The whole training stack runs on this one Tensor class.  Design rules:

* float64 by default, float32 selectable via ``set_default_dtype`` (one
  global dtype; graphs never mix precisions).
* No implicit broadcasting in ``add``/``mul`` beyond "both shapes equal
  or one side is a single element".  Anything fancier goes through the
  explicit ``broadcast_to`` op so every shape change is visible in the
  graph.
* Every op output is checked for NaN/Inf and raises ``NumericError`` on
  the first non-finite value, so numeric bugs surface at the op that
  produced them instead of three modules later.
* Reverse pass is an iterative topological sort with a scratch gradient
  table; calling ``backward`` twice therefore adds the same gradient
  twice into ``.grad`` (callers zero grads between optimizer steps).

Convolutions are evaluated through ``sliding_window_view`` + ``einsum``
and their input gradients through small per-kernel-offset slice loops,
which keeps every reduction order fixed and runs bitwise-reproducibly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, UsageError

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Select the global float width (np.float32 or np.float64)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported dtype {dt}; use float32 or float64")
    _DTYPE = dt.type


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """Dense float tensor with an optional reverse-mode graph edge."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op", "_freed")

    # keep numpy from absorbing us in mixed expressions; reflected ops run instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=_DTYPE))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._op: str | None = None
        self._freed = False

    # -- construction helper for op outputs ------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], vjp, op: str) -> "Tensor":
        data = np.ascontiguousarray(data, dtype=_DTYPE)
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._freed = False
        out._op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The backing array; treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    # -- reverse pass -------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable tensor
        that requires grad.  self must be a scalar."""
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._freed:
                raise UsageError("backward() through a freed graph")
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                held = grads.get(id(parent))
                grads[id(parent)] = pg if held is None else held + pg

    def free_graph(self) -> None:
        """Drop the graph below this tensor; later backward() raises."""
        stack = [self]
        while stack:
            node = stack.pop()
            if node._vjp is None and not node._parents:
                continue
            stack.extend(node._parents)
            node._parents = ()
            node._vjp = None
            node._freed = True

    # -- elementwise arithmetic --------------------------------------------

    @staticmethod
    def _wrap(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @staticmethod
    def _pair_shapes(a: "Tensor", b: "Tensor", op: str) -> None:
        if a.shape == b.shape or a.size == 1 or b.size == 1:
            return
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")

    @staticmethod
    def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        # collapse a gradient back onto a single-element operand
        if g.shape == shape:
            return g
        return np.sum(g).reshape(shape)

    def add(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        Tensor._pair_shapes(self, other, "add")
        data = self.data + other.data

        def vjp(g):
            return (Tensor._reduce_to(g, self.shape), Tensor._reduce_to(g, other.shape))

        return Tensor._make(data, (self, other), vjp, "add")

    def mul(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        Tensor._pair_shapes(self, other, "mul")
        data = self.data * other.data

        def vjp(g):
            return (
                Tensor._reduce_to(g * other.data, self.shape),
                Tensor._reduce_to(g * self.data, other.shape),
            )

        return Tensor._make(data, (self, other), vjp, "mul")

    def neg(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __add__(self, other):
        return self.add(other)

    __radd__ = __add__

    def __mul__(self, other):
        return self.mul(other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.neg()

    def __sub__(self, other):
        return self.add(Tensor._wrap(other).neg())

    def __rsub__(self, other):
        return Tensor._wrap(other).add(self.neg())

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            if other.size != 1:
                raise DimensionError("division only by scalars")
            return self.mul(other.reciprocal())
        return self.mul(1.0 / float(other))

    def reciprocal(self) -> "Tensor":
        data = 1.0 / self.data
        return Tensor._make(data, (self,), lambda g: (-g * data * data,), "reciprocal")

    def exp(self) -> "Tensor":
        data = np.exp(self.data)
        return Tensor._make(data, (self,), lambda g: (g * data,), "exp")

    def log(self) -> "Tensor":
        data = np.log(self.data)
        return Tensor._make(data, (self,), lambda g: (g / self.data,), "log")

    def sqrt(self) -> "Tensor":
        data = np.sqrt(self.data)
        return Tensor._make(data, (self,), lambda g: (g * 0.5 / data,), "sqrt")

    def abs(self) -> "Tensor":
        # subgradient 0 at exactly 0
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * np.sign(self.data),), "abs")

    def relu(self) -> "Tensor":
        mask = self.data > 0.0  # subgradient at 0 is 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self) -> "Tensor":
        x = self.data
        s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return Tensor._make(s, (self,), lambda g: (g * s * (1.0 - s),), "sigmoid")

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        src_shape = self.shape
        return Tensor._make(data, (self,), lambda g: (g.reshape(src_shape),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        data = np.transpose(self.data, axes)
        return Tensor._make(data, (self,), lambda g: (np.transpose(g, inv),), "transpose")

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        try:
            data = np.broadcast_to(self.data, shape)
        except ValueError as e:
            raise DimensionError(f"broadcast_to: {self.shape} -> {shape}: {e}") from None
        src_shape = self.shape

        def vjp(g):
            # sum over prepended axes, then over axes that were size 1
            extra = g.ndim - len(src_shape)
            if extra:
                g = g.sum(axis=tuple(range(extra)))
            keep = tuple(i for i, n in enumerate(src_shape) if n == 1 and g.shape[i] != 1)
            if keep:
                g = g.sum(axis=keep, keepdims=True)
            return (g.reshape(src_shape),)

        return Tensor._make(data, (self,), vjp, "broadcast_to")

    def __getitem__(self, key) -> "Tensor":
        data = self.data[key]
        src_shape = self.shape

        def vjp(g):
            dx = np.zeros(src_shape, dtype=g.dtype)
            dx[key] = g
            return (dx,)

        return Tensor._make(np.ascontiguousarray(data), (self,), vjp, "getitem")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        src_shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g.reshape((1,) * len(src_shape)), src_shape).copy(),)
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % len(src_shape) for a in axes)
            if not keepdims:
                for a in sorted(axes):
                    g = np.expand_dims(g, a)
            return (np.broadcast_to(g, src_shape).copy(),)

        return Tensor._make(data, (self,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def matmul(self, other: "Tensor") -> "Tensor":
        other = Tensor._wrap(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul: incompatible shapes {self.shape} @ {other.shape}")
        data = self.data @ other.data

        def vjp(g):
            return (g @ other.data.T, self.data.T @ g)

        return Tensor._make(data, (self, other), vjp, "matmul")

    def __matmul__(self, other):
        return self.matmul(other)


# -- free-function aliases for the elementwise family ------------------------


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def relu(x: Tensor) -> Tensor:
    return x.relu()


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), built from primitives so its grad is exact."""
    return x.mul(x.sigmoid())


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis; grads split back."""
    tensors = [Tensor._wrap(t) for t in tensors]
    if not tensors:
        raise UsageError("concat of empty sequence")
    nd = tensors[0].ndim
    for t in tensors:
        if t.ndim != nd:
            raise DimensionError("concat: rank mismatch")
    ax = axis % nd
    data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * nd
        outs = []
        for i in range(len(sizes)):
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            outs.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(outs)

    return Tensor._make(data, tensors, vjp, "concat")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max-shifted)."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), vjp, "softmax")


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group normalization to zero mean / unit variance.

    Input is [N, C, H, W]; C must divide evenly into ``groups``.  No
    learned affine here; layers apply scale/shift on top.
    """
    if x.ndim != 4:
        raise DimensionError(f"group_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, (c // groups) * h * w)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    data = xhat.reshape(n, c, h, w)

    def vjp(g):
        gg = g.reshape(n, groups, (c // groups) * h * w)
        gmean = gg.mean(axis=2, keepdims=True)
        cmean = (gg * xhat).mean(axis=2, keepdims=True)
        dx = inv * (gg - gmean - xhat * cmean)
        return (dx.reshape(n, c, h, w),)

    return Tensor._make(data, (x,), vjp, "group_norm")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: x [N,C,H,W], weight [F,C,kh,kw] -> [N,F,H',W']."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cw}")
    if stride < 1:
        raise UsageError("conv2d: stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    data = np.einsum("nchwij,fcij->nfhw", win, weight.data, optimize=True)
    if bias is not None:
        if bias.shape != (f,):
            raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({f},)")
        data = data + bias.data[None, :, None, None]
    ho, wo = data.shape[2], data.shape[3]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        dw = np.einsum("nchwij,nfhw->fcij", win, g, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    np.einsum("nfhw,fc->nchw", g, weight.data[:, :, i, j], optimize=True)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    return Tensor._make(data, parents, vjp, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Adjoint of conv2d: x [N,C,H,W], weight [C,F,kh,kw] -> [N,F,(H-1)s+kh,(W-1)s+kw].

    With matching shapes and zero padding, <conv2d(y, k), x> == <y, conv_transpose2d(x, k)>.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv_transpose2d: need 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    cw, f, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"conv_transpose2d: input has {c} channels, weight expects {cw}")
    if stride < 1:
        raise UsageError("conv_transpose2d: stride must be >= 1")
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw
    data = np.zeros((n, f, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            data[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride] += \
                np.einsum("nchw,cf->nfhw", x.data, weight.data[:, :, i, j], optimize=True)
    if bias is not None:
        if bias.shape != (f,):
            raise DimensionError(f"conv_transpose2d: bias shape {bias.shape}, expected ({f},)")
        data = data + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gs = g[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride]
                dx += np.einsum("nfhw,cf->nchw", gs, weight.data[:, :, i, j], optimize=True)
                dw[:, :, i, j] = np.einsum("nchw,nfhw->cf", x.data, gs, optimize=True)
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    return Tensor._make(data, parents, vjp, "conv_transpose2d")


def bilinear_sample(feature: Tensor, coords: Tensor) -> Tensor:
    """Sample feature [C,H,W] at continuous points coords [P,2] -> [P,C].

    coords[:, 0] is x (column), coords[:, 1] is y (row), in pixel units.
    Out-of-range points clamp to the border, which also zeroes their
    coordinate gradient; differentiable w.r.t. both arguments.
    """
    if feature.ndim != 3:
        raise DimensionError(f"bilinear_sample: feature must be [C,H,W], got {feature.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"bilinear_sample: coords must be [P,2], got {coords.shape}")
    c, h, w = feature.shape
    xs, ys = coords.data[:, 0], coords.data[:, 1]
    inside_x = (xs >= 0.0) & (xs <= w - 1.0)
    inside_y = (ys >= 0.0) & (ys <= h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = xc - x0
    ty = yc - y0
    f = feature.data
    v00 = f[:, y0, x0]  # [C,P]
    v01 = f[:, y0, x1]
    v10 = f[:, y1, x0]
    v11 = f[:, y1, x1]
    top = v00 * (1.0 - tx) + v01 * tx
    bot = v10 * (1.0 - tx) + v11 * tx
    data = (top * (1.0 - ty) + bot * ty).T  # [P,C]

    def vjp(g):
        gt = g.T  # [C,P]
        grads = [None, None]
        if feature.requires_grad:
            # scatter-add via bincount on fused (channel, pixel) indices;
            # much faster than ufunc.at and just as deterministic
            chan = np.arange(c, dtype=np.int64)[:, None] * (h * w)
            df = np.zeros(c * h * w)
            for yy, xx, ww in ((y0, x0, (1.0 - tx) * (1.0 - ty)),
                               (y0, x1, tx * (1.0 - ty)),
                               (y1, x0, (1.0 - tx) * ty),
                               (y1, x1, tx * ty)):
                idx = (chan + (yy * w + xx)[None, :]).ravel()
                df += np.bincount(idx, weights=(gt * ww).ravel(), minlength=c * h * w)
            grads[0] = df.reshape(c, h, w)
        if coords.requires_grad:
            dvx = (v01 - v00) * (1.0 - ty) + (v11 - v10) * ty  # d value / d tx
            dvy = bot - top
            dc = np.zeros_like(coords.data)
            dc[:, 0] = np.sum(gt * dvx, axis=0) * inside_x
            dc[:, 1] = np.sum(gt * dvy, axis=0) * inside_y
            grads[1] = dc
        return tuple(grads)

    return Tensor._make(data, (feature, coords), vjp, "bilinear_sample")
