"""Dense tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
input gradients. ``backward`` walks that record in reverse topological order.
Shapes are row-major and checked at each op boundary; broadcasting is limited
to what the model needs (bias rows, shared weights over a leading batch axis).

Training runs in float32. Verification code builds the same graphs in float64
and compares against central differences with :func:`finite_diff_check`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_mac_counter: Optional["MacCounter"] = None


class MacCounter:
    """Accumulates multiply-accumulates issued by matmul and conv2d."""

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextlib.contextmanager
def count_macs():
    global _mac_counter
    prev, _mac_counter = _mac_counter, MacCounter()
    try:
        yield _mac_counter
    finally:
        _mac_counter = prev


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results never require grad."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot combine shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot combine shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if need_a else None,
            _unbroadcast(g * ad, bd.shape) if need_b else None,
        )

    return _make(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    ad, bd = a.data, b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# -- reductions -------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


# -- shape ------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    """Rows of ``a`` followed by rows of ``b`` along the token axis (-2).

    A 2-D ``a`` is shared across any leading batch axes of ``b``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_tokens: token widths differ, {a.shape} vs {b.shape}")
    lead = b.shape[:-2]
    ad = a.data
    if a.shape[:-2] != lead:
        if a.ndim != 2:
            raise DimensionError(f"concat_tokens: batch axes differ, {a.shape} vs {b.shape}")
        ad = np.broadcast_to(ad, lead + a.shape)
    p = a.shape[-2]
    out = np.concatenate([ad, b.data], axis=-2)
    a_shape = a.shape

    def backward(g):
        return _unbroadcast(g[..., :p, :], a_shape), g[..., p:, :]

    return _make(out, (a, b), backward)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the token axis (-2)."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop, :] = g
        return (full,)

    return _make(a.data[..., start:stop, :], (a,), backward)


def pick(a: Tensor, index) -> Tensor:
    """Select one entry per row along the last axis."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise DimensionError(f"pick: index shape {idx.shape} does not match {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    if _mac_counter is not None:
        _mac_counter.add("matmul", int(np.prod(out.shape)) * a.shape[-1])

    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        if not need_b:
            gb = None
        elif bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    if a.shape[-1] < 1:
        raise DimensionError("softmax_rows: rows must be non-empty")
    if np.isnan(x).any():
        raise NumericError("softmax_rows: NaN in input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    if np.isnan(x).any():
        raise NumericError("log_softmax: NaN in input")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layernorm: eps must be positive")
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layernorm: last axis is empty")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), backward)


# -- convolution ------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of an HWC image (or NHWC batch) with a k×k×Cin×Cout kernel."""
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"conv2d: kernel must be k×k×Cin×Cout, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    if padding not in ("same", "valid"):
        raise ContractError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    if x.ndim not in (3, 4) or x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, h, w, _ = xd.shape
    pad = k // 2 if padding == "same" else 0
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionError(f"conv2d: kernel {k}×{k} larger than padded input {h + 2 * pad}×{w + 2 * pad}")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.reshape(n * ho * wo, cin * k * k)
    wmat = kernel.data.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    if _mac_counter is not None:
        _mac_counter.add("conv2d", n * ho * wo * cin * k * k * cout)
    x_shape = x.shape
    need_x, need_k = x.requires_grad, kernel.requires_grad

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(cin, k, k, cout).transpose(1, 2, 0, 3) if need_k else None
        if not need_x:
            return None, gk
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, cin, k, k)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + hs : stride, j : j + ws : stride, :] += gcols[..., i, j]
        gx = gxp[:, pad : pad + h, pad : pad + w, :] if pad else gxp
        return gx.reshape(x_shape), gk

    return _make(out if batched else out[0], (x, kernel), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2 upsampling of the two spatial axes of [..., H, W, C]."""
    if x.ndim < 3:
        raise DimensionError(f"upsample2x: need [..., H, W, C], got {x.shape}")
    out = x.data.repeat(2, axis=-3).repeat(2, axis=-2)
    *lead, h, w, c = x.shape

    def backward(g):
        return (g.reshape(*lead, h, 2, w, 2, c).sum(axis=(-4, -2)),)

    return _make(out, (x,), backward)


# -- composite helpers --------------------------------------------------------


def cross_entropy(logits: Tensor, target, clamp: float = 1e-7) -> Tensor:
    """Mean negative log-probability of ``target`` with probabilities clamped at ``clamp``."""
    probs = clip(softmax_rows(logits), clamp, 1.0)
    return neg(mean(log(pick(probs, target))))


# -- differentiation ----------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring ancestor of a scalar ``loss``.

    Leaf gradients accumulate across calls; clear them between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # release the closure so intermediate buffers can be freed
        node._backward = None
        node._parents = ()


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-6,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps ``point`` to a scalar tensor. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. ``coords`` restricts the
    comparison to a subset of flat indices.
    """
    if eps <= 0:
        raise ContractError("finite_diff_check: eps must be positive")
    if point.dtype != np.float64:
        raise ContractError("finite_diff_check: run verification in float64")
    point.data = np.ascontiguousarray(point.data)
    point.requires_grad = True
    point.grad = None
    backward(f(point))
    analytic = np.zeros(point.shape) if point.grad is None else point.grad.reshape(point.shape).copy()
    flat = point.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(point).item()
            flat[i] = orig - eps
            fm = f(point).item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    point.grad = None
    return worst
