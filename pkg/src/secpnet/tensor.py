"""Dense NCHW tensors with reverse-mode differentiation.

Every operation the segmentation networks need lives here as a plain
function taking and returning :class:`Tensor` objects. Each op records
a closure that maps the output gradient to gradients for its inputs;
:meth:`Tensor.backward` walks the graph in reverse topological order.

Two numeric precisions are available: ``"train"`` (float32, the default)
and ``"check"`` (float64). :func:`grad_check` always runs in ``"check"``.
"""

from __future__ import annotations

import contextlib
import functools
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, DataError, NumericalError, UsageError

PRECISIONS = {"train": np.float32, "check": np.float64}

_precision = contextvars.ContextVar("secpnet_precision", default="train")
_grad_enabled = contextvars.ContextVar("secpnet_grad_enabled", default=True)
# when set, relu and max_pool append their branch decisions here
_kink_log = contextvars.ContextVar("secpnet_kink_log", default=None)


def default_dtype():
    return PRECISIONS[_precision.get()]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    if name not in PRECISIONS:
        raise ConfigurationError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    token = _precision.set(name)
    try:
        yield PRECISIONS[name]
    finally:
        _precision.reset(token)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation.

    Floating ndarrays keep their dtype; anything else is converted to the
    active precision. Gradients are only retained on leaf tensors.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if any(n < 1 for n in arr.shape):
            raise ConfigurationError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self._requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        self._requires_grad = bool(value)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # arithmetic, enough for losses written by hand in tests and demos
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise UsageError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name.

    A frozen parameter reports ``requires_grad == False`` so backward never
    computes or stores a gradient for it, and the optimizer skips it.
    """

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.frozen = bool(frozen)

    @property
    def requires_grad(self) -> bool:
        return not self.frozen

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        self.frozen = not value

    def __repr__(self) -> str:
        flag = ", frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype}{flag})"


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out._requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum()), (a,), backward, "sum")


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _result(np.asarray(a.data.mean()), (a,), backward, "mean")


def _log_kinks(decisions: np.ndarray) -> None:
    log = _kink_log.get()
    if log is not None:
        log.append(decisions.copy())


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_kinks(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


# ---------------------------------------------------------------- layers

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) via im2col + one GEMM."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ConfigurationError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"conv2d needs a square odd kernel, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and padding >= 0")
    k, s, p = kh, stride, padding
    span_h, span_w = h + 2 * p - k, w + 2 * p - k
    if span_h < 0 or span_w < 0 or span_h % s or span_w % s:
        raise ConfigurationError(
            f"conv2d: output extent ({h}+2*{p}-{k})/{s}+1 is not a positive integer"
        )
    ho, wo = span_h // s + 1, span_w // s + 1

    if p:
        xp = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p:p + h, p:p + w] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    if k == 1:
        cols = xp[:, :, ::s, ::s].transpose(0, 2, 3, 1).reshape(n * ho * wo, cin)
    else:
        sn, sc, sh, sw = xp.strides
        win = as_strided(xp, (n, ho, wo, cin, k, k), (sn, sh * s, sw * s, sc, sh, sw), writeable=False)
        cols = win.reshape(n * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pool; ties route the gradient to the first element in row-major order."""
    if x.ndim != 4:
        raise ConfigurationError(f"max_pool2x2 expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max_pool2x2 needs even extents, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)[..., None]
    _log_kinks(idx)
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(out, (x,), backward, "max_pool2x2")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Dense (n_out, n_in) interpolation map, half-pixel centres (align_corners=False).

    The returned array is cached and read-only.
    """
    return _bilinear_matrix(n_in, n_out, np.dtype(dtype))


@functools.lru_cache(maxsize=256)
def _bilinear_matrix(n_in, n_out, dtype):
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"upsample_bilinear2x expects NCHW input, got {x.shape}")
    _, _, h, w = x.shape
    ah = bilinear_matrix(h, 2 * h, x.dtype)
    aw = bilinear_matrix(w, 2 * w, x.dtype)
    out = ah @ (x.data @ aw.T)

    def backward(g):
        return (ah.T @ (g @ aw),)

    return _result(out, (x,), backward, "upsample_bilinear2x")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "linear")


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each (n, c) feature map by ``scale[n, c]``."""
    if x.ndim != 4 or scale.shape != x.shape[:2]:
        raise ConfigurationError(f"channel_scale: scale {scale.shape} does not match {x.shape[:2]}")
    s = scale.data[:, :, None, None]

    def backward(g):
        return g * s, (g * x.data).sum(axis=(2, 3))

    return _result(x.data * s, (x, scale), backward, "channel_scale")


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) < 2:
        raise ConfigurationError("concat_channels needs at least two tensors")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigurationError(f"concat_channels: extents {t.shape} incompatible with {ref}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=1))

    return _result(np.concatenate([t.data for t in tensors], axis=1), tensors, backward, "concat_channels")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list:
    """Inverse of :func:`concat_channels`."""
    if sum(sizes) != x.shape[1]:
        raise ConfigurationError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for size in sizes:
        lo, hi = start, start + size

        def backward(g, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        out.append(_result(np.ascontiguousarray(x.data[:, lo:hi]), (x,), backward, "split_channels"))
        start = hi
    return out


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 (classes) of an NCHW tensor."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), backward, "softmax_channels")


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over all pixels of ``-log softmax(logits)[target]``."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if logits.ndim != 4:
        raise ConfigurationError(f"softmax_cross_entropy expects NKHW logits, got {logits.shape}")
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ConfigurationError(f"target shape {target.shape} != {(n, h, w)}")
    if not np.issubdtype(target.dtype, np.integer):
        raise DataError(f"target must hold integer labels, got dtype {target.dtype}")
    if target.size and (target.min() < 0 or target.max() >= k):
        bad = target.min() if target.min() < 0 else target.max()
        raise DataError(f"target label {int(bad)} outside 0..{k - 1}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    t = target.astype(np.intp)[:, None]
    picked = np.take_along_axis(z, t, axis=1) - np.log(denom)
    count = n * h * w
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = e / denom
        np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1, axis=1)
        return (grad * (g / count),)

    return _result(loss, (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------- checking

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    kinks_skipped: int


def _eval_recording(fn):
    log = []
    token = _kink_log.set(log)
    try:
        value = float(fn().data)
    finally:
        _kink_log.reset(token)
    return value, log


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_details(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_per_tensor: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare backprop gradients against central differences.

    ``fn`` rebuilds the scalar graph from ``params`` on every call. Each
    checked element contributes ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor`` is 1e-3 of the largest gradient magnitude seen (and at least
    1e-10), so elements whose gradient is numerically zero are judged on an
    absolute scale. ``max_per_tensor`` samples that many coordinates per
    tensor instead of sweeping all of them.

    A coordinate whose +eps and -eps evaluations take different relu or
    max-pool branches straddles a point where the function is not
    differentiable; it is skipped and counted in ``kinks_skipped``.

    Parameters are promoted to float64 for the duration of the check and
    restored afterwards. Frozen parameters must come back with a gradient
    of exactly zero.
    """
    params = list(params)
    saved = [p.data for p in params]
    rng = np.random.default_rng(seed)
    skipped = 0
    try:
        with precision("check"):
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None
            out = fn()
            if out.data.size != 1:
                raise UsageError(f"grad_check needs a scalar-valued graph, got shape {out.shape}")
            out.backward()
            analytic, numeric = [], []
            for p in params:
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                if not p.requires_grad:
                    if np.any(g != 0):
                        raise NumericalError(f"frozen tensor {getattr(p, 'name', '')!r} received a gradient")
                    continue
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_per_tensor is not None and flat.size > max_per_tensor:
                    idx = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
                keep, num = [], []
                with no_grad():
                    for i in idx:
                        orig = flat[i]
                        flat[i] = orig + eps
                        fp, branches_p = _eval_recording(fn)
                        flat[i] = orig - eps
                        fm, branches_m = _eval_recording(fn)
                        flat[i] = orig
                        if not _same_branches(branches_p, branches_m):
                            skipped += 1
                            continue
                        keep.append(i)
                        num.append((fp - fm) / (2 * eps))
                analytic.append(g.reshape(-1)[np.asarray(keep, dtype=np.intp)])
                numeric.append(np.asarray(num, dtype=np.float64))
        a = np.concatenate(analytic) if analytic else np.zeros(0)
        n = np.concatenate(numeric) if numeric else np.zeros(0)
        if a.size == 0:
            return GradCheckResult(0.0, 0, skipped)
        floor = max(1e-3 * max(np.abs(a).max(), np.abs(n).max()), 1e-10)
        err = float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())
        return GradCheckResult(err, int(a.size), skipped)
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None


def grad_check(fn, params, eps=1e-5, max_per_tensor=None, seed=0) -> float:
    """Worst relative error of backprop against central differences;
    see :func:`grad_check_details`."""
    return grad_check_details(fn, params, eps, max_per_tensor, seed).max_rel_error
