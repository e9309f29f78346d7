"""A small dense tensor library with tape-based reverse-mode autodiff.

Only the operations needed by the synthesis networks and their losses are
provided. Layout is NCHW. Operations executed while a :class:`Tape` is active
and at least one input requires a gradient are recorded; :func:`backward`
replays the tape in reverse and accumulates into leaf ``.grad`` arrays.

    with Tape():
        loss = mse_loss(model(x), y)
    backward(loss)
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if arr.ndim > 5:
            raise ShapeError(f"at most 5 dimensions supported, got {arr.ndim}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of differentiable operations; consumed by one backward."""

    _stack: list = []

    def __init__(self):
        self.records: list = []
        self.live = True

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()

    def __len__(self):
        return len(self.records)


@contextmanager
def no_grad():
    """Suspend recording, e.g. for frozen sub-networks inside a training tape."""
    Tape._stack.append(None)
    try:
        yield
    finally:
        Tape._stack.pop()


def _active_tape() -> Optional[Tape]:
    return Tape._stack[-1] if Tape._stack else None


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, tuple(parents), backward_fn))
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.live:
        raise RuntimeError("loss was not produced on a live tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, gp in zip(parents, fn(g)):
            if gp is None or not p.requires_grad:
                continue
            if p._tape is tape:
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
            elif p.grad is None:
                p.grad = np.array(gp, dtype=p.dtype, copy=True)
            else:
                p.grad = p.grad + gp
    tape.records.clear()
    tape.live = False


# -- piecewise-linear kink tracking (finite-difference oracle support) -------

_kink_log: Optional[list] = None


@contextmanager
def track_kinks():
    """Record the active/inactive pattern of every relu-like unit evaluated."""
    global _kink_log
    saved, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = saved


def _log_pattern(mask: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(mask.copy())


# -- elementwise ------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _result(a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b, dtype=a.dtype))
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_pattern(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                   lambda g: (np.where(mask, g, 0).astype(g.dtype),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    _log_pattern(mask)
    s = x.dtype.type(slope)
    return _result(np.where(mask, x.data, x.data * s), (x,),
                   lambda g: (np.where(mask, g, g * s),))


def tanh_op(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid_op(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref))
                                     if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _result(data, tensors, fn)


def concat_channels(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), fn)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _result(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g, dtype=x.dtype),))


# -- convolution ------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B*Ho*Wo, C*kh*kw) patch matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int,
            wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into an image."""
    b, c, hp, wp = shape
    patches = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros(shape, dtype=cols.dtype)
    he = stride * (ho - 1) + 1
    we = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + he:stride, j:j + we:stride] += patches[:, :, :, :, i, j].transpose(
                0, 3, 1, 2)
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) with a (Cout, Cin, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    b, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({o},)")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gk = gb = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat, (b, c, hp, wp), kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, fn)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` for a (Cin, Cout, kh, kw) kernel.

    Output spatial size is ``(H - 1) * stride + kh - 2 * padding``.
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: input {x.shape} incompatible with kernel {kernel.shape}")
    b, ci, h, w = x.shape
    _, co, kh, kw = kernel.shape
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv_transpose2d: padding removes the whole output")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape}, expected ({co},)")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, ci)
    wmat = kernel.data.reshape(ci, -1)
    full = _col2im(x2 @ wmat, (b, co, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding:padding + ho, padding:padding + wo] if padding else full
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def fn(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else g
        cols = _im2col(gp, kh, kw, stride)
        gx = gk = gb = None
        if x.requires_grad:
            gx = (cols @ wmat.T).reshape(b, h, w, ci).transpose(0, 3, 1, 2)
        if kernel.requires_grad:
            gk = (x2.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, fn)


# -- losses -----------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred)
    _check_same(pred, target, "mse_loss")
    d = pred.data - target.data
    n = d.size
    val = np.asarray(np.mean(np.square(d, dtype=np.float64)), dtype=pred.dtype)

    def fn(g):
        gp = (2.0 / n) * g * d
        return gp.astype(pred.dtype), (-gp).astype(target.dtype)

    return _result(val, (pred, target), fn)


def bce_loss(prob: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    target = _as_tensor(target, prob)
    _check_same(prob, target, "bce_loss")
    p64 = prob.data.astype(np.float64)
    inside = (p64 > BCE_CLAMP) & (p64 < 1 - BCE_CLAMP)
    p = np.clip(p64, BCE_CLAMP, 1 - BCE_CLAMP)
    t = target.data.astype(np.float64)
    n = p.size
    val = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))

    def fn(g):
        gp = g * (-t / p + (1 - t) / (1 - p)) / n
        gt = g * (np.log1p(-p) - np.log(p)) / n
        return np.where(inside, gp, 0).astype(prob.dtype), gt.astype(target.dtype)

    return _result(np.asarray(val, dtype=prob.dtype), (prob, target), fn)


def _box_sum(a: np.ndarray, k: int) -> np.ndarray:
    """Sum over every valid k x k window of the last two axes."""
    s = np.zeros(a.shape[:-2] + (a.shape[-2] + 1, a.shape[-1] + 1), dtype=np.float64)
    s[..., 1:, 1:] = a.cumsum(-2).cumsum(-1)
    return s[..., k:, k:] - s[..., :-k, k:] - s[..., k:, :-k] + s[..., :-k, :-k]


def ssim_map(x: np.ndarray, y: np.ndarray, window: int = 11, L: float = 1.0):
    """Per-window SSIM values and the window statistics (float64)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if x.ndim < 2 or x.shape[-1] < window or x.shape[-2] < window:
        raise ShapeError(f"ssim: image {x.shape[-2:]} smaller than {window}x{window} window")
    n = window * window
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mx = _box_sum(x, window) / n
    my = _box_sum(y, window) / n
    sxx = _box_sum(x * x, window) / n - mx * mx
    syy = _box_sum(y * y, window) / n - my * my
    sxy = _box_sum(x * y, window) / n - mx * my
    a1, a2 = 2 * mx * my + c1, 2 * sxy + c2
    b1, b2 = mx * mx + my * my + c1, sxx + syy + c2
    s = a1 * a2 / (b1 * b2)
    return s, (mx, my, a1, a2, b1, b2)


def _full_box_sum(a: np.ndarray, k: int) -> np.ndarray:
    pad = [(0, 0)] * (a.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
    return _box_sum(np.pad(a, pad), k)


def ssim(x: Tensor, y, window: int = 11, L: float = 1.0) -> Tensor:
    """Mean SSIM over all valid windows (uniform weights, stride 1) and channels."""
    y = _as_tensor(y, x)
    s, (mx, my, a1, a2, b1, b2) = ssim_map(x.data, y.data, window, L)
    scale = 1.0 / (s.size * window * window)

    def fn(g):
        xd = x.data.astype(np.float64)
        yd = y.data.astype(np.float64)
        den = b1 * b2
        beta = -2 * s / b2
        gamma = 2 * a1 / den
        gx = gy = None
        if x.requires_grad:
            alpha = 2 * my * a2 / den - 2 * mx * s / b1 - beta * mx - gamma * my
            gx = (_full_box_sum(alpha, window) + xd * _full_box_sum(beta, window)
                  + yd * _full_box_sum(gamma, window)) * (g * scale)
            gx = gx.astype(x.dtype)
        if y.requires_grad:
            alpha = 2 * mx * a2 / den - 2 * my * s / b1 - beta * my - gamma * mx
            gy = (_full_box_sum(alpha, window) + yd * _full_box_sum(beta, window)
                  + xd * _full_box_sum(gamma, window)) * (g * scale)
            gy = gy.astype(y.dtype)
        return gx, gy

    return _result(np.asarray(s.mean(), dtype=x.dtype), (x, y), fn)


# -- finite-difference oracle -----------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
                     kinks: Optional[np.ndarray] = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    When ``kinks`` (a bool array shaped like ``x``) is given, entries whose
    +-h perturbation flips any relu-like unit are flagged in it.
    """
    base = x.data.copy()
    grad = np.zeros(base.shape, dtype=np.float64)
    if kinks is not None:
        with track_kinks() as ref:
            f(Tensor(base))
        ref = [m.copy() for m in ref]
    flat = grad.reshape(-1)
    for i in range(base.size):
        vals = []
        for sign in (1, -1):
            probe = base.copy()
            probe.reshape(-1)[i] += sign * h
            with track_kinks() as log:
                vals.append(float(f(Tensor(probe)).data))
            if kinks is not None and any(not np.array_equal(a, b) for a, b in zip(log, ref)):
                kinks.reshape(-1)[i] = True
        flat[i] = (vals[0] - vals[1]) / (2 * h)
    return grad
