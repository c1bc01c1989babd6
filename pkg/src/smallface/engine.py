"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the detector graph needs are provided: 2-D convolution,
max pooling (ceil mode), ReLU, bilinear resampling, elementwise add and a
grouped channel softmax. Tensors are ``[C, H, W]``; there is no batch axis
and no implicit broadcasting.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order and frees it afterwards.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_op_counters: list[Counter] = []
_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (inference)."""
    prev = getattr(_state, "grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def count_ops():
    """Count op invocations by name inside the block (per-thread use only)."""
    counter: Counter = Counter()
    _op_counters.append(counter)
    try:
        yield counter
    finally:
        _op_counters.remove(counter)


def _tick(name: str) -> None:
    for c in _op_counters:
        c[name] += 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every upstream ``requires_grad`` tensor.

        With no ``grad`` the tensor must be a scalar (a loss). The graph is
        released afterwards, so a second call raises.
        """
        if self._backward is None:
            raise GraphError("backward called on a tensor with no recorded forward graph")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(_toposort(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(p):
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
        _release(self)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _release(root: Tensor) -> None:
    for node in _toposort(root):
        node._parents = ()
        node._backward = None


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _tick(op)
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _check_chw(x: Tensor, what: str) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{what} expects a [C, H, W] tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding, weights ``[K, C, k, k]``."""
    _check_chw(x, "conv2d")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weight must be [K, C, k, k], got {w.shape}")
    K, C, k, _ = w.shape
    if x.shape[0] != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (K,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match weight {w.shape}")
    _, H, W = x.shape
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, weight {w.shape}, "
                         f"stride {stride}, padding {padding}")
    if k == 1 and padding == 0:
        xs = x.data[:, ::stride, ::stride]
        cols = xs.reshape(C, -1)
    else:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
        cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * k * k, Ho * Wo)
    wmat = w.data.reshape(K, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(K, Ho, Wo)

    def backward(g: np.ndarray):
        g2 = g.reshape(K, -1)
        dw = (g2 @ cols.T).reshape(w.shape) if _needs_grad(w) else None
        db = g2.sum(axis=1) if b is not None and _needs_grad(b) else None
        dx = None
        if _needs_grad(x) and stride == 1 and k > 1 and padding <= k - 1:
            # stride-1 input gradient is a correlation of the padded output gradient with flipped weights
            q = k - 1 - padding
            gp = np.pad(g, ((0, 0), (q, q), (q, q))) if q else g
            gwin = sliding_window_view(gp, (k, k), axis=(1, 2))[:, :H, :W]
            gcols = np.ascontiguousarray(gwin.transpose(0, 3, 4, 1, 2)).reshape(K * k * k, H * W)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
            dx = (wflip @ gcols).reshape(C, H, W)
        elif _needs_grad(x):
            dcols = wmat.T @ g2
            if k == 1 and padding == 0:
                if stride == 1:
                    dx = dcols.reshape(C, H, W)
                else:
                    dx = np.zeros((C, H, W))
                    dx[:, ::stride, ::stride][:, :Ho, :Wo] = dcols.reshape(C, Ho, Wo)
            else:
                dcols = dcols.reshape(C, k, k, Ho, Wo)
                dxp = np.zeros((C, H + 2 * padding, W + 2 * padding))
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
                dx = dxp[:, padding:padding + H, padding:padding + W]
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, "conv2d", parents, backward)


# ---------------------------------------------------------------------------
# pooling

def pool_output_size(size: int, kernel: int, stride: int, padding: int = 0) -> int:
    """Ceil-mode output size; the last window must start inside the (left-padded) input."""
    out = -(-(size + 2 * padding - kernel) // stride) + 1
    if (out - 1) * stride >= size + padding:
        out -= 1
    return out


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Ceil-mode max pooling; windows hanging off the border see only real pixels."""
    _check_chw(x, "maxpool2d")
    C, H, W = x.shape
    if H < kernel or W < kernel:
        raise ShapeError(f"maxpool2d kernel {kernel} larger than input {x.shape}")
    Ho = pool_output_size(H, kernel, stride)
    Wo = pool_output_size(W, kernel, stride)
    Hp = (Ho - 1) * stride + kernel
    Wp = (Wo - 1) * stride + kernel
    xp = np.full((C, Hp, Wp), -np.inf)
    xp[:, :H, :W] = x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    flat = win.reshape(C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        dy, dx_ = np.divmod(arg, kernel)
        rows = np.arange(Ho)[None, :, None] * stride + dy
        cols = np.arange(Wo)[None, None, :] * stride + dx_
        chans = np.broadcast_to(np.arange(C)[:, None, None], arg.shape)
        dx = np.zeros((C, Hp, Wp))
        np.add.at(dx, (chans, rows, cols), g)
        return (dx[:, :H, :W],)

    return _result(out, "maxpool2d", (x,), backward)


# ---------------------------------------------------------------------------
# elementwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


# ---------------------------------------------------------------------------
# bilinear resampling

def interpolation_matrix(in_size: int, out_size: int, align_corners: bool = True,
                         scale: float | None = None) -> np.ndarray:
    """Row-stochastic ``(out_size, in_size)`` matrix of 1-D linear interpolation weights.

    ``align_corners`` maps the first/last output sample onto the first/last
    input sample. Otherwise pixel centres are matched under ``scale``
    (output/input, defaulting to the size ratio) and samples are clamped at
    the border.
    """
    if out_size == in_size and scale is None:
        return np.eye(in_size)
    if align_corners:
        if out_size == 1 or in_size == 1:
            src = np.zeros(out_size)
        else:
            src = np.arange(out_size) * ((in_size - 1) / (out_size - 1))
    else:
        s = out_size / in_size if scale is None else scale
        src = np.clip((np.arange(out_size) + 0.5) / s - 0.5, 0, in_size - 1)
    lo = np.clip(np.floor(src).astype(np.int64), 0, in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resample_bilinear(x: Tensor, out_h: int, out_w: int, align_corners: bool = True,
                      scale: float | None = None) -> Tensor:
    _check_chw(x, "resample_bilinear")
    _, h, w = x.shape
    ry = interpolation_matrix(h, out_h, align_corners, scale)
    rx = interpolation_matrix(w, out_w, align_corners, scale)
    out = np.einsum("oh,chw,pw->cop", ry, x.data, rx, optimize=True)
    back = lambda g: (np.einsum("oh,cop,pw->chw", ry, g, rx, optimize=True),)
    return _result(out, "upsample_bilinear", (x,), back)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear upsampling to ``(out_h, out_w)``."""
    _check_chw(x, "upsample_bilinear")
    if out_h < x.shape[1] or out_w < x.shape[2]:
        raise ShapeError(f"upsample_bilinear cannot shrink {x.shape} to ({out_h}, {out_w})")
    return resample_bilinear(x, out_h, out_w, align_corners=True)


# ---------------------------------------------------------------------------
# softmax

def softmax2d(x: Tensor, group: int | None = None) -> Tensor:
    """Softmax over consecutive channel groups of size ``group`` at every pixel.

    ``group=None`` normalises over all channels.
    """
    _check_chw(x, "softmax2d")
    C, H, W = x.shape
    g = C if group is None else group
    if C % g:
        raise ShapeError(f"softmax2d group {g} does not divide {C} channels")
    z = x.data.reshape(C // g, g, H, W)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def backward(gr: np.ndarray):
        gr = gr.reshape(p.shape)
        return ((p * (gr - (gr * p).sum(axis=1, keepdims=True))).reshape(C, H, W),)

    return _result(p.reshape(C, H, W), "softmax2d", (x,), backward)


# ---------------------------------------------------------------------------
# reductions used by tests and losses

def sum_all(x: Tensor) -> Tensor:
    return _result(np.array(x.data.sum()), "sum", (x,), lambda g: (np.full(x.shape, float(g)),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(weights * x)`` for a fixed array of weights; handy as a probe loss."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum shape mismatch: {x.shape} vs {weights.shape}")
    return _result(np.array((x.data * weights).sum()), "sum", (x,), lambda g: (float(g) * weights,))


def custom_scalar(value: float, parents: Sequence[Tensor], grads: Sequence[np.ndarray | None],
                  op: str = "loss") -> Tensor:
    """A scalar node whose gradients w.r.t. ``parents`` were computed by the caller."""
    grads = tuple(grads)

    def backward(g: np.ndarray):
        s = float(g)
        return tuple(None if gr is None else s * gr for gr in grads)

    return _result(np.array(float(value)), op, tuple(parents), backward)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
