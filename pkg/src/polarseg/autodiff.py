"""Small reverse-mode differentiation engine for 4-D feature maps.

Only the operations the segmentation network needs are provided. Every op
keeps the dtype of its inputs, so the same code runs in float32 for training
and in float64 when checked against finite differences.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense array with an optional gradient buffer and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        name: str = "",
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this tensor to every ancestor that needs them."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (), backward=backward if needs else None)


def _check_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects a (batch, channels, height, width) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution kernels (pure numpy, shared by conv2d and transposed_conv2d)
# ---------------------------------------------------------------------------

def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def resolve_padding(padding, h: int, w: int, kh: int, kw: int, stride: int) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right) zero padding for ``padding``."""
    if padding == "same":
        return (*_same_pads(h, kh, stride), *_same_pads(w, kw, stride))
    if padding == "valid":
        return (0, 0, 0, 0)
    if isinstance(padding, int) and padding >= 0:
        return (padding,) * 4
    raise ValueError(f"padding must be 'same', 'valid' or a non-negative int, got {padding!r}")


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pads) -> np.ndarray:
    top, bottom, left, right = pads
    if any(pads):
        x = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pads) -> np.ndarray:
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride, pads)  # (B, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv_input_grad(dout: np.ndarray, w: np.ndarray, x_shape, stride: int, pads) -> np.ndarray:
    """Adjoint of :func:`conv_forward` with respect to its input."""
    b, c, h, wd = x_shape
    top, bottom, left, right = pads
    kh, kw = w.shape[2:]
    ho, wo = dout.shape[2:]
    cols = np.tensordot(dout, w, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    hp, wp = h + top + bottom, wd + left + right
    dxp = np.zeros((b, c, hp, wp), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[..., i, j]
    return dxp[:, :, top:top + h, left:left + wd]


def conv_weight_grad(x: np.ndarray, dout: np.ndarray, w_shape, stride: int, pads) -> np.ndarray:
    kh, kw = w_shape[2:]
    win = _windows(x, kh, kw, stride, pads)
    return np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation. ``w`` has shape (out_channels, in_channels, kh, kw)."""
    _check_4d(x, "conv2d")
    if w.data.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with kernel shape {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel shape {w.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    kh, kw = w.shape[2:]
    pads = resolve_padding(padding, x.shape[2], x.shape[3], kh, kw, stride)
    if x.shape[2] + pads[0] + pads[1] < kh or x.shape[3] + pads[2] + pads[3] < kw:
        raise ShapeError(f"conv2d: input shape {x.shape} smaller than kernel shape {w.shape}")
    out = conv_forward(x.data, w.data, stride, pads)
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(conv_input_grad(g, w.data, x.shape, stride, pads))
        if w.requires_grad:
            w._accumulate(conv_weight_grad(x.data, g, w.shape, stride, pads))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return _result(out, parents, backward)


def transposed_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Adjoint of a valid-padded :func:`conv2d` sharing kernel ``w``.

    ``w`` keeps the conv layout (C_x, C_out, kh, kw), so the op maps C_x
    channels to C_out channels and an H×W map to ((H-1)·stride+kh)×((W-1)·stride+kw).
    """
    _check_4d(x, "transposed_conv2d")
    if w.data.ndim != 4 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"transposed_conv2d: input shape {x.shape} incompatible with kernel shape {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"transposed_conv2d: bias shape {b.shape} does not match kernel shape {w.shape}")
    if stride < 1:
        raise ValueError(f"transposed_conv2d: stride must be >= 1, got {stride}")
    bsz, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    out_shape = (bsz, w.shape[1], (h - 1) * stride + kh, (wd - 1) * stride + kw)
    pads = (0, 0, 0, 0)
    out = conv_input_grad(x.data, w.data, out_shape, stride, pads)
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(conv_forward(g, w.data, stride, pads))
        if w.requires_grad:
            w._accumulate(conv_weight_grad(g, x.data, w.shape, stride, pads))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return _result(out, parents, backward)


def avg_pool2d(x: Tensor, window: int = 2) -> Tensor:
    _check_4d(x, "avg_pool2d")
    bsz, c, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"avg_pool2d: spatial dims {(h, w)} not divisible by window {window}")
    out = x.data.reshape(bsz, c, h // window, window, w // window, window).mean(axis=(3, 5))

    def backward(g):
        scale = x.data.dtype.type(1.0 / (window * window))
        up = np.repeat(np.repeat(g, window, axis=2), window, axis=3)
        x._accumulate(up * scale)

    return _result(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each pixel ``factor`` times along both spatial axes."""
    _check_4d(x, "upsample_nearest")
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        bsz, c, h, w = x.shape
        x._accumulate(g.reshape(bsz, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        x._accumulate(g * mask)

    return _result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # saturated values would round to exactly 0 or 1; keep the open interval
    fi = np.finfo(out.dtype)
    out = np.clip(out, fi.tiny, 1 - fi.epsneg)

    def backward(g):
        x._accumulate(g * out * (1 - out))

    return _result(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} differ outside the channel axis")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return _result(out, (a, b), backward)


def mean_fuse(maps: Sequence[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of equally shaped tensors."""
    maps = list(maps)
    if not maps:
        raise ValueError("mean_fuse needs at least one map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ShapeError(f"mean_fuse: shape {m.shape} differs from {shape}")
    out = maps[0].data.copy()
    for m in maps[1:]:
        out += m.data
    out /= len(maps)

    def backward(g):
        share = g / len(maps)
        for m in maps:
            if m.requires_grad:
                m._accumulate(share)

    return _result(out, maps, backward)


def he_normal(shape, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Kernel init with variance 2 / fan_in, fan_in = in_channels·kh·kw."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
