"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation records a node holding its parent tensors and a
backward closure. ``backward`` linearises the reachable nodes into a tape in
topological order and walks it once in reverse, accumulating gradients into
leaf tensors that have ``requires_grad`` set.
"""
from __future__ import annotations

import builtins
import contextlib
import functools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


def set_precision(name: str) -> None:
    """Select the floating point width used for new tensors ("f32" or "f64")."""
    global _default_dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    _default_dtype = _PRECISIONS[name]


def get_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    global _default_dtype
    previous = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Node:
    __slots__ = ("parents", "backward_fn", "kind")

    def __init__(self, parents: tuple["Tensor", ...], backward_fn: Callable, kind: str):
        self.parents = parents
        self.backward_fn = backward_fn
        self.kind = kind


class Tensor:
    """An n-dimensional array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else _default_dtype
        arr = np.asarray(arr, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._consumed = False

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or _default_dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, kind: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(tuple(parents), backward_fn, kind)
    return out


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the operations reachable from a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in tensor._node.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("this loss has already been back-propagated; its tape is consumed")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(tape.nodes):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        node = tensor._node
        if node is None:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise AssertionError(f"{node.kind}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for tensor in tape.nodes:
        if tensor._node is not None:
            tensor._node = None
            tensor._consumed = True


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_broadcast(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    padded = (1,) * (big.ndim - small.ndim) + small.shape
    ok = all(s in (1, t) for s, t in zip(padded, big.shape)) and builtins.sum(s != 1 for s in padded) <= 1
    if not ok:
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape} (only bias-style broadcasting is supported)")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (s, g) in enumerate(zip(shape, grad.shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), bw, "relu")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make(out, (x,), bw, "sqrt")


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries; the gradient at the origin is taken as zero."""
    norm = np.sqrt(np.sum(x.data.astype(np.float64) ** 2)).astype(x.dtype)

    def bw(g):
        if norm == 0:
            return (np.zeros_like(x.data),)
        return ((g / norm) * x.data,)

    return _make(np.asarray(norm, dtype=x.dtype), (x,), bw, "l2_norm")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def bw(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes), dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def bw(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return _make(np.asarray(x.data.mean(axis=axes), dtype=x.dtype), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop of an (N, C, H, W) tensor."""
    H, W = x.shape[-2:]
    if height < 1 or width < 1 or top < 0 or left < 0 or top + height > H or left + width > W:
        raise ValueError(f"crop: rectangle (top={top}, left={left}, h={height}, w={width}) outside image {H}x{W}")
    sl = (Ellipsis, slice(top, top + height), slice(left, left + width))

    def bw(g):
        out = np.zeros_like(x.data)
        out[sl] = g
        return (out,)

    return _make(x.data[sl].copy(), (x,), bw, "crop")


def pad(x: Tensor, padding: int | tuple[int, int, int, int]) -> Tensor:
    """Zero padding of the two trailing axes; ``padding`` = (top, bottom, left, right) or one int."""
    if isinstance(padding, int):
        padding = (padding,) * 4
    t, b, l, r = padding
    if min(padding) < 0:
        raise ValueError(f"pad: negative padding {padding}")
    widths = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    H, W = x.shape[-2:]

    def bw(g):
        return (g[..., t : t + H, l : l + W].copy(),)

    return _make(np.pad(x.data, widths), (x,), bw, "pad")


# ---------------------------------------------------------------------------
# Linear algebra and layers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, bw, "linear")


def _im2col(xh: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix of a channels-last (N, H, W, C) array, rows ordered (n, y, x), columns (i, j, c)."""
    N, H, W, C = xh.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    s0, s1, s2, s3 = xh.strides
    view = np.lib.stride_tricks.as_strided(
        xh, (N, Ho, Wo, kh, kw, C), (s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False
    )
    return view.reshape(N * Ho * Wo, kh * kw * C), Ho, Wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (out, in, kh, kw) weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if C != Ci:
        raise ValueError(f"conv2d: input has {C} channels but weight expects {Ci}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    # work channels-last so patch rows are contiguous runs of C values
    Hp, Wp = H + 2 * padding, W + 2 * padding
    xh = np.zeros((N, Hp, Wp, C), dtype=x.dtype)
    xh[:, padding : padding + H, padding : padding + W, :] = x.data.transpose(0, 2, 3, 1)
    cols, Ho, Wo = _im2col(xh, kh, kw, stride)
    wm = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(Co, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gm.T @ cols).reshape(Co, kh, kw, C).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            dcols = (gm @ wm).reshape(N, Ho, Wo, kh, kw, C)
            dxh = np.zeros((N, Hp, Wp, C), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxh[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(dxh[:, padding : padding + H, padding : padding + W, :].transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, bw, "conv2d")


def avgpool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling (stride == kernel, trailing rows/cols dropped)."""
    N, C, H, W = x.shape
    Ho, Wo = H // kernel, W // kernel
    if Ho < 1 or Wo < 1:
        raise ValueError(f"avgpool2d: kernel {kernel} larger than input {H}x{W}")
    view = x.data[:, :, : Ho * kernel, : Wo * kernel].reshape(N, C, Ho, kernel, Wo, kernel)
    scale = 1.0 / (kernel * kernel)

    def bw(g):
        out = np.zeros_like(x.data)
        block = np.broadcast_to((g * scale)[:, :, :, None, :, None], (N, C, Ho, kernel, Wo, kernel))
        out[:, :, : Ho * kernel, : Wo * kernel] = block.reshape(N, C, Ho * kernel, Wo * kernel)
        return (out,)

    return _make(view.mean(axis=(3, 5)).astype(x.dtype), (x,), bw, "avgpool2d")


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Per-channel sum over (N, H, W) that does not depend on the batch order.

    Each sample is reduced on its own, then the per-sample partials are added
    with an exactly rounded sum, so permuting the batch gives identical bits.
    """
    partial = a.sum(axis=(2, 3), dtype=np.float64)
    return np.array([math.fsum(partial[:, c]) for c in range(a.shape[1])])


def channel_mean(x: Tensor) -> Tensor:
    """Per-channel mean over (N, H, W) of an NCHW tensor."""
    N, C, H, W = x.shape
    count = N * H * W

    def bw(g):
        return (np.broadcast_to((g / count).reshape(1, C, 1, 1), x.shape).astype(x.dtype),)

    return _make((_channel_sum(x.data) / count).astype(x.dtype), (x,), bw, "channel_mean")


def channel_var(x: Tensor) -> Tensor:
    """Per-channel biased variance over (N, H, W) of an NCHW tensor."""
    N, C, H, W = x.shape
    count = N * H * W
    centered = x.data - (_channel_sum(x.data) / count).astype(x.dtype).reshape(1, C, 1, 1)

    def bw(g):
        return (centered * (2.0 / count) * g.reshape(1, C, 1, 1),)

    return _make((_channel_sum(centered**2) / count).astype(x.dtype), (x,), bw, "channel_var")


def batchnorm2d(x: Tensor, mean_: Tensor, var: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """``(x - mean) / sqrt(var + eps) * weight + bias`` with per-channel statistics.

    The statistics are ordinary inputs: pass ``channel_mean(x)``/``channel_var(x)``
    for batch normalisation or constant running buffers for inference.
    """
    C = x.shape[1]
    for name, t in (("mean", mean_), ("var", var), ("weight", weight), ("bias", bias)):
        if t.shape != (C,):
            raise ValueError(f"batchnorm2d: {name} shape {t.shape} != ({C},)")
    m = mean_.data.reshape(1, C, 1, 1)
    inv = (1.0 / np.sqrt(var.data + eps)).astype(x.dtype).reshape(1, C, 1, 1)
    w = weight.data.reshape(1, C, 1, 1)
    centered = x.data - m
    xhat = centered * inv
    out = xhat * w + bias.data.reshape(1, C, 1, 1)

    def bw(g):
        gw_full = g * w
        gx = gw_full * inv if x.requires_grad else None
        gm = -(gw_full * inv).sum(axis=(0, 2, 3)) if mean_.requires_grad else None
        gv = (gw_full * centered).sum(axis=(0, 2, 3)) * (-0.5) * (inv.reshape(C) ** 3) if var.requires_grad else None
        gweight = (g * xhat).sum(axis=(0, 2, 3)) if weight.requires_grad else None
        gbias = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gm, gv, gweight, gbias

    return _make(out.astype(x.dtype), (x, mean_, var, weight, bias), bw, "batchnorm2d")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out.astype(x.dtype), (x,), bw, "log_softmax")


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=4096)
def _resize_matrix_cached(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for j in range(n_out):
        src = max((j + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        mat[j, i0] += 1.0 - frac
        mat[j, i1] += frac
    mat.setflags(write=False)
    return mat.astype(dtype_name)


def resize_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """1-D linear interpolation matrix with half-pixel (align-corners=False) sampling."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize: sizes must be positive, got {n_in} -> {n_out}")
    return _resize_matrix_cached(n_in, n_out, np.dtype(dtype or _default_dtype).name)


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the two trailing axes to ``size`` = (H, W)."""
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"bilinear_resize: target size must be positive, got {size}")
    H, W = x.shape[-2:]
    ry = resize_matrix(H, oh, x.dtype)
    rx = resize_matrix(W, ow, x.dtype)
    out = ry @ x.data @ rx.T

    def bw(g):
        return (ry.T @ g @ rx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "bilinear_resize")


def resized_crop(x: Tensor, boxes: Sequence[tuple[int, int, int, int, bool]], size: tuple[int, int]) -> Tensor:
    """Crop each image of an NCHW batch to its own box, optionally mirror it, and resize.

    ``boxes[i]`` is (top, left, height, width, hflip). Equivalent to ``crop``
    followed by ``bilinear_resize`` per image, fused for speed.
    """
    N, C, H, W = x.shape
    if len(boxes) != N:
        raise ValueError(f"resized_crop: {len(boxes)} boxes for a batch of {N}")
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"resized_crop: target size must be positive, got {size}")
    mats = []
    out = np.empty((N, C, oh, ow), dtype=x.dtype)
    for i, (top, left, h, w, flip) in enumerate(boxes):
        if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
            raise ValueError(f"resized_crop: box {i} (top={top}, left={left}, h={h}, w={w}) outside image {H}x{W}")
        ry = resize_matrix(h, oh, x.dtype)
        rx = resize_matrix(w, ow, x.dtype)
        if flip:
            rx = rx[::-1]
        mats.append((ry, rx))
        out[i] = ry @ x.data[i, :, top : top + h, left : left + w] @ rx.T

    def bw(g):
        gx = np.zeros_like(x.data)
        for i, (top, left, h, w, _) in enumerate(boxes):
            ry, rx = mats[i]
            gx[i, :, top : top + h, left : left + w] += ry.T @ g[i] @ rx
        return (gx,)

    return _make(out, (x,), bw, "resized_crop")


# ---------------------------------------------------------------------------
# Generic dispatch
# ---------------------------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "avgpool2d": avgpool2d,
    "linear": linear,
    "batchnorm2d": batchnorm2d,
    "log_softmax": log_softmax,
    "bilinear_resize": bilinear_resize,
    "crop": crop,
    "pad": pad,
    "sum": sum,
    "mean": mean,
}


def forward_op(kind: str, inputs: Iterable[Tensor], **attrs) -> Tensor:
    """Apply the operator named ``kind`` to ``inputs`` with op-specific ``attrs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)
