"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive returns a fresh array.  When a :class:`Tape` is active and at
least one input requires a gradient, the primitive appends a node holding a
closure for its analytic backward pass; ``Tape.backward`` replays the nodes in
exact reverse order and accumulates gradients additively.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
LOG_FLOOR = float(np.log(1e-12))
MASK_VALUE = -1e9


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(ArithmeticError):
    """A primitive produced NaN or Inf from finite inputs."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitives applied while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.trace: list[int] = []

    def __enter__(self) -> "Tape":
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise DimensionError("backward without an explicit gradient needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        self.trace = []
        for index in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[index]
            self.trace.append(index)
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever is left belongs to tensors no recorded node produced: leaves
        leaves = {}
        for node in self.nodes:
            for inp in node.inputs:
                leaves[id(inp)] = inp
        leaves[id(loss)] = loss
        for key, g in grads.items():
            if key in leaves:
                _accumulate(leaves[key], g)


class _TapeStack(threading.local):
    """Per-thread recording stack so concurrent inference never sees another thread's tape."""

    def __init__(self):
        self.tapes: list[Tape] = []


_STATE = _TapeStack()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (inference)."""
    saved = _STATE.tapes[:]
    _STATE.tapes.clear()
    try:
        yield
    finally:
        _STATE.tapes.extend(saved)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if np.isfinite(np.add.reduce(arr, axis=None)):
        return
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced a non-finite value")


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward: Callable) -> Tensor:
    _check_finite(op, out)
    needs = bool(_STATE.tapes) and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        _STATE.tapes[-1].nodes.append(_Node(op, inputs, result, backward))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data
    return _emit(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.dtype.type(factor)
    return _emit("scale", (x,), out, lambda g: (g * x.dtype.type(factor),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _emit("relu", (x,), out, lambda g: (g * mask,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace positions where ``mask`` is true by a constant (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.dtype.type(value), x.data)
    keep = ~mask
    return _emit("masked_fill", (x,), out, lambda g: (_unbroadcast(g * keep, x.shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape)).copy()
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    src = x.shape
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def flatten(x: Tensor, start: int = 0) -> Tensor:
    """Collapse axes ``start..`` into one (``[c,h,w] -> [c, h*w]`` with start=1)."""
    start = start % x.ndim if x.ndim else 0
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", (x,), out, lambda g: (g.transpose(inverse),))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; backward scatters additively."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0) if indices.ndim else g)
        return (gx,)

    return _emit("take", (x,), out, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, out, backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", (x,), out, backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [..., k, n]``; a 2-D right operand is shared across the batch."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine {gamma.shape}/{beta.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gamma, beta), out.astype(x.dtype, copy=False), backward)


def embedding(table: Tensor, ids, pad_id: int | None = None) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: id outside [0, {vocab})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        g2 = g.reshape(-1, table.shape[1])
        flat = ids.reshape(-1)
        if pad_id is not None:
            keep = flat != pad_id
            g2, flat = g2[keep], flat[keep]
        np.add.at(gt, flat, g2)
        return (gt,)

    return _emit("embedding", (table,), out, backward)


def cross_entropy(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over non-pad positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    valid = targets != pad_id
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: no non-pad targets")
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(denom)
    safe_t = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    clamped = picked < LOG_FLOOR
    picked = np.maximum(picked, LOG_FLOOR)
    loss = -(picked * valid).sum() / count
    p = e / denom

    def backward(g):
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        # clamped positions sit on the flat part of the floor: zero gradient
        weight = (valid & ~clamped)[..., None]
        gz = (p - onehot) * weight * (g / count)
        return (gz.astype(z.dtype, copy=False),)

    return _emit("cross_entropy", (logits,), np.asarray(loss, dtype=z.dtype), backward)


# ---------------------------------------------------------------- convolution


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """``[n,c,H,W] -> [n, c, kh, kw, ho, wo]`` gather of all receptive fields."""
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride]
    return np.ascontiguousarray(view.transpose(0, 1, 4, 5, 2, 3))


def _col2im(cols: np.ndarray, shape: tuple[int, ...], stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add receptive fields back into ``shape``."""
    n, c, kh, kw, ho, wo = cols.shape
    if kh == kw == stride and shape[2:] == (ho * kh, wo * kw):
        # non-overlapping windows tile the output exactly
        return np.ascontiguousarray(cols.transpose(0, 1, 4, 2, 5, 3)).reshape(shape)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _correlate(xd: np.ndarray, kernel: np.ndarray, stride: int, padding: int,
               groups: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw grouped cross-correlation; returns the output and the im2col matrix."""
    n, cin, h, w = xd.shape
    cout, cg, kh, kw = kernel.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(_pad(xd, padding), kh, kw, stride, ho, wo)
    cmat = cols.reshape(n, groups, cg * kh * kw, ho * wo)
    kmat = kernel.reshape(groups, cout // groups, cg * kh * kw)
    return (kmat @ cmat).reshape(n, cout, ho, wo), cmat


def _batched(x: Tensor, op: str) -> bool:
    if x.ndim == 3:
        return False
    if x.ndim == 4:
        return True
    raise DimensionError(f"{op}: expected [c,h,w] or [n,c,h,w], got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel[cout, cin/groups, kh, kw]``."""
    batched = _batched(x, "conv2d")
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, cg, kh, kw = kernel.shape
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if cin % groups or cout % groups or cg * groups != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {cg}x{groups}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} for {cout} output channels")
    out, cmat = _correlate(xd, kernel.data, stride, padding, groups)
    ho, wo = out.shape[2:]
    if bias is not None:
        out += bias.data[:, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    og = cout // groups

    def backward(g):
        g4 = g if batched else g[None]
        gm = g4.reshape(n, groups, og, ho * wo)
        gx = gk = None
        if x.requires_grad:
            if stride == 1 and padding <= min(kh, kw) - 1:
                # full correlation with the flipped, in/out-swapped kernel
                flipped = kernel.data[:, :, ::-1, ::-1].reshape(groups, og, cg, kh, kw)
                flipped = flipped.transpose(0, 2, 1, 3, 4).reshape(cin, og, kh, kw)
                gpad = _pad(g4, max(kh, kw) - 1 - padding) if kh == kw else None
                if gpad is not None:
                    gx, _ = _correlate(gpad, np.ascontiguousarray(flipped), 1, 0, groups)
            if gx is None:
                kmat = kernel.data.reshape(groups, og, cg * kh * kw)
                gcols = (np.swapaxes(kmat, -1, -2) @ gm).reshape(n, cin, kh, kw, ho, wo)
                gxp = _col2im(gcols, (n, cin, h + 2 * padding, w + 2 * padding), stride)
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            if not batched:
                gx = gx[0]
        if kernel.requires_grad:
            gk = (gm @ np.swapaxes(cmat, -1, -2)).sum(axis=0).reshape(kernel.shape)
        grads = (gx, gk)
        if bias is not None:
            grads += (g4.sum(axis=(0, 2, 3)),)
        return grads

    return _emit("conv2d", inputs, out if batched else out[0], backward)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` (zero padding); ``kernel[cin, cout, kh, kw]``."""
    batched = _batched(x, "conv_transpose2d")
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    kcin, cout, kh, kw = kernel.shape
    if stride < 1:
        raise ValueError("conv_transpose2d: stride must be >= 1")
    if kcin != cin:
        raise DimensionError(f"conv_transpose2d: input has {cin} channels, kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv_transpose2d: bias {bias.shape} for {cout} output channels")
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    kmat = kernel.data.reshape(cin, cout * kh * kw)
    xm = xd.reshape(n, cin, h * w)
    cols = (kmat.T @ xm).reshape(n, cout, kh, kw, h, w)
    out = _col2im(cols, (n, cout, ho, wo), stride)
    if bias is not None:
        out += bias.data[:, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g4 = g if batched else g[None]
        gcols = _im2col(g4, kh, kw, stride, h, w).reshape(n, cout * kh * kw, h * w)
        gx = gk = None
        if x.requires_grad:
            gx = (kmat @ gcols).reshape(n, cin, h, w)
            gx = gx if batched else gx[0]
        if kernel.requires_grad:
            gk = (xm @ np.swapaxes(gcols, -1, -2)).sum(axis=0).reshape(kernel.shape)
        grads = (gx, gk)
        if bias is not None:
            grads += (g4.sum(axis=(0, 2, 3)),)
        return grads

    return _emit("conv_transpose2d", inputs, out if batched else out[0], backward)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    batched = _batched(x, "maxpool2d")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if window < 1 or h % window or w % window:
        raise DimensionError(f"maxpool2d: {h}x{w} not divisible by window {window}")
    hh, ww = h // window, w // window
    blocks = xd.reshape(n, c, hh, window, ww, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, hh, ww, window * window)
    arg = blocks.argmax(axis=-1)  # first occurrence: lowest flat index wins ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = g if batched else g[None]
        gb = np.zeros((n, c, hh, ww, window * window), dtype=xd.dtype)
        np.put_along_axis(gb, arg[..., None], g4[..., None], axis=-1)
        gx = gb.reshape(n, c, hh, ww, window, window).transpose(0, 1, 2, 4, 3, 5)
        gx = gx.reshape(n, c, h, w)
        return (gx if batched else gx[0],)

    return _emit("maxpool2d", (x,), out if batched else out[0], backward)


# ---------------------------------------------------------------- serialization

MAGIC = b"MDTN"


def write_tensor(stream: BinaryIO, t: Tensor | np.ndarray) -> None:
    """Little-endian ``MDTN | u32 rank | u64 extents | f32 payload``."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    stream.write(MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(stream: BinaryIO) -> Tensor:
    magic = stream.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", stream.read(4))
    shape = struct.unpack(f"<{rank}Q", stream.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return Tensor(data)
