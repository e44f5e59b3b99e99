"""Dense-array core with a tape-based reverse-mode differentiator.

Only the operations needed by the density pipeline are provided: dilated
2-D convolution, bilinear resampling, 2x2 max pooling, channel concatenation,
pointwise arithmetic and reductions.

Recording is opt-in. Operations executed inside ``with Tape() as tape:`` whose
inputs are tracked (``requires_grad=True`` or produced by an earlier recorded
operation) append a node to the tape; outside a tape they just compute values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "ConvSpec",
    "backward",
    "as_tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_const",
    "neg",
    "relu",
    "square",
    "sqrt",
    "clamp_min",
    "power",
    "tsum",
    "tmean",
    "concat",
    "reshape",
    "conv2d",
    "bilinear_upsample_x2",
    "resize_bilinear",
    "max_pool2x2",
    "mix_channels",
]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class Tensor:
    """A float array plus a flag telling the tape to track it."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is already a topological
    order, so the reverse sweep is a plain backwards walk.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        for t in inputs:
            if t.requires_grad:
                self._tracked.setdefault(id(t), t)
        self._tracked[id(out)] = out
        self.nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        return backward(self, loss, wrt)


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep: gradient of the scalar ``loss`` for each marked tensor.

    ``wrt`` defaults to every ``requires_grad`` tensor seen by the tape. Marked
    tensors that ``loss`` does not depend on get a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if id(loss) not in tape._tracked:
        raise ValueError("loss was not produced on this tape")
    if wrt is None:
        targets = [t for t in tape._tracked.values() if t.requires_grad]
    else:
        targets = list(wrt)
        for t in targets:
            if id(t) not in tape._tracked:
                raise ValueError(f"{t!r} is not on the tape")

    keep = {id(t) for t in targets}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.get(id(out)) if id(out) in keep else grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not tape.is_tracked(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=inp.data.dtype, copy=True).reshape(inp.shape)
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in targets}


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(value)
    if _ACTIVE:
        tape = _ACTIVE[-1]
        if any(tape.is_tracked(t) for t in inputs):
            tape._record(out, inputs, vjp)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# Pointwise
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    x, y = a.data, b.data
    return _emit(x * y, (a, b), lambda g: (g * y, g * x))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    x, y = a.data, b.data
    q = x / y
    return _emit(q, (a, b), lambda g: (g / y, -g * q / y))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return _emit(a.data + float(c), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return _emit(r, (a,), lambda g: (g / (2.0 * r),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); the gradient is zero where the clamp is active."""
    keep = a.data >= lo
    return _emit(np.where(keep, a.data, lo).astype(a.dtype, copy=False), (a,), lambda g: (g * keep,))


def power(a: Tensor, p: float) -> Tensor:
    """a ** p for a constant exponent; ``a`` must be positive unless p is integral."""
    x = a.data
    y = x**p
    return _emit(y, (a,), lambda g: (g * p * x ** (p - 1.0),))


_ELEMENTWISE = {
    "add": lambda a, b: add(a, b) if isinstance(b, Tensor) else add_const(a, b),
    "sub": lambda a, b: sub(a, b) if isinstance(b, Tensor) else add_const(a, -b),
    "mul": lambda a, b: mul(a, b) if isinstance(b, Tensor) else scale(a, b),
    "scale": lambda a, b: scale(a, b),
    "relu": lambda a, b=None: relu(a),
}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale or relu."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# --------------------------------------------------------------------------
# Reductions and shape plumbing
# --------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape),)

    return _emit(np.sum(a.data, axis=axes), (a,), vjp)


def tmean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    n = math.prod(shape[i] for i in axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / n, shape),)

    return _emit(np.mean(a.data, axis=axes), (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref.shape} along axis {ax}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution.

    ``pad`` is (top, bottom, left, right); ``padding`` is "zero" or "reflect".
    """

    kernel_height: int
    kernel_width: int
    dilation: int = 1
    stride: int = 1
    padding: str = "zero"
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)

    @classmethod
    def same(cls, kernel: int | tuple[int, int], dilation: int = 1, padding: str = "zero") -> "ConvSpec":
        """Stride-1 spec whose output has the input's spatial size (odd kernels)."""
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel sizes")
        ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
        return cls(kh, kw, dilation, 1, padding, (ph, ph, pw, pw))

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        t, b, l, r = self.pad
        ho = (height + t + b - self.dilation * (self.kernel_height - 1) - 1) // self.stride + 1
        wo = (width + l + r - self.dilation * (self.kernel_width - 1) - 1) // self.stride + 1
        return ho, wo

    def validate(self) -> None:
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.kernel_height < 1 or self.kernel_width < 1:
            raise ValueError("kernel sizes must be positive")
        if self.padding not in ("zero", "reflect"):
            raise ValueError(f"unknown padding mode {self.padding!r}")
        if any(p < 0 for p in self.pad):
            raise ValueError("pad sizes must be nonnegative")


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    if before >= n or after >= n:
        raise ShapeError(f"reflect padding of {max(before, after)} needs a dimension larger than that, got {n}")
    return np.pad(np.arange(n), (before, after), mode="reflect")


def _pad2d(x: np.ndarray, spec: ConvSpec):
    """Pad the last two axes; returns the padded array and its adjoint."""
    t, b, l, r = spec.pad
    if not any(spec.pad):
        return x, lambda g: g
    h, w = x.shape[-2:]
    if spec.padding == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
        return np.pad(x, widths), lambda g: g[..., t : t + h, l : l + w]

    rows = _reflect_index(h, t, b)
    cols = _reflect_index(w, l, r)
    xp = x[..., rows, :][..., cols]

    def adjoint(g):
        acc = np.zeros(g.shape[:-1] + (w,), dtype=g.dtype)
        np.add.at(np.moveaxis(acc, -1, 0), cols, np.moveaxis(g, -1, 0))
        out = np.zeros(acc.shape[:-2] + (h, w), dtype=g.dtype)
        np.add.at(np.moveaxis(out, -2, 0), rows, np.moveaxis(acc, -2, 0))
        return out

    return xp, adjoint


_THIN = 4  # c_in * c_out at or below which conv2d skips the stacked-tap GEMM


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``weight`` [O,C,kh,kw].

    out[o, p] = bias[o] + sum_{c, k} weight[o, c, k] * x[c, p*stride + dilation*k - pad]
    """
    if weight.ndim != 4:
        raise ShapeError(f"weight must be [C_out, C_in, kh, kw], got shape {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if spec is None:
        spec = ConvSpec.same((kh, kw))
    spec.validate()
    if (spec.kernel_height, spec.kernel_width) != (kh, kw):
        raise ShapeError(
            f"kernel size mismatch: spec says {spec.kernel_height}x{spec.kernel_width}, weight has {kh}x{kw}"
        )
    if x.ndim not in (3, 4):
        raise ShapeError(f"input must be [C,H,W] or [N,C,H,W], got shape {x.shape}")
    if x.shape[-3] != c_in:
        raise ShapeError(f"input channels: input has {x.shape[-3]}, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    h, w = x.shape[-2:]
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {h}x{w}, spec {spec}")

    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    xp, pad_adjoint = _pad2d(xd, spec)
    d, s = spec.dilation, spec.stride
    n = xd.shape[0]

    # Shifted GEMM: with the padded input laid out as [C, N*Hp*Wp], kernel tap
    # (i, j) reads a contiguous slab starting at d*(i*Wp + j). Positions whose
    # window wraps past a row end are computed and discarded.
    hp, wp = xp.shape[-2:]
    xf = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(c_in, -1)
    total = xf.shape[1]
    offsets = [d * (i * wp + j) for i in range(kh) for j in range(kw)]
    span = total - offsets[-1]
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(kh * kw, c_out, c_in)
    yf = np.zeros((c_out, total), dtype=np.result_type(xf, taps))
    if c_in * c_out <= _THIN:
        # thin filters (e.g. the single-channel SSIM window): accumulate tap by
        # tap instead of materialising kh*kw shifted copies
        if c_in == c_out == 1:
            buf = np.empty(span, dtype=yf.dtype)
            for t, off in enumerate(offsets):
                np.multiply(xf[0, off : off + span], taps[t, 0, 0], out=buf)
                yf[0, :span] += buf
        else:
            for t, off in enumerate(offsets):
                yf[:, :span] += taps[t] @ xf[:, off : off + span]
    else:
        z = (taps.reshape(-1, c_in) @ xf).reshape(kh * kw, c_out, total)
        for t, off in enumerate(offsets):
            yf[:, :span] += z[t, :, off : off + span]
        del z
    y = yf.reshape(c_out, n, hp, wp)[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    out = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]
    if not batched:
        out = out[0]

    def vjp(g):
        g4 = g if batched else g[None]
        gf = np.zeros((c_out, n, hp, wp), dtype=g.dtype)
        gf[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s] = g4.transpose(1, 0, 2, 3)
        gf = gf.reshape(c_out, total)[:, :span]
        gtaps = np.stack([gf @ xf[:, off : off + span].T for off in offsets])
        gw = gtaps.reshape(kh, kw, c_out, c_in).transpose(2, 3, 0, 1)
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        gxf = np.zeros((c_in, total), dtype=g.dtype)
        if c_in * c_out <= _THIN:
            for t, off in enumerate(offsets):
                gxf[:, off : off + span] += taps[t].T @ gf
        else:
            u = (taps.transpose(0, 2, 1).reshape(-1, c_out) @ gf).reshape(kh * kw, c_in, span)
            for t, off in enumerate(offsets):
                gxf[:, off : off + span] += u[t]
        gxp = gxf.reshape(c_in, n, hp, wp).transpose(1, 0, 2, 3)
        gx = np.ascontiguousarray(pad_adjoint(gxp))
        if not batched:
            gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit(out, inputs, vjp)


# --------------------------------------------------------------------------
# Resampling and pooling
# --------------------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row j holds the bilinear weights for output sample j.

    Half-pixel centres: output j reads source coordinate (j + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1].
    """
    a = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    return a


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resampling of the last two axes."""
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError("cannot resample an empty map")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {out_h}x{out_w}")
    ah = interp_matrix(h, out_h).astype(x.dtype, copy=False)
    aw = interp_matrix(w, out_w).astype(x.dtype, copy=False)
    out = ah @ x.data @ aw.T
    return _emit(out, (x,), lambda g: (ah.T @ g @ aw,))


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    if x.ndim < 2 or x.data.size == 0:
        raise ShapeError(f"cannot upsample an empty map of shape {x.shape}")
    h, w = x.shape[-2:]
    return resize_bilinear(x, 2 * h, 2 * w)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial sizes, got {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(*lead, h, w),)

    return _emit(out, (x,), vjp)


def mix_channels(weight: Tensor, x: Tensor) -> Tensor:
    """1x1 convolution without bias: out[o, p] = sum_c weight[o, c] * x[c, p].

    ``x`` is [C, H, W] or [N, C, H, W]; ``weight`` is [C_out, C].
    """
    if weight.ndim != 2:
        raise ShapeError(f"mixing weight must be [C_out, C_in], got shape {weight.shape}")
    if x.ndim not in (3, 4) or x.shape[-3] != weight.shape[1]:
        raise ShapeError(f"input channels: input has shape {x.shape}, weight expects {weight.shape[1]} channels")
    wd, xd = weight.data, x.data
    ax = x.ndim - 3
    out = np.moveaxis(np.tensordot(wd, xd, axes=([1], [ax])), 0, ax)

    def vjp(g):
        gx = np.moveaxis(np.tensordot(wd.T, g, axes=([1], [ax])), 0, ax)
        axes = [i for i in range(x.ndim) if i != ax]
        gw = np.tensordot(g, xd, axes=(axes, axes))
        return gx, gw

    return _emit(np.ascontiguousarray(out), (x, weight), vjp)
