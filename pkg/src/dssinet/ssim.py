"""Dilated multiscale structural similarity (DMS-SSIM).

A fixed normalised Gaussian window is applied repeatedly with growing
dilation. The filtered map at layer i+1 is the local mean of layer i, so the
stack of layers doubles as the multiscale pyramid:

    X_{i+1}(p) = sum_o w(o) X_i(p + r_{i+1} o)

At every layer the local variance and covariance use the same dilation, the
luminance/contrast/structure comparisons are multiplied pointwise, averaged
over the map, and the per-layer scores are combined as a weighted geometric
product. The loss is one minus that product.

All functions accept plain arrays or :class:`~dssinet.tensor.Tensor` inputs of
shape [H, W] or [N, H, W]; with a leading batch axis every score is per
sample and the loss is the batch mean.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, ShapeError, Tensor

# Canonical MS-SSIM exponents; they sum to 1.0001 and are renormalised.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_FLOOR = 1e-6


@dataclass(frozen=True)
class GaussianWindow:
    size: int
    std: float
    weights: np.ndarray = field(repr=False)

    def kernel(self, dtype=np.float64) -> Tensor:
        return Tensor(self.weights.astype(dtype)[None, None])

    def profile(self) -> np.ndarray:
        """The normalised 1-D factor; ``weights`` is its outer product with itself."""
        half = self.size // 2
        o = np.arange(-half, half + 1, dtype=np.float64)
        g = np.exp(-(o**2) / (2.0 * self.std * self.std))
        return g / g.sum()

    def footprint(self, dilation: int) -> int:
        return 1 + dilation * (self.size - 1)

    def min_extent(self, dilation: int) -> int:
        """Smallest map side that single-reflection padding can serve."""
        return 1 + dilation * (self.size // 2)


def gaussian_window(size: int = 5, std: float = 1.0) -> GaussianWindow:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {size}")
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    half = size // 2
    o = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(o[:, None] ** 2 + o[None, :] ** 2) / (2.0 * std * std))
    return GaussianWindow(size, float(std), g / g.sum())


def _normalised(weights) -> tuple[float, ...]:
    w = np.asarray(weights, dtype=np.float64)
    return tuple(float(v) for v in w / w.sum())


@dataclass(frozen=True)
class DmsSsimConfig:
    m: int = 5
    dilations: tuple[int, ...] = (1, 2, 3, 6, 9)
    alphas: tuple[float, ...] = _normalised(MS_SSIM_WEIGHTS)
    c1: float = 1e-4
    c2: float = 9e-4
    c3: float = 4.5e-4
    window_size: int = 5
    window_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        self.validate()

    def validate(self) -> None:
        if self.m < 1:
            raise ValueError("m must be positive")
        if len(self.dilations) != self.m:
            raise ValueError(f"need {self.m} dilations, got {len(self.dilations)}")
        if len(self.alphas) != self.m:
            raise ValueError(f"need {self.m} alphas, got {len(self.alphas)}")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be positive")
        if any(not a > 0 for a in self.alphas):
            raise ValueError("alphas must be positive")
        if abs(sum(self.alphas) - 1.0) > 1e-12:
            raise ValueError(f"alphas must sum to 1, got {sum(self.alphas)!r}")
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ValueError("stability constants must be positive")

    @classmethod
    def uniform(cls, dilations=(1, 2, 3, 6, 9), **kw) -> "DmsSsimConfig":
        m = len(dilations)
        return cls(m=m, dilations=tuple(dilations), alphas=_normalised([1.0] * m), **kw)

    @classmethod
    def undilated(cls, m: int = 5, **kw) -> "DmsSsimConfig":
        """Same layers without dilation, i.e. a plain multiscale SSIM."""
        return cls(m=m, dilations=(1,) * m, **kw)

    def window(self) -> GaussianWindow:
        return gaussian_window(self.window_size, self.window_std)

    def min_size(self) -> int:
        # reflect padding by r * (size // 2) needs a side longer than the pad;
        # the full footprint 1 + r * (size - 1) may exceed the map
        return 1 + max(self.dilations) * (self.window_size // 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        d["alphas"] = list(self.alphas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DmsSsimConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown DMS-SSIM config fields: {sorted(extra)}")
        d = dict(d)
        if "dilations" in d and "m" not in d:
            d["m"] = len(d["dilations"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "DmsSsimConfig":
        return cls.from_dict(json.loads(text))


def receptive_fields(window_size: int, dilations) -> list[int]:
    """Receptive field of each stacked dilated window, in pixels of the input map."""
    if window_size < 1 or window_size % 2 == 0:
        raise ValueError(f"window size must be odd, got {window_size}")
    out, rf = [], 1
    for d in dilations:
        rf += d * (window_size - 1)
        out.append(rf)
    return out


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------


def _as_batched(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), False
    if x.ndim == 3:
        return x, True
    raise ShapeError(f"expected a [H, W] or [N, H, W] map, got shape {x.shape}")


def _filter(x: Tensor, window: GaussianWindow, dilation: int) -> Tensor:
    """Same-size reflect-padded dilated Gaussian filtering of a [N, H, W] stack."""
    h, w = x.shape[-2:]
    need = window.min_extent(dilation)
    if min(h, w) < need:
        raise ShapeError(
            f"map {h}x{w} is too small for the {window.footprint(dilation)}-pixel window footprint at dilation "
            f"{dilation}: minimum size is {need}x{need}"
        )
    n = x.shape[0]
    # the Gaussian window and reflect padding both factor over the two axes, so
    # filter rows then columns (2k taps instead of k^2)
    g = window.profile().astype(x.dtype)
    p = dilation * (window.size // 2)
    k = window.size
    rows = ConvSpec(k, 1, dilation, padding="reflect", pad=(p, p, 0, 0))
    cols = ConvSpec(1, k, dilation, padding="reflect", pad=(0, 0, p, p))
    y = T.conv2d(T.reshape(x, (n, 1, h, w)), Tensor(g.reshape(1, 1, k, 1)), None, rows)
    y = T.conv2d(y, Tensor(g.reshape(1, 1, 1, k)), None, cols)
    return T.reshape(y, (n, h, w))


def pyramid_filter(x, window: GaussianWindow, dilation: int):
    """One layer of the filtering pyramid (the local mean of ``x``)."""
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    xb, batched = _as_batched(x)
    out = _filter(xb, window, dilation)
    return out if batched else T.reshape(out, out.shape[1:])


@dataclass
class SsimScaleStats:
    mu_x: Tensor
    mu_y: Tensor
    var_x: Tensor
    var_y: Tensor
    cov_xy: Tensor
    # comparison maps, filled in by ssim_scale
    lum: Tensor | None = None
    con: Tensor | None = None
    struct: Tensor | None = None


def local_stats(x, y, window: GaussianWindow, dilation: int) -> SsimScaleStats:
    """Local means, variances and covariance under the dilated window.

    Variances are formed as E[x^2] - mu^2 and clamped at zero; this equals the
    weighted squared deviation about the local mean.
    """
    xb, batched = _as_batched(x)
    yb, _ = _as_batched(y)
    if xb.shape != yb.shape:
        raise ShapeError(f"maps differ in shape: {tuple(xb.shape)} vs {tuple(yb.shape)}")
    if not batched:
        st = local_stats(xb, yb, window, dilation)
        return SsimScaleStats(*(T.reshape(t, t.shape[1:]) for t in (st.mu_x, st.mu_y, st.var_x, st.var_y, st.cov_xy)))
    mu_x = _filter(xb, window, dilation)
    mu_y = _filter(yb, window, dilation)
    var_x = T.clamp_min(_filter(T.square(xb), window, dilation) - T.square(mu_x), 0.0)
    var_y = T.clamp_min(_filter(T.square(yb), window, dilation) - T.square(mu_y), 0.0)
    cov = _filter(T.mul(xb, yb), window, dilation) - T.mul(mu_x, mu_y)
    return SsimScaleStats(mu_x, mu_y, var_x, var_y, cov)


def _luminance(st: SsimScaleStats, c1: float) -> Tensor:
    num = T.add_const(T.scale(T.mul(st.mu_x, st.mu_y), 2.0), c1)
    den = T.add_const(T.square(st.mu_x) + T.square(st.mu_y), c1)
    return T.div(num, den)


def comparison_maps(st: SsimScaleStats, c1: float, c2: float, c3: float) -> tuple[Tensor, Tensor, Tensor]:
    """Luminance, contrast and structure maps exactly as written, with square roots."""
    sx, sy = T.sqrt(st.var_x), T.sqrt(st.var_y)
    sxy = T.mul(sx, sy)
    lum = _luminance(st, c1)
    con = T.div(T.add_const(T.scale(sxy, 2.0), c2), T.add_const(st.var_x + st.var_y, c2))
    struct = T.div(T.add_const(st.cov_xy, c3), T.add_const(sxy, c3))
    return lum, con, struct


def ssim_map(st: SsimScaleStats, c1: float, c2: float, c3: float) -> Tensor:
    """Pointwise L * C * S.

    With c3 == c2 / 2 the contrast and structure terms collapse to
    (2 cov + c2) / (var_x + var_y + c2), which avoids square roots and keeps the
    gradient finite where a local variance vanishes.
    """
    lum = _luminance(st, c1)
    if c3 == c2 / 2:
        cs = T.div(T.add_const(T.scale(st.cov_xy, 2.0), c2), T.add_const(st.var_x + st.var_y, c2))
        return T.mul(lum, cs)
    _, con, struct = comparison_maps(st, c1, c2, c3)
    return T.mul(lum, T.mul(con, struct))


def ssim_scale(stats: SsimScaleStats, c1: float, c2: float, c3: float) -> Tensor:
    """Spatial mean of the SSIM map: a scalar, or one value per batch sample."""
    detached = SsimScaleStats(*(Tensor(t.data) for t in (stats.mu_x, stats.mu_y, stats.var_x, stats.var_y, stats.cov_xy)))
    stats.lum, stats.con, stats.struct = comparison_maps(detached, c1, c2, c3)
    return T.tmean(ssim_map(stats, c1, c2, c3), axis=(-2, -1))


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


@dataclass
class DmsSsimResult:
    loss: Tensor  # scalar; batch mean when inputs carry a batch axis
    per_scale: list[Tensor]  # each [N] (or scalar for unbatched input)
    clamped: list[bool]  # whether any sample's score hit the floor at that scale

    @property
    def value(self) -> float:
        return self.loss.item()

    def per_scale_values(self) -> list[float]:
        return [float(np.mean(s.data)) for s in self.per_scale]


def dms_ssim(x0, y0, cfg: DmsSsimConfig | None = None) -> DmsSsimResult:
    """Differentiable DMS-SSIM loss; records on the active tape."""
    cfg = cfg or DmsSsimConfig()
    xb, batched = _as_batched(x0)
    yb, _ = _as_batched(y0)
    if xb.shape != yb.shape:
        raise ShapeError(f"maps differ in shape: {tuple(xb.shape)} vs {tuple(yb.shape)}")
    h, w = xb.shape[-2:]
    if min(h, w) < cfg.min_size():
        raise ShapeError(
            f"map {h}x{w} too small for dilation {max(cfg.dilations)}: minimum size is {cfg.min_size()}x{cfg.min_size()}"
        )
    window = cfg.window()
    x, y = xb, yb
    scores, clamped = [], []
    product = None
    for alpha, r in zip(cfg.alphas, cfg.dilations):
        st = local_stats(x, y, window, r)
        s = T.tmean(ssim_map(st, cfg.c1, cfg.c2, cfg.c3), axis=(-2, -1))
        scores.append(s if batched else T.reshape(s, ()))
        clamped.append(bool(np.any(s.data < SSIM_FLOOR)))
        term = T.power(T.clamp_min(s, SSIM_FLOOR), alpha)
        product = term if product is None else T.mul(product, term)
        x, y = st.mu_x, st.mu_y
    loss = T.tmean(T.neg(T.add_const(product, -1.0)))
    return DmsSsimResult(loss, scores, clamped)


def dms_ssim_loss(x0, y0, cfg: DmsSsimConfig | None = None) -> tuple[float, list[float]]:
    res = dms_ssim(x0, y0, cfg)
    return res.value, res.per_scale_values()


def dms_ssim_grad(x0, y0, cfg: DmsSsimConfig | None = None) -> np.ndarray:
    """d loss / d x0 by a reverse sweep."""
    x = Tensor(np.array(T.as_tensor(x0).data, copy=True), requires_grad=True)
    with T.Tape() as tape:
        res = dms_ssim(x, y0, cfg)
    return T.backward(tape, res.loss, [x])[x]


def euclidean_loss(x0, y0) -> Tensor:
    """Mean squared pixel error, the baseline objective."""
    x, y = T.as_tensor(x0), T.as_tensor(y0)
    return T.tmean(T.square(T.sub(x, y)))


__all__ = [
    "MS_SSIM_WEIGHTS",
    "GaussianWindow",
    "DmsSsimConfig",
    "SsimScaleStats",
    "DmsSsimResult",
    "gaussian_window",
    "receptive_fields",
    "pyramid_filter",
    "local_stats",
    "comparison_maps",
    "ssim_map",
    "ssim_scale",
    "dms_ssim",
    "dms_ssim_loss",
    "dms_ssim_grad",
    "euclidean_loss",
]
