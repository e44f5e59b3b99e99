"""Ground-truth density maps from head annotations.

Each head is rendered as a Gaussian whose spread follows local crowd spacing:
sigma = beta * (mean distance to the k nearest other heads). Kernels are cut
to a square window of half-width ceil(3 sigma) and renormalised over the
in-image pixels, so every rendered head contributes exactly one unit of mass.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError

SIGMA_DEFAULT = 15.0
SIGMA_MIN = 1.0
DENSITY_MAGIC = b"DMP1"


@dataclass
class AnnotationSet:
    width: int
    height: int
    points: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"canvas must be positive, got {self.width}x{self.height}")
        self.points = [(float(x), float(y)) for x, y in self.points]

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class RenderResult:
    density: np.ndarray
    rendered: int
    skipped: int


def adaptive_sigma(points, k: int = 3, beta: float = 0.3) -> list[float]:
    """Per-point kernel spread from the mean distance to its k nearest neighbours.

    With fewer than k other points the available distances are averaged; a lone
    point gets ``SIGMA_DEFAULT``. Results are clamped below at ``SIGMA_MIN``.
    """
    if k < 1:
        raise ValueError("k must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return []
    if not np.all(np.isfinite(pts)):
        raise ValueError("annotation points must be finite")
    if n == 1:
        return [max(SIGMA_DEFAULT, SIGMA_MIN)]
    kk = min(k, n - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    # column 0 is the point itself (distance 0); coincident duplicates may swap
    # places with it but the sorted distances are unaffected
    dist = np.sort(dist, axis=1)[:, 1:]
    sig = beta * dist.mean(axis=1)
    return [float(s) for s in np.maximum(sig, SIGMA_MIN)]


def render_density(annotations: AnnotationSet, sigmas) -> RenderResult:
    """Sum of per-point truncated, renormalised Gaussians on an H x W grid.

    Pixel (i, j) is evaluated at coordinate (x=j, y=i). Points whose nearest
    pixel lies outside the canvas are skipped and counted in ``skipped``.
    """
    h, w = annotations.height, annotations.width
    sigmas = list(sigmas)
    if len(sigmas) != len(annotations.points):
        raise ValueError(f"got {len(sigmas)} sigmas for {len(annotations.points)} points")
    density = np.zeros((h, w), dtype=np.float64)
    rendered = skipped = 0
    for (x, y), s in zip(annotations.points, sigmas):
        if not s > 0:
            raise ValueError(f"sigma must be positive, got {s}")
        cx, cy = math.floor(x + 0.5), math.floor(y + 0.5)
        if not (0 <= cx < w and 0 <= cy < h):
            skipped += 1
            continue
        r = math.ceil(3.0 * s)
        x0, x1 = max(cx - r, 0), min(cx + r, w - 1)
        y0, y1 = max(cy - r, 0), min(cy + r, h - 1)
        # offsets relative to the integer centre (x - cx is exact), so the kernel
        # depends only on the sub-pixel phase and integer shifts are exact
        gx = np.exp(-((np.arange(x0 - cx, x1 - cx + 1) - (x - cx)) ** 2) / (2.0 * s * s))
        gy = np.exp(-((np.arange(y0 - cy, y1 - cy + 1) - (y - cy)) ** 2) / (2.0 * s * s))
        kernel = np.outer(gy, gx)
        density[y0 : y1 + 1, x0 : x1 + 1] += kernel / kernel.sum()
        rendered += 1
    return RenderResult(density, rendered, skipped)


def density_from_annotations(annotations: AnnotationSet, k: int = 3, beta: float = 0.3) -> RenderResult:
    return render_density(annotations, adaptive_sigma(annotations.points, k, beta))


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def read_annotations(path) -> AnnotationSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.pos, path) from None
    return annotations_from_json(doc, path)


def annotations_from_json(doc, path=None) -> AnnotationSet:
    if not isinstance(doc, dict):
        raise FormatError("annotation document must be a JSON object", path=path)
    for key in ("width", "height"):
        v = doc.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
            raise FormatError(f"field {key!r} must be a positive integer, got {v!r}", path=path)
    pts = doc.get("points")
    if not isinstance(pts, list):
        raise FormatError(f"field 'points' must be a list, got {type(pts).__name__}", path=path)
    points = []
    for i, p in enumerate(pts):
        ok = (
            isinstance(p, list)
            and len(p) == 2
            and all(isinstance(c, (int, float)) and not isinstance(c, bool) and math.isfinite(c) for c in p)
        )
        if not ok:
            raise FormatError(f"field 'points[{i}]' must be a finite [x, y] pair, got {p!r}", path=path)
        points.append((float(p[0]), float(p[1])))
    return AnnotationSet(doc["width"], doc["height"], points)


def write_annotations(path, annotations: AnnotationSet) -> None:
    doc = {
        "width": annotations.width,
        "height": annotations.height,
        "points": [[x, y] for x, y in annotations.points],
    }
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def encode_density(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError(f"density map must be 2-D, got shape {values.shape}")
    h, w = values.shape
    return DENSITY_MAGIC + struct.pack("<II", h, w) + np.ascontiguousarray(values).tobytes()


def decode_density(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != DENSITY_MAGIC:
        raise FormatError("bad magic", 0, path)
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf), path)
    h, w = struct.unpack("<II", buf[4:12])
    need = 12 + 8 * h * w
    if len(buf) < need:
        raise FormatError(f"truncated payload: expected {h}x{w} values", len(buf), path)
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", need, path)
    return np.frombuffer(buf, dtype="<f8", offset=12, count=h * w).astype(np.float64).reshape(h, w)


def write_density(path, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_density(values))


def read_density(path) -> np.ndarray:
    return decode_density(Path(path).read_bytes(), path)


def export_pgm(path, values: np.ndarray) -> None:
    """16-bit PGM scaled to the map maximum; for viewing only."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    top = values.max() if values.size and values.max() > 0 else 1.0
    img = np.clip(np.round(values / top * 65535), 0, 65535).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + img.tobytes())
