"""Structured feature enhancement: CRF mean-field refinement of a feature group.

Features of one resolution coming from different pyramid levels refine each
other by unrolled mean-field updates

    h_i^0 = f_i,   h_i^t = f_i + sum_{j != i} W_ij h_j^{t-1},   f_hat_i = h_i^n

where each W_ij is a bias-free 1x1 convolution mapping the channels of
feature j onto those of feature i, shared by every iteration. Updates are
synchronous: iteration t only reads iteration t-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

INIT_STD = 1e-6


@dataclass
class SfemParams:
    """Mixing weights ``weights[(i, j)]`` of shape [C_i, C_j] for every ordered pair i != j."""

    channels: tuple[int, ...]
    weights: dict[tuple[int, int], Tensor]
    n_iter: int = 2

    def __post_init__(self):
        n = len(self.channels)
        if n < 2:
            raise ValueError("a feature group needs at least two members")
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be positive, got {self.n_iter}")
        expected = {(i, j) for i in range(n) for j in range(n) if i != j}
        if set(self.weights) != expected:
            raise ValueError(f"need exactly {len(expected)} mixing weights for a group of {n}")
        for (i, j), w in self.weights.items():
            if w.shape != (self.channels[i], self.channels[j]):
                raise ShapeError(
                    f"w_{i}_{j} has shape {w.shape}, expected {(self.channels[i], self.channels[j])}"
                )

    @classmethod
    def init(cls, channels, n_iter: int = 2, std: float = INIT_STD, rng=None) -> "SfemParams":
        rng = np.random.default_rng() if rng is None else rng
        channels = tuple(int(c) for c in channels)
        n = len(channels)
        weights = {
            (i, j): Tensor(rng.normal(0.0, std, size=(channels[i], channels[j])), requires_grad=True)
            for i in range(n)
            for j in range(n)
            if i != j
        }
        return cls(channels, weights, n_iter)

    @classmethod
    def zeros(cls, channels, n_iter: int = 2) -> "SfemParams":
        channels = tuple(int(c) for c in channels)
        n = len(channels)
        weights = {
            (i, j): Tensor(np.zeros((channels[i], channels[j])), requires_grad=True)
            for i in range(n)
            for j in range(n)
            if i != j
        }
        return cls(channels, weights, n_iter)

    @property
    def size(self) -> int:
        return len(self.channels)

    def named(self, group: int) -> dict[str, Tensor]:
        return {f"sfem{group}.w_{i}_{j}": w for (i, j), w in sorted(self.weights.items())}


def _check_group(group, params: SfemParams) -> None:
    if len(group) != params.size:
        raise ShapeError(f"group has {len(group)} features, params expect {params.size}")
    spatial = group[0].shape[:-3] + group[0].shape[-2:]
    for k, f in enumerate(group):
        if f.ndim not in (3, 4):
            raise ShapeError(f"feature {k} must be [C,H,W] or [N,C,H,W], got shape {f.shape}")
        if f.shape[:-3] + f.shape[-2:] != spatial:
            raise ShapeError(f"feature {k} has shape {f.shape}; group members must share batch and spatial size")
        if f.shape[-3] != params.channels[k]:
            raise ShapeError(f"feature {k} has {f.shape[-3]} channels, params expect {params.channels[k]}")


def mean_field_refine(group, params: SfemParams) -> list[Tensor]:
    group = [T.as_tensor(f) for f in group]
    _check_group(group, params)
    n = params.size
    h = list(group)
    for _ in range(params.n_iter):
        nxt = []
        for i in range(n):
            acc = group[i]
            for j in range(n):
                if j != i:
                    acc = T.add(acc, T.mix_channels(params.weights[(i, j)], h[j]))
            nxt.append(acc)
        h = nxt
    return h


def mean_field_refine_reference(group, params: SfemParams) -> list[np.ndarray]:
    """Scalar-loop evaluation of the same update, for conformance checks only."""
    feats = [np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64) for f in group]
    _check_group([Tensor(f) for f in feats], params)
    n = len(feats)
    if feats[0].ndim == 3:
        feats = [f[None] for f in feats]
        squeeze = True
    else:
        squeeze = False
    nb, _, hh, ww = feats[0].shape
    weights = {k: v.data.tolist() for k, v in params.weights.items()}
    base = [f.tolist() for f in feats]
    prev = base
    for _ in range(params.n_iter):
        cur = []
        for i in range(n):
            ci = params.channels[i]
            out = [[[[0.0] * ww for _ in range(hh)] for _ in range(ci)] for _ in range(nb)]
            for b in range(nb):
                for o in range(ci):
                    for y in range(hh):
                        for x in range(ww):
                            v = base[i][b][o][y][x]
                            for j in range(n):
                                if j == i:
                                    continue
                                wij = weights[(i, j)][o]
                                hj = prev[j][b]
                                for c in range(params.channels[j]):
                                    v += wij[c] * hj[c][y][x]
                            out[b][o][y][x] = v
            cur.append(out)
        prev = cur
    result = [np.array(h, dtype=np.float64) for h in prev]
    return [r[0] for r in result] if squeeze else result
