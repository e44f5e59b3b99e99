"""Miniature multiscale counting network.

An image pyramid runs through one shared backbone (four conv stages, 2x2 max
pooling after the first three). Features from different pyramid levels that
land on the same resolution form a group, are refined jointly by mean-field
CRF updates and then continue through their own branch. Each group regresses
a side-output density map; the coarsest branch regresses ``M_4`` at 1/16
resolution. Side outputs are merged coarse-to-fine:

    M_i = w_i * M~_i + w_{i+1} * Up(M_{i+1}),   i = 3, 2, 1, 0

with the fusion kernels w_0..w_4 indexed exactly as written, so w_{i+1} also
filters M~_{i+1} one step earlier.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError
from .ntb import read_ntb, write_ntb
from .sfem import SfemParams, mean_field_refine
from .ssim import DmsSsimConfig
from .tensor import ConvSpec, ShapeError, Tensor

N_SIDE = 4  # side outputs M~_0..M~_3
HEAD_STD = 1e-6


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    convs_per_stage: int = 2
    scales: tuple[float, ...] = (2.0, 1.0, 0.5)
    in_channels: int = 1
    head_width: int = 32
    sfem_iters: int = 2
    # the network regresses density * density_scale; forward() divides it back out
    density_scale: float = 100.0
    # "desk": fusion kernels start as identity, channel reducers fan-in scaled;
    # "paper": every non-backbone weight ~ N(0, 1e-6^2)
    init: str = "desk"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if len(self.widths) != 4:
            raise ValueError("the backbone has exactly four stages")
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"pyramid scales must be strictly decreasing, got {self.scales}")
        if self.convs_per_stage < 1 or self.head_width < 1 or self.sfem_iters < 1:
            raise ValueError("convs_per_stage, head_width and sfem_iters must be positive")
        if not self.density_scale > 0:
            raise ValueError("density_scale must be positive")
        if self.init not in ("desk", "paper"):
            raise ValueError(f"unknown init scheme {self.init!r}")
        if 1.0 not in self.scales:
            raise ValueError("the pyramid must contain the unit scale")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown backbone config fields: {sorted(extra)}")
        return cls(**d)

    # -- geometry -------------------------------------------------------

    def exponent(self, level: int, stage: int) -> int:
        """Feature (level, stage) has resolution H / 2**exponent."""
        e = stage - math.log2(self.scales[level])
        if abs(e - round(e)) > 1e-12:
            raise ValueError(f"pyramid scale {self.scales[level]} is not a power of two")
        return int(round(e))

    def groups(self) -> list[list[tuple[int, int]]]:
        """Members (level, stage) of each side-output group, finest first."""
        out = []
        for g in range(N_SIDE):
            members = [
                (k, s) for k in range(len(self.scales)) for s in range(4) if self.exponent(k, s) == g
            ]
            out.append(members)
        return out

    def top_sources(self) -> list[tuple[int, int]]:
        return [(k, s) for k in range(len(self.scales)) for s in range(4) if self.exponent(k, s) == N_SIDE]

    def size_multiple(self) -> int:
        """Input sides must be multiples of this so every feature size is integral."""
        mult = 1
        for s in self.scales:
            f = Fraction(s).limit_denominator(1 << 16) / 8
            mult = math.lcm(mult, f.denominator)
        return math.lcm(mult, 1 << N_SIDE)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


class ModelParams:
    """Named parameter store. Backbone tensors exist once and serve every pyramid level."""

    def __init__(self, config: BackboneConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.sfem: dict[int, SfemParams] = {}
        for g, members in enumerate(config.groups()):
            if len(members) < 2:
                continue
            chans = tuple(config.widths[s] for _, s in members)
            n = len(members)
            weights = {(i, j): tensors[f"sfem{g}.w_{i}_{j}"] for i in range(n) for j in range(n) if i != j}
            self.sfem[g] = SfemParams(chans, weights, config.sfem_iters)

    @classmethod
    def init(cls, config: BackboneConfig | None = None, seed: int = 0) -> "ModelParams":
        config = config or BackboneConfig()
        rng = np.random.default_rng(seed)
        hw = config.head_width
        t: dict[str, np.ndarray] = {}

        c_in = config.in_channels
        for s, width in enumerate(config.widths):
            for c in range(config.convs_per_stage):
                t[f"backbone.s{s}.c{c}.weight"] = rng.normal(0.0, math.sqrt(2.0 / (c_in * 9)), (width, c_in, 3, 3))
                t[f"backbone.s{s}.c{c}.bias"] = np.zeros(width)
                c_in = width

        small = config.init == "paper"

        def head(prefix: str, c: int) -> None:
            std = HEAD_STD if small else math.sqrt(2.0 / c)
            t[f"{prefix}.reduce.weight"] = rng.normal(0.0, std, (hw, c, 1, 1))
            t[f"{prefix}.reduce.bias"] = np.zeros(hw)
            t[f"{prefix}.regress.weight"] = rng.normal(0.0, HEAD_STD, (1, hw, 3, 3))
            t[f"{prefix}.regress.bias"] = np.zeros(1)

        for g, members in enumerate(config.groups()):
            if not members:
                raise ValueError(f"pyramid scales {config.scales} leave side output {g} without features")
            if len(members) >= 2:
                for i, (_, si) in enumerate(members):
                    for j, (_, sj) in enumerate(members):
                        if i != j:
                            t[f"sfem{g}.w_{i}_{j}"] = rng.normal(
                                0.0, HEAD_STD, (config.widths[si], config.widths[sj])
                            )
            head(f"side{g}", sum(config.widths[s] for _, s in members))
        top = config.top_sources()
        if not top:
            raise ValueError(f"pyramid scales {config.scales} give no feature at 1/16 resolution")
        head("top", sum(config.widths[s] for _, s in top))
        for i in range(N_SIDE + 1):
            w = rng.normal(0.0, HEAD_STD, (1, 1, 3, 3))
            if not small:
                w[0, 0, 1, 1] += 1.0
            t[f"fuse.w{i}"] = w
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v.data)) for v in self.tensors.values())


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------


def build_pyramid(image, scales) -> list[Tensor]:
    """Bilinear resampling of ``image`` ([C,H,W] or [N,C,H,W]) to each scale."""
    image = T.as_tensor(image)
    h, w = image.shape[-2:]
    out = []
    for s in scales:
        if s == 1.0:
            out.append(image)
            continue
        hs, ws = h * s, w * s
        if abs(hs - round(hs)) > 1e-9 or abs(ws - round(ws)) > 1e-9:
            raise ShapeError(f"scale {s} of a {h}x{w} image is not integral")
        out.append(T.resize_bilinear(image, int(round(hs)), int(round(ws))))
    return out


@dataclass
class ForwardResult:
    density: Tensor  # M_0 in persons per pixel, [H, W] or [N, H, W]
    side_outputs: list[Tensor]  # M~_0..M~_3, [N, 1, h, w], scaled units
    top: Tensor  # M_4, [N, 1, H/16, W/16], scaled units
    fused: list[Tensor] = field(default_factory=list)  # M_3..M_0, scaled units
    scaled: Tensor | None = None  # M_0 * density_scale, same layout as density


def _head(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    y = T.conv2d(x, params[f"{prefix}.reduce.weight"], params[f"{prefix}.reduce.bias"], ConvSpec(1, 1))
    y = T.relu(y)
    return T.conv2d(y, params[f"{prefix}.regress.weight"], params[f"{prefix}.regress.bias"], ConvSpec.same(3))


def _stage(x: Tensor, params: ModelParams, s: int) -> Tensor:
    for c in range(params.config.convs_per_stage):
        x = T.relu(T.conv2d(x, params[f"backbone.s{s}.c{c}.weight"], params[f"backbone.s{s}.c{c}.bias"], ConvSpec.same(3)))
    return x


def check_input(image: Tensor, config: BackboneConfig) -> None:
    if image.ndim not in (3, 4):
        raise ShapeError(f"image must be [C,H,W] or [N,C,H,W], got shape {image.shape}")
    if image.shape[-3] != config.in_channels:
        raise ShapeError(f"image has {image.shape[-3]} channels, model expects {config.in_channels}")
    mult = config.size_multiple()
    h, w = image.shape[-2:]
    if h % mult or w % mult:
        raise ShapeError(f"image size {h}x{w} must be a multiple of {mult} on both sides")
    if not np.all(np.isfinite(image.data)):
        raise ValueError("image contains non-finite values")


def forward(image, params: ModelParams, use_sfem: bool = True) -> ForwardResult:
    """Full network pass; records on the active tape.

    ``use_sfem=False`` skips the refinement calls entirely (used to check that
    zero coupling is an exact identity).
    """
    cfg = params.config
    image = T.as_tensor(image)
    check_input(image, cfg)
    batched = image.ndim == 4
    if not batched:
        image = T.reshape(image, (1,) + image.shape)
    levels = build_pyramid(image, cfg.scales)

    feats: dict[tuple[int, int], Tensor] = {}
    nodes = sorted(
        ((cfg.exponent(k, s), k, s) for k in range(len(cfg.scales)) for s in range(4)),
    )
    group_of = {m: g for g, members in enumerate(cfg.groups()) for m in members}
    done_groups: set[int] = set()
    for e, k, s in nodes:
        x = levels[k] if s == 0 else T.max_pool2x2(feats[(k, s - 1)])
        feats[(k, s)] = _stage(x, params, s)
        g = group_of.get((k, s))
        if g is None or g in done_groups:
            continue
        members = cfg.groups()[g]
        if all(m in feats for m in members):
            done_groups.add(g)
            if use_sfem and g in params.sfem:
                refined = mean_field_refine([feats[m] for m in members], params.sfem[g])
                for m, f in zip(members, refined):
                    feats[m] = f

    sides = []
    for g, members in enumerate(cfg.groups()):
        x = feats[members[0]] if len(members) == 1 else T.concat([feats[m] for m in members], axis=1)
        sides.append(_head(x, params, f"side{g}"))
    top_src = cfg.top_sources()
    x = feats[top_src[0]] if len(top_src) == 1 else T.concat([feats[m] for m in top_src], axis=1)
    m4 = _head(x, params, "top")

    fusion = [params[f"fuse.w{i}"] for i in range(N_SIDE + 1)]
    m0, fused = _fuse(sides, m4, fusion)
    n, _, h, w = m0.shape
    scaled = T.reshape(m0, (n, h, w) if batched else (h, w))
    density = T.scale(scaled, 1.0 / cfg.density_scale)
    return ForwardResult(density, sides, m4, fused, scaled)


def _fuse(sides: list[Tensor], m4: Tensor, fusion: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
    spec = ConvSpec.same(3)
    m = m4
    fused = []
    for i in range(N_SIDE - 1, -1, -1):
        up = T.bilinear_upsample_x2(m)
        if up.shape != sides[i].shape:
            raise ShapeError(
                f"resolution chain broken at level {i}: side output {sides[i].shape[-2:]} vs upsampled {up.shape[-2:]}"
            )
        m = T.add(T.conv2d(sides[i], fusion[i], None, spec), T.conv2d(up, fusion[i + 1], None, spec))
        fused.append(m)
    return m, fused


def topdown_fuse(side_outputs, m4, fusion_weights):
    """Top-down fusion of four side outputs and M_4.

    Maps may be [h, w] or [N, 1, h, w]; ``fusion_weights`` holds w_0..w_4,
    each a 3x3 kernel ([3, 3] or [1, 1, 3, 3]). Returns M_0 in the input layout.
    """
    if len(side_outputs) != N_SIDE or len(fusion_weights) != N_SIDE + 1:
        raise ValueError(f"need {N_SIDE} side outputs and {N_SIDE + 1} fusion kernels")
    m4 = T.as_tensor(m4)
    flat = m4.ndim == 2

    def lift(x):
        x = T.as_tensor(x)
        return T.reshape(x, (1, 1) + x.shape) if x.ndim == 2 else x

    ws = [T.as_tensor(w) for w in fusion_weights]
    ws = [T.reshape(w, (1, 1, 3, 3)) if w.ndim == 2 else w for w in ws]
    m0, _ = _fuse([lift(s) for s in side_outputs], lift(m4), ws)
    return T.reshape(m0, m0.shape[-2:]) if flat else m0


def count(density) -> float:
    return float(np.sum(T.as_tensor(density).data))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def config_hash(backbone: BackboneConfig, loss: DmsSsimConfig) -> str:
    doc = json.dumps({"backbone": backbone.to_dict(), "dms_ssim": loss.to_dict()}, sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, params: ModelParams, loss_cfg: DmsSsimConfig | None = None) -> None:
    loss_cfg = loss_cfg or DmsSsimConfig()
    write_ntb(path, params.arrays())
    doc = {
        "backbone": params.config.to_dict(),
        "dms_ssim": loss_cfg.to_dict(),
        "config_hash": config_hash(params.config, loss_cfg),
    }
    sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(path, expect_hash: str | None = None) -> tuple[ModelParams, DmsSsimConfig]:
    """Load a checkpoint, verifying its sidecar hash and tensor layout."""
    side = sidecar_path(path)
    try:
        doc = json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError("missing config sidecar", path=side) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.pos, side) from None
    try:
        backbone = BackboneConfig.from_dict(doc["backbone"])
        loss_cfg = DmsSsimConfig.from_dict(doc["dms_ssim"])
        stored = doc["config_hash"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad sidecar field: {exc}", path=side) from None
    actual = config_hash(backbone, loss_cfg)
    if stored != actual:
        raise FormatError(f"config hash mismatch: sidecar says {stored[:12]}, configs hash to {actual[:12]}", path=side)
    if expect_hash is not None and expect_hash != actual:
        raise FormatError(f"config hash mismatch: expected {expect_hash[:12]}, checkpoint has {actual[:12]}", path=side)

    arrays = read_ntb(path)
    skeleton = ModelParams.init(backbone, seed=0)
    if set(arrays) != set(skeleton.tensors):
        missing = sorted(set(skeleton.tensors) - set(arrays))
        extra = sorted(set(arrays) - set(skeleton.tensors))
        raise FormatError(f"tensor set does not match config (missing {missing[:3]}, unexpected {extra[:3]})", path=path)
    tensors = {}
    for name in skeleton.tensors:
        if arrays[name].shape != skeleton[name].shape:
            raise FormatError(f"tensor {name!r} has shape {arrays[name].shape}, config needs {skeleton[name].shape}", path=path)
        tensors[name] = Tensor(arrays[name], requires_grad=True, name=name)
    return ModelParams(backbone, tensors), loss_cfg
