"""Synthetic crowd scenes, crop sampling, Adam and the training loop.

Scenes are grey canvases with bright discs for heads; disc radius grows
linearly from the top row to the bottom row to mimic perspective. The
ground-truth density comes from :mod:`dssinet.density`.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .density import AnnotationSet, density_from_annotations
from .errors import NumericalError
from .model import BackboneConfig, ModelParams, count, forward, load_checkpoint, save_checkpoint
from .ssim import DmsSsimConfig, dms_ssim, euclidean_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 128
    count_range: tuple[int, int] = (5, 80)
    r_min: float = 2.0
    r_max: float = 5.0
    head_value: float = 1.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "count_range", tuple(int(c) for c in self.count_range))
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad count range {self.count_range}")
        if self.r_min < 1 or self.r_max < self.r_min:
            raise ValueError(f"need 1 <= r_min <= r_max, got {self.r_min}, {self.r_max}")
        if min(self.height, self.width) < 2 * math.ceil(self.r_max) + 1:
            raise ValueError(f"canvas {self.height}x{self.width} too small for head radius {self.r_max}")


def head_radius(spec: SceneSpec, y: float) -> float:
    return spec.r_min + (spec.r_max - spec.r_min) * y / max(spec.height - 1, 1)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, AnnotationSet]:
    """Returns a [1, H, W] image and the head centres."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.count_range
    n = int(rng.integers(lo, hi + 1))
    h, w = spec.height, spec.width
    xs = rng.uniform(0.0, w - 1, n)
    ys = rng.uniform(0.0, h - 1, n)
    img = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for x, y in zip(xs, ys):
        r = head_radius(spec, y)
        disc = (xx - x) ** 2 + (yy - y) ** 2 <= r * r
        # additive, so overlapping heads stay distinguishable from single ones
        img[disc] += spec.head_value
    img += rng.normal(0.0, spec.noise, img.shape)
    return img[None], AnnotationSet(w, h, list(zip(xs.tolist(), ys.tolist())))


def sample_crops(image, density, crop_size: int, count: int, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random crops cut at identical offsets from an image [C,H,W] and its density [H,W]."""
    image = np.asarray(image)
    density = np.asarray(density)
    h, w = density.shape
    if image.shape[-2:] != (h, w):
        raise ValueError(f"image {image.shape[-2:]} and density {(h, w)} differ in size")
    if crop_size > min(h, w):
        raise ValueError(f"crop {crop_size} larger than image {h}x{w}")
    if crop_size % 16:
        raise ValueError(f"crop size must be a multiple of 16, got {crop_size}")
    out = []
    for _ in range(count):
        y = int(rng.integers(0, h - crop_size + 1))
        x = int(rng.integers(0, w - crop_size + 1))
        out.append((image[..., y : y + crop_size, x : x + crop_size], density[y : y + crop_size, x : x + crop_size]))
    return out


# --------------------------------------------------------------------------
# Optimiser
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


PAPER_LR = 1e-5


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update of every tensor in ``params``, in place."""
    missing = [k for k in params.names() if k not in grads]
    if missing:
        raise KeyError(f"no gradient for trainable tensors: {missing[:5]}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in params.names():
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    truth: list[float]
    estimate: list[float]
    mae: float
    mse: float  # root-mean-square, as the crowd-counting literature defines "MSE"

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "n": len(self.truth)}


def count_errors(estimate, truth) -> tuple[float, float]:
    """MAE and root-mean-square count error."""
    est = np.asarray(estimate, dtype=np.float64)
    gt = np.asarray(truth, dtype=np.float64)
    if est.size == 0:
        raise ValueError("cannot score an empty dataset")
    if est.shape != gt.shape:
        raise ValueError(f"{est.size} estimates for {gt.size} ground-truth counts")
    if not np.all(np.isfinite(est)):
        raise NumericalError(f"non-finite count estimate for item {int(np.argmin(np.isfinite(est)))}")
    err = est - gt
    mae = float(np.mean(np.abs(err)))
    mse = float(np.sqrt(np.mean(err * err)))
    # power-mean inequality; tiny slack for rounding
    assert mae <= mse * (1 + 1e-12) + 1e-15, (mae, mse)
    return mae, mse


def report(estimate, truth) -> EvalReport:
    mae, mse = count_errors(estimate, truth)
    return EvalReport([float(t) for t in truth], [float(e) for e in estimate], mae, mse)


def evaluate(params: ModelParams, dataset) -> EvalReport:
    """Count error of the model over ``(image, annotations)`` pairs."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    dtype = next(iter(params.tensors.values())).dtype
    est, gt = [], []
    for image, ann in dataset:
        res = forward(np.asarray(image, dtype=dtype), params)
        est.append(count(res.density))
        gt.append(len(ann.points))
    return report(est, gt)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

LOSSES = ("dms-ssim", "ms-ssim", "euclidean")


@dataclass
class DataConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_train: int = 64
    n_val: int = 16
    crop_size: int = 96
    batch: int = 4
    val_seed_offset: int = 1_000_000


@dataclass
class LossConfig:
    kind: str = "dms-ssim"
    dms_ssim: DmsSsimConfig = field(default_factory=DmsSsimConfig)
    side_supervision: bool = False

    def objective_config(self) -> DmsSsimConfig:
        if self.kind == "ms-ssim":
            return replace(self.dms_ssim, dilations=(1,) * self.dms_ssim.m)
        return self.dms_ssim


@dataclass
class TrainConfig:
    model: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: dict = field(default_factory=lambda: {"lr": 1e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8})
    steps: int = 300
    seed: int = 0
    checkpoint_dir: str | None = None
    val_every: int = 50
    dtype: str = "float64"

    def __post_init__(self):
        if self.loss.kind not in LOSSES:
            raise ValueError(f"loss kind must be one of {LOSSES}, got {self.loss.kind!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "loss": {
                "kind": self.loss.kind,
                "dms_ssim": self.loss.dms_ssim.to_dict(),
                "side_supervision": self.loss.side_supervision,
            },
            "data": {
                "scene": {**asdict(self.data.scene), "count_range": list(self.data.scene.count_range)},
                "n_train": self.data.n_train,
                "n_val": self.data.n_val,
                "crop_size": self.data.crop_size,
                "batch": self.data.batch,
                "val_seed_offset": self.data.val_seed_offset,
            },
            "optimizer": dict(self.optimizer),
            "steps": self.steps,
            "seed": self.seed,
            "checkpoint_dir": self.checkpoint_dir,
            "val_every": self.val_every,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {"model", "loss", "data", "optimizer", "steps", "seed", "checkpoint_dir", "val_every", "dtype"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training config fields: {sorted(extra)}")
        loss_d = dict(d.get("loss", {}))
        loss = LossConfig(
            kind=loss_d.pop("kind", "dms-ssim"),
            dms_ssim=DmsSsimConfig.from_dict(loss_d.pop("dms_ssim", {})),
            side_supervision=bool(loss_d.pop("side_supervision", False)),
        )
        if loss_d:
            raise ValueError(f"unknown loss config fields: {sorted(loss_d)}")
        data_d = dict(d.get("data", {}))
        scene = SceneSpec(**data_d.pop("scene", {}))
        data = DataConfig(scene=scene, **data_d)
        opt = {"lr": 1e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
        opt.update(d.get("optimizer", {}))
        return cls(
            model=BackboneConfig.from_dict(d.get("model", {})),
            loss=loss,
            data=data,
            optimizer=opt,
            steps=int(d.get("steps", 300)),
            seed=int(d.get("seed", 0)),
            checkpoint_dir=d.get("checkpoint_dir"),
            val_every=int(d.get("val_every", 50)),
            dtype=d.get("dtype", "float64"),
        )

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_dataset(scene: SceneSpec, n: int, first_seed: int) -> list[tuple[np.ndarray, AnnotationSet, np.ndarray]]:
    out = []
    for i in range(n):
        img, ann = generate_scene(replace(scene, seed=first_seed + i))
        out.append((img, ann, density_from_annotations(ann).density))
    return out


def _sum_pool(x: np.ndarray, f: int) -> np.ndarray:
    n, h, w = x.shape
    return x.reshape(n, h // f, f, w // f, f).sum(axis=(2, 4))


def _objective(res, target: np.ndarray, loss: LossConfig, cfg: DmsSsimConfig, density_scale: float) -> Tensor:
    """Loss on maps in scaled units, where densities have a dynamic range near 1."""
    y = Tensor(target * density_scale)
    if loss.kind == "euclidean":
        total = euclidean_loss(res.scaled, y)
    else:
        total = dms_ssim(res.scaled, y, cfg).loss
    if loss.side_supervision:
        for i, side in enumerate(res.side_outputs):
            pooled = Tensor(_sum_pool(y.data, 2**i)[:, None])
            total = T.add(total, euclidean_loss(side, pooled))
    return total


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_val_mae: float | None = None
    # parameters at the best validation MAE; the final ones when validation never ran
    best_params: ModelParams | None = None
    # head counts of the training scenes, for mean-count baselines
    train_counts: list[int] = field(default_factory=list)
    # first scene seed of the training and validation sets
    scene_seeds: tuple[int, int] | None = None


def train(config: TrainConfig, log_path=None) -> TrainResult:
    """Run the training loop; see :class:`TrainConfig` for the knobs.

    Per-purpose random streams (init, scenes, crops) derive from ``config.seed``.
    """
    dtype = np.float32 if config.dtype == "float32" else np.float64
    init_seed, scene_seed, crop_seed = np.random.SeedSequence(config.seed).generate_state(3)
    params = ModelParams.init(config.model, seed=int(init_seed)).astype(dtype)
    obj_cfg = config.loss.objective_config()
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if log_path is None and ckpt_dir:
        log_path = ckpt_dir / "train_log.jsonl"
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    records: list[dict] = []

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_file:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()

    try:
        if config.steps == 0:
            if ckpt_dir:
                save_checkpoint(ckpt_dir / "model.ntb", params, config.loss.dms_ssim)
            return TrainResult(params, records, None, params)

        data = config.data
        scene = replace(data.scene, seed=0)
        first_train = int(scene_seed) % 2**31
        first_val = first_train + data.val_seed_offset
        train_set = make_dataset(scene, data.n_train, first_train)
        val_set = make_dataset(scene, data.n_val, first_val)
        crop_rng = np.random.default_rng(int(crop_seed))
        opt = AdamState(
            lr=float(config.optimizer["lr"]),
            beta1=float(config.optimizer["beta1"]),
            beta2=float(config.optimizer["beta2"]),
            eps=float(config.optimizer["eps"]),
        )
        tensors = list(params.tensors.values())
        best = None
        best_params = None
        last_good = params.copy()
        for step in range(1, config.steps + 1):
            t0 = time.perf_counter()
            imgs, dens = [], []
            for _ in range(data.batch):
                img, _, den = train_set[int(crop_rng.integers(len(train_set)))]
                ((ci, cd),) = sample_crops(img, den, data.crop_size, 1, crop_rng)
                imgs.append(ci)
                dens.append(cd)
            x = np.stack(imgs).astype(dtype)
            y = np.stack(dens).astype(dtype)
            with T.Tape() as tape:
                res = forward(x, params)
                loss = _objective(res, y, config.loss, obj_cfg, config.model.density_scale)
            value = loss.item()
            if not math.isfinite(value):
                if ckpt_dir:
                    save_checkpoint(ckpt_dir / "last_good.ntb", last_good.astype(np.float64), config.loss.dms_ssim)
                raise NumericalError(f"non-finite loss at step {step}", step=step)
            grads = T.backward(tape, loss, tensors)
            adam_step(params, {t.name: g for t, g in grads.items()}, opt)
            if not params.all_finite():
                if ckpt_dir:
                    save_checkpoint(ckpt_dir / "last_good.ntb", last_good.astype(np.float64), config.loss.dms_ssim)
                raise NumericalError(f"non-finite parameters after step {step}", step=step)
            last_good = params.copy()
            emit({"step": step, "loss": value, "lr": opt.lr, "wall_ms": (time.perf_counter() - t0) * 1e3})
            if config.val_every and (step % config.val_every == 0 or step == config.steps):
                rep = evaluate(params, [(img, ann) for img, ann, _ in val_set])
                emit({"step": step, "val_mae": rep.mae, "val_mse": rep.mse})
                log.info("step %d loss %.5f val_mae %.3f", step, value, rep.mae)
                if best is None or rep.mae < best:
                    best = rep.mae
                    best_params = params.copy()
                    if ckpt_dir:
                        save_checkpoint(ckpt_dir / "best.ntb", params.astype(np.float64), config.loss.dms_ssim)
        if ckpt_dir:
            save_checkpoint(ckpt_dir / "model.ntb", params.astype(np.float64), config.loss.dms_ssim)
        return TrainResult(
            params,
            records,
            best,
            params if best_params is None else best_params,
            [len(a.points) for _, a, _ in train_set],
            (first_train, first_val),
        )
    finally:
        if log_file:
            log_file.close()


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError(f"need at least {window} values")
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def load_dataset(directory) -> list[tuple[np.ndarray, AnnotationSet]]:
    """Pairs ``<stem>.json`` annotations with ``<stem>.img`` DMP1-encoded images."""
    from .density import read_annotations, read_density

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    out = []
    for ann_path in sorted(directory.glob("*.json")):
        img_path = ann_path.with_suffix(".img")
        ann = read_annotations(ann_path)
        img = read_density(img_path)
        if img.shape != (ann.height, ann.width):
            raise ValueError(f"{img_path}: image {img.shape} does not match annotation canvas {ann.height}x{ann.width}")
        out.append((img[None], ann))
    return out


__all__ = [
    "SceneSpec",
    "AdamState",
    "EvalReport",
    "DataConfig",
    "LossConfig",
    "TrainConfig",
    "TrainResult",
    "PAPER_LR",
    "generate_scene",
    "sample_crops",
    "adam_step",
    "count_errors",
    "report",
    "evaluate",
    "train",
    "make_dataset",
    "moving_average",
    "load_dataset",
    "load_checkpoint",
]
