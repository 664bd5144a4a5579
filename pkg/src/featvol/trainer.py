"""Joint and frozen-renderer optimization of feature volumes and radiance networks."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from featvol import feature_volume as fv
from featvol import render_net as rn
from featvol.errors import InvalidArgumentError, InvariantViolation, TrainingDivergedError
from featvol.ray_engine import RenderConfig, render_image, render_rays, render_rays_backward
from featvol.scene_io import SceneDataset, psnr, ssim

log = logging.getLogger(__name__)

NET_PRESETS = {"desk": rn.DESK_PRESET, "full": rn.FULL_PRESET}
LOG_FIELDS = ["iter", "scene", "stage", "loss_r", "loss_tv", "psnr_running"]


@dataclass
class TrainConfig:
    rays_per_batch: int = 1024
    n_coarse: int = 64
    n_fine: int = 64
    tv_lambda: float = 1e-4
    lr_net: float = 5e-4
    lr_volume: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    resolutions: list = field(default_factory=lambda: [16, 32, 64, 128])
    stage_steps: list = field(default_factory=lambda: [2000])
    scene_block: int = 50
    seed: int = 0
    net: str = "desk"
    feat_len: int = 16
    init_scale: float = 0.01
    background: tuple = (0.0, 0.0, 0.0)
    sigma_noise: float = 0.0
    perturb: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.resolutions = [int(r) for r in self.resolutions]
        if isinstance(self.stage_steps, int):
            self.stage_steps = [self.stage_steps]
        self.stage_steps = [int(s) for s in self.stage_steps]
        if len(self.stage_steps) == 1:
            self.stage_steps = self.stage_steps * len(self.resolutions)
        self.background = tuple(float(c) for c in self.background)
        for name in ("rays_per_batch", "n_coarse", "scene_block", "feat_len"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.n_fine < 0 or self.tv_lambda < 0 or self.lr_net <= 0 or self.lr_volume <= 0:
            raise InvalidArgumentError("invalid rate or sample count")
        if not self.resolutions or self.resolutions[0] < 2:
            raise InvalidArgumentError("resolutions must start at >= 2")
        if any(b != 2 * a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise InvalidArgumentError(f"resolution schedule must double at each stage: {self.resolutions}")
        if len(self.stage_steps) != len(self.resolutions) or min(self.stage_steps) < 0:
            raise InvalidArgumentError("need one non-negative step budget per resolution stage")
        if self.net not in NET_PRESETS:
            raise InvalidArgumentError(f"unknown network preset {self.net!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def render(self) -> RenderConfig:
        return RenderConfig(self.n_coarse, self.n_fine, self.background, self.sigma_noise)

    def descriptor(self) -> rn.NetDescriptor:
        base = NET_PRESETS[self.net]
        return rn.NetDescriptor(self.feat_len, base.enc_order, base.depth, base.width, base.skip,
                                base.bottleneck, base.branch)


class Adam:
    """Adam over a dict of dense arrays."""

    def __init__(self, like: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in like.items()}
        self.v = {k: np.zeros_like(v) for k, v in like.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


class LazyAdam:
    """Adam for a feature volume that only touches nodes with gradient this step."""

    def __init__(self, volume: fv.FeatureVolume, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        shape = (volume.n_cells, volume.feat_len)
        self.m = np.zeros(shape, dtype=volume.data.dtype)
        self.v = np.zeros(shape, dtype=volume.data.dtype)
        self.step_count = 0

    def step(self, volume: fv.FeatureVolume, grad: fv.VolumeGrad, lr: float):
        self.step_count += 1
        t = self.step_count
        rows = np.nonzero(grad.touched)[0]
        if rows.size == 0:
            return
        g = grad.data[rows]
        m = self.beta1 * self.m[rows] + (1 - self.beta1) * g
        v = self.beta2 * self.v[rows] + (1 - self.beta2) * g * g
        self.m[rows] = m
        self.v[rows] = v
        upd = lr * (m / (1 - self.beta1 ** t)) / (np.sqrt(v / (1 - self.beta2 ** t)) + self.eps)
        flat = volume.data.reshape(-1, volume.feat_len)
        flat[rows] -= upd.astype(flat.dtype)


@dataclass
class OptimizerState:
    coarse: Adam
    fine: Adam

    @classmethod
    def for_params(cls, params: rn.RenderParams, cfg: TrainConfig):
        return cls(Adam(params.coarse, cfg.beta1, cfg.beta2, cfg.adam_eps),
                   Adam(params.fine, cfg.beta1, cfg.beta2, cfg.adam_eps))


class SceneSlot:
    """One scene's dataset, feature volume and volume optimizer."""

    def __init__(self, dataset: SceneDataset, volume: fv.FeatureVolume, cfg: TrainConfig):
        if not np.allclose(volume.bounds, dataset.aabb.astype(np.float32), atol=1e-6):
            raise InvalidArgumentError("volume bounds do not match dataset AABB")
        self.scene_id = dataset.scene_id
        self.dataset = dataset
        self.volume = volume
        self.cfg = cfg
        self.reset_optimizer()
        self.rays = dataset.rays("train")

    @classmethod
    def create(cls, dataset: SceneDataset, cfg: TrainConfig, seed=None):
        n = cfg.resolutions[0]
        vol = fv.new_volume((n, n, n), cfg.feat_len, dataset.aabb, cfg.init_scale,
                            cfg.seed if seed is None else seed, np.dtype(cfg.dtype))
        return cls(dataset, vol, cfg)

    def reset_optimizer(self):
        self.opt = LazyAdam(self.volume, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)


def reconstruction_loss(volume, params, origins, dirs, near, far, target, cfg: RenderConfig, rng=None,
                        volume_grad=None, net_grads=None):
    """Mean over rays of the coarse plus fine squared color errors.

    Gradients are accumulated into ``volume_grad`` / ``net_grads`` when given.
    Returns ``(loss, render_output)``.
    """
    n = origins.shape[0]
    if n == 0:
        raise InvalidArgumentError("empty ray batch")
    out = render_rays(volume, params, origins, dirs, near, far, cfg, rng)
    target = np.asarray(target, dtype=out.fine.rgb.dtype)
    ec = out.coarse.rgb - target
    ef = out.fine.rgb - target
    loss = float((np.sum(ec.astype(np.float64) ** 2) + np.sum(ef.astype(np.float64) ** 2)) / n)
    if volume_grad is not None or net_grads is not None:
        render_rays_backward(out, params, 2.0 * ec / n, 2.0 * ef / n, cfg, volume_grad, net_grads)
    return loss, out


def _zero_grads(params: rn.RenderParams):
    return {"coarse": {k: np.zeros_like(v) for k, v in params.coarse.items()},
            "fine": {k: np.zeros_like(v) for k, v in params.fine.items()}}


def train_step(slot: SceneSlot, params: rn.RenderParams, net_opt: OptimizerState | None, cfg: TrainConfig,
               rng: np.random.Generator, frozen=False, iteration=0, stage=0) -> dict:
    """One Adam update of the scene volume and (unless frozen) the networks."""
    o, d, c, near, far = slot.rays
    sel = rng.integers(0, o.shape[0], size=cfg.rays_per_batch)
    vgrad = fv.VolumeGrad.like(slot.volume)
    ngrads = None if frozen else _zero_grads(params)
    loss_r, out = reconstruction_loss(slot.volume, params, o[sel], d[sel], near[sel], far[sel], c[sel],
                                      cfg.render, rng if cfg.perturb else None, vgrad, ngrads)
    region = fv.tv_region_sample(slot.volume, rng)
    loss_tv = fv.tv_loss(slot.volume, region, vgrad if cfg.tv_lambda > 0 else None, scale=cfg.tv_lambda)
    total = loss_r + cfg.tv_lambda * loss_tv
    if not math.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss at iteration {iteration}, scene {slot.scene_id!r}, stage {stage}: "
            f"loss_r={loss_r}, loss_tv={loss_tv}")
    if not frozen:
        net_opt.coarse.step(params.coarse, ngrads["coarse"], cfg.lr_net)
        net_opt.fine.step(params.fine, ngrads["fine"], cfg.lr_net)
    slot.opt.step(slot.volume, vgrad, cfg.lr_volume)
    mse_f = float(np.mean((out.fine.rgb.astype(np.float64) - c[sel]) ** 2))
    return {"loss_r": loss_r, "loss_tv": loss_tv, "loss": total, "psnr": -10.0 * math.log10(max(mse_f, 1e-10))}


@dataclass
class TrainResult:
    params: rn.RenderParams
    slots: list
    history: list
    visits: dict


def write_checkpoint(directory, params, slots, state: dict):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rn.save_params(params, directory / "net.cnrfnet")
    h = rn.renderer_hash(params)
    for slot in slots:
        slot.volume.renderer_hash = h
        fv.save_volume(slot.volume, directory / f"scene_{slot.scene_id}.cnrfvol")
    (directory / "state.json").write_text(json.dumps(state, indent=1, default=str))


def train_multi_scene(slots, params: rn.RenderParams, cfg: TrainConfig, net_opt: OptimizerState | None = None,
                      frozen=False, checkpoint_dir=None, log_path=None, rng=None) -> TrainResult:
    """Coarse-to-fine, round-robin training over scenes.

    Each stage repeatedly picks a scene uniformly at random and runs
    ``scene_block`` consecutive steps on it until the stage budget is spent.
    Between stages every volume is upsampled 2x and its optimizer reset;
    network weights and moments carry over.
    """
    if not slots:
        raise InvalidArgumentError("need at least one scene")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if net_opt is None and not frozen:
        net_opt = OptimizerState.for_params(params, cfg)
    history = []
    visits = {s.scene_id: 0 for s in slots}
    running = None
    it = 0
    log_file = writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_FIELDS)
    try:
        for stage, (res, budget) in enumerate(zip(cfg.resolutions, cfg.stage_steps)):
            for slot in slots:
                if slot.volume.dims != (res, res, res):
                    raise InvalidArgumentError(
                        f"scene {slot.scene_id!r} volume dims {slot.volume.dims} do not match stage resolution {res}")
            done = 0
            while done < budget:
                slot = slots[int(rng.integers(len(slots)))]
                visits[slot.scene_id] += 1
                for _ in range(min(cfg.scene_block, budget - done)):
                    m = train_step(slot, params, net_opt, cfg, rng, frozen, it, stage)
                    running = m["psnr"] if running is None else 0.95 * running + 0.05 * m["psnr"]
                    m.update(iter=it, scene=slot.scene_id, stage=stage, psnr_running=running)
                    history.append(m)
                    if writer is not None:
                        writer.writerow([it, slot.scene_id, stage, f"{m['loss_r']:.8g}", f"{m['loss_tv']:.8g}",
                                         f"{running:.6g}"])
                    it += 1
                    done += 1
                log.debug("stage %d scene %s iter %d loss %.5g", stage, slot.scene_id, it, m["loss"])
            if stage + 1 < len(cfg.resolutions):
                if checkpoint_dir is not None:
                    write_checkpoint(checkpoint_dir, params, slots,
                                     {"stage": stage, "iteration": it, "rng_state": rng.bit_generator.state,
                                      "config": cfg.to_dict()})
                for slot in slots:
                    slot.volume = fv.upsample_2x(slot.volume)
                    slot.reset_optimizer()
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_dir is not None:
        write_checkpoint(checkpoint_dir, params, slots,
                         {"stage": len(cfg.resolutions) - 1, "iteration": it, "rng_state": rng.bit_generator.state,
                          "config": cfg.to_dict(), "done": True})
    h = rn.renderer_hash(params)
    for slot in slots:
        slot.volume.renderer_hash = h
    return TrainResult(params, slots, history, visits)


def optimize_novel_scene(dataset: SceneDataset, params: rn.RenderParams, cfg: TrainConfig, checkpoint_dir=None,
                         log_path=None, seed=None) -> TrainResult:
    """Fit a new scene's volume against fixed network weights."""
    before = rn.renderer_hash(params)
    slot = SceneSlot.create(dataset, cfg, seed)
    result = train_multi_scene([slot], params, cfg, frozen=True, checkpoint_dir=checkpoint_dir, log_path=log_path)
    if rn.renderer_hash(params) != before:
        raise InvariantViolation("network weights changed during frozen-renderer optimization")
    return result


def evaluate(volume, params, dataset: SceneDataset, cfg: TrainConfig | RenderConfig, split="heldout",
             return_images=False):
    """Render a split and score it with PSNR and SSIM."""
    rcfg = cfg.render if isinstance(cfg, TrainConfig) else cfg
    ids = dataset.heldout_idx if split == "heldout" else dataset.train_idx
    views, images = [], []
    for i in ids:
        img = render_image(volume, params, dataset.cameras[i], rcfg)
        gt = dataset.images[i]
        views.append({"index": int(i), "psnr": psnr(img, gt), "ssim": ssim(np.clip(img, 0, 1), gt)})
        images.append(img)
    result = {
        "split": split,
        "views": views,
        "mean_psnr": float(np.mean([v["psnr"] for v in views])) if views else float("nan"),
        "mean_ssim": float(np.mean([v["ssim"] for v in views])) if views else float("nan"),
    }
    if return_images:
        return result, images
    return result
