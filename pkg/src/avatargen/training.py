"""Loss suite, FLAME pseudo ground truth, and the two-stage training loop.

Stage 1 fits the target video only; stage 2 adds every part-swapped video.
Points are upsampled (and radii decayed) on a fixed epoch period, and the
point count is topped up to ``stage2_point_count`` at the stage switch.
Training is deterministic under a fixed seed in single-threaded mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .data import FrameRecord, VideoManifest, load_frame, save_model
from .errors import ConfigError, ShapeError, TrainingError
from .mini_flame import HeadTemplate
from .model import AvatarModel, DeformationOutput, nearest_vertex
from .rendering import render_avatar

Tensor = torch.Tensor


@dataclass
class LossWeights:
    # inner blendshape weights are scaled to the toy template's basis ranges,
    # whose rows are ~100x larger than the production head model's
    rgb: float = 1.0
    mask: float = 2.0
    flame: float = 1.0
    expr_inner: float = 10.0
    pose_inner: float = 10.0
    skin_inner: float = 1.0
    vgg: float = 0.1
    normal: float = 0.1
    seg: float = 0.5
    zreg: float = 1e-3

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")


@dataclass
class PseudoGT:
    """Per-point blendshape/skinning targets copied from the nearest template
    vertex, plus the optional per-pixel normal target image."""

    expr: Tensor     # N x 3 x n_psi
    pose: Tensor     # N x 3 x 9K
    weights: Tensor  # N x K simplex rows
    vertex_index: Tensor
    normal_image: Optional[Tensor] = None


@dataclass
class TrainConfig:
    epochs: int = 20
    stage2_start_epoch: int = 10
    stage2_point_count: int = 1600
    upsample_period: int = 5
    upsample_factor: float = 2.0
    upsample_noise: float = 0.25
    radius_decay: float = 0.75
    max_points: int = 0  # 0 = stage2_point_count
    lr_net: float = 1e-3
    lr_latent: float = 1e-2
    lr_points: float = 1e-3
    lr_gamma: float = 1.0  # per-epoch exponential decay on all groups
    batch_size: int = 1
    seed: int = 0
    holdout_last: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    feature_extractor: str = "gradient"
    checkpoint_every: int = 1
    single_thread: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_points == 0:
            self.max_points = self.stage2_point_count


# ---------------------------------------------------------------------------
# individual losses


def loss_rgb(pred: Tensor, gt: Tensor, fg_mask: Tensor) -> Tensor:
    """Mean L1 over the foreground region (per pixel and channel)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"rgb shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    m = fg_mask.reshape(*fg_mask.shape[:2], 1)
    denom = (m.sum() * pred.shape[2]).clamp_min(1.0)
    return ((pred - gt).abs() * m).sum() / denom


def loss_mask(pred_mask: Tensor, gt_mask: Tensor) -> Tensor:
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError("mask shapes differ")
    return (pred_mask - gt_mask).abs().mean()


def make_flame_pseudo_gt(
    points_fc: Tensor, template: HeadTemplate, normal_image: Optional[Tensor] = None
) -> PseudoGT:
    """Copy expression/pose/skinning rows from each point's nearest template
    vertex (ties go to the lower vertex index)."""
    idx = nearest_vertex(points_fc.detach().reshape(-1, 3), template.vertices)
    return PseudoGT(
        expr=template.expr_basis[idx],
        pose=template.pose_basis[idx],
        weights=template.skin_weights[idx],
        vertex_index=idx,
        normal_image=normal_image,
    )


def loss_flame(def_out: DeformationOutput, pseudo: PseudoGT, weights: LossWeights) -> Tensor:
    """Mean over points of weighted L2 distances to the pseudo targets."""
    n = def_out.expr_basis_pt.shape[0]
    e = (def_out.expr_basis_pt - pseudo.expr).reshape(n, -1).norm(dim=1)
    p = (def_out.pose_basis_pt - pseudo.pose).reshape(n, -1).norm(dim=1)
    w = (def_out.skin_weights_pt - pseudo.weights).norm(dim=1)
    return (weights.expr_inner * e + weights.pose_inner * p + weights.skin_inner * w).mean()


def loss_seg(rendered_seg: Tensor, gt_part_mask: Tensor, eps: float = 1e-6) -> Tensor:
    if rendered_seg.shape != gt_part_mask.shape:
        raise ShapeError("segmentation shapes differ")
    p = rendered_seg.clamp(eps, 1.0 - eps)
    y = gt_part_mask
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def loss_normal(pred: Tensor, gt: Tensor, mask: Tensor) -> Tensor:
    if pred.shape != gt.shape:
        raise ShapeError("normal image shapes differ")
    m = mask.reshape(*mask.shape[:2], 1)
    denom = (m.sum() * pred.shape[2]).clamp_min(1.0)
    return ((pred - gt).abs() * m).sum() / denom


def loss_zreg(table) -> Tensor:
    codes = table.all_codes()
    return codes.norm(dim=1).mean()


# -- perceptual features ------------------------------------------------------


class GradientFeatures:
    """Built-in perceptual stand-in: image plus x/y gradients at several scales.

    Pretrained-network extractors can be registered under their own name; the
    default keeps the package free of model downloads.
    """

    def __init__(self, levels: int = 3):
        self.levels = levels

    def __call__(self, img: Tensor) -> list[Tensor]:
        x = img.permute(2, 0, 1).unsqueeze(0)  # 1 x C x H x W
        feats = []
        for _ in range(self.levels):
            dx = x[:, :, :, 1:] - x[:, :, :, :-1]
            dy = x[:, :, 1:, :] - x[:, :, :-1, :]
            feats += [x, dx, dy]
            if min(x.shape[2], x.shape[3]) < 4:
                break
            x = torch.nn.functional.avg_pool2d(x, 2)
        return feats


FEATURE_EXTRACTORS: dict[str, Callable] = {"gradient": GradientFeatures()}


def register_feature_extractor(name: str, fn: Callable) -> None:
    FEATURE_EXTRACTORS[name] = fn


def loss_vgg(pred: Tensor, gt: Tensor, extractor: Optional[Callable]) -> Tensor:
    if extractor is None:
        raise ConfigError("no perceptual feature extractor configured")
    fp, fg = extractor(pred), extractor(gt)
    terms = [(a - b).abs().mean() for a, b in zip(fp, fg)]
    return torch.stack(terms).mean()


def total_loss(components: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, dict]:
    """Weighted sum plus a float breakdown for logging."""
    wmap = {
        "rgb": weights.rgb, "mask": weights.mask, "flame": weights.flame,
        "vgg": weights.vgg, "normal": weights.normal, "seg": weights.seg,
        "zreg": weights.zreg,
    }
    total = torch.zeros(())
    breakdown = {}
    for name, value in components.items():
        if name not in wmap:
            raise ConfigError(f"unknown loss component '{name}'")
        if not torch.isfinite(value):
            raise TrainingError(f"loss component '{name}' is not finite")
        total = total + wmap[name] * value
        breakdown[name] = float(value.detach())
    breakdown["total"] = float(total.detach())
    return total, breakdown


# ---------------------------------------------------------------------------
# per-frame objective (shared between the loop and the gradient tests)


def compute_frame_losses(
    model: AvatarModel,
    z: Tensor,
    frame: FrameRecord,
    seg_gt: Optional[Tensor],
    weights: LossWeights,
    extractor: Optional[Callable],
    frame_idx: Optional[int] = None,
    background: Sequence[float] = (0.0, 0.0, 0.0),
) -> tuple[Tensor, dict]:
    """Forward + render + full loss stack for one frame."""
    cam = frame.params.camera
    if cam is None:
        raise ConfigError("frame parameters carry no camera")
    avout = model(z, frame.params, frame_idx=frame_idx)
    rout = render_avatar(
        avout, cam, radius=model.radius,
        channels=("rgb", "mask", "normal", "seg"),
        background=torch.tensor(background, dtype=torch.float32),
    )
    comps = {
        "rgb": loss_rgb(rout.rgb, frame.image, frame.fg_mask),
        "mask": loss_mask(rout.mask, frame.fg_mask),
        "flame": loss_flame(
            avout["deformation"],
            make_flame_pseudo_gt(avout["x_fc"], model.template),
            weights,
        ),
        "vgg": loss_vgg(rout.rgb, frame.image, extractor),
        "zreg": loss_zreg(model.latent),
    }
    if frame.normal is not None and weights.normal > 0:
        comps["normal"] = loss_normal(rout.normal, frame.normal, frame.fg_mask)
    if seg_gt is not None and weights.seg > 0:
        comps["seg"] = loss_seg(rout.seg, seg_gt)
    return total_loss(comps, weights)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoints: list[Path]
    metrics_path: Path
    final_model: AvatarModel
    epoch_means: list[float]
    batch_log: list[dict]


def _seg_target(manifest: VideoManifest, frame: FrameRecord) -> Optional[Tensor]:
    """Which region the segmentation cue should mark for this video."""
    if manifest.role == "target":
        return torch.zeros_like(frame.fg_mask)
    if manifest.attribute and manifest.attribute in frame.part_masks:
        return frame.part_masks[manifest.attribute]
    return torch.zeros_like(frame.fg_mask)


def _make_optimizer(model: AvatarModel, config: TrainConfig) -> torch.optim.Optimizer:
    latent_params = list(model.latent.parameters())
    latent_ids = {id(p) for p in latent_params}
    net_params = [
        p for p in model.parameters()
        if id(p) not in latent_ids and p is not model.points
    ]
    return torch.optim.Adam([
        {"params": net_params, "lr": config.lr_net},
        {"params": latent_params, "lr": config.lr_latent},
        {"params": [model.points], "lr": config.lr_points},
    ])


def _set_epoch_lr(optimizer: torch.optim.Optimizer, config: TrainConfig, epoch: int) -> None:
    decay = config.lr_gamma ** epoch
    for group, base in zip(optimizer.param_groups,
                           (config.lr_net, config.lr_latent, config.lr_points)):
        group["lr"] = base * decay


def train(
    model: AvatarModel,
    datasets: Sequence[VideoManifest],
    config: TrainConfig,
    out_dir: Path | str,
) -> TrainResult:
    """Two-stage training over a target video plus part-swapped videos.

    A single manifest is treated as the target regardless of its role, which
    is how single-identity attribute-db avatars are built.
    """
    if not datasets:
        raise ConfigError("no training videos given")
    if config.single_thread:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)

    manifests = list(datasets)
    if len(manifests) == 1:
        target = manifests[0]
    else:
        targets = [m for m in manifests if m.role == "target"]
        if len(targets) != 1:
            raise ConfigError("training needs exactly one target-role video")
        target = targets[0]
    swapped = [m for m in manifests if m is not target]

    # latent assignments: target keeps defaults; each swapped video binds its
    # (part, source) code; all share the identity slot by construction
    model.latent.assign_video(target.video_id, {})
    for man in swapped:
        if not man.attribute:
            raise ConfigError(f"video {man.video_id} lacks an attribute label")
        model.latent.assign_video(man.video_id, {man.attribute: man.source_id or man.video_id})

    # preload all frames (desk scale) and give each a global lighting slot
    frames: dict[str, list[FrameRecord]] = {}
    frame_slots: dict[tuple[str, int], int] = {}
    for man in manifests:
        count = man.frame_count - (1 if config.holdout_last else 0)
        frames[man.video_id] = [load_frame(man, i) for i in range(count)]
        for i in range(count):
            frame_slots[(man.video_id, i)] = len(frame_slots)
    model.init_lighting(max(len(frame_slots), 1))

    extractor = FEATURE_EXTRACTORS.get(config.feature_extractor)
    if extractor is None and config.loss_weights.vgg > 0:
        raise ConfigError(f"unknown feature extractor '{config.feature_extractor}'")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.ndjson"
    metrics_file = open(metrics_path, "w")
    optimizer = _make_optimizer(model, config)
    checkpoints: list[Path] = []
    epoch_means: list[float] = []
    batch_log: list[dict] = []
    model.train()

    step = 0
    try:
        for epoch in range(config.epochs):
            stage2 = epoch >= config.stage2_start_epoch
            if epoch > 0 and epoch % config.upsample_period == 0 and model.points.shape[0] < config.max_points:
                factor = min(config.upsample_factor, config.max_points / model.points.shape[0])
                if factor > 1:
                    model.apply_upsample(factor, config.upsample_noise, config.radius_decay,
                                         seed=config.seed + epoch)
                    optimizer = _make_optimizer(model, config)
            if epoch == config.stage2_start_epoch and model.points.shape[0] < config.stage2_point_count:
                model.apply_upsample(
                    config.stage2_point_count / model.points.shape[0],
                    config.upsample_noise, 1.0, seed=config.seed + 7919 + epoch,
                )
                optimizer = _make_optimizer(model, config)

            _set_epoch_lr(optimizer, config, epoch)
            active = manifests if stage2 else [target]
            pairs = [(m, i) for m in active for i in range(len(frames[m.video_id]))]
            g = torch.Generator().manual_seed(config.seed * 100003 + epoch)
            order = torch.randperm(len(pairs), generator=g).tolist()

            losses = []
            for j in order:
                man, fi = pairs[j]
                frame = frames[man.video_id][fi]
                z = model.latent.compose_for_video(man.video_id)
                seg_gt = _seg_target(man, frame)
                optimizer.zero_grad()
                total, breakdown = compute_frame_losses(
                    model, z, frame, seg_gt, config.loss_weights, extractor,
                    frame_idx=frame_slots[(man.video_id, fi)],
                    background=config.background,
                )
                total.backward()
                optimizer.step()
                losses.append(breakdown["total"])
                record = {
                    "epoch": epoch, "step": step, "video": man.video_id, "frame": fi,
                    "n_points": int(model.points.shape[0]), "radius": model.radius,
                    **{f"loss_{k}": v for k, v in breakdown.items()},
                }
                metrics_file.write(json.dumps(record) + "\n")
                batch_log.append({"epoch": epoch, "step": step, "video": man.video_id, "frame": fi})
                step += 1
            metrics_file.flush()
            epoch_means.append(sum(losses) / max(len(losses), 1))

            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                ck = out / f"checkpoint_{epoch:04d}.ckpt"
                save_model(ck, model)
                checkpoints.append(ck)
    finally:
        metrics_file.close()

    save_model(out / "model.ckpt", model)
    checkpoints.append(out / "model.ckpt")
    model.eval()
    return TrainResult(
        checkpoints=checkpoints, metrics_path=metrics_path,
        final_model=model, epoch_means=epoch_means, batch_log=batch_log,
    )
