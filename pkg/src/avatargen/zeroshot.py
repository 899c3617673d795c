"""Zero-shot avatar composition without retraining.

Two trained avatars are evaluated under the same FLAME parameters; the
source's attribute points (segmentation cue on) replace the target's, extra
source points fill the gap left by the removed target attribute (k-nearest
selection against designated head-template gap vertices), a learnable rigid
adjustment at the FLAME-canonical stage aligns the source, and the filler
points borrow color/normal features from their nearest target points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .errors import AvatarError, ParameterError, ShapeError
from .mini_flame import FlameParams, deform_template, rodrigues
from .model import AvatarModel

Tensor = torch.Tensor


@dataclass
class SegmentedAvatar:
    """One avatar's forward output with a binary attribute segmentation."""

    points_fc: Tensor   # N x 3 FLAME-canonical positions
    points_d: Tensor    # N x 3 deformed positions
    seg: Tensor         # N in {0, 1}
    colors: Tensor      # N x 3
    normals: Tensor     # N x 3
    provenance: str = "target"

    def __post_init__(self):
        n = self.points_d.shape[0]
        for name in ("points_fc", "seg", "colors", "normals"):
            t = getattr(self, name)
            if t.shape[0] != n:
                raise ShapeError(f"SegmentedAvatar.{name} length mismatch")
        self.seg = (self.seg >= 0.5).to(torch.float32)

    @property
    def n(self) -> int:
        return self.points_d.shape[0]


@dataclass
class RigidAdjust:
    """Axis-angle rotation plus translation applied at the FLAME-canonical stage."""

    rotation: Tensor = field(default_factory=lambda: torch.zeros(3))
    translation: Tensor = field(default_factory=lambda: torch.zeros(3))
    final_objective: float = 0.0
    initial_objective: float = 0.0

    def apply(self, points_fc: Tensor) -> Tensor:
        R = rodrigues(self.rotation.to(points_fc.dtype))
        return points_fc @ R.T + self.translation.to(points_fc.dtype)


def evaluate_segmented(
    model: AvatarModel, params: FlameParams, overrides: Optional[dict] = None,
    provenance: str = "target",
) -> SegmentedAvatar:
    """Run an avatar forward and binarize its segmentation cue at 0.5."""
    z = model.latent.compose(overrides)
    with torch.no_grad():
        out = model(z, params, create_graph=False)
    return SegmentedAvatar(
        points_fc=out["x_fc"].detach(),
        points_d=out["positions"].detach(),
        seg=out["seg"].detach(),
        colors=out["color"].detach().clamp(0, 1),
        normals=out["normal"].detach(),
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# set composition


def naive_compose(source: SegmentedAvatar, target: SegmentedAvatar) -> dict:
    """Union of source attribute points and target non-attribute points.

    Returns index tensors into each avatar plus provenance bookkeeping; the
    count identity |P| = |seg_src=1| + |seg_tgt=0| holds exactly.
    """
    src_idx = torch.nonzero(source.seg > 0.5, as_tuple=False).reshape(-1)
    tgt_idx = torch.nonzero(target.seg < 0.5, as_tuple=False).reshape(-1)
    positions = torch.cat([source.points_d[src_idx], target.points_d[tgt_idx]])
    return {
        "source_indices": src_idx,
        "target_indices": tgt_idx,
        "positions": positions,
        "count": src_idx.numel() + tgt_idx.numel(),
    }


def _min_dist_to_set(points: Tensor, refs: Tensor) -> Tensor:
    return torch.cdist(points, refs).min(dim=1).values


def gap_vertices(
    template, params: FlameParams, target: SegmentedAvatar, max_vertex_dist: float = 0.3,
) -> Tensor:
    """Posed designated back-of-head vertices lying near the target's removed
    attribute region; empty when the target has no attribute points."""
    posed = deform_template(template, params)["vertices"]
    back = posed[template.back_of_head_indices]
    attr_pts = target.points_d[target.seg > 0.5]
    if attr_pts.shape[0] == 0:
        return back[:0]
    near = _min_dist_to_set(back, attr_pts) < max_vertex_dist
    return back[near]


def additional_part_mask(
    gap_points: Tensor, source_points: Tensor, source_seg: Tensor, k: int = 2000,
) -> Tensor:
    """Mark the k source points nearest the gap vertex set, gated to points
    outside the source's own attribute (seg = 0)."""
    n = source_points.shape[0]
    if k < 0 or k > n:
        raise ParameterError(f"k must be in [0, {n}], got {k}")
    mask = torch.zeros(n, dtype=torch.float32)
    if k == 0:
        return mask
    if gap_points.shape[0] == 0:
        import logging

        logging.getLogger(__name__).warning("empty gap vertex set; no additional points")
        return mask
    d = _min_dist_to_set(source_points, gap_points)
    order = torch.argsort(d, stable=True)
    mask[order[:k]] = 1.0
    return mask * (source_seg < 0.5).to(torch.float32)


def landmark_anchor(posed_landmarks: Tensor, points: Tensor) -> Tensor:
    """Nearest avatar point id per posed landmark; ties to the lower index."""
    if points.shape[0] < posed_landmarks.shape[0]:
        raise ParameterError("fewer points than landmarks")
    d2 = ((posed_landmarks[:, None, :] - points[None, :, :]) ** 2).sum(dim=2)
    return d2.argmin(dim=1)


def blend_features(
    additional_points: Tensor, target: SegmentedAvatar,
) -> tuple[Tensor, Tensor]:
    """Copy color and normal from each additional point's nearest target point."""
    if target.n == 0:
        raise ParameterError("target avatar has no points")
    d2 = ((additional_points[:, None, :] - target.points_d[None, :, :]) ** 2).sum(dim=2)
    nn = d2.argmin(dim=1)
    return target.colors[nn], target.normals[nn]


# ---------------------------------------------------------------------------
# rigid alignment


def align_rigid(
    source_model: AvatarModel,
    source: SegmentedAvatar,
    target: SegmentedAvatar,
    add_mask: Tensor,
    params: FlameParams,
    source_def,
    iters: int = 200,
    lr: float = 1e-2,
) -> RigidAdjust:
    """Optimize a FLAME-canonical rotation/translation of the source so its
    landmarks and filler points meet the target in deformed space.

    The objective is d1 + d2: mean squared landmark distance plus mean squared
    nearest-neighbor distance from the filler points to the target's
    non-attribute points.  The best-seen adjustment is returned; the run
    aborts if the objective grows tenfold.
    """
    from dataclasses import replace as _dc_replace

    template = source_model.template
    # the deformation constants and point sets are data here, not variables
    source_def = _dc_replace(
        source_def,
        offset_gc_sc=source_def.offset_gc_sc.detach(),
        offset_sc_fc=source_def.offset_sc_fc.detach(),
        expr_basis_pt=source_def.expr_basis_pt.detach(),
        pose_basis_pt=source_def.pose_basis_pt.detach(),
        skin_weights_pt=source_def.skin_weights_pt.detach(),
    )
    src_fc = source.points_fc.detach()
    posed_lm = deform_template(template, params)["vertices"][template.landmark_indices]
    tgt_anchor = landmark_anchor(posed_lm, target.points_d)
    tgt_lm = target.points_d[tgt_anchor].detach()
    add_idx = torch.nonzero(add_mask > 0.5, as_tuple=False).reshape(-1)
    tgt_keep = target.points_d[target.seg < 0.5].detach()
    use_d2 = add_idx.numel() > 0 and tgt_keep.shape[0] > 0
    if not use_d2:
        import logging

        logging.getLogger(__name__).warning("no filler points; aligning with landmarks only")

    rot = torch.zeros(3, requires_grad=True)
    tr = torch.zeros(3, requires_grad=True)

    def move(r, t) -> Tensor:
        moved_fc = src_fc @ rodrigues(r).T + t
        return source_model.pose_from_flame_canonical(moved_fc, source_def, params)

    def objective(moved_d: Tensor, src_anchor: Tensor) -> Tensor:
        d1 = ((moved_d[src_anchor] - tgt_lm) ** 2).sum(dim=1).mean()
        if use_d2:
            d2 = (torch.cdist(moved_d[add_idx], tgt_keep).min(dim=1).values ** 2).mean()
        else:
            d2 = torch.zeros(())
        return d1 + d2

    def evaluate(r, t) -> float:
        # anchors recomputed at the evaluated pose: the reported distance is
        # zero exactly when the two geometries meet
        with torch.no_grad():
            moved = move(r, t)
            return float(objective(moved, landmark_anchor(posed_lm, moved)))

    initial = evaluate(rot.detach(), tr.detach())
    best = RigidAdjust(rotation=torch.zeros(3), translation=torch.zeros(3),
                       final_objective=initial, initial_objective=initial)
    if iters == 0:
        return best

    # ICP structure: anchor correspondences stay fixed within a round and are
    # refreshed from the current pose between rounds
    round_len = 25
    opt = torch.optim.Adam([rot, tr], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=iters)
    steps = 0
    while steps < iters:
        with torch.no_grad():
            src_anchor = landmark_anchor(posed_lm, move(rot, tr))
        for _ in range(min(round_len, iters - steps)):
            opt.zero_grad()
            d = objective(move(rot, tr), src_anchor)
            d_val = float(d.detach())
            if not torch.isfinite(d) or d_val > 10.0 * max(initial, 1e-12):
                raise AvatarError(
                    f"rigid alignment diverged (objective {d_val:.3g} from {initial:.3g})"
                )
            d.backward()
            opt.step()
            sched.step()
            steps += 1
        cur = evaluate(rot.detach(), tr.detach())
        if cur < best.final_objective:
            best = RigidAdjust(rotation=rot.detach().clone(), translation=tr.detach().clone(),
                               final_objective=cur, initial_objective=initial)
    return best


# ---------------------------------------------------------------------------
# full composition


@dataclass
class ComposedAvatar:
    """Renderable zero-shot composite plus its construction bookkeeping."""

    positions: Tensor
    colors: Tensor
    normals: Tensor
    seg: Tensor
    provenance: Tensor          # 0 = source attribute, 1 = filler, 2 = target
    adjust: RigidAdjust
    counts: dict
    radius: float

    def render_input(self) -> dict:
        return {"positions": self.positions, "color": self.colors,
                "normal": self.normals, "seg": self.seg}


def compose(
    source_model: AvatarModel,
    target_model: AvatarModel,
    part: str,
    params: FlameParams,
    source_overrides: Optional[dict] = None,
    k_additional: int = 2000,
    iters: int = 200,
    lr: float = 1e-2,
) -> ComposedAvatar:
    """Full zero-shot pipeline: segmentation-gated union, gap filling, rigid
    alignment at the FLAME-canonical stage, and feature blending."""
    if part not in source_model.config.parts:
        raise ParameterError(f"source model does not know part '{part}'")
    z_src = source_model.latent.compose(source_overrides)
    with torch.no_grad():
        src_out = source_model(z_src, params, create_graph=False)
    source = SegmentedAvatar(
        points_fc=src_out["x_fc"].detach(), points_d=src_out["positions"].detach(),
        seg=src_out["seg"].detach(), colors=src_out["color"].detach().clamp(0, 1),
        normals=src_out["normal"].detach(), provenance="source",
    )
    target = evaluate_segmented(target_model, params, provenance="target")

    gaps = gap_vertices(target_model.template, params, target)
    k = min(k_additional, source.n)
    add_mask = additional_part_mask(gaps, source.points_d, source.seg, k=k)
    adjust = align_rigid(
        source_model, source, target, add_mask, params,
        source_def=src_out["deformation"], iters=iters, lr=lr,
    )

    with torch.no_grad():
        moved_fc = adjust.apply(source.points_fc)
        moved_d = source_model.pose_from_flame_canonical(
            moved_fc, src_out["deformation"], params)

    src_idx = torch.nonzero(source.seg > 0.5).reshape(-1)
    add_idx = torch.nonzero(add_mask > 0.5).reshape(-1)
    tgt_idx = torch.nonzero(target.seg < 0.5).reshape(-1)
    add_colors, add_normals = (
        blend_features(moved_d[add_idx], target) if add_idx.numel()
        else (source.colors[:0], source.normals[:0])
    )
    positions = torch.cat([moved_d[src_idx], moved_d[add_idx], target.points_d[tgt_idx]])
    colors = torch.cat([source.colors[src_idx], add_colors, target.colors[tgt_idx]])
    normals = torch.cat([source.normals[src_idx], add_normals, target.normals[tgt_idx]])
    seg = torch.cat([
        torch.ones(src_idx.numel()), torch.zeros(add_idx.numel()), torch.zeros(tgt_idx.numel()),
    ])
    provenance = torch.cat([
        torch.zeros(src_idx.numel(), dtype=torch.long),
        torch.ones(add_idx.numel(), dtype=torch.long),
        torch.full((tgt_idx.numel(),), 2, dtype=torch.long),
    ])
    return ComposedAvatar(
        positions=positions, colors=colors, normals=normals, seg=seg,
        provenance=provenance, adjust=adjust,
        counts={"source": int(src_idx.numel()), "additional": int(add_idx.numel()),
                "target": int(tgt_idx.numel())},
        radius=min(source_model.radius, target_model.radius),
    )
