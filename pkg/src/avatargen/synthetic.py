"""Synthetic scene generator: procedural heads with exact part masks, exact
FLAME parameters, and ground-truth part-swapped composites.

Each scene identity is a dense point sampling of the toy head template with
part regions (hair dome, nose bump, eye patches, ...) that carry per-variant
colors and radial geometry offsets.  Frames are rendered with the package's
own point renderer, so every derived quantity (masks, normals, composites)
is exact with respect to the rendering model used in training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (
    DATASET_SCHEMA,
    VideoManifest,
    save_frame,
    save_template,
    write_manifest,
)
from .errors import ParameterError
from .mini_flame import (
    FlameParams,
    HeadTemplate,
    PointBases,
    apply_blendshapes,
    build_toy_template,
    lbs,
    regress_joints,
    rodrigues,
)
from .model import PARTS, deform_normals
from .rendering import Camera, render

Tensor = torch.Tensor

SKIN = -1  # part label for unlabeled surface

# hair keeps strong contrast (it drives the part-swap and disentanglement
# checks); the small features stay visually distinct but muted so the tiny
# few-pixel regions remain fittable at desk resolution
_PART_COLORS = {
    "hair": [(0.30, 0.18, 0.10), (0.08, 0.08, 0.10), (0.78, 0.64, 0.27), (0.55, 0.14, 0.10)],
    "nose": [(0.88, 0.66, 0.52), (0.70, 0.52, 0.42), (0.92, 0.58, 0.48)],
    "hat": [(0.25, 0.28, 0.62), (0.62, 0.25, 0.25)],
    "eyes": [(0.45, 0.48, 0.55), (0.42, 0.52, 0.40), (0.50, 0.42, 0.35)],
    "eyebrows": [(0.48, 0.36, 0.28), (0.35, 0.30, 0.28)],
    "mouth": [(0.75, 0.48, 0.44), (0.62, 0.40, 0.40)],
}
_SKIN_TONES = [(0.85, 0.70, 0.58), (0.72, 0.55, 0.42), (0.90, 0.76, 0.66), (0.60, 0.45, 0.35)]


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    resolution: int = 64
    frame_count: int = 8
    db_variants: dict = field(default_factory=lambda: {"hair": 2, "nose": 1})
    points_per_face: int = 4
    template_vertices: int = 162
    n_joints: int = 4
    n_beta: int = 8
    n_psi: int = 8
    motion_scale: float = 1.0
    splat_radius: float = 0.03  # fraction of image height
    identity_count: int = 0     # derived: 1 target + one per db video when 0

    def __post_init__(self):
        bad = set(self.db_variants) - set(PARTS)
        if bad:
            raise ParameterError(f"unknown parts in db_variants: {sorted(bad)}")
        n_db = sum(self.db_variants.values())
        if self.identity_count == 0:
            self.identity_count = 1 + n_db
        if self.identity_count < 1 + n_db:
            raise ParameterError("identity_count too small for the requested variants")


# ---------------------------------------------------------------------------
# geometry


_BARY_PATTERNS = [
    (1 / 3, 1 / 3, 1 / 3),
    (0.6, 0.2, 0.2), (0.2, 0.6, 0.2), (0.2, 0.2, 0.6),
    (0.5, 0.4, 0.1), (0.1, 0.5, 0.4), (0.4, 0.1, 0.5),
    (0.45, 0.45, 0.10), (0.10, 0.45, 0.45), (0.45, 0.10, 0.45),
]


def sample_surface_points(template: HeadTemplate, per_face: int) -> tuple[Tensor, PointBases, Tensor]:
    """Vertices plus barycentric face samples, with interpolated basis rows.

    Returns positions, per-point bases (shape/expr/pose), and skin weights.
    Convex barycentric interpolation keeps skinning rows on the simplex.
    """
    per_face = min(per_face, len(_BARY_PATTERNS))
    verts = template.vertices
    faces = template.faces
    pos = [verts]
    shp = [template.shape_basis]
    exp = [template.expr_basis]
    pse = [template.pose_basis]
    wts = [template.skin_weights]
    for bary in _BARY_PATTERNS[:per_face]:
        w = torch.tensor(bary, dtype=torch.float32)
        tri = verts[faces]  # F x 3 x 3
        pos.append(torch.einsum("fvc,v->fc", tri, w))
        shp.append(torch.einsum("fvck,v->fck", template.shape_basis[faces], w))
        exp.append(torch.einsum("fvck,v->fck", template.expr_basis[faces], w))
        pse.append(torch.einsum("fvck,v->fck", template.pose_basis[faces], w))
        wts.append(torch.einsum("fvk,v->fk", template.skin_weights[faces], w))
    bases = PointBases(torch.cat(shp), torch.cat(exp), torch.cat(pse))
    return torch.cat(pos), bases, torch.cat(wts)


def _cap(dirs: Tensor, center: tuple, max_angle: float) -> Tensor:
    c = torch.tensor(center, dtype=torch.float32)
    c = c / c.norm()
    return (dirs @ c) > math.cos(max_angle)


def part_labels(rest_points: Tensor, has_hat: bool = False) -> Tensor:
    """Part index per rest-pose point (-1 = plain skin); regions are disjoint
    by priority: hat, hair, eyebrows, eyes, nose, mouth."""
    u = rest_points / rest_points.norm(dim=1, keepdim=True).clamp_min(1e-9)
    labels = torch.full((rest_points.shape[0],), SKIN, dtype=torch.long)

    def set_part(mask, name):
        idx = PARTS.index(name)
        labels[mask & (labels == SKIN)] = idx

    if has_hat:
        set_part(u[:, 1] > 0.72, "hat")
    set_part(u[:, 1] > 0.45, "hair")
    brow = _cap(u, (0.33, 0.30, -0.88), 0.20) | _cap(u, (-0.33, 0.30, -0.88), 0.20)
    set_part(brow, "eyebrows")
    eye = _cap(u, (0.33, 0.10, -0.92), 0.18) | _cap(u, (-0.33, 0.10, -0.92), 0.18)
    set_part(eye, "eyes")
    set_part(_cap(u, (0.0, -0.08, -1.0), 0.24), "nose")
    set_part(_cap(u, (0.0, -0.45, -0.88), 0.22), "mouth")
    return labels


@dataclass
class SceneIdentity:
    """One procedural person: base appearance plus one optional donated part."""

    identity_id: int
    beta: Tensor
    skin_tone: tuple
    variant_part: str | None = None   # the part this identity donates
    variant_index: int = 0            # which palette/geometry variant

    def colors_for(self, labels: Tensor) -> Tensor:
        out = torch.tensor(self.skin_tone).expand(labels.shape[0], 3).clone()
        for p_idx, part in enumerate(PARTS):
            sel = labels == p_idx
            if not bool(sel.any()):
                continue
            palette = _PART_COLORS[part]
            variant = self.variant_index if part == self.variant_part else 0
            out[sel] = torch.tensor(palette[variant % len(palette)])
        return out

    def geometry_offset(self, rest: Tensor, labels: Tensor) -> Tensor:
        """Radial inflation of the donated part so variants differ in shape."""
        out = rest.clone()
        if self.variant_part is None:
            return out
        sel = labels == PARTS.index(self.variant_part)
        if bool(sel.any()):
            scale = 1.0 + 0.06 + 0.05 * self.variant_index
            out[sel] = out[sel] * scale
        return out


@dataclass
class SceneAvatar:
    """Deformable ground-truth point avatar of one scene identity."""

    identity: SceneIdentity
    points_rest: Tensor
    bases: PointBases
    skin_weights: Tensor
    labels: Tensor
    colors: Tensor
    normals_rest: Tensor
    template: HeadTemplate

    def pose(self, params: FlameParams) -> dict:
        posed = apply_blendshapes(self.points_rest, self.template, params, self.bases)
        v_shaped = self.template.vertices + torch.einsum(
            "vck,k->vc", self.template.shape_basis, params.beta
        ) + torch.einsum("vck,k->vc", self.template.expr_basis, params.psi)
        joints = regress_joints(self.template, v_shaped)
        out = lbs(posed, joints, params.theta, self.skin_weights, self.template.parents)
        out = out + params.translation
        # blended rotations double as the posing Jacobian for normals
        from .mini_flame import _joint_world_transforms

        A = _joint_world_transforms(joints, params.theta, self.template.parents)
        J = torch.einsum("nk,kij->nij", self.skin_weights,
                         A[:, :3, :3].to(self.skin_weights.dtype))
        normals, _ = deform_normals(self.normals_rest, J)
        # simple fixed-light lambertian shading gives the images tonal range
        light = torch.tensor([0.3, 0.5, -0.8])
        light = light / light.norm()
        lambert = (normals @ light).clamp_min(0.0)
        shade = (0.65 + 0.35 * lambert)[:, None]
        return {
            "positions": out,
            "normals": normals,
            "colors": self.colors * shade,
            "labels": self.labels,
        }


def build_scene_avatar(template: HeadTemplate, identity: SceneIdentity, per_face: int) -> SceneAvatar:
    pos, bases, wts = sample_surface_points(template, per_face)
    labels = part_labels(pos, has_hat=identity.variant_part == "hat")
    rest = identity.geometry_offset(pos, labels)
    # ellipsoid-style normals: gradient of the implicit head surface
    axes = torch.tensor([0.95, 1.08, 1.0]) ** 2
    n = rest / axes
    n = n / n.norm(dim=1, keepdim=True).clamp_min(1e-9)
    return SceneAvatar(
        identity=identity, points_rest=rest, bases=bases, skin_weights=wts,
        labels=labels, colors=identity.colors_for(labels), normals_rest=n,
        template=template,
    )


# ---------------------------------------------------------------------------
# frames


def default_camera(resolution: int) -> Camera:
    return Camera(
        fx=1.2 * resolution, fy=1.2 * resolution,
        cx=resolution / 2.0, cy=resolution / 2.0,
        rotation=torch.zeros(3), translation=torch.zeros(3),
        size=(resolution, resolution),
    )


def motion_script(
    template: HeadTemplate, frame_count: int, camera: Camera,
    phase: float = 0.0, scale: float = 1.0,
) -> list[FlameParams]:
    """Smooth pose/expression trajectory placing the head in front of the camera."""
    out = []
    K = template.n_joints
    for f in range(frame_count):
        t = f / max(frame_count - 1, 1)
        theta = torch.zeros(3 * (K + 1))
        theta[1] = 0.35 * scale * math.sin(2 * math.pi * t + phase)        # global yaw
        theta[0] = 0.12 * scale * math.sin(4 * math.pi * t + 0.7 * phase)  # global pitch
        theta[3 + 1] = 0.10 * scale * math.sin(2 * math.pi * t + 1.3 * phase)
        psi = torch.zeros(template.n_psi)
        psi[0] = 0.45 * scale * math.sin(2 * math.pi * t + 0.5 * phase)
        psi[1] = 0.30 * scale * math.cos(2 * math.pi * t + phase)
        out.append(FlameParams(
            beta=torch.zeros(template.n_beta), theta=theta, psi=psi,
            translation=torch.tensor([0.0, 0.0, 2.6]), camera=camera,
        ))
    return out


def render_scene_frame(
    avatar: SceneAvatar, params: FlameParams, camera: Camera, splat_radius: float,
) -> dict:
    """Render one frame and derive exact masks from fragment contributions."""
    posed = avatar.pose(params)
    out = render(
        posed["positions"], camera,
        {"rgb": posed["colors"], "normal": posed["normals"]},
        radius=splat_radius, channels=("rgb", "mask", "normal", "contrib"),
    )
    W, H = camera.size
    fg = (out.mask >= 0.5)
    pix, pid, w = out.point_contrib
    part_w = torch.zeros(len(PARTS) + 1, H * W)
    labels_frag = posed["labels"][pid]  # -1 .. len(PARTS)-1
    part_w = part_w.index_put((labels_frag + 1, pix), w, accumulate=True)
    dominant = part_w.argmax(dim=0).reshape(H, W) - 1  # -1 = skin
    part_masks = {}
    for p_idx, part in enumerate(PARTS):
        m = (dominant == p_idx) & fg
        if bool(m.any()):
            part_masks[part] = m.to(torch.float32)
    return {
        "image": out.rgb.clamp(0, 1),
        "fg_mask": fg.to(torch.float32),
        "normal": out.normal,
        "part_masks": part_masks,
        "render": out,
    }


# ---------------------------------------------------------------------------
# full scene


def generate_synthetic_scene(spec: SyntheticSceneSpec, out_dir: Path | str) -> dict:
    """Write the target video, attribute-db videos, and ground-truth composites.

    Returns the scene index (also saved as ``scene.json``): template path,
    video manifests by id, and the ground-truth composite directories keyed by
    ``(part, db video id)``.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    template = build_toy_template(
        spec.seed, V=spec.template_vertices, K=spec.n_joints,
        n_beta=spec.n_beta, n_psi=spec.n_psi,
    )
    save_template(root / "template.ckpt", template)
    camera = default_camera(spec.resolution)
    rng = np.random.default_rng(spec.seed)

    identities = []
    variant_list = [(part, k) for part, count in sorted(spec.db_variants.items()) for k in range(count)]
    for i in range(spec.identity_count):
        beta = torch.tensor(rng.normal(0.0, 0.25, size=spec.n_beta), dtype=torch.float32)
        variant_part, variant_idx = (None, 0)
        if 1 <= i <= len(variant_list):
            variant_part, variant_idx = variant_list[i - 1]
            variant_idx += 1  # variant 0 is the target's own appearance
        identities.append(SceneIdentity(
            identity_id=i, beta=beta,
            skin_tone=_SKIN_TONES[i % len(_SKIN_TONES)],
            variant_part=variant_part, variant_index=variant_idx,
        ))

    avatars = [build_scene_avatar(template, ident, spec.points_per_face) for ident in identities]
    index = {
        "schema": DATASET_SCHEMA,
        "template": "template.ckpt",
        "resolution": spec.resolution,
        "frame_count": spec.frame_count,
        "splat_radius": spec.splat_radius,
        "videos": [],
        "composites": [],
    }

    def write_video(video_id, role, params_list, frames, attribute=None, source_id=None):
        vdir = root / video_id
        parts_present = sorted({p for fr in frames for p in fr["part_masks"]})
        for i, (params, fr) in enumerate(zip(params_list, frames)):
            masks = {p: fr["part_masks"].get(p, torch.zeros_like(fr["fg_mask"])) for p in parts_present}
            save_frame(vdir, i, fr["image"], fr["fg_mask"], masks, params, normal=fr["normal"])
        man = VideoManifest(
            video_id=video_id, role=role, path=vdir, frame_count=len(frames),
            resolution=(spec.resolution, spec.resolution), parts=parts_present,
            attribute=attribute, source_id=source_id,
        )
        write_manifest(man)
        entry = {"id": video_id, "role": role, "path": video_id,
                 "attribute": attribute, "source_id": source_id}
        index["videos"].append(entry)
        return man

    # target video: identity 0 under its own motion
    target_av = avatars[0]
    target_params = [
        p.replace(beta=identities[0].beta)
        for p in motion_script(template, spec.frame_count, camera, phase=0.0, scale=spec.motion_scale)
    ]
    target_frames = [render_scene_frame(target_av, p, camera, spec.splat_radius) for p in target_params]
    write_video("target", "target", target_params, target_frames)

    # attribute-db videos: their own identity, own motion
    for n, (part, k) in enumerate(variant_list):
        av = avatars[1 + n]
        vid = f"db_{part}_{k}"
        params = [
            p.replace(beta=av.identity.beta)
            for p in motion_script(template, spec.frame_count, camera,
                                   phase=0.9 * (n + 1), scale=spec.motion_scale)
        ]
        frames = [render_scene_frame(av, p, camera, spec.splat_radius) for p in params]
        write_video(vid, "attribute-db", params, frames, attribute=part)

    # ground-truth part-swapped composites: db attribute rendered under the
    # target's params and shape, pasted by its rendered attribute mask
    for n, (part, k) in enumerate(variant_list):
        av = avatars[1 + n]
        vid = f"gtswap_{part}_{k}"
        frames = []
        for f_idx, tp in enumerate(target_params):
            db_frame = render_scene_frame(av, tp, camera, spec.splat_radius)
            m = db_frame["part_masks"].get(part, torch.zeros_like(db_frame["fg_mask"]))
            tgt = target_frames[f_idx]
            img = tgt["image"] * (1 - m)[:, :, None] + db_frame["image"] * m[:, :, None]
            fg = torch.maximum(tgt["fg_mask"], m)
            masks = {p: v * (1 - m) for p, v in tgt["part_masks"].items()}
            masks[part] = m
            normal = tgt["normal"] * (1 - m)[:, :, None] + db_frame["normal"] * m[:, :, None]
            frames.append({
                "image": img, "fg_mask": fg, "part_masks": masks, "normal": normal,
            })
        write_video(vid, "part-swapped", target_params, frames,
                    attribute=part, source_id=f"db_{part}_{k}")
        index["composites"].append({"part": part, "source": f"db_{part}_{k}", "path": vid})

    (root / "scene.json").write_text(json.dumps(index, indent=1))
    return index
