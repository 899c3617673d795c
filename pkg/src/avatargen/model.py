"""Latent-conditioned generative point avatar.

The model carries a shared set of learnable generic-canonical points and two
coordinate MLPs.  The deformation decoder maps a latent code and a generic
point to two stage offsets (generic -> subject, subject -> FLAME-canonical)
plus per-point expression/pose blendshape rows and skinning weights; the
canonical decoder evaluates an SDF, albedo, and a segmentation cue at the
subject-canonical position.  Posing then follows the parametric head model:
blendshapes (including shape rows looked up from the nearest template vertex)
and linear blend skinning.

Normals come from the SDF gradient in subject-canonical space and are carried
to the deformed space with the inverse Jacobian of the posing map, which is
obtained by automatic differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import AvatarError, ParameterError, ShapeError
from .mini_flame import (
    FlameParams,
    HeadTemplate,
    PointBases,
    apply_blendshapes,
    lbs,
    regress_joints,
)

Tensor = torch.Tensor

PARTS = ("hair", "nose", "hat", "eyes", "eyebrows", "mouth")


class CodeLookupError(AvatarError, KeyError):
    """A latent code id does not exist in the table."""


@dataclass
class ModelConfig:
    latent_dim: int = 32
    parts: tuple = PARTS
    hidden_width: int = 128
    depth: int = 5
    pe_bands: int = 6
    stages: int = 3  # 3 = full; 2 drops the generic->subject offset; 1 drops both
    shading_width: int = 64
    shading_depth: int = 2
    lighting_dim: int = 8
    softplus_beta: float = 100.0
    sdf_init_radius: float = 1.0

    def __post_init__(self):
        if self.hidden_width < 8 or self.depth < 2:
            raise ParameterError("network width must be >= 8 and depth >= 2")
        if self.stages not in (1, 2, 3):
            raise ParameterError("stages must be 1, 2, or 3")

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def code_slots(self) -> int:
        return self.n_parts + 1


@dataclass
class CanonicalPointSet:
    """Learnable generic-canonical points plus their shared splat radius."""

    positions: Tensor
    radius: float

    def __post_init__(self):
        self.positions = self.positions.reshape(-1, 3)
        if self.radius <= 0:
            raise ParameterError("radius must be positive")

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass
class DeformationOutput:
    offset_gc_sc: Tensor    # N x 3
    offset_sc_fc: Tensor    # N x 3
    expr_basis_pt: Tensor   # N x 3 x n_psi
    pose_basis_pt: Tensor   # N x 3 x (9K)
    skin_weights_pt: Tensor  # N x K rows on the simplex


@dataclass
class CanonicalFieldOutput:
    sdf: Tensor      # N
    albedo: Tensor   # N x 3 in (0, 1)
    seg_cue: Tensor  # N in (0, 1)


def init_point_cloud(n: int, radius: float, seed: int = 0, sphere_radius: float = 0.5) -> CanonicalPointSet:
    """Seed points uniformly on a sphere inside the head volume."""
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(n, 3, generator=g)
    v = v / v.norm(dim=1, keepdim=True).clamp_min(1e-9) * sphere_radius
    return CanonicalPointSet(v, radius)


def upsample_points(
    points: CanonicalPointSet,
    factor: float,
    noise_scale: float,
    radius_decay: float = 0.75,
    seed: int = 0,
) -> CanonicalPointSet:
    """Grow the point set to ``ceil(N * factor)`` by jittering duplicates."""
    if factor <= 1:
        raise ParameterError("upsample factor must be > 1")
    n = points.n
    n_new = math.ceil(n * factor)
    extra = n_new - n
    g = torch.Generator().manual_seed(seed)
    parents = torch.arange(extra) % n
    noise = torch.randn(extra, 3, generator=g) * (noise_scale * points.radius)
    pos = torch.cat([points.positions.detach(), points.positions.detach()[parents] + noise])
    return CanonicalPointSet(pos, points.radius * radius_decay)


def to_subject_canonical(points_gc: Tensor, offsets: Tensor) -> Tensor:
    if points_gc.shape != offsets.shape:
        raise ShapeError("offset shape must match the point shape")
    return points_gc + offsets


def to_flame_canonical(points_sc: Tensor, offsets: Tensor) -> Tensor:
    if points_sc.shape != offsets.shape:
        raise ShapeError("offset shape must match the point shape")
    return points_sc + offsets


def deform_normals(normals_sc: Tensor, jacobians: Tensor) -> tuple[Tensor, Tensor]:
    """Carry canonical normals to the deformed space via the inverse Jacobian.

    Row-vector transform ``n_d ~ n_c J^{-1}`` renormalized to unit length.
    Singular Jacobians (|det| <= 1e-9) are flagged and their normal passed
    through unchanged.
    """
    n = normals_sc.reshape(-1, 3)
    J = jacobians.reshape(-1, 3, 3)
    if J.shape[0] != n.shape[0]:
        raise ShapeError("one Jacobian per normal required")
    det = torch.linalg.det(J)
    degenerate = det.abs() <= 1e-9
    eye = torch.eye(3, dtype=J.dtype).expand_as(J)
    safe_J = torch.where(degenerate[:, None, None], eye, J)
    transformed = torch.linalg.solve(safe_J.transpose(1, 2), n.unsqueeze(2)).squeeze(2)
    norm = transformed.norm(dim=1, keepdim=True)
    unit = transformed / norm.clamp_min(1e-12)
    out = torch.where(degenerate[:, None], n, unit)
    return out, degenerate


def nearest_vertex(points: Tensor, vertices: Tensor) -> Tensor:
    """Index of the nearest vertex per point; ties go to the lower index."""
    d2 = ((points[:, None, :] - vertices[None, :, :]) ** 2).sum(dim=2)
    return d2.argmin(dim=1)


class PositionalEncoding(nn.Module):
    def __init__(self, bands: int):
        super().__init__()
        self.bands = bands
        self.register_buffer("freqs", 2.0 ** torch.arange(bands), persistent=False)

    @property
    def out_dim(self) -> int:
        return 3 + 6 * self.bands

    def forward(self, x: Tensor) -> Tensor:
        parts = [x]
        for f in self.freqs:
            parts.append(torch.sin(x * f))
            parts.append(torch.cos(x * f))
        return torch.cat(parts, dim=-1)


def _zero_linear(n_in: int, n_out: int) -> nn.Linear:
    lin = nn.Linear(n_in, n_out)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


def _trunk(n_in: int, width: int, depth: int, beta: float) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = n_in
    for _ in range(depth):
        layers.append(nn.Linear(d, width))
        layers.append(nn.Softplus(beta=beta))
        d = width
    return nn.Sequential(*layers)


class DeformationNet(nn.Module):
    """Latent- and position-conditioned decoder for offsets, blendshape rows,
    and skinning weights.

    Offset heads are zero-initialized so optimization starts from the identity
    deformation; the skinning head starts at the uniform simplex.
    """

    def __init__(self, config: ModelConfig, n_psi: int, n_joints: int):
        super().__init__()
        self.config = config
        self.n_psi = n_psi
        self.n_joints = n_joints
        self.pe = PositionalEncoding(config.pe_bands)
        n_in = config.code_slots * config.latent_dim + self.pe.out_dim
        w = config.hidden_width
        self.trunk = _trunk(n_in, w, config.depth, config.softplus_beta)
        # the generic->subject offset gets a small two-layer head
        self.head_o1 = nn.Sequential(
            nn.Linear(w, w // 2), nn.Softplus(beta=config.softplus_beta),
            _zero_linear(w // 2, 3),
        )
        self.head_o2 = _zero_linear(w, 3)
        self.head_expr = _zero_linear(w, 3 * n_psi)
        self.head_pose = _zero_linear(w, 3 * 9 * n_joints)
        self.head_weights = _zero_linear(w, n_joints)

    def forward(self, z: Tensor, points: Tensor) -> DeformationOutput:
        n = points.shape[0]
        feat = torch.cat([z.reshape(-1).expand(n, -1), self.pe(points)], dim=1)
        h = self.trunk(feat)
        o1 = self.head_o1(h)
        o2 = self.head_o2(h)
        if self.config.stages < 3:
            o1 = torch.zeros_like(o1)
        if self.config.stages < 2:
            o2 = torch.zeros_like(o2)
        return DeformationOutput(
            offset_gc_sc=o1,
            offset_sc_fc=o2,
            expr_basis_pt=self.head_expr(h).reshape(n, 3, self.n_psi),
            pose_basis_pt=self.head_pose(h).reshape(n, 3, 9 * self.n_joints),
            skin_weights_pt=torch.softmax(self.head_weights(h), dim=1),
        )


class CanonicalNet(nn.Module):
    """SDF / albedo / segmentation-cue decoder on subject-canonical positions."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.pe = PositionalEncoding(config.pe_bands)
        n_in = config.code_slots * config.latent_dim + self.pe.out_dim
        w = config.hidden_width
        self.trunk = _trunk(n_in, w, config.depth, config.softplus_beta)
        self.head_sdf = nn.Linear(w, 1)
        # geometric init: the SDF starts out close to a sphere
        nn.init.normal_(self.head_sdf.weight, mean=math.sqrt(math.pi) / math.sqrt(w), std=1e-5)
        nn.init.constant_(self.head_sdf.bias, -config.sdf_init_radius)
        self.head_albedo = nn.Linear(w, 3)
        self.head_seg = _zero_linear(w, 1)

    def forward(self, z: Tensor, points_sc: Tensor) -> CanonicalFieldOutput:
        n = points_sc.shape[0]
        feat = torch.cat([z.reshape(-1).expand(n, -1), self.pe(points_sc)], dim=1)
        h = self.trunk(feat)
        return CanonicalFieldOutput(
            sdf=self.head_sdf(h).squeeze(1),
            albedo=torch.sigmoid(self.head_albedo(h)),
            seg_cue=torch.sigmoid(self.head_seg(h)).squeeze(1),
        )


class ShadingNet(nn.Module):
    """Maps a deformed normal plus a lighting vector to an RGB shading factor
    in (0, 2); the zero-initialized final layer makes the initial shading 1."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        layers: list[nn.Module] = []
        d = 3 + config.lighting_dim
        for _ in range(config.shading_depth):
            layers.append(nn.Linear(d, config.shading_width))
            layers.append(nn.ReLU())
            d = config.shading_width
        layers.append(_zero_linear(d, 3))
        self.net = nn.Sequential(*layers)

    def forward(self, normals: Tensor, lighting: Tensor) -> Tensor:
        n = normals.shape[0]
        feat = torch.cat([normals, lighting.reshape(-1).expand(n, -1)], dim=1)
        return 2.0 * torch.sigmoid(self.net(feat))


class LatentTable(nn.Module):
    """Learnable code bank: one shared identity slot, per-(part, source) part
    codes, and per-part defaults for the unswapped target appearance."""

    def __init__(self, config: ModelConfig, init_scale: float = 1e-2, seed: int = 0):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(seed)
        self._init_scale = init_scale
        self._gen = g
        self.identity = nn.Parameter(torch.randn(config.latent_dim, generator=g) * init_scale)
        self.part_codes = nn.ParameterDict()
        self.defaults = nn.ParameterDict({
            part: nn.Parameter(torch.randn(config.latent_dim, generator=g) * init_scale)
            for part in config.parts
        })
        self.assignments: dict[str, dict[str, str]] = {}

    def _new_code(self) -> nn.Parameter:
        return nn.Parameter(
            torch.randn(self.config.latent_dim, generator=self._gen) * self._init_scale
        )

    @staticmethod
    def _key(part: str, source_id: str) -> str:
        return f"{part}:{source_id}"

    def add_part_code(self, part: str, source_id: str) -> None:
        if part not in self.config.parts:
            raise ParameterError(f"unknown part '{part}'")
        key = self._key(part, source_id)
        if key not in self.part_codes:
            self.part_codes[key] = self._new_code()

    def assign_video(self, video_id: str, parts: dict[str, str]) -> None:
        """Bind a training video to its (part, attribute-source) codes."""
        for part, source in parts.items():
            self.add_part_code(part, source)
        self.assignments[video_id] = dict(parts)

    def code_for(self, part: str, source_id: str) -> Tensor:
        key = self._key(part, source_id)
        if key not in self.part_codes:
            raise CodeLookupError(f"no code for part '{part}' source '{source_id}'")
        return self.part_codes[key]

    def compose(self, overrides: Optional[dict] = None) -> Tensor:
        """Build the full (D+1) x d code.

        ``overrides`` maps part -> source id, or part -> (id_a, id_b, alpha)
        for linear interpolation between two stored codes.
        """
        overrides = overrides or {}
        unknown = set(overrides) - set(self.config.parts)
        if unknown:
            raise ParameterError(f"unknown parts in overrides: {sorted(unknown)}")
        slots = [self.identity]
        for part in self.config.parts:
            ov = overrides.get(part)
            if ov is None:
                slots.append(self.defaults[part])
            elif isinstance(ov, (tuple, list)):
                id_a, id_b, alpha = ov
                alpha = float(alpha)
                if not 0.0 <= alpha <= 1.0:
                    raise ParameterError(f"interpolation alpha must be in [0, 1], got {alpha}")
                slots.append((1.0 - alpha) * self.code_for(part, id_a) + alpha * self.code_for(part, id_b))
            else:
                slots.append(self.code_for(part, str(ov)))
        return torch.stack(slots)

    def compose_for_video(self, video_id: str) -> Tensor:
        if video_id not in self.assignments:
            raise CodeLookupError(f"video '{video_id}' has no code assignment")
        return self.compose(self.assignments[video_id])

    def all_codes(self) -> Tensor:
        codes = [self.identity] + list(self.defaults.values()) + list(self.part_codes.values())
        return torch.stack(codes)

    def catalog(self) -> dict:
        """Part -> list of stored source ids, for the service code listing."""
        out: dict[str, list[str]] = {part: [] for part in self.config.parts}
        for key in self.part_codes:
            part, source = key.split(":", 1)
            out[part].append(source)
        for part in out:
            out[part].sort()
        return out


class AvatarModel(nn.Module):
    """Full generative avatar: latent table, point set, decoders, shading."""

    def __init__(
        self,
        template: HeadTemplate,
        config: ModelConfig = None,
        n_points: int = 400,
        radius: float = 0.03,
        seed: int = 0,
    ):
        super().__init__()
        self.config = config or ModelConfig()
        self.template = template
        self.latent = LatentTable(self.config, seed=seed)
        self.deform_net = DeformationNet(self.config, template.n_psi, template.n_joints)
        self.canon_net = CanonicalNet(self.config)
        self.shade_net = ShadingNet(self.config)
        pts = init_point_cloud(n_points, radius, seed=seed)
        self.points = nn.Parameter(pts.positions)
        self.radius = pts.radius
        self.lighting = nn.Parameter(torch.zeros(1, self.config.lighting_dim))

    # -- point management ---------------------------------------------------

    @property
    def point_set(self) -> CanonicalPointSet:
        return CanonicalPointSet(self.points.detach(), self.radius)

    def apply_upsample(self, factor: float, noise_scale: float, radius_decay: float, seed: int = 0) -> int:
        ps = upsample_points(self.point_set, factor, noise_scale, radius_decay, seed=seed)
        self.points = nn.Parameter(ps.positions)
        self.radius = ps.radius
        return ps.n

    def init_lighting(self, n_frames: int) -> None:
        if self.lighting.shape[0] != n_frames:
            self.lighting = nn.Parameter(torch.zeros(n_frames, self.config.lighting_dim))

    def lighting_for(self, frame_idx: Optional[int]) -> Tensor:
        if frame_idx is None:
            return self.lighting.detach().mean(dim=0)
        return self.lighting[frame_idx]

    # -- decoders -----------------------------------------------------------

    def deformation_forward(self, z: Tensor, points: Tensor) -> DeformationOutput:
        return self.deform_net(z, points.reshape(-1, 3))

    def canonical_forward(self, z: Tensor, points_sc: Tensor) -> CanonicalFieldOutput:
        return self.canon_net(z, points_sc.reshape(-1, 3))

    def canonical_normals(self, z: Tensor, points_sc: Tensor, create_graph: bool = False) -> tuple[Tensor, Tensor]:
        """Unit SDF gradient at subject-canonical positions.

        Zero-gradient points are flagged and given the degenerate normal (0, 0, 1).
        """
        pts = points_sc.reshape(-1, 3)
        needs_leaf = not pts.requires_grad
        if needs_leaf:
            pts = pts.detach().requires_grad_(True)
        sdf = self.canon_net(z, pts).sdf
        grad = torch.autograd.grad(sdf.sum(), pts, create_graph=create_graph, retain_graph=True)[0]
        norm = grad.norm(dim=1, keepdim=True)
        degenerate = norm.squeeze(1) < 1e-12
        fallback = torch.tensor([0.0, 0.0, 1.0], dtype=grad.dtype).expand_as(grad)
        unit = grad / norm.clamp_min(1e-12)
        normals = torch.where(degenerate[:, None], fallback, unit)
        return normals, degenerate

    # -- posing chain -------------------------------------------------------

    def point_bases_for(self, x_fc: Tensor) -> tuple[Tensor, Tensor]:
        """Nearest-template-vertex shape rows for avatar points (plus the index)."""
        idx = nearest_vertex(x_fc.detach(), self.template.vertices)
        return self.template.shape_basis[idx], idx

    def pose_from_flame_canonical(
        self, x_fc: Tensor, def_out: DeformationOutput, params: FlameParams,
        shape_rows: Optional[Tensor] = None,
    ) -> Tensor:
        """Eq. chain from FLAME-canonical to deformed space for avatar points."""
        if shape_rows is None:
            shape_rows, _ = self.point_bases_for(x_fc)
        bases = PointBases(shape_rows, def_out.expr_basis_pt, def_out.pose_basis_pt)
        x_dm = apply_blendshapes(x_fc, self.template, params, bases)
        v_shaped = self.template.vertices
        if params.beta.numel() > 0:
            v_shaped = v_shaped + torch.einsum("vck,k->vc", self.template.shape_basis, params.beta)
        v_shaped = v_shaped + torch.einsum("vck,k->vc", self.template.expr_basis, params.psi)
        joints = regress_joints(self.template, v_shaped)
        posed = lbs(x_dm, joints, params.theta, def_out.skin_weights_pt, self.template.parents)
        return posed + params.translation

    def forward(
        self,
        z: Tensor,
        params: FlameParams,
        points: Optional[Tensor] = None,
        frame_idx: Optional[int] = None,
        with_normals: bool = True,
        create_graph: Optional[bool] = None,
    ) -> dict:
        """Full chain: generic points -> deformed positions, normals, colors.

        Returns a dict with positions, normal, albedo, seg, color, sdf, the
        intermediate stage positions, and the raw deformation output.
        Differentiable end to end; the posing Jacobian for the normal
        transform is taken with respect to the subject-canonical positions.
        ``create_graph`` controls whether the internal normal/Jacobian grads
        stay differentiable; it defaults to the module's training flag.
        """
        if create_graph is None:
            create_graph = self.training
        x_gc = self.points if points is None else points.reshape(-1, 3)
        with torch.enable_grad():
            def_out = self.deform_net(z, x_gc)
            x_sc = to_subject_canonical(x_gc, def_out.offset_gc_sc)
            if with_normals and not x_sc.requires_grad:
                x_sc = x_sc.detach().requires_grad_(True)
            x_fc = to_flame_canonical(x_sc, def_out.offset_sc_fc)
            shape_rows, nn_idx = self.point_bases_for(x_fc)
            x_d = self.pose_from_flame_canonical(x_fc, def_out, params, shape_rows)

            fields = self.canon_net(z, x_sc)
            out = {
                "positions": x_d,
                "albedo": fields.albedo,
                "seg": fields.seg_cue,
                "sdf": fields.sdf,
                "x_gc": x_gc,
                "x_sc": x_sc,
                "x_fc": x_fc,
                "deformation": def_out,
                "nearest_vertex": nn_idx,
            }
            if with_normals:
                n_sc, _ = self.canonical_normals(z, x_sc, create_graph=create_graph)
                J = self.deformation_jacobian(x_sc, x_d, create_graph=create_graph)
                n_d, _ = deform_normals(n_sc, J)
                shading = self.shade_net(n_d, self.lighting_for(frame_idx))
                out["normal"] = n_d
                out["shading"] = shading
                out["color"] = shading * fields.albedo
            else:
                out["color"] = fields.albedo
        return out

    @staticmethod
    def deformation_jacobian(x_sc: Tensor, x_d: Tensor, create_graph: bool = False) -> Tensor:
        """Per-point Jacobian d x_d / d x_sc via three backward passes.

        Points are independent, so the gradient of each output coordinate's
        sum recovers one Jacobian row for every point at once.
        """
        rows = []
        for c in range(3):
            g = torch.autograd.grad(
                x_d[:, c].sum(), x_sc, create_graph=create_graph, retain_graph=True
            )[0]
            rows.append(g)
        return torch.stack(rows, dim=1)  # N x 3(row=output) x 3(col=input)

    # -- persistence hooks used by dataset_io -------------------------------

    def model_meta(self) -> dict:
        return {
            "config": {
                "latent_dim": self.config.latent_dim,
                "parts": list(self.config.parts),
                "hidden_width": self.config.hidden_width,
                "depth": self.config.depth,
                "pe_bands": self.config.pe_bands,
                "stages": self.config.stages,
                "shading_width": self.config.shading_width,
                "shading_depth": self.config.shading_depth,
                "lighting_dim": self.config.lighting_dim,
                "softplus_beta": self.config.softplus_beta,
                "sdf_init_radius": self.config.sdf_init_radius,
            },
            "radius": self.radius,
            "assignments": self.latent.assignments,
            "n_points": int(self.points.shape[0]),
            "n_frames": int(self.lighting.shape[0]),
        }

    @staticmethod
    def config_from_meta(meta: dict) -> ModelConfig:
        cfg = dict(meta["config"])
        cfg["parts"] = tuple(cfg["parts"])
        return ModelConfig(**cfg)
