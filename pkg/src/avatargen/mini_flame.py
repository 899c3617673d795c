"""Parametric head model: blendshapes, joint regression, linear blend skinning,
3D landmarks, and landmark-based parameter refinement.

The template follows the usual morphable-model layout: a rest-pose vertex set,
linear shape/expression/pose-corrective bases, a row-stochastic joint
regressor, skinning weights, and landmark vertex indices.  ``build_toy_template``
procedurally generates a small, license-free stand-in suitable for tests.

Conventions: the head faces the -z direction, +y is up.  ``theta`` holds
``K + 1`` axis-angle rotations: entry 0 is the global rotation (pivot at the
origin), entries ``1..K`` drive the K regressed joints.  The pose-corrective
feature is the flattened ``R(theta_k) - I`` residual of the K joint rotations,
so the pose basis has ``9 * K`` columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import DataError, ParameterError, ShapeError

Tensor = torch.Tensor


def _as_f32(x) -> Tensor:
    if torch.is_tensor(x):
        return x.to(torch.float32)
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def _as_float(x) -> Tensor:
    """Float tensor, preserving an existing floating dtype (for f64 testing)."""
    if torch.is_tensor(x) and x.is_floating_point():
        return x
    return _as_f32(x)


def wrap_axis_angle(theta: Tensor) -> Tensor:
    """Wrap each axis-angle 3-vector so its magnitude lies in [0, pi)."""
    v = theta.reshape(-1, 3)
    angle = torch.linalg.norm(v, dim=1, keepdim=True)
    # map angle into (-pi, pi], keep axis direction
    wrapped = torch.remainder(angle + torch.pi, 2 * torch.pi) - torch.pi
    scale = torch.where(angle > 1e-12, wrapped / angle.clamp_min(1e-12), torch.ones_like(angle))
    out = torch.where(angle >= torch.pi, v * scale, v)
    return out.reshape(theta.shape)


def rodrigues(vecs: Tensor) -> Tensor:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Uses the closed form with a series fallback below angle 1e-8 to avoid
    division by zero.
    """
    shape = vecs.shape[:-1]
    v = vecs.reshape(-1, 3)
    angle = torch.linalg.norm(v, dim=1)
    small = angle < 1e-8
    safe = torch.where(small, torch.ones_like(angle), angle)
    # sin(a)/a and (1-cos(a))/a^2, with 2nd-order series for tiny angles
    sinc = torch.where(small, 1.0 - angle**2 / 6.0, torch.sin(safe) / safe)
    cosc = torch.where(small, 0.5 - angle**2 / 24.0, (1.0 - torch.cos(safe)) / safe**2)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    zeros = torch.zeros_like(x)
    K = torch.stack(
        [zeros, -z, y, z, zeros, -x, -y, x, zeros], dim=1
    ).reshape(-1, 3, 3)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(v.shape[0], 3, 3)
    R = eye + sinc[:, None, None] * K + cosc[:, None, None] * (K @ K)
    return R.reshape(*shape, 3, 3)


@dataclass
class HeadTemplate:
    """Rest-pose head geometry plus the linear deformation model around it."""

    vertices: Tensor          # V x 3
    faces: Tensor             # F x 3, long
    shape_basis: Tensor       # V x 3 x n_beta
    expr_basis: Tensor        # V x 3 x n_psi
    pose_basis: Tensor        # V x 3 x (9 * K)
    joint_regressor: Tensor   # K x V, row-stochastic
    skin_weights: Tensor      # V x K, rows on the simplex
    landmark_indices: Tensor  # L, long
    back_of_head_indices: Tensor  # long
    parents: Tensor = field(default=None)  # K, long; -1 = global root

    def __post_init__(self):
        if self.parents is None:
            k = self.joint_regressor.shape[0]
            self.parents = torch.arange(-1, k - 1, dtype=torch.long)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def n_beta(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_psi(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def n_pose_feature(self) -> int:
        return self.pose_basis.shape[2]

    @property
    def n_landmarks(self) -> int:
        return self.landmark_indices.shape[0]

    def validate(self) -> None:
        V, K = self.n_vertices, self.n_joints
        if self.skin_weights.shape != (V, K):
            raise ShapeError(f"skin_weights must be {V}x{K}, got {tuple(self.skin_weights.shape)}")
        if self.joint_regressor.shape != (K, V):
            raise ShapeError(f"joint_regressor must be {K}x{V}")
        for name, rows in (("skin_weights", self.skin_weights), ("joint_regressor", self.joint_regressor)):
            if rows.min() < 0:
                raise ParameterError(f"{name} has negative entries")
            sums = rows.sum(dim=1)
            if (sums - 1.0).abs().max() > 1e-6:
                raise ParameterError(f"{name} rows must sum to 1 (max dev {(sums - 1).abs().max():.2e})")
        for name, idx in (("landmark_indices", self.landmark_indices), ("back_of_head_indices", self.back_of_head_indices)):
            if idx.numel() == 0:
                continue
            if idx.min() < 0 or idx.max() >= V:
                raise ParameterError(f"{name} out of range")
            if idx.unique().numel() != idx.numel():
                raise ParameterError(f"{name} contains duplicates")
        if self.pose_basis.shape[2] != 9 * K:
            raise ShapeError(f"pose_basis must have {9 * K} columns, got {self.pose_basis.shape[2]}")

    def astype(self, dtype: torch.dtype) -> "HeadTemplate":
        """Converted copy (float arrays only); index arrays keep their dtype."""
        return HeadTemplate(
            vertices=self.vertices.to(dtype), faces=self.faces,
            shape_basis=self.shape_basis.to(dtype), expr_basis=self.expr_basis.to(dtype),
            pose_basis=self.pose_basis.to(dtype),
            joint_regressor=self.joint_regressor.to(dtype),
            skin_weights=self.skin_weights.to(dtype),
            landmark_indices=self.landmark_indices,
            back_of_head_indices=self.back_of_head_indices,
            parents=self.parents,
        )

    def arrays(self) -> dict:
        """Flat name -> array view used by checkpoint persistence."""
        return {
            "vertices": self.vertices,
            "faces": self.faces,
            "shape_basis": self.shape_basis,
            "expr_basis": self.expr_basis,
            "pose_basis": self.pose_basis,
            "joint_regressor": self.joint_regressor,
            "skin_weights": self.skin_weights,
            "landmark_indices": self.landmark_indices,
            "back_of_head_indices": self.back_of_head_indices,
            "joint_parents": self.parents,
        }

    @staticmethod
    def from_arrays(arrays: dict) -> "HeadTemplate":
        def t(name, dtype=torch.float32):
            if name not in arrays:
                raise DataError(f"template archive is missing array '{name}'")
            return torch.as_tensor(arrays[name]).to(dtype)

        tpl = HeadTemplate(
            vertices=t("vertices"),
            faces=t("faces", torch.long),
            shape_basis=t("shape_basis"),
            expr_basis=t("expr_basis"),
            pose_basis=t("pose_basis"),
            joint_regressor=t("joint_regressor"),
            skin_weights=t("skin_weights"),
            landmark_indices=t("landmark_indices", torch.long),
            back_of_head_indices=t("back_of_head_indices", torch.long),
            parents=t("joint_parents", torch.long) if "joint_parents" in arrays else None,
        )
        tpl.validate()
        return tpl


@dataclass
class FlameParams:
    """Per-frame animation state: shape, pose, expression, placement, camera."""

    beta: Tensor
    theta: Tensor          # (K + 1) * 3 axis-angle, global rotation first
    psi: Tensor
    translation: Tensor
    camera: Optional["object"] = None  # rendering.Camera; kept loose to avoid a cycle

    def __post_init__(self):
        self.beta = _as_float(self.beta).reshape(-1)
        self.theta = wrap_axis_angle(_as_float(self.theta).reshape(-1))
        self.psi = _as_float(self.psi).reshape(-1)
        self.translation = _as_float(self.translation).reshape(3)
        for name in ("beta", "theta", "psi", "translation"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ParameterError(f"FlameParams.{name} contains non-finite values")

    def astype(self, dtype: torch.dtype) -> "FlameParams":
        return FlameParams(
            beta=self.beta.to(dtype), theta=self.theta.to(dtype),
            psi=self.psi.to(dtype), translation=self.translation.to(dtype),
            camera=self.camera,
        )

    @staticmethod
    def zeros(template: HeadTemplate, camera=None) -> "FlameParams":
        return FlameParams(
            beta=torch.zeros(template.n_beta),
            theta=torch.zeros(3 * (template.n_joints + 1)),
            psi=torch.zeros(template.n_psi),
            translation=torch.zeros(3),
            camera=camera,
        )

    def replace(self, **kw) -> "FlameParams":
        vals = dict(beta=self.beta, theta=self.theta, psi=self.psi,
                    translation=self.translation, camera=self.camera)
        vals.update(kw)
        return FlameParams(**vals)


@dataclass
class LandmarkSet:
    """Landmark positions, either 3D model-space or 2D pixel coordinates."""

    points3d: Optional[Tensor] = None  # L x 3
    points2d: Optional[Tensor] = None  # L x 2 pixels
    confidence: Optional[Tensor] = None  # L in [0, 1]

    def __post_init__(self):
        n = None
        if self.points3d is not None:
            self.points3d = _as_f32(self.points3d).reshape(-1, 3)
            n = self.points3d.shape[0]
        if self.points2d is not None:
            self.points2d = _as_f32(self.points2d).reshape(-1, 2)
            n = self.points2d.shape[0]
        if n is None:
            raise ParameterError("LandmarkSet needs points3d or points2d")
        if self.confidence is None:
            self.confidence = torch.ones(n)
        else:
            self.confidence = _as_f32(self.confidence).reshape(-1)


@dataclass
class PointBases:
    """Per-point rows of the linear bases, for points that are not template vertices."""

    shape: Optional[Tensor]  # N x 3 x n_beta
    expr: Tensor             # N x 3 x n_psi
    pose: Tensor             # N x 3 x (9 * K)


# ---------------------------------------------------------------------------
# toy template construction


def _icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        vlist = list(verts)

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key in cache:
                return cache[key]
            m = vlist[a] + vlist[b]
            m = m / np.linalg.norm(m)
            vlist.append(m)
            cache[key] = len(vlist) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


def _poly_features(v: np.ndarray) -> np.ndarray:
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    return np.stack(
        [np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, y * z, z * x], axis=1
    )


def _smooth_basis(rng: np.random.Generator, verts: np.ndarray, n: int, max_disp: float) -> np.ndarray:
    feats = _poly_features(verts)
    basis = np.empty((verts.shape[0], 3, n), dtype=np.float64)
    for j in range(n):
        coef = rng.standard_normal((feats.shape[1], 3))
        disp = feats @ coef
        peak = np.linalg.norm(disp, axis=1).max()
        basis[:, :, j] = disp * (max_disp / max(peak, 1e-12))
    return basis


def _farthest_point_indices(points: np.ndarray, count: int, start: int) -> np.ndarray:
    chosen = [start]
    d = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(sorted(chosen), dtype=np.int64)


def build_toy_template(
    seed: int, V: int = 162, K: int = 4, n_beta: int = 8, n_psi: int = 8,
    n_landmarks: int = 12,
) -> HeadTemplate:
    """Deterministic procedurally generated head template.

    The vertex count is rounded up to the nearest subdivided-icosphere size
    (12, 42, 162, 642, ...).  Bases are smooth random low-frequency fields
    scaled so the peak displacement stays below 10% of the head radius.
    """
    if V < 12:
        raise ParameterError(f"V must be >= 12, got {V}")
    if K < 2:
        raise ParameterError(f"K must be >= 2, got {K}")
    if n_beta < 1 or n_psi < 1:
        raise ParameterError("n_beta and n_psi must be positive")

    subdiv, size = 0, 12
    while size < V:
        subdiv += 1
        size = 10 * 4**subdiv + 2
    verts, faces = _icosphere(subdiv)
    # slightly ellipsoidal head; face toward -z, +y up
    verts = verts * np.array([0.95, 1.08, 1.0])
    radius = float(np.linalg.norm(verts, axis=1).max())

    rng = np.random.default_rng(seed)
    shape_basis = _smooth_basis(rng, verts, n_beta, 0.08 * radius)
    expr_basis = _smooth_basis(rng, verts, n_psi, 0.08 * radius)
    pose_basis = _smooth_basis(rng, verts, 9 * K, 0.02 * radius)

    # chain of K joints along the vertical axis, root nearest the neck
    anchors = np.stack(
        [np.zeros(K), np.linspace(-0.6, 0.4, K) * radius, np.zeros(K)], axis=1
    )
    d2 = ((verts[None, :, :] - anchors[:, None, :]) ** 2).sum(axis=2)
    joint_regressor = np.exp(-d2 / (2 * 0.16))
    joint_regressor /= joint_regressor.sum(axis=1, keepdims=True)
    skin = np.exp(-d2.T / (2 * 0.35**2))
    skin /= skin.sum(axis=1, keepdims=True)

    front = int(np.argmin(verts[:, 2]))
    front_mask = verts[:, 2] < -0.2 * radius
    front_ids = np.nonzero(front_mask)[0]
    lm_local = _farthest_point_indices(verts[front_ids], min(n_landmarks, len(front_ids)),
                                       int(np.nonzero(front_ids == front)[0][0]))
    landmark_indices = front_ids[lm_local]
    back_ids = np.nonzero(verts[:, 2] > 0.35 * radius)[0]

    tpl = HeadTemplate(
        vertices=_as_f32(verts),
        faces=torch.as_tensor(faces, dtype=torch.long),
        shape_basis=_as_f32(shape_basis),
        expr_basis=_as_f32(expr_basis),
        pose_basis=_as_f32(pose_basis),
        joint_regressor=_as_f32(joint_regressor),
        skin_weights=_as_f32(skin),
        landmark_indices=torch.as_tensor(landmark_indices, dtype=torch.long),
        back_of_head_indices=torch.as_tensor(back_ids, dtype=torch.long),
    )
    tpl.validate()
    return tpl


# ---------------------------------------------------------------------------
# deformation model


def pose_feature(theta: Tensor, n_joints: int) -> Tensor:
    """Flattened rotation residuals (R(theta_k) - I) of the non-global joints."""
    rots = rodrigues(theta.reshape(-1, 3))
    if rots.shape[0] != n_joints + 1:
        raise ShapeError(f"theta must hold {n_joints + 1} rotations, got {rots.shape[0]}")
    eye = torch.eye(3, dtype=rots.dtype, device=rots.device)
    return (rots[1:] - eye).reshape(-1)


def apply_blendshapes(
    points: Tensor,
    template: HeadTemplate,
    params: FlameParams,
    point_bases: Optional[PointBases] = None,
) -> Tensor:
    """Add shape, pose-corrective, and expression displacements to ``points``.

    Without ``point_bases`` the points must be the template vertices and the
    template's own basis rows are used.
    """
    points = points.reshape(-1, 3)
    if point_bases is None:
        if points.shape[0] != template.n_vertices:
            raise ShapeError(
                f"{points.shape[0]} points without per-point bases; template has "
                f"{template.n_vertices} vertices"
            )
        bases = PointBases(template.shape_basis, template.expr_basis, template.pose_basis)
    else:
        bases = point_bases
        for name, b in (("expr", bases.expr), ("pose", bases.pose)):
            if b.shape[0] != points.shape[0]:
                raise ShapeError(f"point_bases.{name} rows ({b.shape[0]}) != point count ({points.shape[0]})")
    out = points
    if bases.shape is not None and params.beta.numel() > 0:
        out = out + torch.einsum("vck,k->vc", bases.shape, params.beta)
    out = out + torch.einsum("vck,k->vc", bases.expr, params.psi)
    pf = pose_feature(params.theta, template.n_joints)
    out = out + torch.einsum("vck,k->vc", bases.pose, pf)
    return out


def regress_joints(template: HeadTemplate, shaped_vertices: Tensor) -> Tensor:
    if shaped_vertices.shape != (template.n_vertices, 3):
        raise ShapeError("shaped_vertices must match the template vertex count")
    return template.joint_regressor @ shaped_vertices


def _joint_world_transforms(joints: Tensor, theta: Tensor, parents: Tensor) -> Tensor:
    """World 4x4 skinning transforms A_k with the rest pose factored out.

    Computed in float64: the chain accumulates pivot differences, and doing so
    in float32 leaves eps-level drift even at the identity pose.
    """
    joints = joints.to(torch.float64)
    theta = theta.to(torch.float64)
    K = joints.shape[0]
    rots = rodrigues(theta.reshape(-1, 3))
    if rots.shape[0] != K + 1:
        raise ShapeError(f"theta must hold {K + 1} rotations, got {rots.shape[0]}")
    eye4 = torch.eye(4, dtype=joints.dtype, device=joints.device)
    g_root = eye4.clone()
    g_root[:3, :3] = rots[0]  # global rotation pivots at the origin
    world = []
    for k in range(K):
        p = int(parents[k])
        parent_tf = g_root if p < 0 else world[p]
        pivot = joints[k] - (joints[p] if p >= 0 else torch.zeros_like(joints[k]))
        local = eye4.clone()
        local[:3, :3] = rots[k + 1]
        local[:3, 3] = pivot
        world.append(parent_tf @ local)
    G = torch.stack(world)  # K x 4 x 4
    # subtract the rotated rest joint so A @ [x;1] = R_w (x - j_k) + posed_j_k
    A = G.clone()
    A[:, :3, 3] = G[:, :3, 3] - torch.einsum("kij,kj->ki", G[:, :3, :3], joints)
    return A


def lbs(
    points: Tensor,
    joints: Tensor,
    theta: Tensor,
    weights: Tensor,
    parents: Tensor,
) -> Tensor:
    """Pose points as a weighted blend of per-joint rigid world transforms."""
    points = points.reshape(-1, 3)
    K = joints.shape[0]
    if weights.shape != (points.shape[0], K):
        raise ShapeError(f"weights must be {points.shape[0]}x{K}")
    sums = weights.sum(dim=1)
    if (sums - 1.0).abs().max() > 1e-5 or weights.min() < -1e-7:
        raise ParameterError("skin weights rows must be nonnegative and sum to 1")
    dtype = points.dtype
    A = _joint_world_transforms(joints, theta, parents)  # K x 4 x 4, float64
    T = torch.einsum("nk,kij->nij", weights.to(torch.float64), A)
    out = torch.einsum("nij,nj->ni", T[:, :3, :3], points.to(torch.float64)) + T[:, :3, 3]
    return out.to(dtype)


def deform_template(template: HeadTemplate, params: FlameParams) -> dict:
    """Full pose pipeline on the template vertices.

    Joints are regressed from the shape+expression-shaped vertices, pose
    correctives are added afterwards, then LBS and the world translation.
    """
    v = template.vertices
    v_shaped = v
    if params.beta.numel() > 0:
        v_shaped = v_shaped + torch.einsum("vck,k->vc", template.shape_basis, params.beta)
    v_shaped = v_shaped + torch.einsum("vck,k->vc", template.expr_basis, params.psi)
    joints = regress_joints(template, v_shaped)
    pf = pose_feature(params.theta, template.n_joints)
    v_posed = v_shaped + torch.einsum("vck,k->vc", template.pose_basis, pf)
    out = lbs(v_posed, joints, params.theta, template.skin_weights, template.parents)
    return {"vertices": out + params.translation, "joints": joints}


def landmarks_3d(template: HeadTemplate, params: FlameParams) -> LandmarkSet:
    posed = deform_template(template, params)["vertices"]
    return LandmarkSet(points3d=posed[template.landmark_indices])


# ---------------------------------------------------------------------------
# landmark fitting


def fit_flame_to_landmarks(
    template: HeadTemplate,
    detected2d: LandmarkSet,
    camera,
    init: FlameParams,
    iters: int = 200,
    lr: float = 5e-2,
    optimize: Sequence[str] = ("translation",),
) -> FlameParams:
    """Refine FLAME parameters so projected 3D landmarks match 2D detections.

    Minimizes the confidence-weighted mean squared pixel error with Adam over
    the selected parameter groups; when translation is optimized, a few
    Gauss-Newton polish steps on the translation follow.  The best-seen
    parameters are returned, so the objective never increases relative to the
    initial value.
    """
    from .rendering import project  # local import: rendering does not depend on us

    if detected2d.points2d is None:
        raise ParameterError("fit_flame_to_landmarks needs 2D detections")
    if not torch.isfinite(detected2d.points2d).all():
        raise DataError("2D landmark detections contain non-finite values")
    target = detected2d.points2d
    if target.shape[0] != template.n_landmarks:
        raise ShapeError(
            f"{target.shape[0]} detections vs template landmark count {template.n_landmarks}"
        )
    conf = detected2d.confidence.clamp(0, 1)
    wsum = conf.sum().clamp_min(1e-12)

    leaves = {
        "translation": init.translation.clone().requires_grad_("translation" in optimize),
        "theta": init.theta.clone().requires_grad_("theta" in optimize),
        "beta": init.beta.clone().requires_grad_("beta" in optimize),
        "psi": init.psi.clone().requires_grad_("psi" in optimize),
    }

    def objective() -> Tensor:
        params = FlameParams.__new__(FlameParams)  # skip wrap: leaves stay attached
        params.beta, params.theta = leaves["beta"], leaves["theta"]
        params.psi, params.translation = leaves["psi"], leaves["translation"]
        params.camera = camera
        lm = deform_template(template, params)["vertices"][template.landmark_indices]
        xy, _, valid = project(lm, camera)
        err = ((xy - target) ** 2).sum(dim=1)
        err = torch.where(valid, err, torch.full_like(err, 1e6))
        return (err * conf).sum() / wsum

    trainable = [v for v in leaves.values() if v.requires_grad]
    best_loss = float(objective().detach())
    best = {k: v.detach().clone() for k, v in leaves.items()}

    if trainable and iters > 0:
        opt = torch.optim.Adam(trainable, lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(iters, 1))
        for _ in range(iters):
            opt.zero_grad()
            loss = objective()
            loss.backward()
            opt.step()
            sched.step()
            cur = float(objective().detach())
            if cur < best_loss:
                best_loss = cur
                best = {k: v.detach().clone() for k, v in leaves.items()}

    if "translation" in optimize and iters > 0:
        # Gauss-Newton polish on translation only; the residual is nearly
        # linear in t so a handful of steps reaches sub-pixel accuracy.
        for k, v in best.items():
            leaves[k] = v.clone()

        def residuals(t: Tensor) -> Tensor:
            params = FlameParams.__new__(FlameParams)
            params.beta, params.theta, params.psi = leaves["beta"], leaves["theta"], leaves["psi"]
            params.translation, params.camera = t, camera
            lm = deform_template(template, params)["vertices"][template.landmark_indices]
            xy, _, _ = project(lm, camera)
            return ((xy - target) * conf.sqrt()[:, None]).reshape(-1)

        t = leaves["translation"].clone()
        for _ in range(10):
            J = torch.autograd.functional.jacobian(residuals, t)  # (2L) x 3
            r = residuals(t)
            step = torch.linalg.solve(J.T @ J + 1e-9 * torch.eye(3), -J.T @ r)
            t = t + step
            leaves["translation"] = t
            cur = float(objective().detach())
            if cur < best_loss:
                best_loss = cur
                best = {k: v.detach().clone() for k, v in leaves.items()}
            if float(step.norm()) < 1e-10:
                break

    return FlameParams(
        beta=best["beta"], theta=best["theta"], psi=best["psi"],
        translation=best["translation"], camera=camera,
    )
