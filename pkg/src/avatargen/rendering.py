"""Differentiable point-splat rasterizer with front-to-back alpha compositing.

Points are projected through a pinhole camera and splatted with a quadratic
falloff; per-pixel fragments are depth-sorted (ties broken by point id, which
keeps rendering deterministic) and composited with the over operator.  The
pixel grid puts the center of pixel ``(row i, col j)`` at coordinates
``(x=j, y=i)``.

Splat radii are stored as a fraction of the image height, so point sets render
consistently across resolutions; ``radius_px = radius * H``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import torch

from .errors import ParameterError, ShapeError

Tensor = torch.Tensor

NEAR_PLANE = 1e-4
FRAGMENT_CAP = 32  # per-pixel fragment budget, nearest by depth
DEFAULT_ALPHA_MAX = 0.95

ALL_CHANNELS = ("rgb", "mask", "normal", "seg", "contrib")


@dataclass
class Camera:
    """Pinhole camera: ``x_cam = R(rotation) @ x_world + translation``."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: Tensor      # axis-angle, world -> camera
    translation: Tensor
    size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        self.rotation = torch.as_tensor(self.rotation, dtype=torch.float32).reshape(3)
        self.translation = torch.as_tensor(self.translation, dtype=torch.float32).reshape(3)
        W, H = self.size
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError("focal lengths must be positive")
        if W < 8 or H < 8:
            raise ParameterError("image size must be at least 8x8")
        self.size = (int(W), int(H))

    def scaled(self, width: int, height: int) -> "Camera":
        """Same view at a different resolution (intrinsics scaled)."""
        W, H = self.size
        sx, sy = width / W, height / H
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      self.rotation.clone(), self.translation.clone(), (width, height))

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "R": self.rotation.tolist(), "t": self.translation.tolist(),
            "W": self.size[0], "H": self.size[1],
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                      torch.tensor(d["R"], dtype=torch.float32),
                      torch.tensor(d["t"], dtype=torch.float32),
                      (int(d["W"]), int(d["H"])))


@dataclass
class RenderOutput:
    rgb: Optional[Tensor] = None      # H x W x 3 in [0, 1]
    mask: Optional[Tensor] = None     # H x W in [0, 1]
    normal: Optional[Tensor] = None   # H x W x 3
    seg: Optional[Tensor] = None      # H x W in [0, 1]
    point_contrib: Optional[tuple[Tensor, Tensor, Tensor]] = None  # (pixel idx, point id, weight)


def project(points: Tensor, camera: Camera) -> tuple[Tensor, Tensor, Tensor]:
    """Pinhole projection.

    Returns pixel coordinates (N x 2), camera-space depth (N), and a validity
    mask; points with depth <= the near plane are flagged culled, not errors.
    """
    from .mini_flame import rodrigues

    points = points.reshape(-1, 3)
    R = rodrigues(camera.rotation.to(points.dtype))
    cam = points @ R.T + camera.translation.to(points.dtype)
    z = cam[:, 2]
    valid = z > NEAR_PLANE
    safe_z = torch.where(valid, z, torch.ones_like(z))
    u = camera.fx * cam[:, 0] / safe_z + camera.cx
    v = camera.fy * cam[:, 1] / safe_z + camera.cy
    xy = torch.stack([u, v], dim=1)
    xy = torch.where(valid[:, None], xy, torch.zeros_like(xy))
    return xy, z, valid


def splat_alpha(pixel_dist, radius_px, alpha_max: float = DEFAULT_ALPHA_MAX):
    """Quadratic splat profile: ``alpha_max * max(0, 1 - (d / r)^2)``."""
    if float(radius_px) <= 0:
        raise ParameterError("radius_px must be positive")
    d = torch.as_tensor(pixel_dist, dtype=torch.float32)
    return alpha_max * torch.clamp(1.0 - (d / radius_px) ** 2, min=0.0)


def composite(
    depths: Tensor, alphas: Tensor, attrs: Tensor, validate: bool = True
) -> tuple[Tensor, Tensor]:
    """Front-to-back over-operator accumulation of one pixel's fragments.

    ``attrs`` is F x C.  Returns the composited attribute (C,) and the
    accumulated mask (sum of compositing weights).  Fragments must be sorted
    ascending by depth.
    """
    depths = depths.reshape(-1)
    alphas = alphas.reshape(-1)
    attrs = attrs.reshape(depths.shape[0], -1)
    if validate and depths.numel() > 1 and (depths[1:] < depths[:-1]).any():
        raise ParameterError("fragments must be sorted ascending by depth")
    dtype = attrs.dtype if attrs.is_floating_point() else torch.float32
    out = torch.zeros(attrs.shape[1], dtype=dtype)
    mask = torch.zeros((), dtype=dtype)
    T = torch.ones((), dtype=dtype)
    for i in range(depths.shape[0]):
        w = alphas[i] * T
        out = out + w * attrs[i]
        mask = mask + w
        T = T * (1.0 - alphas[i])
    return out, mask


def _build_fragments(points, camera, radius_px, alpha_max):
    """Project points and enumerate (pixel, point) fragment candidates."""
    W, H = camera.size
    xy, z, valid = project(points, camera)
    r = int(torch.ceil(torch.tensor(float(radius_px))))
    offs = torch.arange(-r, r + 1)
    oy, ox = torch.meshgrid(offs, offs, indexing="ij")
    grid = torch.stack([ox.reshape(-1), oy.reshape(-1)], dim=1)  # P x 2
    centers = xy.detach().round().to(torch.long)  # N x 2 (x, y)
    pix = centers[:, None, :] + grid[None, :, :]  # N x P x 2
    d2 = ((pix.to(xy.dtype) - xy[:, None, :]) ** 2).sum(dim=2)  # N x P
    alpha = alpha_max * torch.clamp(1.0 - d2 / float(radius_px) ** 2, min=0.0)
    inside = (
        (pix[..., 0] >= 0) & (pix[..., 0] < W) & (pix[..., 1] >= 0) & (pix[..., 1] < H)
        & (d2 < float(radius_px) ** 2) & valid[:, None]
    )
    sel = inside.reshape(-1)
    n, p = d2.shape
    pid = torch.arange(n).repeat_interleave(p)[sel]
    pixidx = (pix[..., 1] * W + pix[..., 0]).reshape(-1)[sel]
    return pid, pixidx, alpha.reshape(-1)[sel], z, W, H


def _sort_and_rank(pid, pixidx, depth_per_frag):
    """Fragment order: by pixel, then depth, ties by point id; plus in-pixel rank."""
    # initial order is point-id-major, so two stable sorts give the tie rule
    order = torch.argsort(depth_per_frag, stable=True)
    order = order[torch.argsort(pixidx[order], stable=True)]
    pid, pixidx = pid[order], pixidx[order]
    f = pixidx.shape[0]
    idx = torch.arange(f)
    new_group = torch.ones(f, dtype=torch.bool)
    if f > 1:
        new_group[1:] = pixidx[1:] != pixidx[:-1]
    group_start = torch.cummax(torch.where(new_group, idx, torch.zeros_like(idx)), dim=0).values
    rank = idx - group_start
    return order, pid, pixidx, rank


def render(
    points: Tensor,
    camera: Camera,
    attributes: Optional[dict] = None,
    radius: float = 0.02,
    alpha_max: float = DEFAULT_ALPHA_MAX,
    channels: Iterable[str] = ("rgb", "mask"),
    background: Optional[Tensor] = None,
) -> RenderOutput:
    """Rasterize a point set into the requested channels.

    ``attributes`` maps channel name ("rgb", "normal", "seg") to per-point
    values; ``radius`` is a fraction of the image height.  With no visible
    points the result is an empty render (mask all zero).  The optional
    ``background`` color is blended into the rgb channel as ``1 - mask``.
    """
    channels = set(channels)
    unknown = channels - set(ALL_CHANNELS)
    if unknown:
        raise ParameterError(f"unknown channels: {sorted(unknown)}")
    attributes = attributes or {}
    points = points.reshape(-1, 3)
    dtype = points.dtype if points.is_floating_point() else torch.float32
    W, H = camera.size
    if radius <= 0:
        raise ParameterError("radius must be positive")
    radius_px = radius * H

    # assemble the attribute matrix once so one pass composites everything
    cols: list[tuple[str, int, Tensor]] = []
    for name, width in (("rgb", 3), ("normal", 3), ("seg", 1)):
        if name in channels:
            if name not in attributes:
                raise ParameterError(f"channel '{name}' requested but no per-point attribute given")
            a = attributes[name].reshape(points.shape[0], -1).to(dtype)
            if a.shape[1] != width:
                raise ShapeError(f"attribute '{name}' must have {width} columns")
            cols.append((name, width, a))
    attr = (
        torch.cat([c[2] for c in cols], dim=1)
        if cols else torch.zeros(points.shape[0], 0, dtype=dtype)
    )

    pid, pixidx, alpha, z, W, H = _build_fragments(points, camera, radius_px, alpha_max)
    out_img = torch.zeros(H * W, attr.shape[1], dtype=dtype)
    mask_img = torch.zeros(H * W, dtype=dtype)
    contrib = None

    if pid.numel() > 0:
        depth_frag = z[pid]
        order, pid_s, pix_s, rank = _sort_and_rank(pid, pixidx, depth_frag)
        alpha_s = alpha[order]
        keep = rank < FRAGMENT_CAP
        pid_s, pix_s, alpha_s = pid_s[keep], pix_s[keep], alpha_s[keep]
        rank = rank[keep]

        T = torch.ones(H * W, dtype=dtype)
        contrib_pix, contrib_pid, contrib_w = [], [], []
        # rank-by-rank sequential compositing: within a rank every pixel
        # appears at most once, so scatter order matches per-pixel order
        for r_level in range(int(rank.max()) + 1 if rank.numel() else 0):
            sel = rank == r_level
            if not bool(sel.any()):
                break
            px = pix_s[sel]
            a = alpha_s[sel]
            w = a * T[px]
            if attr.shape[1]:
                out_img = out_img.index_add(0, px, w[:, None] * attr[pid_s[sel]])
            mask_img = mask_img.index_add(0, px, w)
            T = T.index_put((px,), T[px] * (1.0 - a))
            if "contrib" in channels:
                contrib_pix.append(px)
                contrib_pid.append(pid_s[sel])
                contrib_w.append(w)
        if "contrib" in channels:
            contrib = (
                torch.cat(contrib_pix) if contrib_pix else torch.zeros(0, dtype=torch.long),
                torch.cat(contrib_pid) if contrib_pid else torch.zeros(0, dtype=torch.long),
                torch.cat(contrib_w) if contrib_w else torch.zeros(0, dtype=dtype),
            )
    elif "contrib" in channels:
        contrib = (torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long),
                   torch.zeros(0, dtype=dtype))

    result = RenderOutput(point_contrib=contrib)
    mask2d = mask_img.reshape(H, W)
    if "mask" in channels:
        result.mask = mask2d
    col = 0
    for name, width, _ in cols:
        img = out_img[:, col:col + width].reshape(H, W, width)
        col += width
        if name == "rgb":
            if background is not None:
                bg = torch.as_tensor(background, dtype=dtype).reshape(1, 1, 3)
                img = img + (1.0 - mask2d)[:, :, None] * bg
            result.rgb = img
        elif name == "normal":
            result.normal = img
        elif name == "seg":
            result.seg = img.reshape(H, W)
    return result


def render_avatar(
    avatar_out: dict,
    camera: Camera,
    radius: float,
    channels: Iterable[str] = ("rgb", "mask"),
    alpha_max: float = DEFAULT_ALPHA_MAX,
    background: Optional[Tensor] = None,
) -> RenderOutput:
    """Render the output dict of ``AvatarModel.forward``."""
    attributes = {}
    if "color" in avatar_out:
        attributes["rgb"] = avatar_out["color"]
    if "normal" in avatar_out:
        attributes["normal"] = avatar_out["normal"]
    if "seg" in avatar_out:
        attributes["seg"] = avatar_out["seg"]
    return render(
        avatar_out["positions"], camera, attributes,
        radius=radius, alpha_max=alpha_max, channels=channels, background=background,
    )
