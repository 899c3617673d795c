"""Synthetic-database generation by face part swapping.

The pipeline renders a donor avatar under the target frame's FLAME state
(including the target's shape coefficients), takes the donor's rendered
attribute mask, removes the target's own part by Fast-Marching inpainting
(hair gets a dilated bald-neutralization pass first), cleans the mask with
binary morphology, and blends the donor pixels in, by Poisson blending or
plain pasting.
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import torch
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import cg, spsolve

from .data import (
    FrameRecord,
    VideoManifest,
    load_frame,
    load_png,
    save_frame,
    to_uint8,
    write_manifest,
)
from .errors import DataError, ParameterError, StateError
from .mini_flame import FlameParams
from .model import AvatarModel, PARTS
from .rendering import render_avatar

log = logging.getLogger(__name__)

Tensor = torch.Tensor

DEFAULT_DILATION = {"hair": 20}
DEFAULT_DILATION_OTHER = 5
DIRECT_SOLVE_LIMIT = 4096  # interior pixels; beyond this use conjugate gradients


@dataclass
class PartMask:
    mask: Tensor  # H x W in {0, 1}
    part: str
    provenance: str = "ingested"  # ingested | rendered | derived

    def __post_init__(self):
        self.mask = (self.mask.reshape(self.mask.shape[-2:]) >= 0.5).to(torch.float32)
        if self.part not in PARTS:
            raise ParameterError(f"unknown part '{self.part}'")
        if self.provenance not in ("ingested", "rendered", "derived"):
            raise ParameterError(f"bad provenance '{self.provenance}'")

    @property
    def empty(self) -> bool:
        return bool(self.mask.sum() == 0)


@dataclass
class SwapJob:
    target_video: str
    db_model: str
    part: str
    dilation: Optional[int] = None
    erosion: Optional[int] = None
    blend_mode: str = "poisson"

    def __post_init__(self):
        if self.part not in PARTS:
            raise ParameterError(f"unknown part '{self.part}'")
        if self.blend_mode not in ("poisson", "paste"):
            raise ParameterError(f"unknown blend mode '{self.blend_mode}'")
        if self.dilation is None:
            self.dilation = DEFAULT_DILATION.get(self.part, DEFAULT_DILATION_OTHER)
        if self.erosion is None:
            self.erosion = self.dilation // 2
        if self.dilation < 0 or self.erosion < 0:
            raise ParameterError("morphology radii must be nonnegative")

    def content_key(self) -> str:
        return json.dumps({
            "db": str(self.db_model), "part": self.part, "dilation": self.dilation,
            "erosion": self.erosion, "blend": self.blend_mode,
        }, sort_keys=True)


# ---------------------------------------------------------------------------
# rendering the donor attribute


def render_attribute(db_model: AvatarModel, target_params: FlameParams) -> dict:
    """Render a trained donor avatar under the target's FLAME state.

    The caller passes the target's parameters directly, which substitutes the
    target's shape coefficients into the donor model for alignment.  Returns
    the image, foreground mask, rendered normals, and the attribute mask
    thresholded from the segmentation channel.
    """
    if not db_model.latent.assignments:
        raise StateError("donor avatar has not been trained")
    if target_params.camera is None:
        raise ParameterError("target parameters carry no camera")
    part = _donor_part(db_model)
    z = db_model.latent.compose()
    with torch.no_grad():
        out = db_model(z, target_params, create_graph=False)
    rout = render_avatar(out, target_params.camera, radius=db_model.radius,
                         channels=("rgb", "mask", "normal", "seg"))
    fg = (rout.mask >= 0.5).to(torch.float32)
    seg = ((rout.seg >= 0.5) & (fg > 0)).to(torch.float32)
    return {
        "image": rout.rgb.clamp(0, 1),
        "fg_mask": fg,
        "normal": rout.normal,
        "part_mask": PartMask(seg, part, provenance="rendered"),
    }


def _donor_part(db_model: AvatarModel) -> str:
    for parts in db_model.latent.assignments.values():
        for part in parts:
            return part
    return "hair"


# ---------------------------------------------------------------------------
# mask morphology and inpainting


def _kernel(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=np.uint8)


def morph_cleanup(mask: PartMask, dilate_r: int, erode_r: int) -> PartMask:
    """Binary dilation then erosion with square structuring elements."""
    if dilate_r < 0 or erode_r < 0:
        raise ParameterError("morphology radii must be nonnegative")
    m = (mask.mask.numpy() > 0.5).astype(np.uint8)
    if dilate_r > 0:
        m = cv2.dilate(m, _kernel(dilate_r))
    if erode_r > 0:
        # outside the frame is background, so erosion shrinks at the border
        m = cv2.erode(m, _kernel(erode_r), borderValue=0)
    return PartMask(torch.from_numpy(m.astype(np.float32)), mask.part, provenance="derived")


def remove_part_inpaint(image: Tensor, mask: Tensor, radius: int = 3) -> Tensor:
    """Replace masked pixels by Fast-Marching propagation from the boundary.

    Unmasked pixels are returned bit-exact; an empty mask is a no-op.
    """
    m = (mask.mask if isinstance(mask, PartMask) else mask)
    m8 = (m.numpy() > 0.5).astype(np.uint8)
    if m8.sum() == 0:
        return image
    if m8.all():
        raise ParameterError("cannot inpaint a full-frame mask")
    img8 = to_uint8(image)
    filled = cv2.inpaint(img8, m8, radius, cv2.INPAINT_TELEA)
    out = torch.from_numpy(filled.astype(np.float32) / 255.0)
    keep = torch.from_numpy(m8.astype(np.float32))[:, :, None]
    return image * (1 - keep) + out * keep


def neutralize_hair(
    image: Tensor,
    hair_mask: Tensor,
    backend: str = "inpaint",
    hook_command: Optional[list[str]] = None,
    dilate: int = 20,
    timeout: float = 120.0,
) -> Tensor:
    """Flatten the target's hair region before donor-hair blending.

    The default backend dilates the hair mask and inpaints it.  The external
    backend invokes ``hook_command + [image_png, mask_png, output_png]`` and
    falls back to inpainting (with a logged warning) on failure.
    """
    m = (hair_mask.mask if isinstance(hair_mask, PartMask) else hair_mask)
    if m.sum() == 0:
        return image
    grown = morph_cleanup(PartMask(m, "hair"), dilate, 0).mask
    if backend == "external" and hook_command:
        try:
            return _run_external_hook(hook_command, image, grown, timeout)
        except Exception as exc:  # noqa: BLE001 - any hook failure falls back
            log.warning("external bald-head hook failed (%s); falling back to inpaint", exc)
    return remove_part_inpaint(image, grown)


def _run_external_hook(cmd: list[str], image: Tensor, mask: Tensor, timeout: float) -> Tensor:
    from .data import save_png

    with tempfile.TemporaryDirectory() as tmp:
        tp = Path(tmp)
        save_png(image, tp / "input.png")
        save_png(mask, tp / "mask.png")
        out_path = tp / "output.png"
        proc = subprocess.run(
            list(cmd) + [str(tp / "input.png"), str(tp / "mask.png"), str(out_path)],
            timeout=timeout, capture_output=True,
        )
        if proc.returncode != 0:
            raise RuntimeError(f"hook exited {proc.returncode}: {proc.stderr[:200]!r}")
        if not out_path.exists():
            raise RuntimeError("hook wrote no output file")
        return load_png(out_path)


# ---------------------------------------------------------------------------
# Poisson blending


def _check_mask_for_blend(mask: np.ndarray) -> np.ndarray:
    if mask.sum() == 0:
        raise ParameterError("blend mask has no interior")
    border = np.concatenate([mask[0], mask[-1], mask[:, 0], mask[:, -1]])
    if border.any():
        raise ParameterError("blend mask must not touch the image border")
    return mask


def poisson_blend(src: Tensor, dst: Tensor, mask: Tensor, mixed: bool = False) -> Tensor:
    """Seamless cloning: solve the discrete Poisson equation on the mask
    interior with source gradients as guidance and destination Dirichlet
    boundary values.  Channels solve independently; output clamps to [0, 1].

    ``mixed`` selects per-edge the stronger of source/destination gradients.
    """
    if src.shape != dst.shape:
        raise ParameterError("source and destination must share a shape")
    m = _check_mask_for_blend((mask.numpy() > 0.5).astype(np.uint8))
    H, W = m.shape
    ids = -np.ones((H, W), dtype=np.int64)
    ys, xs = np.nonzero(m)
    n = len(ys)
    ids[ys, xs] = np.arange(n)

    src64 = src.numpy().astype(np.float64)
    dst64 = dst.numpy().astype(np.float64)
    rows, cols, vals = [], [], []
    b = np.zeros((n, src64.shape[2]))
    offsets = ((1, 0), (-1, 0), (0, 1), (0, -1))
    for k in range(n):
        y, x = ys[k], xs[k]
        rows.append(k)
        cols.append(k)
        vals.append(4.0)
        for dy, dx in offsets:
            qy, qx = y + dy, x + dx
            if mixed:
                gs = src64[y, x] - src64[qy, qx]
                gd = dst64[y, x] - dst64[qy, qx]
                g = np.where(np.abs(gs) >= np.abs(gd), gs, gd)
            else:
                g = src64[y, x] - src64[qy, qx]
            b[k] += g
            if ids[qy, qx] >= 0:
                rows.append(k)
                cols.append(ids[qy, qx])
                vals.append(-1.0)
            else:
                b[k] += dst64[qy, qx]
    A = csr_matrix((vals, (rows, cols)), shape=(n, n))

    out = dst64.copy()
    for c in range(src64.shape[2]):
        if n <= DIRECT_SOLVE_LIMIT:
            sol = spsolve(A, b[:, c])
        else:
            sol, info = cg(A, b[:, c], rtol=1e-8, maxiter=2000)
            if info != 0:
                log.warning("poisson cg did not fully converge (info=%d)", info)
        out[ys, xs, c] = sol
    return torch.from_numpy(np.clip(out, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# frame swap pipeline


def swap_frame(
    target_frame: FrameRecord,
    db_model: AvatarModel,
    job: SwapJob,
    hook_command: Optional[list[str]] = None,
) -> FrameRecord:
    """Replace one facial attribute of the target frame with the donor's.

    Pipeline: (hair only: bald neutralization) -> remove the target's part by
    inpainting -> render the donor attribute under the target's parameters ->
    clean the rendered mask -> blend.  The output frame keeps the target's
    FLAME parameters and carries the donor mask as its attribute mask.
    """
    if job.part not in target_frame.part_masks:
        raise DataError(f"target frame has no '{job.part}' mask")
    if target_frame.params is None:
        raise DataError("target frame has no FLAME parameters")
    target_mask = target_frame.part_masks[job.part]

    work = target_frame.image
    if job.part == "hair":
        work = neutralize_hair(
            work, target_mask,
            backend="external" if hook_command else "inpaint",
            hook_command=hook_command, dilate=job.dilation,
        )
    else:
        work = remove_part_inpaint(work, target_mask)

    donor = render_attribute(db_model, target_frame.params)
    attr = morph_cleanup(donor["part_mask"], job.dilation, job.erosion)
    # the Poisson boundary needs destination values, so keep the mask off the frame edge
    m = attr.mask.clone()
    m[0, :] = 0
    m[-1, :] = 0
    m[:, 0] = 0
    m[:, -1] = 0

    if m.sum() == 0:
        out_img = work
    elif job.blend_mode == "paste":
        out_img = work * (1 - m)[:, :, None] + donor["image"] * m[:, :, None]
    else:
        out_img = poisson_blend(donor["image"], work, m)

    fg = torch.maximum(target_frame.fg_mask, m)
    part_masks = {p: v * (1 - m) for p, v in target_frame.part_masks.items()}
    part_masks[job.part] = m
    normal = target_frame.normal
    if normal is not None:
        normal = normal * (1 - m)[:, :, None] + donor["normal"] * m[:, :, None]
    return FrameRecord(
        image=out_img, fg_mask=fg, part_masks=part_masks,
        params=target_frame.params, index=target_frame.index, normal=normal,
    )


# ---------------------------------------------------------------------------
# batch runner


def _frame_hash(manifest: VideoManifest, index: int, job: SwapJob, model_path: str) -> str:
    h = hashlib.sha256()
    h.update(job.content_key().encode())
    h.update(Path(model_path).read_bytes() if Path(model_path).exists() else b"")
    for key, p in sorted(manifest.frame_paths(index).items()):
        if p.exists():
            h.update(key.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def build_synthetic_db(
    target_manifest: VideoManifest,
    db_models: dict[str, str],
    jobs: list[SwapJob],
    out_root: Path | str,
) -> dict:
    """Run every swap job over the target video; resumable by content hash.

    Returns {"manifests": [VideoManifest...], "errors": [{job, frame, error}]}.
    """
    out_root = Path(out_root)
    manifests = []
    errors = []
    for job in jobs:
        if job.db_model not in db_models:
            raise ParameterError(f"unknown donor model id '{job.db_model}'")
        model_path = db_models[job.db_model]
        model = None
        video_id = f"swap_{job.part}_{job.db_model}"
        vdir = out_root / video_id
        vdir.mkdir(parents=True, exist_ok=True)
        parts = sorted(set(target_manifest.parts) | {job.part})
        for i in range(target_manifest.frame_count):
            hash_file = vdir / f"frame_{i:06d}.hash"
            want = _frame_hash(target_manifest, i, job, model_path)
            done = hash_file.exists() and hash_file.read_text() == want and \
                (vdir / f"frame_{i:06d}.png").exists()
            if done:
                continue
            try:
                if model is None:
                    from .data import load_model

                    model = load_model(model_path)
                frame = load_frame(target_manifest, i)
                if job.part not in frame.part_masks:
                    frame.part_masks[job.part] = torch.zeros_like(frame.fg_mask)
                swapped = swap_frame(frame, model, job)
                masks = {p: swapped.part_masks.get(p, torch.zeros_like(swapped.fg_mask))
                         for p in parts}
                save_frame(vdir, i, swapped.image, swapped.fg_mask, masks,
                           swapped.params, normal=swapped.normal)
                hash_file.write_text(want)
            except Exception as exc:  # noqa: BLE001 - collect per-frame failures
                errors.append({"job": video_id, "frame": i, "error": str(exc)})
                log.warning("swap job %s frame %d failed: %s", video_id, i, exc)
        man = VideoManifest(
            video_id=video_id, role="part-swapped", path=vdir,
            frame_count=target_manifest.frame_count,
            resolution=target_manifest.resolution, parts=parts,
            attribute=job.part, source_id=job.db_model,
        )
        write_manifest(man)
        manifests.append(man)
    return {"manifests": manifests, "errors": errors}
