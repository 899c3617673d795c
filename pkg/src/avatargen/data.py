"""Dataset ingestion and checkpoint persistence.

On-disk video layout (schema "pegasus-ds/1"): one directory per video holding
``manifest.json`` plus, per frame ``i``::

    frame_%06i.png              8-bit RGB image
    frame_%06i_mask.png         foreground mask
    frame_%06i_mask_<part>.png  one file per part mask
    frame_%06i_flame.json       FLAME parameters and camera
    frame_%06i_normal.png       optional normal map, channels in [0,1] = (n+1)/2

Checkpoints are a single file: an 8-byte little-endian header length, a JSON
header carrying the format version, metadata, and the array manifest
(name/dtype/shape/offset), then the raw little-endian payload.  Round trips
are bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from filelock import FileLock
from PIL import Image

from .errors import DataError, IntegrityError, ParameterError
from .mini_flame import FlameParams, HeadTemplate
from .rendering import Camera

DATASET_SCHEMA = "pegasus-ds/1"
CHECKPOINT_SCHEMA = "pegasus-ckpt/1"

Tensor = torch.Tensor


@contextmanager
def directory_lock(directory: Path | str):
    """Advisory per-directory write lock; loaders never take it."""
    base = Path(directory)
    base.mkdir(parents=True, exist_ok=True)
    with FileLock(str(base / ".write.lock")):
        yield


# ---------------------------------------------------------------------------
# images


def to_uint8(img: Tensor | np.ndarray) -> np.ndarray:
    arr = img.detach().cpu().numpy() if torch.is_tensor(img) else np.asarray(img)
    arr = np.clip(arr, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def encode_png(img: Tensor | np.ndarray, gamma: Optional[float] = None) -> bytes:
    """Encode a float image in [0, 1] (HxW or HxWx3) as 8-bit PNG bytes.

    Values are linear; ``gamma`` applies a single optional encode-time curve.
    """
    arr = img.detach().cpu().numpy() if torch.is_tensor(img) else np.asarray(img, dtype=np.float32)
    if gamma is not None:
        arr = np.clip(arr, 0.0, 1.0) ** (1.0 / gamma)
    buf = io.BytesIO()
    Image.fromarray(to_uint8(arr)).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def save_png(img, path: Path | str, gamma: Optional[float] = None) -> None:
    Path(path).write_bytes(encode_png(img, gamma=gamma))


def load_png(path: Path | str) -> Tensor:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing image file: {p}")
    arr = np.asarray(Image.open(p)).astype(np.float32) / 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    t = torch.from_numpy(arr)
    if not torch.isfinite(t).all():
        raise DataError(f"non-finite pixel values in {p}")
    return t


# ---------------------------------------------------------------------------
# FLAME parameter files


def flame_params_to_dict(params: FlameParams) -> dict:
    d = {
        "beta": params.beta.tolist(),
        "theta": params.theta.tolist(),
        "psi": params.psi.tolist(),
        "translation": params.translation.tolist(),
    }
    if params.camera is not None:
        d["camera"] = params.camera.to_dict()
    return d


def flame_params_from_dict(d: dict, path: str = "<dict>") -> FlameParams:
    try:
        cam = Camera.from_dict(d["camera"]) if "camera" in d else None
        return FlameParams(
            beta=torch.tensor(d["beta"], dtype=torch.float32),
            theta=torch.tensor(d["theta"], dtype=torch.float32),
            psi=torch.tensor(d["psi"], dtype=torch.float32),
            translation=torch.tensor(d["translation"], dtype=torch.float32),
            camera=cam,
        )
    except (KeyError, TypeError, ValueError, ParameterError) as exc:
        raise DataError(f"bad FLAME parameter record in {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests and frames


@dataclass
class VideoManifest:
    video_id: str
    role: str                      # target | attribute-db | part-swapped
    path: Path
    frame_count: int
    resolution: tuple[int, int]    # (W, H)
    parts: list[str] = field(default_factory=list)
    attribute: Optional[str] = None   # donated part, for db / part-swapped roles
    source_id: Optional[str] = None   # attribute-source id, for part-swapped roles

    def frame_paths(self, index: int) -> dict:
        stem = f"frame_{index:06d}"
        base = Path(self.path)
        paths = {
            "image": base / f"{stem}.png",
            "fg_mask": base / f"{stem}_mask.png",
            "flame": base / f"{stem}_flame.json",
            "normal": base / f"{stem}_normal.png",
        }
        for part in self.parts:
            paths[f"mask_{part}"] = base / f"{stem}_mask_{part}.png"
        return paths


@dataclass
class FrameRecord:
    image: Tensor                 # H x W x 3 in [0, 1]
    fg_mask: Tensor               # H x W binary
    part_masks: dict[str, Tensor]  # part -> H x W binary
    params: FlameParams
    index: int
    normal: Optional[Tensor] = None  # H x W x 3 in [-1, 1]


def write_manifest(manifest: VideoManifest) -> None:
    doc = {
        "schema": DATASET_SCHEMA,
        "video_id": manifest.video_id,
        "role": manifest.role,
        "frame_count": manifest.frame_count,
        "resolution": list(manifest.resolution),
        "parts": manifest.parts,
        "attribute": manifest.attribute,
        "source_id": manifest.source_id,
    }
    path = Path(manifest.path)
    with directory_lock(path):
        (path / "manifest.json").write_text(json.dumps(doc, indent=1))


def load_manifest(path: Path | str) -> VideoManifest:
    base = Path(path)
    mpath = base / "manifest.json" if base.is_dir() else base
    if not mpath.exists():
        raise DataError(f"missing manifest: {mpath}")
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {mpath}: {exc}") from exc
    if doc.get("schema") != DATASET_SCHEMA:
        raise DataError(f"unsupported dataset schema {doc.get('schema')!r} in {mpath}")
    if doc.get("role") not in ("target", "attribute-db", "part-swapped"):
        raise DataError(f"unknown video role {doc.get('role')!r} in {mpath}")
    man = VideoManifest(
        video_id=doc["video_id"],
        role=doc["role"],
        path=mpath.parent,
        frame_count=int(doc["frame_count"]),
        resolution=(int(doc["resolution"][0]), int(doc["resolution"][1])),
        parts=list(doc.get("parts", [])),
        attribute=doc.get("attribute"),
        source_id=doc.get("source_id"),
    )
    if man.role != "target" and not man.attribute:
        raise DataError(f"video {man.video_id}: role {man.role} requires an attribute label")
    # every listed file must exist at load
    for i in range(man.frame_count):
        for key, p in man.frame_paths(i).items():
            if key == "normal":
                continue  # optional
            if not p.exists():
                raise DataError(f"manifest {man.video_id} references missing file: {p}")
    return man


def _binarize(mask: Tensor, path) -> Tensor:
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    return (mask >= 0.5).to(torch.float32)


def load_frame(manifest: VideoManifest, index: int) -> FrameRecord:
    if not 0 <= index < manifest.frame_count:
        raise DataError(f"frame index {index} out of range for {manifest.video_id}")
    paths = manifest.frame_paths(index)
    image = load_png(paths["image"])
    if image.ndim != 3:
        image = image[:, :, None].expand(-1, -1, 3)
    W, H = manifest.resolution
    if image.shape[0] != H or image.shape[1] != W:
        raise DataError(
            f"{paths['image']}: resolution {image.shape[1]}x{image.shape[0]} "
            f"does not match manifest {W}x{H}"
        )
    fg = _binarize(load_png(paths["fg_mask"]), paths["fg_mask"])
    if fg.shape != image.shape[:2]:
        raise DataError(f"{paths['fg_mask']}: mask resolution mismatch")
    part_masks = {}
    for part in manifest.parts:
        pm = _binarize(load_png(paths[f"mask_{part}"]), paths[f"mask_{part}"])
        if pm.shape != fg.shape:
            raise DataError(f"part mask resolution mismatch for {part} frame {index}")
        if ((pm > 0) & (fg == 0)).any():
            raise DataError(
                f"{manifest.video_id} frame {index}: part mask '{part}' leaves the foreground mask"
            )
        part_masks[part] = pm
    try:
        flame_doc = json.loads(paths["flame"].read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed FLAME file {paths['flame']}: {exc}") from exc
    params = flame_params_from_dict(flame_doc, str(paths["flame"]))
    normal = None
    if paths["normal"].exists():
        normal = load_png(paths["normal"]) * 2.0 - 1.0
    return FrameRecord(image=image, fg_mask=fg, part_masks=part_masks,
                       params=params, index=index, normal=normal)


def save_frame(
    directory: Path | str,
    index: int,
    image: Tensor,
    fg_mask: Tensor,
    part_masks: dict[str, Tensor],
    params: FlameParams,
    normal: Optional[Tensor] = None,
) -> None:
    base = Path(directory)
    stem = f"frame_{index:06d}"
    with directory_lock(base):
        save_png(image, base / f"{stem}.png")
        save_png(fg_mask, base / f"{stem}_mask.png")
        for part, m in part_masks.items():
            save_png(m, base / f"{stem}_mask_{part}.png")
        (base / f"{stem}_flame.json").write_text(json.dumps(flame_params_to_dict(params)))
        if normal is not None:
            save_png((normal + 1.0) / 2.0, base / f"{stem}_normal.png")


# ---------------------------------------------------------------------------
# checkpoint archive

_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i4": np.int32, "<i8": np.int64, "|u1": np.uint8}


def _np_view(value) -> np.ndarray:
    if torch.is_tensor(value):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    return np.ascontiguousarray(arr.astype(dtype, copy=False))


def save_archive(path: Path | str, arrays: dict, meta: Optional[dict] = None) -> None:
    records = []
    payload = io.BytesIO()
    offset = 0
    for name, value in arrays.items():
        arr = _np_view(value)
        code = arr.dtype.str if arr.dtype.str in _DTYPES else None
        if code is None:
            raise ParameterError(f"unsupported array dtype {arr.dtype} for '{name}'")
        data = arr.tobytes()
        records.append({
            "name": name, "dtype": code, "shape": list(arr.shape),
            "offset": offset, "nbytes": len(data),
        })
        payload.write(data)
        offset += len(data)
    header = json.dumps({
        "version": CHECKPOINT_SCHEMA,
        "meta": meta or {},
        "arrays": records,
        "payload_bytes": offset,
    }).encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload.getvalue())
    tmp.replace(out)


def load_archive(path: Path | str) -> tuple[dict, dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing checkpoint file: {p}")
    raw = p.read_bytes()
    if len(raw) < 8:
        raise IntegrityError(f"{p}: truncated archive (no header length)")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise IntegrityError(f"{p}: truncated archive header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{p}: corrupt archive header: {exc}") from exc
    if header.get("version") != CHECKPOINT_SCHEMA:
        raise DataError(f"{p}: unsupported checkpoint version {header.get('version')!r}")
    payload = raw[8 + hlen:]
    if len(payload) != header.get("payload_bytes", -1):
        raise IntegrityError(
            f"{p}: payload length {len(payload)} does not match header "
            f"{header.get('payload_bytes')}"
        )
    arrays = {}
    for rec in header["arrays"]:
        start, n = rec["offset"], rec["nbytes"]
        if start + n > len(payload):
            raise IntegrityError(f"{p}: array '{rec['name']}' exceeds payload")
        dt = np.dtype(rec["dtype"])
        expected = int(np.prod(rec["shape"], dtype=np.int64)) * dt.itemsize if rec["shape"] else dt.itemsize
        if expected != n:
            raise IntegrityError(f"{p}: array '{rec['name']}' shape/byte mismatch")
        arr = np.frombuffer(payload[start:start + n], dtype=dt).reshape(rec["shape"]).copy()
        arrays[rec["name"]] = arr
    return arrays, header.get("meta", {})


# ---------------------------------------------------------------------------
# model persistence


def save_template(path: Path | str, template: HeadTemplate) -> None:
    save_archive(path, template.arrays(), meta={"kind": "head-template"})


def load_template(path: Path | str) -> HeadTemplate:
    arrays, meta = load_archive(path)
    if meta.get("kind") not in ("head-template", "avatar-model"):
        raise DataError(f"{path}: archive does not contain a head template")
    prefix = "template/" if meta.get("kind") == "avatar-model" else ""
    picked = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    return HeadTemplate.from_arrays(picked)


def save_model(path: Path | str, model) -> None:
    arrays = {f"template/{k}": v for k, v in model.template.arrays().items()}
    for key, value in model.state_dict().items():
        arrays[f"state/{key}"] = value
    meta = {
        "kind": "avatar-model",
        "model": model.model_meta(),
        "part_code_keys": sorted(model.latent.part_codes.keys()),
    }
    save_archive(path, arrays, meta=meta)


def load_model(path: Path | str):
    from .model import AvatarModel

    arrays, meta = load_archive(path)
    if meta.get("kind") != "avatar-model":
        raise DataError(f"{path}: archive does not contain an avatar model")
    template = HeadTemplate.from_arrays(
        {k[len("template/"):]: v for k, v in arrays.items() if k.startswith("template/")}
    )
    mm = meta["model"]
    config = AvatarModel.config_from_meta(mm)
    model = AvatarModel(template, config, n_points=mm["n_points"], radius=1.0)
    model.radius = float(mm["radius"])
    model.init_lighting(int(mm.get("n_frames", 1)))
    for key in meta.get("part_code_keys", []):
        part, source = key.split(":", 1)
        model.latent.add_part_code(part, source)
    model.latent.assignments = {k: dict(v) for k, v in mm.get("assignments", {}).items()}
    state = {k[len("state/"):]: torch.as_tensor(v)
             for k, v in arrays.items() if k.startswith("state/")}
    model.load_state_dict(state, strict=True)
    return model
