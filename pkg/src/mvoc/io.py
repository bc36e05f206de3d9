"""On-disk formats: the .vten tensor container, 8-bit frame previews, and
directory layouts for datasets and latent caches.

.vten layout: magic bytes ``VTEN``, version byte 0x01, rank byte, rank
little-endian u32 dims, then the float32 little-endian row-major payload.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .core import FlowField, Mask, VideoTensor
from .errors import IOFormatError

MAGIC = b"VTEN"
VERSION = 0x01

__all__ = [
    "save_vten",
    "load_vten",
    "save_video",
    "load_video",
    "save_mask",
    "load_mask",
    "save_flow",
    "load_flow",
    "write_frame_previews",
    "save_dataset_dir",
    "load_dataset_dir",
    "save_latent_cache",
    "load_latent_cache",
]


def save_vten(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    dims = arr.shape
    header = MAGIC + struct.pack("<BB", VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    Path(path).write_bytes(header + arr.tobytes())


def load_vten(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IOFormatError(f"no such tensor file: {path}")
    raw = path.read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise IOFormatError(f"{path}: not a .vten container")
    version, rank = struct.unpack("<BB", raw[4:6])
    if version != VERSION:
        raise IOFormatError(f"{path}: unsupported version {version}")
    dim_end = 6 + 4 * rank
    if len(raw) < dim_end:
        raise IOFormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}I", raw[6:dim_end])
    count = int(np.prod(dims)) if dims else 1
    payload = raw[dim_end:]
    if len(payload) != 4 * count:
        raise IOFormatError(
            f"{path}: payload holds {len(payload) // 4} floats, dims need {count}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return arr.astype(np.float64)


def save_video(path: str | Path, video: VideoTensor) -> None:
    save_vten(path, video.data)


def load_video(path: str | Path) -> VideoTensor:
    arr = load_vten(path)
    if arr.ndim != 4:
        raise IOFormatError(f"{path}: expected rank 4 video, got rank {arr.ndim}")
    return VideoTensor(arr)


def save_mask(path: str | Path, mask: Mask) -> None:
    save_vten(path, mask.data)


def load_mask(path: str | Path) -> Mask:
    arr = load_vten(path)
    if arr.ndim != 3:
        raise IOFormatError(f"{path}: expected rank 3 mask, got rank {arr.ndim}")
    return Mask(arr)


def save_flow(path: str | Path, flow: FlowField) -> None:
    save_vten(path, flow.data)


def load_flow(path: str | Path, interval: int) -> FlowField:
    arr = load_vten(path)
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise IOFormatError(f"{path}: expected (pairs,2,H,W) flow, got {arr.shape}")
    return FlowField(arr, interval=interval)


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    clipped = np.clip(frame, 0.0, 1.0)
    return np.round(clipped * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + image.tobytes())


def write_frame_previews(outdir: str | Path, video: VideoTensor, stem: str = "frame") -> list[Path]:
    """Dump 8-bit previews, PGM for single-channel video and PPM for 3-channel.
    Other channel counts fall back to a PGM of the channel mean."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in range(video.frames):
        frame = video.data[f]
        if video.channels == 3:
            img = _to_uint8(np.moveaxis(frame, 0, -1))
            path = outdir / f"{stem}_{f:03d}.ppm"
            write_ppm(path, img)
        else:
            gray = frame[0] if video.channels == 1 else frame.mean(axis=0)
            path = outdir / f"{stem}_{f:03d}.pgm"
            write_pgm(path, _to_uint8(gray))
        paths.append(path)
    return paths


def save_dataset_dir(outdir: str | Path, samples, labels) -> None:
    """Persist samples as sample_###.vten plus a labels.json sidecar."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, (sample, label_set) in enumerate(zip(samples, labels)):
        name = f"sample_{i:03d}.vten"
        save_video(outdir / name, sample)
        index.append({"file": name, "labels": sorted(int(v) for v in label_set)})
    (outdir / "labels.json").write_text(json.dumps({"samples": index}, indent=2))


def load_dataset_dir(indir: str | Path):
    indir = Path(indir)
    sidecar = indir / "labels.json"
    if not sidecar.exists():
        raise IOFormatError(f"dataset dir {indir} has no labels.json")
    index = json.loads(sidecar.read_text())["samples"]
    samples = [load_video(indir / entry["file"]) for entry in index]
    labels = [frozenset(entry["labels"]) for entry in index]
    return samples, labels


_CACHE_RE = re.compile(r"^y(?P<obj>\d+)_t(?P<t>\d+)\.vten$")


def save_latent_cache(outdir: str | Path, object_id: int, cache: dict[int, VideoTensor]) -> None:
    """Persist a per-timestep latent cache as y{object}_t{timestep}.vten files."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for t, latent in cache.items():
        save_video(outdir / f"y{object_id}_t{t}.vten", latent)


def load_latent_cache(indir: str | Path, object_id: int) -> dict[int, VideoTensor]:
    indir = Path(indir)
    cache: dict[int, VideoTensor] = {}
    if not indir.is_dir():
        raise IOFormatError(f"no cache directory: {indir}")
    for path in indir.iterdir():
        match = _CACHE_RE.match(path.name)
        if match and int(match.group("obj")) == object_id:
            cache[int(match.group("t"))] = load_video(path)
    if not cache:
        raise IOFormatError(f"{indir}: no cached latents for object {object_id}")
    return cache
