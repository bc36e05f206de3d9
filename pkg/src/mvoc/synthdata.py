"""Deterministic synthetic video renderer: layered moving shapes over a
background, with exact-coverage masks and analytic ground-truth flow.

Stands in for real footage, segmentation, and flow estimation, so tests can
compare against values the renderer knows exactly. Everything is a pure
function of the scene description and its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FlowField, Mask, VideoTensor
from .denoiser import Dataset
from .errors import ConfigError

__all__ = [
    "ObjectSpec",
    "BackgroundSpec",
    "SceneSpec",
    "RenderResult",
    "render_scene",
    "scene_flow",
    "object_flow",
    "non_occlusion_mask",
    "build_dataset",
]

SHAPES = ("disc", "square", "triangle")
BACKGROUNDS = ("solid", "gradient", "texture")

_SUBSAMPLES = 16  # per-axis subsamples for boundary pixels


@dataclass(frozen=True)
class ObjectSpec:
    """One moving shape. The center follows start + velocity*f +
    wobble*sin(2*pi*f/period); higher layer = nearer the camera."""

    object_id: int
    shape: str
    size: float
    color: tuple[float, ...]
    start: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    wobble: tuple[float, float] = (0.0, 0.0)
    period: float = 8.0
    layer: int = 1

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.size <= 0:
            raise ConfigError(f"object size must be positive, got {self.size}")
        if self.period <= 0:
            raise ConfigError(f"period must be positive, got {self.period}")
        if self.layer < 1:
            raise ConfigError("object layers start at 1 (0 is the background)")

    def center(self, frame: int) -> np.ndarray:
        phase = np.sin(2.0 * np.pi * frame / self.period)
        return np.array(
            [
                self.start[0] + self.velocity[0] * frame + self.wobble[0] * phase,
                self.start[1] + self.velocity[1] * frame + self.wobble[1] * phase,
            ]
        )


@dataclass(frozen=True)
class BackgroundSpec:
    """Solid color, vertical gradient, or a seeded texture drifting at a
    constant per-frame velocity."""

    kind: str = "solid"
    color: tuple[float, ...] = (0.25,)
    color2: tuple[float, ...] | None = None
    drift: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in BACKGROUNDS:
            raise ConfigError(f"background must be one of {BACKGROUNDS}, got {self.kind!r}")
        if self.kind == "gradient" and self.color2 is None:
            raise ConfigError("gradient background needs color2")
        if self.kind == "texture" and any(d != int(d) for d in self.drift):
            raise ConfigError("texture drift must be whole pixels per frame")


@dataclass(frozen=True)
class SceneSpec:
    frames: int
    height: int
    width: int
    channels: int = 3
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    objects: tuple[ObjectSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ConfigError("scene dims must be positive")
        layers = [o.layer for o in self.objects]
        if len(set(layers)) != len(layers):
            raise ConfigError(f"object layers must be unique, got {layers}")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"object ids must be unique, got {ids}")
        for obj in self.objects:
            for f in range(self.frames):
                cy, cx = obj.center(f)
                if not (0.0 <= cy <= self.height - 1 and 0.0 <= cx <= self.width - 1):
                    raise ConfigError(
                        f"object {obj.object_id} center leaves the canvas at frame {f}:"
                        f" ({cy:.2f}, {cx:.2f})"
                    )

    def ordered_objects(self) -> tuple[ObjectSpec, ...]:
        return tuple(sorted(self.objects, key=lambda o: o.layer))

    def to_json(self) -> str:
        def enc(spec):
            d = dict(spec.__dict__)
            return d

        payload = {
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "seed": self.seed,
            "background": enc(self.background),
            "objects": [enc(o) for o in self.objects],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        try:
            payload = json.loads(text)
            background = BackgroundSpec(
                kind=payload["background"].get("kind", "solid"),
                color=tuple(payload["background"].get("color", (0.25,))),
                color2=(
                    tuple(payload["background"]["color2"])
                    if payload["background"].get("color2") is not None
                    else None
                ),
                drift=tuple(payload["background"].get("drift", (0.0, 0.0))),
            )
            objects = tuple(
                ObjectSpec(
                    object_id=int(o["object_id"]),
                    shape=o["shape"],
                    size=float(o["size"]),
                    color=tuple(o["color"]),
                    start=tuple(o["start"]),
                    velocity=tuple(o.get("velocity", (0.0, 0.0))),
                    wobble=tuple(o.get("wobble", (0.0, 0.0))),
                    period=float(o.get("period", 8.0)),
                    layer=int(o.get("layer", 1)),
                )
                for o in payload.get("objects", [])
            )
            return cls(
                frames=int(payload["frames"]),
                height=int(payload["height"]),
                width=int(payload["width"]),
                channels=int(payload.get("channels", 3)),
                background=background,
                objects=objects,
                seed=int(payload.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scene spec: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "SceneSpec":
        return cls.from_json(Path(path).read_text())


# -- rasterization ------------------------------------------------------


def _inside(shape: str, size: float, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Membership test for points offset (dy, dx) from the shape center."""
    if shape == "disc":
        return dy * dy + dx * dx <= size * size
    if shape == "square":
        half = size / 2.0
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    # equilateral triangle, vertex up, circumradius = size
    top = -size
    base_y = size / 2.0
    slope = np.sqrt(3.0)
    return (dy <= base_y) & (dy - top >= slope * np.abs(dx))


def _coverage(spec: ObjectSpec, center: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixel-area coverage of the shape, exact to the subsample grid on
    boundary pixels and exact on interior/exterior pixels."""
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    reach = spec.size + 1.0
    near = (
        (np.abs(yy - center[0]) <= reach) & (np.abs(xx - center[1]) <= reach)
    )
    corners = np.zeros((height, width), dtype=np.int64)
    for oy in (0.0, 1.0):
        for ox in (0.0, 1.0):
            corners += _inside(
                spec.shape, spec.size, yy - 0.5 + oy - center[0], xx - 0.5 + ox - center[1]
            )
    coverage = np.where(corners == 4, 1.0, 0.0)
    by, bx = np.nonzero(near & (corners < 4))
    if by.size:
        offs = (np.arange(_SUBSAMPLES) + 0.5) / _SUBSAMPLES - 0.5
        sub_y = by[:, None, None] + offs[None, :, None] - center[0]
        sub_x = bx[:, None, None] + offs[None, None, :] - center[1]
        frac = _inside(spec.shape, spec.size, sub_y, sub_x).mean(axis=(1, 2))
        coverage[by, bx] = frac
    return coverage


def _background_frames(spec: SceneSpec) -> np.ndarray:
    f, c, h, w = spec.frames, spec.channels, spec.height, spec.width
    bg = spec.background

    def color_plane(color):
        col = np.asarray(color, dtype=np.float64)
        if col.size == 1:
            col = np.repeat(col, c)
        if col.size != c:
            raise ConfigError(f"background color has {col.size} channels, scene has {c}")
        return col

    if bg.kind == "solid":
        col = color_plane(bg.color)
        return np.broadcast_to(col[None, :, None, None], (f, c, h, w)).copy()
    if bg.kind == "gradient":
        top = color_plane(bg.color)
        bottom = color_plane(bg.color2)
        ramp = np.linspace(0.0, 1.0, h)[None, :, None]
        plane = top[:, None, None] * (1.0 - ramp) + bottom[:, None, None] * ramp
        return np.broadcast_to(plane[None], (f, c, h, w)).copy()
    # drifting texture: smooth seeded noise tiled and shifted per frame
    rng = np.random.default_rng(spec.seed)
    tile = rng.uniform(0.0, 1.0, (c, h, w))
    kernel = np.ones(5) / 5.0
    for axis in (1, 2):
        tile = np.apply_along_axis(
            lambda row: np.convolve(np.tile(row, 3), kernel, mode="same")[len(row):2 * len(row)],
            axis,
            tile,
        )
    frames = np.empty((f, c, h, w))
    for k in range(f):
        dy = int(round(bg.drift[0] * k)) % h
        dx = int(round(bg.drift[1] * k)) % w
        frames[k] = np.roll(np.roll(tile, dy, axis=1), dx, axis=2)
    return frames


@dataclass(frozen=True)
class RenderResult:
    """video plus per-object binary visible masks, layer-resolved visibility
    (object id per pixel, -1 for background), per-object smooth coverage,
    and ground-truth flow at interval 1 (None for single-frame scenes)."""

    video: VideoTensor
    masks: dict[int, Mask]
    visibility: np.ndarray
    coverage: dict[int, np.ndarray]
    flow: FlowField | None
    object_flows: dict[int, FlowField]


def render_scene(spec: SceneSpec) -> RenderResult:
    f, c, h, w = spec.frames, spec.channels, spec.height, spec.width
    frames = _background_frames(spec)
    ordered = spec.ordered_objects()

    coverage = {
        obj.object_id: np.stack([_coverage(obj, obj.center(k), h, w) for k in range(f)])
        for obj in ordered
    }

    for obj in ordered:  # back to front, smooth alpha compositing
        col = np.asarray(obj.color, dtype=np.float64)
        if col.size == 1:
            col = np.repeat(col, c)
        if col.size != c:
            raise ConfigError(f"object {obj.object_id} color has {col.size} channels, scene has {c}")
        alpha = coverage[obj.object_id][:, None, :, :]
        frames = frames * (1.0 - alpha) + col[None, :, None, None] * alpha

    # nearest object with coverage >= 0.5 owns the pixel
    visibility = np.full((f, h, w), -1, dtype=np.int64)
    for obj in ordered:  # nearer objects overwrite
        own = coverage[obj.object_id] >= 0.5
        visibility[own] = obj.object_id
    masks = {
        obj.object_id: Mask((visibility == obj.object_id).astype(np.float64))
        for obj in ordered
    }

    multi_frame = spec.frames > 1
    return RenderResult(
        video=VideoTensor(frames),
        masks=masks,
        visibility=visibility,
        coverage=coverage,
        flow=scene_flow(spec, 1) if multi_frame else None,
        object_flows=(
            {o.object_id: object_flow(spec, o.object_id, 1) for o in ordered}
            if multi_frame
            else {}
        ),
    )


def _object_displacement(obj: ObjectSpec, frame: int, interval: int) -> np.ndarray:
    return obj.center(frame + interval) - obj.center(frame)


def object_flow(spec: SceneSpec, object_id: int, interval: int) -> FlowField:
    """Rigid per-object flow: the trajectory displacement broadcast over the
    canvas for each valid frame pair."""
    obj = next((o for o in spec.objects if o.object_id == object_id), None)
    if obj is None:
        raise ConfigError(f"scene has no object {object_id}")
    pairs = spec.frames - interval
    if pairs < 1:
        raise ConfigError(f"interval {interval} leaves no frame pairs")
    data = np.zeros((pairs, 2, spec.height, spec.width))
    for k in range(pairs):
        d = _object_displacement(obj, k, interval)
        data[k, 0] = d[0]
        data[k, 1] = d[1]
    return FlowField(data, interval=interval)


def _visibility_frames(spec: SceneSpec) -> np.ndarray:
    f, h, w = spec.frames, spec.height, spec.width
    visibility = np.full((f, h, w), -1, dtype=np.int64)
    for obj in spec.ordered_objects():
        for k in range(f):
            own = _coverage(obj, obj.center(k), h, w) >= 0.5
            visibility[k][own] = obj.object_id
    return visibility


def scene_flow(spec: SceneSpec, interval: int) -> FlowField:
    """Ground-truth flow of the visible content: each pixel moves with the
    object (or background drift) it shows."""
    pairs = spec.frames - interval
    if pairs < 1:
        raise ConfigError(f"interval {interval} leaves no frame pairs")
    h, w = spec.height, spec.width
    visibility = _visibility_frames(spec)
    bg_drift = np.asarray(spec.background.drift if spec.background.kind == "texture" else (0.0, 0.0))
    data = np.empty((pairs, 2, h, w))
    for k in range(pairs):
        data[k, 0] = bg_drift[0] * interval
        data[k, 1] = bg_drift[1] * interval
        for obj in spec.ordered_objects():
            own = visibility[k] == obj.object_id
            d = _object_displacement(obj, k, interval)
            data[k, 0][own] = d[0]
            data[k, 1][own] = d[1]
    return FlowField(data, interval=interval)


def non_occlusion_mask(spec: SceneSpec, interval: int) -> Mask:
    """A pixel of frame k survives when the content it shows is still visible
    (same owner, still in canvas) at its landing point in frame k+interval."""
    pairs = spec.frames - interval
    if pairs < 1:
        raise ConfigError(f"interval {interval} leaves no frame pairs")
    h, w = spec.height, spec.width
    visibility = _visibility_frames(spec)
    flow = scene_flow(spec, interval)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    masks = np.zeros((pairs, h, w))
    for k in range(pairs):
        ty = np.round(yy + flow.data[k, 0]).astype(np.int64)
        tx = np.round(xx + flow.data[k, 1]).astype(np.int64)
        in_canvas = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        tyc = np.clip(ty, 0, h - 1)
        txc = np.clip(tx, 0, w - 1)
        same_owner = visibility[k + interval][tyc, txc] == visibility[k]
        masks[k] = (in_canvas & same_owner).astype(np.float64)
    return Mask(masks)


def build_dataset(specs, labels) -> Dataset:
    """Render each scene and collect the videos into a labeled dataset."""
    specs = list(specs)
    labels = list(labels)
    if len(specs) != len(labels):
        raise ConfigError(f"{len(specs)} specs but {len(labels)} label sets")
    samples = tuple(render_scene(s).video for s in specs)
    return Dataset(samples=samples, labels=tuple(frozenset(l) for l in labels))
