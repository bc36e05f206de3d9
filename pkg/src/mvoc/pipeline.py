"""End-to-end orchestration: per-object preprocessing (inversion + mask
placement), the cut-paste first-frame stand-in, and guided composition
sampling, plus the self-describing output directory the CLI writes.

Stage 1 inverts every input video (each conditioned on its own id) and
persists per-timestep latent caches. Stage 2 inverts the cut-paste target
to initialize the composite latent, then samples with the layered
injection-guided noise prediction and scores temporal consistency.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import AffineTransform, Mask, VideoTensor, affine_apply, hadamard_blend, warp_mask
from .denoiser import NULL_CONDITION, ConditionSet
from .errors import ConfigError, IOFormatError
from .guidance import GuidanceWeights
from .injection import InjectionSchedule, ObjectLayer, guided_eps, injection_active
from .io import (
    load_flow,
    load_mask,
    load_video,
    save_latent_cache,
    save_mask,
    save_video,
    write_frame_previews,
)
from .metrics import WarpMetricConfig, sequence_warping_error
from .sampler import TimestepPlan, invert_loop, sample_loop, uniform_plan
from .schedule import NoiseSchedule
from .unet import TAP_CATEGORIES, MiniUNet, UNetConfig, UNetTapSet, _net_for

__all__ = [
    "ObjectInput",
    "CompositionJob",
    "PreprocessResult",
    "ComposeResult",
    "preprocess_objects",
    "edit_first_frame",
    "compose_video",
    "masked_psnr",
    "load_job",
    "worker_count",
]


def worker_count() -> int:
    """Worker cap for per-object preprocessing, from MVOC_THREADS (default 1)."""
    raw = os.environ.get("MVOC_THREADS", "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MVOC_THREADS must be an integer, got {raw!r}") from exc
    return max(1, value)


@dataclass(frozen=True)
class ObjectInput:
    """One source video object: its own video and mask plus the affine
    placement into the composite and a stacking layer (higher = nearer)."""

    object_id: int
    video: VideoTensor
    mask: Mask
    transform: AffineTransform
    layer: int


@dataclass(frozen=True)
class CompositionJob:
    background: VideoTensor
    objects: tuple[ObjectInput, ...]
    schedule: NoiseSchedule
    n_steps: int
    guidance: GuidanceWeights
    injection: InjectionSchedule
    unet: UNetConfig
    seed: int = 0
    backend: str = "unet"
    background_id: int = 0
    metrics_flow_dir: Path | None = None
    metrics_intervals: tuple[int, ...] = (2, 4)
    config_blob: dict = field(default_factory=dict)

    def __post_init__(self):
        frame_counts = {self.background.frames} | {o.video.frames for o in self.objects}
        if len(frame_counts) != 1:
            raise ConfigError(f"all videos must share a frame count, got {frame_counts}")
        layers = [o.layer for o in self.objects]
        if len(set(layers)) != len(layers) or (layers and min(layers) < 1):
            raise ConfigError("object layers must be unique integers >= 1 (0 is the background)")
        ids = [self.background_id] + [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"object ids must be unique, got {ids}")
        if any(i < 0 or i >= self.unet.max_objects for i in ids):
            raise ConfigError(
                f"object ids {ids} must fit the condition channels [0, {self.unet.max_objects})"
            )
        # background counts as the first conditioning layer; a job with no
        # objects degenerates to plain reconstruction with no layers at all
        expected = 1 + len(self.objects) if self.objects else 0
        if len(self.guidance) != expected:
            raise ConfigError(
                f"guidance needs {expected} weights (background + objects), got {len(self.guidance)}"
            )
        if self.injection.n_steps != self.n_steps:
            raise ConfigError(
                f"injection schedule covers {self.injection.n_steps} steps, job has {self.n_steps}"
            )

    def plan(self) -> TimestepPlan:
        return uniform_plan(self.schedule.total_steps, self.n_steps)

    def ordered_inputs(self) -> list[ObjectInput]:
        """Background (layer 0) first, then objects by stacking order."""
        full = Mask.full(self.background.frames, self.background.height, self.background.width)
        bg = ObjectInput(
            object_id=self.background_id,
            video=self.background,
            mask=full,
            transform=AffineTransform.identity(),
            layer=0,
        )
        return [bg] + sorted(self.objects, key=lambda o: o.layer)


@dataclass(frozen=True)
class PreprocessResult:
    caches: dict[int, dict[int, VideoTensor]]
    placed_masks: dict[int, Mask]
    placed_videos: dict[int, VideoTensor]
    order: tuple[int, ...]


class LazyTapCache(Mapping):
    """Per-timestep tap sets computed on demand from a latent cache by one
    recording forward pass; nothing is stored, attention maps stay transient."""

    def __init__(self, latents: Mapping[int, VideoTensor], net: MiniUNet, condition: ConditionSet):
        self._latents = latents
        self._net = net
        self._condition = condition

    def __getitem__(self, t: int) -> UNetTapSet:
        latent = self._latents[t]
        _, taps = self._net.forward(latent, t, self._condition, record=True)
        return taps

    def __iter__(self):
        return iter(self._latents)

    def __len__(self) -> int:
        return len(self._latents)


def _placed_mask(item: ObjectInput, canvas_hw: tuple[int, int]) -> Mask:
    if item.transform.is_identity():
        return Mask((item.mask.data >= 0.5).astype(np.float64))
    return warp_mask(item.mask, item.transform, canvas_hw)


def _placed_video(item: ObjectInput, canvas_hw: tuple[int, int]) -> VideoTensor:
    if item.transform.is_identity():
        return item.video
    return affine_apply(item.video, item.transform, canvas_hw)


def preprocess_objects(job: CompositionJob, out_dir: Path | None = None) -> PreprocessResult:
    """Invert every input video (background included) under its own identity
    condition and cache the latent at each plan timestep; place masks and
    videos into composite coordinates. Caches are persisted when out_dir is
    given. Inputs are processed in parallel up to MVOC_THREADS workers."""
    plan = job.plan()
    net = _net_for(job.unet)
    inputs = job.ordered_inputs()
    canvas_hw = (job.background.height, job.background.width)

    def run_one(item: ObjectInput):
        cond = ConditionSet((item.object_id,))

        def eps_fn(x, t, _k):
            eps, _ = net.forward(x, t, cond)
            return eps

        cache = invert_loop(item.video, plan, eps_fn, job.schedule)
        return item.object_id, cache

    workers = min(worker_count(), len(inputs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(run_one, inputs))
    else:
        results = dict(run_one(item) for item in inputs)

    placed_masks = {i.object_id: _placed_mask(i, canvas_hw) for i in inputs}
    placed_videos = {i.object_id: _placed_video(i, canvas_hw) for i in inputs}

    if out_dir is not None:
        cache_dir = Path(out_dir) / "caches"
        for object_id, cache in results.items():
            save_latent_cache(cache_dir, object_id, cache)
        for object_id, mask in placed_masks.items():
            save_mask(Path(out_dir) / f"mask_{object_id}.vten", mask)

    return PreprocessResult(
        caches=results,
        placed_masks=placed_masks,
        placed_videos=placed_videos,
        order=tuple(i.object_id for i in inputs),
    )


def _color_offsets(job: CompositionJob, pre: PreprocessResult) -> dict[int, np.ndarray]:
    """Per-object channel shifts that move each placed object's first-frame
    mean onto the mean of the background region it covers."""
    offsets: dict[int, np.ndarray] = {}
    bg = job.background.data[0]
    channels = job.background.channels
    for item in job.ordered_inputs()[1:]:
        mask0 = pre.placed_masks[item.object_id].data[0]
        area = mask0.sum()
        if area == 0:
            offsets[item.object_id] = np.zeros(channels)
            continue
        obj0 = pre.placed_videos[item.object_id].data[0]
        mean_bg = (bg * mask0).sum(axis=(1, 2)) / area
        mean_obj = (obj0 * mask0).sum(axis=(1, 2)) / area
        offsets[item.object_id] = mean_bg - mean_obj
    return offsets


def _build_cutpaste(job: CompositionJob, pre: PreprocessResult) -> tuple[VideoTensor, dict[int, np.ndarray]]:
    """Layer-ordered cut-paste of the placed, color-matched objects onto the
    background, every frame; offsets come from the first frame only."""
    offsets = _color_offsets(job, pre)
    canvas = job.background
    for item in job.ordered_inputs()[1:]:
        shifted = VideoTensor(
            pre.placed_videos[item.object_id].data
            + offsets[item.object_id][None, :, None, None]
        )
        canvas = hadamard_blend(canvas, shifted, pre.placed_masks[item.object_id])
    return canvas, offsets


def edit_first_frame(job: CompositionJob, pre: PreprocessResult | None = None) -> VideoTensor:
    """Stand-in for a learned first-frame editor: cut-paste plus mean-color
    matching, restricted to frame one. Returns a single-frame tensor."""
    if pre is None:
        pre = preprocess_objects(job)
    cutpaste, _ = _build_cutpaste(job, pre)
    return VideoTensor(cutpaste.data[:1])


@dataclass(frozen=True)
class ComposeResult:
    video: VideoTensor
    cutpaste: VideoTensor
    first_frame: VideoTensor
    warping: dict[int, float]
    warping_pairs: dict[int, list[float]]
    injection_report: list[dict]


def _metrics_for(job: CompositionJob, video: VideoTensor) -> tuple[dict, dict]:
    means: dict[int, float] = {}
    pairs: dict[int, list[float]] = {}
    if job.metrics_flow_dir is None:
        return means, pairs
    flow_dir = Path(job.metrics_flow_dir)
    for g in job.metrics_intervals:
        flow = load_flow(flow_dir / f"flow_g{g}.vten", interval=g)
        occ = load_mask(flow_dir / f"occ_g{g}.vten")
        mean, per_pair = sequence_warping_error(video, flow, occ, WarpMetricConfig(interval=g))
        means[g] = mean
        pairs[g] = per_pair
    return means, pairs


def compose_video(job: CompositionJob, out_dir: Path | None = None) -> ComposeResult:
    """Run both stages end to end. Deterministic: the same job and seed
    produce bit-identical outputs."""
    if job.backend != "unet":
        raise ConfigError(
            f"compose requires the tap-exposing unet backend, got {job.backend!r}"
        )
    plan = job.plan()
    net = _net_for(job.unet)
    pre = preprocess_objects(job, out_dir=out_dir)

    cutpaste, offsets = _build_cutpaste(job, pre)
    first_frame = VideoTensor(cutpaste.data[:1])

    def uncond_eps(x, t, _k):
        eps, _ = net.forward(x, t, NULL_CONDITION)
        return eps

    composite_cache = invert_loop(cutpaste, plan, uncond_eps, job.schedule)
    x_top = composite_cache[plan.steps[0]]

    layers = [
        ObjectLayer(
            object_id=item.object_id,
            mask=pre.placed_masks[item.object_id],
            transform=item.transform,
            taps=LazyTapCache(pre.caches[item.object_id], net, ConditionSet((item.object_id,))),
        )
        for item in (job.ordered_inputs() if job.objects else [])
    ]

    report: list[dict] = []

    def eps_fn(x, t, k):
        report.append(
            {
                "step": k,
                "t": t,
                "fired": {c: injection_active(job.injection, k, c) for c in TAP_CATEGORIES},
            }
        )
        return guided_eps(
            x, t, k, layers, job.injection, net, NULL_CONDITION, job.guidance
        )

    sampled = sample_loop(x_top, plan, eps_fn, job.schedule, keep_trajectory=False)
    video = sampled.x0

    warping, warping_pairs = _metrics_for(job, video)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_video(out / "composed.vten", video)
        save_video(out / "cutpaste.vten", cutpaste)
        save_video(out / "first_frame.vten", first_frame)
        (out / "caches").mkdir(parents=True, exist_ok=True)
        for t, latent in composite_cache.items():
            save_video(out / "caches" / f"x_t{t}.vten", latent)
        write_frame_previews(out / "previews", video)
        write_frame_previews(out, first_frame, stem="first_frame")
        (out / "injection_report.json").write_text(json.dumps(report, indent=2))
        (out / "config.json").write_text(json.dumps(_describe(job, offsets), indent=2))
        if warping:
            lines = ["interval,pair,error"]
            for g, values in warping_pairs.items():
                lines += [f"{g},{i},{v:.10e}" for i, v in enumerate(values)]
                lines.append(f"{g},mean,{warping[g]:.10e}")
            (out / "metrics.csv").write_text("\n".join(lines) + "\n")

    return ComposeResult(
        video=video,
        cutpaste=cutpaste,
        first_frame=first_frame,
        warping=warping,
        warping_pairs=warping_pairs,
        injection_report=report,
    )


def _describe(job: CompositionJob, offsets: dict[int, np.ndarray]) -> dict:
    blob = dict(job.config_blob) if job.config_blob else {}
    blob.update(
        {
            "schedule": job.schedule.to_config(),
            "n_steps": job.n_steps,
            "guidance_w": list(job.guidance.values),
            "injection": job.injection.to_dict(),
            "backend": {"kind": job.backend, **job.unet.to_dict()},
            "seed": job.seed,
            "color_offsets": {str(k): list(v) for k, v in offsets.items()},
        }
    )
    return blob


def masked_psnr(reference: VideoTensor, candidate: VideoTensor, mask: Mask, peak: float = 1.0) -> float:
    """PSNR of the candidate against the reference inside the mask."""
    if reference.shape != candidate.shape:
        raise ConfigError("psnr inputs must share dims")
    m = mask.data
    total = m.sum()
    if total == 0:
        raise ConfigError("psnr undefined for an empty mask")
    sq = ((reference.data - candidate.data) ** 2).mean(axis=1)
    mse = float((m * sq).sum() / total)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


# -- job files -----------------------------------------------------------


def _require(blob: dict, key: str, where: str):
    if key not in blob:
        raise ConfigError(f"{where}: missing key {key!r}")
    return blob[key]


def load_job(path: str | Path) -> CompositionJob:
    """Parse a job JSON file; relative artifact paths resolve against it."""
    path = Path(path)
    if not path.exists():
        raise IOFormatError(f"no such job file: {path}")
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    base = path.parent

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    schedule = NoiseSchedule.from_config(_require(blob, "schedule", str(path)))
    n_steps = int(_require(blob, "n_steps", str(path)))

    bg_blob = _require(blob, "background", str(path))
    background = load_video(resolve(_require(bg_blob, "video", "background")))

    objects = []
    for i, ob in enumerate(_require(blob, "objects", str(path))):
        where = f"objects[{i}]"
        video = load_video(resolve(_require(ob, "video", where)))
        mask = load_mask(resolve(_require(ob, "mask", where)))
        transform = (
            AffineTransform(np.asarray(ob["transform"], dtype=np.float64))
            if "transform" in ob
            else AffineTransform.identity()
        )
        objects.append(
            ObjectInput(
                object_id=int(_require(ob, "id", where)),
                video=video,
                mask=mask,
                transform=transform,
                layer=int(ob.get("layer", i + 1)),
            )
        )

    backend_blob = dict(blob.get("backend", {}))
    kind = backend_blob.pop("kind", "unet")
    backend_blob.setdefault("seed", int(blob.get("seed", 0)))
    unet = UNetConfig(in_channels=background.channels, **backend_blob)

    guidance_values = blob.get("guidance_w")
    if guidance_values is None:
        guidance_values = [1.0] * (1 + len(objects)) if objects else []
    guidance = GuidanceWeights(tuple(float(v) for v in guidance_values))

    injection_blob = blob.get("injection", {})
    injection = InjectionSchedule(n_steps=n_steps, **injection_blob)

    metrics_blob = blob.get("metrics", {})
    flow_dir = metrics_blob.get("flow_dir")

    return CompositionJob(
        background=background,
        objects=tuple(objects),
        schedule=schedule,
        n_steps=n_steps,
        guidance=guidance,
        injection=injection,
        unet=unet,
        seed=int(blob.get("seed", 0)),
        backend=kind,
        background_id=int(bg_blob.get("id", 0)),
        metrics_flow_dir=resolve(flow_dir) if flow_dir else None,
        metrics_intervals=tuple(int(g) for g in metrics_blob.get("intervals", (2, 4))),
        config_blob=blob,
    )
