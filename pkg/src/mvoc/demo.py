"""Ready-made two-object demo: per-object source scenes, the composite
reference scene (ground truth for flows and placement), and the composition
job wiring them together. Used by the experiment scripts and the end-to-end
tests."""

from __future__ import annotations

from dataclasses import dataclass

from .core import AffineTransform
from .guidance import GuidanceWeights
from .injection import InjectionSchedule
from .pipeline import CompositionJob, ObjectInput
from .synthdata import BackgroundSpec, ObjectSpec, RenderResult, SceneSpec, render_scene
from .unet import UNetConfig

__all__ = ["DemoScenes", "demo_scenes", "demo_job"]

def _demo_objects(size: int) -> tuple[ObjectSpec, ObjectSpec]:
    """Geometry expressed relative to a 32-pixel canvas."""
    s = size / 32.0
    disc = ObjectSpec(
        object_id=1,
        shape="disc",
        size=5.0 * s,
        color=(0.15, 0.2, 0.45),
        start=(9.0 * s, 8.0 * s),
        velocity=(0.25 * s, 0.75 * s),
        layer=1,
    )
    square = ObjectSpec(
        object_id=2,
        shape="square",
        size=9.0 * s,
        color=(0.4, 0.12, 0.1),
        start=(21.0 * s, 22.0 * s),
        velocity=(0.0, -0.6 * s),
        wobble=(1.5 * s, 0.0),
        period=16.0,
        layer=2,
    )
    return disc, square


_COMPOSITE_BG = BackgroundSpec(kind="gradient", color=(0.85, 0.88, 0.95), color2=(0.7, 0.75, 0.8))
_SOURCE_BG = BackgroundSpec(kind="solid", color=(0.5, 0.5, 0.5))


@dataclass(frozen=True)
class DemoScenes:
    composite: SceneSpec
    sources: dict[int, SceneSpec]
    background: SceneSpec

    def render_sources(self) -> dict[int, RenderResult]:
        return {k: render_scene(v) for k, v in self.sources.items()}


def demo_scenes(frames: int = 16, size: int = 32) -> DemoScenes:
    """Two dark objects crossing a bright background. Source videos place
    each object over a neutral gray background at its composite trajectory,
    so identity placement transforms line everything up."""
    composite = SceneSpec(
        frames=frames,
        height=size,
        width=size,
        channels=3,
        background=_COMPOSITE_BG,
        objects=_demo_objects(size),
    )
    sources = {
        obj.object_id: SceneSpec(
            frames=frames,
            height=size,
            width=size,
            channels=3,
            background=_SOURCE_BG,
            objects=(obj,),
        )
        for obj in composite.objects
    }
    background = SceneSpec(
        frames=frames, height=size, width=size, channels=3, background=_COMPOSITE_BG
    )
    return DemoScenes(composite=composite, sources=sources, background=background)


def demo_job(
    seed: int = 0,
    frames: int = 16,
    size: int = 32,
    n_steps: int = 50,
    injection: InjectionSchedule | None = None,
    metrics_flow_dir=None,
) -> CompositionJob:
    """Assemble the default composition job; the seed drives the denoiser
    init, everything else is deterministic scene geometry."""
    from .schedule import build_schedule

    scenes = demo_scenes(frames=frames, size=size)
    rendered = scenes.render_sources()
    background = render_scene(scenes.background).video

    objects = tuple(
        ObjectInput(
            object_id=object_id,
            video=result.video,
            mask=result.masks[object_id],
            transform=AffineTransform.identity(),
            layer=object_id,
        )
        for object_id, result in sorted(rendered.items())
    )
    if injection is None:
        injection = InjectionSchedule(n_steps=n_steps)
    return CompositionJob(
        background=background,
        objects=objects,
        schedule=build_schedule(1000),
        n_steps=n_steps,
        guidance=GuidanceWeights.uniform(1 + len(objects)),
        injection=injection,
        unet=UNetConfig(in_channels=3, max_objects=4, seed=seed),
        seed=seed,
        metrics_flow_dir=metrics_flow_dir,
    )
