"""Command-line surface.

Subcommands:
    mvoc gen-data --spec scene.json --out DIR
    mvoc invert   --video V.vten --config run.json --out DIR
    mvoc compose  --job job.json --out DIR [--explain]
    mvoc eval     --video V.vten --flow DIR --interval {2|4} --out report.csv

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric error.
MVOC_THREADS caps preprocessing parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .denoiser import ConditionSet
from .errors import ConfigError, IOFormatError, NumericError
from .io import (
    load_flow,
    load_mask,
    load_video,
    save_flow,
    save_latent_cache,
    save_mask,
    save_video,
    write_frame_previews,
)
from .metrics import WarpMetricConfig, sequence_warping_error
from .pipeline import compose_video, load_job
from .sampler import invert_loop, uniform_plan
from .schedule import NoiseSchedule
from .synthdata import SceneSpec, non_occlusion_mask, render_scene, scene_flow
from .unet import UNetConfig, _net_for

FLOW_INTERVALS = (1, 2, 4)


def _cmd_gen_data(args) -> int:
    spec = SceneSpec.from_file(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = render_scene(spec)
    save_video(out / "video.vten", result.video)
    for object_id, mask in result.masks.items():
        save_mask(out / f"mask_{object_id}.vten", mask)
    for object_id, flow in result.object_flows.items():
        save_flow(out / f"flow_obj{object_id}_g1.vten", flow)
    for g in FLOW_INTERVALS:
        if spec.frames - g < 1:
            continue
        save_flow(out / f"flow_g{g}.vten", scene_flow(spec, g))
        save_mask(out / f"occ_g{g}.vten", non_occlusion_mask(spec, g))
    write_frame_previews(out / "previews", result.video)
    (out / "scene.json").write_text(spec.to_json())
    print(f"wrote scene data to {out}")
    return 0


def _cmd_invert(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise IOFormatError(f"no such config file: {config_path}")
    try:
        blob = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}: invalid JSON: {exc}") from exc

    video = load_video(args.video)
    try:
        schedule = NoiseSchedule.from_config(blob["schedule"])
        n_steps = int(blob["n_steps"])
    except KeyError as exc:
        raise ConfigError(f"{config_path}: missing key {exc}") from exc
    backend = dict(blob.get("backend", {}))
    backend.pop("kind", None)
    backend.setdefault("seed", int(blob.get("seed", 0)))
    net = _net_for(UNetConfig(in_channels=video.channels, **backend))
    condition = ConditionSet(tuple(blob.get("condition", ())))
    object_id = int(blob.get("object_id", condition.ids[0] if condition.ids else 0))

    def eps_fn(x, t, _k):
        eps, _ = net.forward(x, t, condition)
        return eps

    plan = uniform_plan(schedule.total_steps, n_steps)
    cache = invert_loop(video, plan, eps_fn, schedule)
    out = Path(args.out)
    save_latent_cache(out, object_id, cache)
    (out / "run.json").write_text(json.dumps(blob, indent=2))
    print(f"cached {len(cache)} latents for object {object_id} in {out}")
    return 0


def _cmd_compose(args) -> int:
    job = load_job(args.job)
    result = compose_video(job, out_dir=Path(args.out))
    if args.explain:
        for entry in result.injection_report:
            fired = [name for name, on in entry["fired"].items() if on]
            print(f"step {entry['step']:3d} (t={entry['t']:4d}): {', '.join(fired) or 'no injection'}")
    for g, value in result.warping.items():
        print(f"warping error (interval {g}): {value:.6e}")
    print(f"wrote composition to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    video = load_video(args.video)
    g = args.interval
    flow_dir = Path(args.flow)
    flow = load_flow(flow_dir / f"flow_g{g}.vten", interval=g)
    occ = load_mask(flow_dir / f"occ_g{g}.vten")
    mean, per_pair = sequence_warping_error(video, flow, occ, WarpMetricConfig(interval=g))
    lines = ["pair,error"]
    lines += [f"{i},{v:.10e}" for i, v in enumerate(per_pair)]
    lines.append(f"mean,{mean:.10e}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"warping error (interval {g}): {mean:.6e} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvoc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic scene with masks and flow")
    p.add_argument("--spec", required=True, help="scene spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("invert", help="cache the inversion trajectory of one video")
    p.add_argument("--video", required=True, help=".vten input video")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="cache directory")
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("compose", help="run the two-stage composition job")
    p.add_argument("--job", required=True, help="job JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--explain", action="store_true", help="print per-step injections")
    p.set_defaults(func=_cmd_compose)

    p = sub.add_parser("eval", help="temporal-consistency warping error")
    p.add_argument("--video", required=True, help=".vten video to score")
    p.add_argument("--flow", required=True, help="directory with flow_g{G}/occ_g{G} files")
    p.add_argument("--interval", type=int, choices=(2, 4), required=True)
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IOFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
