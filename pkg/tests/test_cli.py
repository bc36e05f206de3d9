import json

import numpy as np
import pytest

from mvoc.cli import main
from mvoc.demo import demo_scenes
from mvoc.io import load_mask, load_video, load_vten, save_mask, save_video
from mvoc.synthdata import render_scene


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    """gen-data output for the composite demo scene."""
    tmp = tmp_path_factory.mktemp("scene")
    scenes = demo_scenes(frames=8, size=16)
    spec_path = tmp / "scene.json"
    spec_path.write_text(scenes.composite.to_json())
    out = tmp / "data"
    assert main(["gen-data", "--spec", str(spec_path), "--out", str(out)]) == 0
    return out


class TestGenData:
    def test_outputs(self, scene_dir):
        names = {p.name for p in scene_dir.iterdir()}
        assert "video.vten" in names
        assert {"mask_1.vten", "mask_2.vten"} <= names
        for g in (1, 2, 4):
            assert f"flow_g{g}.vten" in names
            assert f"occ_g{g}.vten" in names
        assert (scene_dir / "previews" / "frame_000.ppm").exists()

    def test_matches_library_render(self, scene_dir):
        scenes = demo_scenes(frames=8, size=16)
        direct = render_scene(scenes.composite)
        stored = load_video(scene_dir / "video.vten")
        np.testing.assert_array_equal(
            stored.data, direct.video.data.astype(np.float32).astype(np.float64)
        )

    def test_bad_spec_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        assert main(["gen-data", "--spec", str(bad), "--out", str(tmp_path / "o")]) == 2


class TestInvert:
    def test_writes_cache(self, tmp_path):
        scenes = demo_scenes(frames=8, size=16)
        video = render_scene(scenes.sources[1]).video
        save_video(tmp_path / "v.vten", video)
        config = {
            "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
            "n_steps": 5,
            "backend": {"max_objects": 4},
            "condition": [1],
            "object_id": 1,
            "seed": 0,
        }
        (tmp_path / "run.json").write_text(json.dumps(config))
        out = tmp_path / "cache"
        code = main([
            "invert", "--video", str(tmp_path / "v.vten"),
            "--config", str(tmp_path / "run.json"), "--out", str(out),
        ])
        assert code == 0
        names = sorted(p.name for p in out.iterdir())
        assert "y1_t1000.vten" in names and "run.json" in names
        assert len([n for n in names if n.endswith(".vten")]) == 5

    def test_missing_video_is_io_error(self, tmp_path):
        (tmp_path / "run.json").write_text(json.dumps({
            "schedule": {"T": 10, "beta_start": 1e-4, "beta_end": 0.02}, "n_steps": 2,
        }))
        code = main([
            "invert", "--video", str(tmp_path / "absent.vten"),
            "--config", str(tmp_path / "run.json"), "--out", str(tmp_path / "c"),
        ])
        assert code == 3

    def test_bad_schedule_is_config_error(self, tmp_path):
        scenes = demo_scenes(frames=8, size=16)
        save_video(tmp_path / "v.vten", render_scene(scenes.background).video)
        (tmp_path / "run.json").write_text(json.dumps({
            "schedule": {"T": 10, "beta_start": 0.9, "beta_end": 0.2}, "n_steps": 2,
        }))
        code = main([
            "invert", "--video", str(tmp_path / "v.vten"),
            "--config", str(tmp_path / "run.json"), "--out", str(tmp_path / "c"),
        ])
        assert code == 2


class TestCompose:
    def test_end_to_end(self, tmp_path, scene_dir, capsys):
        scenes = demo_scenes(frames=8, size=16)
        rendered = scenes.render_sources()
        save_video(tmp_path / "bg.vten", render_scene(scenes.background).video)
        for oid, res in rendered.items():
            save_video(tmp_path / f"obj{oid}.vten", res.video)
            save_mask(tmp_path / f"mask{oid}.vten", res.masks[oid])
        job = {
            "seed": 0,
            "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
            "n_steps": 5,
            "injection": {"r_fn": 0.2, "r_fr": 0.2, "r_at": 1.0, "r_as": 1.0},
            "background": {"id": 0, "video": "bg.vten"},
            "objects": [
                {"id": 1, "video": "obj1.vten", "mask": "mask1.vten", "layer": 1},
                {"id": 2, "video": "obj2.vten", "mask": "mask2.vten", "layer": 2},
            ],
            "metrics": {"flow_dir": str(scene_dir), "intervals": [2, 4]},
        }
        (tmp_path / "job.json").write_text(json.dumps(job))
        out = tmp_path / "run"
        code = main(["compose", "--job", str(tmp_path / "job.json"), "--out", str(out), "--explain"])
        assert code == 0
        printed = capsys.readouterr().out
        assert "step   1" in printed
        assert "warping error (interval 2)" in printed
        assert (out / "composed.vten").exists()
        assert (out / "metrics.csv").exists()

    def test_missing_job_is_io_error(self, tmp_path):
        assert main(["compose", "--job", str(tmp_path / "no.json"), "--out", str(tmp_path)]) == 3


class TestEval:
    def test_report_csv(self, tmp_path, scene_dir):
        code = main([
            "eval", "--video", str(scene_dir / "video.vten"),
            "--flow", str(scene_dir), "--interval", "2",
            "--out", str(tmp_path / "report.csv"),
        ])
        assert code == 0
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert lines[0] == "pair,error"
        assert lines[-1].startswith("mean,")
        assert len(lines) == 2 + 6  # 8 frames, interval 2 -> 6 pairs
        mean = float(lines[-1].split(",")[1])
        assert mean <= 1e-2  # ground-truth flow on its own scene

    def test_all_occluded_is_numeric_error(self, tmp_path, scene_dir):
        bad = tmp_path / "flows"
        bad.mkdir()
        import shutil

        shutil.copy(scene_dir / "flow_g2.vten", bad / "flow_g2.vten")
        occ = load_mask(scene_dir / "occ_g2.vten")
        save_mask(bad / "occ_g2.vten", type(occ)(np.zeros_like(occ.data)))
        code = main([
            "eval", "--video", str(scene_dir / "video.vten"),
            "--flow", str(bad), "--interval", "2",
            "--out", str(tmp_path / "r.csv"),
        ])
        assert code == 4
