import json

import numpy as np
import pytest

from mvoc.core import AffineTransform, Mask, VideoTensor
from mvoc.demo import demo_job, demo_scenes
from mvoc.denoiser import ConditionSet, NULL_CONDITION
from mvoc.errors import ConfigError, IOFormatError
from mvoc.guidance import GuidanceWeights
from mvoc.injection import InjectionSchedule
from mvoc.io import save_flow, save_mask, save_video
from mvoc.pipeline import (
    CompositionJob,
    ObjectInput,
    compose_video,
    edit_first_frame,
    load_job,
    masked_psnr,
    preprocess_objects,
    worker_count,
)
from mvoc.sampler import invert_loop, sample_loop
from mvoc.schedule import build_schedule
from mvoc.synthdata import non_occlusion_mask, render_scene, scene_flow
from mvoc.unet import UNetConfig, _net_for


@pytest.fixture(scope="module")
def small_job():
    return demo_job(seed=0, frames=8, size=16, n_steps=10)


@pytest.fixture(scope="module")
def small_pre(small_job):
    return preprocess_objects(small_job)


class TestJobValidation:
    def test_frame_count_mismatch(self, small_job):
        bad = ObjectInput(
            object_id=3,
            video=VideoTensor(np.zeros((4, 3, 16, 16))),
            mask=Mask(np.ones((4, 16, 16))),
            transform=AffineTransform.identity(),
            layer=3,
        )
        with pytest.raises(ConfigError):
            CompositionJob(
                background=small_job.background,
                objects=small_job.objects + (bad,),
                schedule=small_job.schedule,
                n_steps=small_job.n_steps,
                guidance=GuidanceWeights((1.0,) * 4),
                injection=small_job.injection,
                unet=small_job.unet,
            )

    def test_guidance_arity(self, small_job):
        with pytest.raises(ConfigError):
            CompositionJob(
                background=small_job.background,
                objects=small_job.objects,
                schedule=small_job.schedule,
                n_steps=small_job.n_steps,
                guidance=GuidanceWeights((1.0,)),
                injection=small_job.injection,
                unet=small_job.unet,
            )

    def test_injection_steps_must_match(self, small_job):
        with pytest.raises(ConfigError):
            CompositionJob(
                background=small_job.background,
                objects=small_job.objects,
                schedule=small_job.schedule,
                n_steps=small_job.n_steps,
                guidance=small_job.guidance,
                injection=InjectionSchedule(n_steps=99),
                unet=small_job.unet,
            )

    def test_worker_count_env(self, monkeypatch):
        monkeypatch.setenv("MVOC_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("MVOC_THREADS", "zero")
        with pytest.raises(ConfigError):
            worker_count()


class TestPreprocess:
    def test_cache_per_plan_step_and_persistence(self, small_job, small_pre, tmp_path):
        plan = small_job.plan()
        assert set(small_pre.caches) == {0, 1, 2}
        for cache in small_pre.caches.values():
            assert sorted(cache) == sorted(plan.steps)
        pre = preprocess_objects(small_job, out_dir=tmp_path)
        names = {p.name for p in (tmp_path / "caches").iterdir()}
        assert f"y1_t{plan.steps[0]}.vten" in names
        assert len(names) == 3 * small_job.n_steps

    def test_mask_extraction_matches_renderer_ground_truth(self, small_job, small_pre):
        scenes = demo_scenes(frames=8, size=16)
        for object_id, scene in scenes.sources.items():
            truth = render_scene(scene).masks[object_id]
            np.testing.assert_array_equal(
                small_pre.placed_masks[object_id].data, truth.data
            )

    def test_cache_replay_reconstructs_object(self, small_job, small_pre):
        # regression: measured 2.8e-2 (background) to 4.9e-2 at first build
        net = _net_for(small_job.unet)
        plan = small_job.plan()
        for item in small_job.ordered_inputs():
            cond = ConditionSet((item.object_id,))

            def eps_fn(x, t, k, cond=cond):
                eps, _ = net.forward(x, t, cond)
                return eps

            cache = small_pre.caches[item.object_id]
            rec = sample_loop(
                cache[plan.steps[0]], plan, eps_fn, small_job.schedule, keep_trajectory=False
            ).x0
            rel = np.linalg.norm(rec.data - item.video.data) / np.linalg.norm(item.video.data)
            assert rel <= 0.1

    def test_threaded_preprocessing_matches_serial(self, small_job, small_pre, monkeypatch):
        monkeypatch.setenv("MVOC_THREADS", "4")
        threaded = preprocess_objects(small_job)
        for object_id, cache in small_pre.caches.items():
            for t, latent in cache.items():
                assert np.array_equal(latent.data, threaded.caches[object_id][t].data)


class TestEditFirstFrame:
    def test_empty_mask_leaves_background(self, small_job, small_pre):
        empty = ObjectInput(
            object_id=3,
            video=small_job.objects[0].video,
            mask=Mask(np.zeros((8, 16, 16))),
            transform=AffineTransform.identity(),
            layer=3,
        )
        job = CompositionJob(
            background=small_job.background,
            objects=(empty,),
            schedule=small_job.schedule,
            n_steps=small_job.n_steps,
            guidance=GuidanceWeights((1.0, 1.0)),
            injection=small_job.injection,
            unet=small_job.unet,
        )
        frame = edit_first_frame(job)
        np.testing.assert_array_equal(frame.data[0], job.background.data[0])

    def test_color_matching_hits_target_mean(self, small_job, small_pre):
        frame = edit_first_frame(small_job, small_pre).data[0]
        bg = small_job.background.data[0]
        # the disc (layer 1) may be partially overwritten by the square, so
        # check the nearest layer, whose pasted pixels all survive
        mask0 = small_pre.placed_masks[2].data[0]
        area = mask0.sum()
        pasted_mean = (frame * mask0).sum(axis=(1, 2)) / area
        target_mean = (bg * mask0).sum(axis=(1, 2)) / area
        np.testing.assert_allclose(pasted_mean, target_mean, atol=1e-6)

    def test_nearer_layer_wins_overlap(self, small_job):
        # two full-frame masks: the later layer must own every pixel
        base = small_job.objects[0]
        full = Mask(np.ones((8, 16, 16)))
        near_video = VideoTensor(np.full((8, 3, 16, 16), 0.9))
        far_video = VideoTensor(np.full((8, 3, 16, 16), 0.1))
        job = CompositionJob(
            background=small_job.background,
            objects=(
                ObjectInput(1, far_video, full, AffineTransform.identity(), 1),
                ObjectInput(2, near_video, full, AffineTransform.identity(), 2),
            ),
            schedule=small_job.schedule,
            n_steps=small_job.n_steps,
            guidance=GuidanceWeights((1.0, 1.0, 1.0)),
            injection=small_job.injection,
            unet=small_job.unet,
        )
        frame = edit_first_frame(job).data[0]
        # color matching shifts the constant to the background mean exactly;
        # the nearer constant video owns every pixel, uniform per channel
        bg_mean = job.background.data[0].mean(axis=(1, 2))
        np.testing.assert_allclose(frame.mean(axis=(1, 2)), bg_mean, atol=1e-6)
        np.testing.assert_allclose(frame.std(axis=(1, 2)), 0.0, atol=1e-12)


class TestComposeVideo:
    def test_background_only_job_is_plain_reconstruction(self, small_job):
        job = CompositionJob(
            background=small_job.background,
            objects=(),
            schedule=small_job.schedule,
            n_steps=small_job.n_steps,
            guidance=GuidanceWeights(()),
            injection=small_job.injection,
            unet=small_job.unet,
        )
        result = compose_video(job)
        net = _net_for(job.unet)

        def eps_fn(x, t, k):
            eps, _ = net.forward(x, t, NULL_CONDITION)
            return eps

        plan = job.plan()
        cache = invert_loop(job.background, plan, eps_fn, job.schedule)
        manual = sample_loop(cache[plan.steps[0]], plan, eps_fn, job.schedule).x0
        assert np.array_equal(result.video.data, manual.data)

    def test_requires_unet_backend(self, small_job):
        job = CompositionJob(
            background=small_job.background,
            objects=small_job.objects,
            schedule=small_job.schedule,
            n_steps=small_job.n_steps,
            guidance=small_job.guidance,
            injection=small_job.injection,
            unet=small_job.unet,
            backend="empirical",
        )
        with pytest.raises(ConfigError):
            compose_video(job)

    def test_outputs_and_reports(self, small_job, tmp_path):
        scenes = demo_scenes(frames=8, size=16)
        flow_dir = tmp_path / "flows"
        flow_dir.mkdir()
        for g in (2, 4):
            save_flow(flow_dir / f"flow_g{g}.vten", scene_flow(scenes.composite, g))
            save_mask(flow_dir / f"occ_g{g}.vten", non_occlusion_mask(scenes.composite, g))
        job = demo_job(seed=0, frames=8, size=16, n_steps=10, metrics_flow_dir=flow_dir)
        out = tmp_path / "run"
        result = compose_video(job, out_dir=out)
        assert set(result.warping) == {2, 4}
        assert all(np.isfinite(v) for v in result.warping.values())
        assert (out / "composed.vten").exists()
        assert (out / "cutpaste.vten").exists()
        assert (out / "metrics.csv").exists()
        assert (out / "previews" / "frame_000.ppm").exists()
        report = json.loads((out / "injection_report.json").read_text())
        assert len(report) == job.n_steps
        assert report[0]["fired"]["spatial_attention"] is True
        assert report[5]["fired"]["residual"] is False  # r_fr=0.1 of 10 steps = 1
        config = json.loads((out / "config.json").read_text())
        assert config["n_steps"] == job.n_steps
        assert config["injection"]["r_fr"] == 0.1

    def test_deterministic_across_runs(self, small_job):
        a = compose_video(small_job)
        b = compose_video(small_job)
        assert np.array_equal(a.video.data, b.video.data)


class TestMaskedPsnr:
    def test_identical_is_infinite(self, rng):
        v = VideoTensor(rng.uniform(size=(2, 1, 4, 4)))
        assert masked_psnr(v, v, Mask(np.ones((2, 4, 4)))) == np.inf

    def test_known_mse(self):
        a = VideoTensor(np.zeros((1, 1, 2, 2)))
        b = VideoTensor(np.full((1, 1, 2, 2), 0.1))
        psnr = masked_psnr(a, b, Mask(np.ones((1, 2, 2))))
        assert psnr == pytest.approx(20.0, abs=1e-9)

    def test_empty_mask_rejected(self, rng):
        v = VideoTensor(rng.uniform(size=(1, 1, 2, 2)))
        with pytest.raises(ConfigError):
            masked_psnr(v, v, Mask(np.zeros((1, 2, 2))))


class TestJobFiles:
    def write_inputs(self, tmp_path, frames=8, size=16):
        scenes = demo_scenes(frames=frames, size=size)
        rendered = scenes.render_sources()
        bg = render_scene(scenes.background).video
        save_video(tmp_path / "bg.vten", bg)
        for oid, res in rendered.items():
            save_video(tmp_path / f"obj{oid}.vten", res.video)
            save_mask(tmp_path / f"mask{oid}.vten", res.masks[oid])
        return {
            "seed": 0,
            "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
            "n_steps": 10,
            "guidance_w": [1.0, 1.0, 1.0],
            "injection": {"r_fn": 0.02, "r_fr": 0.1, "r_at": 1.0, "r_as": 1.0},
            "backend": {"kind": "unet", "max_objects": 4},
            "background": {"id": 0, "video": "bg.vten"},
            "objects": [
                {"id": 1, "video": "obj1.vten", "mask": "mask1.vten", "layer": 1},
                {"id": 2, "video": "obj2.vten", "mask": "mask2.vten", "layer": 2},
            ],
        }

    def test_load_and_run(self, tmp_path):
        blob = self.write_inputs(tmp_path)
        path = tmp_path / "job.json"
        path.write_text(json.dumps(blob))
        job = load_job(path)
        assert job.n_steps == 10
        assert len(job.objects) == 2
        assert job.unet.in_channels == 3
        reference = demo_job(seed=0, frames=8, size=16, n_steps=10)
        a = compose_video(job)
        b = compose_video(reference)
        # .vten persistence is float32, so inputs differ from the in-memory
        # reference at that precision; shapes and plumbing must agree
        assert a.video.shape == b.video.shape

    def test_missing_key(self, tmp_path):
        blob = self.write_inputs(tmp_path)
        del blob["schedule"]
        path = tmp_path / "job.json"
        path.write_text(json.dumps(blob))
        with pytest.raises(ConfigError):
            load_job(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IOFormatError):
            load_job(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "job.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_job(path)

    def test_transform_parsed(self, tmp_path):
        blob = self.write_inputs(tmp_path)
        blob["objects"][0]["transform"] = [[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]
        path = tmp_path / "job.json"
        path.write_text(json.dumps(blob))
        job = load_job(path)
        np.testing.assert_array_equal(
            job.objects[0].transform.translation, [2.0, -1.0]
        )
