import dataclasses
import math

import numpy as np
import pytest

from viodet.errors import ConfigError
from viodet.evalkit import GroundTruthFrame, coco_metrics
from viodet.formats import dumps, frame_record, load_spec
from viodet.geometry import CameraIntrinsics, DetectionFrame
from viodet.pipeline import PipelineConfig, run_session
from viodet.simulator import (
    DetectorNoiseModel,
    RollPenalty,
    RollProfile,
    SceneObject,
    SceneSpec,
    TrajectorySpec,
    _fp_size,
    generate_session,
)

INTR = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
CHAIR_SCENE = SceneSpec((SceneObject("chair", (3.0, 3.0, 0.45), (0.9, 0.5, 0.9)),), clutter_density=0.0, name="one_chair")


def _orbit(n, roll=None):
    return TrajectorySpec("orbit", n, radius=2.5, height=1.4, roll_profile=roll or RollProfile())


def _preset(name, n, roll=None):
    traj = dataclasses.replace(load_spec("trajectory", name), n_frames=n)
    if roll is not None:
        traj = dataclasses.replace(traj, roll_profile=roll)
    return load_spec("scene", name), traj


def _serialized(session):
    return [dumps(frame_record(f)) for f in session.frames]


class TestNoiseless:
    def test_one_object_orbit(self):
        s = generate_session(CHAIR_SCENE, _orbit(10), DetectorNoiseModel.zero(), INTR)
        assert len(s.frames) == 10
        for f in s.frames:
            assert len(f.detections) == 1 and len(f.ground_truth) == 1
            assert f.detections[0].bbox == f.ground_truth[0].bbox
            assert f.detections[0].label == f.ground_truth[0].label

    def test_raw_pipeline_scores_perfectly(self):
        s = generate_session(*_preset("office", 40), DetectorNoiseModel.zero(), INTR)
        results, _ = run_session(s.frames, PipelineConfig().with_modules(False, False, False))
        rep = coco_metrics(results, [GroundTruthFrame.from_frame(f) for f in s.frames])
        assert rep.AP == 1.0 and rep.AR10 == 1.0


class TestFalsePositives:
    def test_poisson_count(self):
        noise = dataclasses.replace(DetectorNoiseModel.zero(rng_seed=42), fp_rate=2.0, max_detections=100)
        s = generate_session(CHAIR_SCENE, _orbit(100), noise, INTR, mode="corrected")
        n = sum(len(f.meta["fp"]) for f in s.frames)
        assert abs(n - 200) <= 3 * math.sqrt(200)

    def test_sizes_violate_bounds(self, db):
        rng = np.random.default_rng(42)
        margin = 1.5
        for _ in range(10_000):
            entry = db.entries[list(db.entries)[int(rng.integers(len(db)))]]
            D_w, D_h = _fp_size(entry, 0.03, 6.0, margin, rng)
            w_out = D_w < entry.min_w / margin or D_w > entry.max_w * margin
            h_out = D_h < entry.min_h / margin or D_h > entry.max_h * margin
            assert w_out or h_out
            assert not entry.accepts(D_w, D_h)

    def test_impossible_range(self, db):
        with pytest.raises(ConfigError):
            _fp_size(db.entry("chair"), 0.9, 0.95, 1.0, np.random.default_rng(42))

    def test_planted_boxes_imply_implausible_size(self, db):
        noise = dataclasses.replace(load_spec("noise", "default"), rng_seed=42, bbox_jitter_sigma=0.0)
        s = generate_session(*_preset("office", 40), noise, INTR, mode="corrected")
        cfg = PipelineConfig().with_modules(True, True, False)
        results, _ = run_session(s.frames, cfg)
        checked = 0
        for f, res in zip(s.frames, results):
            for j in f.meta["fp"]:
                d = res.diagnostics[j]
                if d.D_w is not None:
                    assert d.p_scale == 0.5
                    checked += 1
        assert checked > 20


class TestRoll:
    def test_misses_grow_without_correction(self):
        noise = dataclasses.replace(
            load_spec("noise", "default"), fp_rate=0.0, label_confusion={}, max_detections=100, rng_seed=42
        )
        scene, traj = _preset("office", 100, RollProfile("const", value=90.0))
        misses = {}
        for mode in ("original", "corrected"):
            s = generate_session(scene, traj, noise, INTR, mode=mode)
            misses[mode] = sum(len(f.ground_truth) - len(f.detections) for f in s.frames)
        assert misses["original"] > misses["corrected"]

    def test_gravity_encodes_roll(self):
        traj = _orbit(30, RollProfile("sine", amplitude=80.0, period=15))
        s = generate_session(CHAIR_SCENE, traj, DetectorNoiseModel.zero(), INTR)
        from viodet.geometry import roll_from_gravity

        for f in s.frames:
            assert abs(math.degrees(roll_from_gravity(f.gravity).roll) - f.meta["roll_deg"]) < 1e-6

    def test_penalty_validation(self):
        with pytest.raises(ConfigError):
            RollPenalty(extra_miss=1.5)


class TestDeterminism:
    def test_same_seed_same_session(self):
        noise = load_spec("noise", "default")
        a = generate_session(*_preset("kitchen", 30), noise, INTR)
        b = generate_session(*_preset("kitchen", 30), noise, INTR)
        assert _serialized(a) == _serialized(b)

    def test_seed_changes_session(self):
        noise = load_spec("noise", "default")
        a = generate_session(*_preset("kitchen", 30), noise, INTR)
        b = generate_session(*_preset("kitchen", 30), dataclasses.replace(noise, rng_seed=1), INTR)
        assert _serialized(a) != _serialized(b)

    def test_modes_share_random_draws(self):
        noise = load_spec("noise", "default")
        both = generate_session(*_preset("office", 20), noise, INTR, mode="both")
        corr = generate_session(*_preset("office", 20), noise, INTR, mode="corrected")
        for f, g in zip(both.frames, corr.frames):
            assert g.detection_frame is DetectionFrame.CORRECTED
            assert [d.bbox for d in f.corrected_detections] == [d.bbox for d in g.detections]
            np.testing.assert_array_equal(f.points, g.points)


class TestSpecs:
    def test_rejects_non_square_pixels(self):
        with pytest.raises(ConfigError):
            generate_session(CHAIR_SCENE, _orbit(2), DetectorNoiseModel.zero(), CameraIntrinsics(500, 510, 320, 240, 640, 480))

    def test_rejects_unknown_category(self, db):
        scene = SceneSpec((SceneObject("spaceship", (1.0, 1.0, 0.5), (1, 1, 1)),))
        with pytest.raises(ConfigError):
            scene.validate(db)

    def test_presets_load(self):
        for kind in ("scene", "trajectory", "noise", "intrinsics"):
            load_spec(kind, "default" if kind in ("noise", "intrinsics") else "office")
