"""Ablation matrix and the canonical seeded synthetic benchmark."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .errors import ConfigError
from .evalkit import AR_MAX_DETS, GroundTruthFrame, MetricsReport, coco_metrics_pooled
from .geometry import CameraFrame
from .pipeline import ABLATION_ROWS, FrameResult, PipelineConfig, run_session
from .scale import ScaleDatabase
from .simulator import Session, generate_session

CANONICAL_SCENES = ("office", "living_room", "kitchen")
CANONICAL_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class AblationMatrix:
    rows: tuple[tuple[str, PipelineConfig], ...]

    def __post_init__(self):
        labels = [label for label, _ in self.rows]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"ablation row labels must be unique, got {labels}")
        if not labels:
            raise ConfigError("ablation matrix has no rows")

    @classmethod
    def default(cls, base: Optional[PipelineConfig] = None) -> "AblationMatrix":
        base = base or PipelineConfig()
        return cls(tuple((label, base.with_modules(*mods)) for label, mods in ABLATION_ROWS))

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.rows]


def canonical_sessions(n_frames: Optional[int] = None) -> list[Session]:
    """The three preset scenes, each with its preset trajectory and seed."""
    from dataclasses import replace

    from .formats import load_spec

    intr = load_spec("intrinsics", "default")
    noise = load_spec("noise", "default")
    out = []
    for name, seed in zip(CANONICAL_SCENES, CANONICAL_SEEDS):
        traj = load_spec("trajectory", name)
        if n_frames is not None:
            traj = replace(traj, n_frames=n_frames)
        out.append(generate_session(load_spec("scene", name), traj, replace(noise, rng_seed=seed), intr))
    return out


def _gts(frames: Sequence[CameraFrame]) -> list[GroundTruthFrame]:
    return [GroundTruthFrame.from_frame(f) for f in frames]


def run_ablation(
    sessions: Iterable[Sequence[CameraFrame]],
    matrix: Optional[AblationMatrix] = None,
    db: Optional[ScaleDatabase] = None,
    ar_max_dets: int = AR_MAX_DETS,
    frame: str = "native",
) -> dict[str, MetricsReport]:
    """Run every row on every session (fresh map each) and pool the evaluation per row."""
    matrix = matrix or AblationMatrix.default()
    sessions = [list(s) for s in sessions]
    gts = [_gts(s) for s in sessions]
    report = {}
    for label, cfg in matrix.rows:
        runs: list[tuple[list[FrameResult], list[GroundTruthFrame]]] = []
        for frames, gt in zip(sessions, gts):
            results, _ = run_session(frames, cfg, db)
            runs.append((results, gt))
        report[label] = coco_metrics_pooled(runs, ar_max_dets, frame)
    return report


def throughput_fixture(
    n_frames: int = 1000,
    n_dets: int = 10,
    n_points: int = 200,
    n_superpoints: int = 500,
    seed: int = 42,
):
    """A pipeline whose map already holds ``n_superpoints`` superpoints, plus frames to feed it.

    Superpoints sit on a 1 m lattice (z = 0.5).  Each frame looks at the
    lattice from a jittered viewpoint and carries ``n_dets`` detections of
    lattice objects with ``n_points // n_dets`` points around each.
    """
    import numpy as np

    from .geometry import BBox, CameraIntrinsics, Detection, DetectionFrame, Pose, look_at
    from .pipeline import Pipeline
    from .semantic_map import ObjectPoint

    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    labels = (62, 63, 67, 72)  # chair, couch, dining table, tv
    side = int(np.ceil(np.sqrt(n_superpoints)))
    grid = np.array([[i, j, 0.5] for i in range(side) for j in range(side)][:n_superpoints], dtype=float)
    pipe = Pipeline(PipelineConfig())
    for k, loc in enumerate(grid):
        cam = loc + np.array([0.0, -3.0, 1.0])
        pipe.map.fuse(ObjectPoint.from_observation(loc, labels[k % len(labels)], 0.8, cam, 3.2))
    assert len(pipe.map) == n_superpoints

    per = n_points // n_dets
    frames = []
    for f in range(n_frames):
        target = grid[rng.integers(len(grid))]
        cam = target + np.array([rng.uniform(-0.5, 0.5), -4.0, 1.5])
        R = look_at(cam, target)
        pose = Pose.from_matrix(R, cam)
        picks = grid[np.argsort(np.linalg.norm(grid - target, axis=1))[:n_dets]]
        pts = (picks[:, None, :] + rng.normal(0.0, 0.15, size=(n_dets, per, 3))).reshape(-1, 3)
        pc = pose.world_to_camera(pts).reshape(n_dets, per, 3)
        uv = intr.fx * pc[..., :2] / pc[..., 2:3] + np.array(intr.center)
        dets = []
        for k in range(n_dets):
            lo, hi = uv[k].min(axis=0) - 2, uv[k].max(axis=0) + 2
            dets.append(Detection(labels[k % len(labels)], float(rng.uniform(0.3, 0.95)), BBox.from_corners(*lo, *hi)))
        frames.append(
            CameraFrame(f, float(f), intr, pose, pose.matrix.T @ np.array([0.0, 0.0, -1.0]), pts, dets, DetectionFrame.ORIGINAL)
        )
    return pipe, frames


def measure_throughput(n_frames: int = 1000, **kwargs) -> float:
    """Frames per second of ``Pipeline.process_frame`` on :func:`throughput_fixture`."""
    import time

    pipe, frames = throughput_fixture(n_frames, **kwargs)
    start = time.perf_counter()
    for frame in frames:
        pipe.process_frame(frame)
    return n_frames / (time.perf_counter() - start)
