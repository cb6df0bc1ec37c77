"""Synthetic AR sessions with ground truth and a parametric detector model.

A scene is a set of axis-aligned boxes in a room (world z up).  A camera
follows an orbit or lawnmower path looking at the scene centroid while
the device rolls about its optical axis.  Per frame the simulator emits
the pose, the gravity direction in camera coordinates, VIO-like sparse
points (samples on camera-facing object faces plus room clutter) and two
detector passes:

* original frame: the detector sees the rolled image, so it misses more
  objects and returns looser boxes as |roll| grows;
* corrected frame: the detector sees the upright image, no roll penalty.

Both passes share their random draws object by object, so every miss in
the corrected pass is also a miss in the original pass.

Random streams: one ``SeedSequence(seed)`` spawns four children, in this
order: object surface points, clutter points, detector draws,
false-positive draws.  Changing one component's parameters never shifts
the draws of another.  Within the detector stream each visible object
consumes, in scene order: miss uniform, four jitter normals, confusion
uniform, score uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .categories import COCO_CATEGORIES, COCO_IDS
from .errors import ConfigError, EmptyBoxError
from .geometry import (
    Z_NEAR,
    BBox,
    CameraFrame,
    CameraIntrinsics,
    Detection,
    DetectionFrame,
    LabeledBox,
    Pose,
    look_at,
    roll_about_optical_axis,
    rotate_image_points,
)
from .scale import ScaleDatabase, default_scale_db

MODES = ("original", "corrected", "both")
MIN_VISIBLE_FRACTION = 0.5
MIN_BOX_SIDE = 4.0


@dataclass(frozen=True)
class SceneObject:
    """Axis-aligned box; dims are (w along x, h along z, depth along y)."""

    category: str
    center: tuple[float, float, float]
    dims: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if len(self.center) != 3 or len(self.dims) != 3:
            raise ConfigError(f"{self.category}: center and dims need three values")
        if min(self.dims) <= 0:
            raise ConfigError(f"{self.category}: dims must be positive")

    @property
    def half_extents(self) -> np.ndarray:
        w, h, depth = self.dims
        return np.array([w / 2, depth / 2, h / 2])

    def corners(self) -> np.ndarray:
        c = np.asarray(self.center)
        e = self.half_extents
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return c + signs * e

    def faces(self):
        """(center, normal, half-axis a, half-axis b, area) for the six faces."""
        c = np.asarray(self.center)
        e = self.half_extents
        out = []
        for axis in range(3):
            a_ax, b_ax = [i for i in range(3) if i != axis]
            for sign in (-1.0, 1.0):
                normal = np.zeros(3)
                normal[axis] = sign
                a = np.zeros(3)
                a[a_ax] = e[a_ax]
                b = np.zeros(3)
                b[b_ax] = e[b_ax]
                out.append((c + normal * e[axis], normal, a, b, 4 * e[a_ax] * e[b_ax]))
        return out


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    bounds_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bounds_max: tuple[float, float, float] = (6.0, 6.0, 3.0)
    clutter_density: float = 0.3
    name: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        lo = np.asarray(self.bounds_min, dtype=float)
        hi = np.asarray(self.bounds_max, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ConfigError("room bounds must satisfy min < max on every axis")
        if self.clutter_density < 0:
            raise ConfigError("clutter_density must be non-negative")
        if not self.objects:
            raise ConfigError("scene has no objects")
        for obj in self.objects:
            c = np.asarray(obj.center)
            if np.any(c - obj.half_extents < lo - 1e-9) or np.any(c + obj.half_extents > hi + 1e-9):
                raise ConfigError(f"{obj.category} at {obj.center} leaves the room bounds")

    def validate(self, db: ScaleDatabase) -> None:
        """Every object must be a known category sized within its scale bounds."""
        for obj in self.objects:
            if obj.category not in db or obj.category not in COCO_IDS:
                raise ConfigError(f"unknown category {obj.category!r}")
            entry = db.entry(obj.category)
            w, h, _ = obj.dims
            if not (entry.min_w <= w <= entry.max_w and entry.min_h <= h <= entry.max_h):
                raise ConfigError(
                    f"{obj.category} dims {obj.dims} fall outside its scale bounds "
                    f"(w {entry.min_w}..{entry.max_w}, h {entry.min_h}..{entry.max_h})"
                )

    @property
    def centroid(self) -> np.ndarray:
        return np.mean([o.center for o in self.objects], axis=0)

    @property
    def volume(self) -> float:
        return float(np.prod(np.asarray(self.bounds_max) - np.asarray(self.bounds_min)))

    @property
    def categories(self) -> list[str]:
        return sorted({o.category for o in self.objects})


ROLL_KINDS = ("const", "sine", "ramp", "steps")


@dataclass(frozen=True)
class RollProfile:
    """Device roll in degrees as a function of the frame index.

    const: ``value``; sine: ``offset + amplitude * sin(2 pi i / period)``;
    ramp: linear from ``start`` to ``end`` over the session; steps: cycles
    through ``values``, holding each for ``period`` frames.
    """

    kind: str = "const"
    value: float = 0.0
    amplitude: float = 0.0
    offset: float = 0.0
    period: float = 50.0
    start: float = 0.0
    end: float = 0.0
    values: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if self.kind not in ROLL_KINDS:
            raise ConfigError(f"roll profile kind must be one of {ROLL_KINDS}")
        if self.period <= 0:
            raise ConfigError("roll profile period must be positive")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ConfigError("steps roll profile needs at least one value")

    def __call__(self, i: int, n: int) -> float:
        if self.kind == "const":
            return self.value
        if self.kind == "sine":
            return self.offset + self.amplitude * math.sin(2 * math.pi * i / self.period)
        if self.kind == "ramp":
            return self.start + (self.end - self.start) * (i / max(n - 1, 1))
        return self.values[int(i // self.period) % len(self.values)]


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit"
    n_frames: int = 100
    radius: float = 2.0
    height: float = 1.5
    revolutions: float = 1.0
    lanes: int = 2
    margin: float = 0.5
    fps: float = 1.0
    roll_profile: RollProfile = field(default_factory=RollProfile)

    def __post_init__(self):
        if self.kind not in ("orbit", "lawnmower"):
            raise ConfigError("trajectory kind must be 'orbit' or 'lawnmower'")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be at least 1")
        if self.fps <= 0 or self.radius <= 0 or self.lanes < 1 or self.margin < 0:
            raise ConfigError("fps, radius, lanes must be positive and margin non-negative")

    def positions(self, scene: SceneSpec) -> np.ndarray:
        n = self.n_frames
        lo = np.asarray(scene.bounds_min, dtype=float)
        hi = np.asarray(scene.bounds_max, dtype=float)
        if self.kind == "orbit":
            c = scene.centroid
            theta = 2 * math.pi * self.revolutions * np.arange(n) / n
            pos = np.column_stack(
                [c[0] + self.radius * np.cos(theta), c[1] + self.radius * np.sin(theta), np.full(n, self.height)]
            )
        else:
            x0, x1 = lo[0] + self.margin, hi[0] - self.margin
            if self.lanes == 1:
                ys = [0.5 * (lo[1] + hi[1])]
            else:
                ys = np.linspace(lo[1] + self.margin, hi[1] - self.margin, self.lanes)
            s = np.arange(n) / n * self.lanes
            lane = np.minimum(s.astype(int), self.lanes - 1)
            frac = s - lane
            frac = np.where(lane % 2 == 0, frac, 1 - frac)
            pos = np.column_stack([x0 + frac * (x1 - x0), np.asarray(ys)[lane], np.full(n, self.height)])
        if np.any(pos < lo) or np.any(pos > hi):
            raise ConfigError("trajectory leaves the room bounds")
        return pos


@dataclass(frozen=True)
class RollPenalty:
    """Detector degradation on rolled images.

    Extra miss probability grows linearly to ``extra_miss`` at 90 degrees
    and stays there; boxes grow by ``inflation * |sin(roll)|``.
    """

    extra_miss: float = 0.0
    inflation: float = 0.0

    def __post_init__(self):
        if not 0 <= self.extra_miss <= 1 or self.inflation < 0:
            raise ConfigError("roll penalty: extra_miss in [0, 1], inflation >= 0")

    def miss(self, roll_deg: float) -> float:
        return self.extra_miss * min(abs(roll_deg), 90.0) / 90.0

    def inflate(self, roll_deg: float) -> float:
        return self.inflation * abs(math.sin(math.radians(roll_deg)))


def _band(value) -> tuple[float, float]:
    lo, hi = (float(v) for v in value)
    if not 0 < lo <= hi <= 1:
        raise ConfigError(f"score band {value!r} must satisfy 0 < lo <= hi <= 1")
    return (lo, hi)


@dataclass(frozen=True)
class DetectorNoiseModel:
    base_miss_rate: float = 0.1
    bbox_jitter_sigma: float = 3.0
    label_confusion: Mapping[str, tuple[tuple[str, float], ...]] = field(default_factory=dict)
    fp_rate: float = 1.0
    fp_scale_range: tuple[float, float] = (0.03, 6.0)
    fp_margin: float = 1.5
    fp_labels: str = "scene"
    roll_penalty: RollPenalty = field(default_factory=RollPenalty)
    point_sigma: float = 0.01
    points_per_object: int = 20
    tp_score: tuple[float, float] = (0.45, 0.95)
    confusion_score: tuple[float, float] = (0.3, 0.75)
    fp_score: tuple[float, float] = (0.3, 0.9)
    max_detections: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.base_miss_rate <= 1:
            raise ConfigError("base_miss_rate must lie in [0, 1]")
        if self.bbox_jitter_sigma < 0 or self.point_sigma < 0 or self.fp_rate < 0:
            raise ConfigError("noise magnitudes and fp_rate must be non-negative")
        lo, hi = (float(v) for v in self.fp_scale_range)
        if not 0 < lo < hi:
            raise ConfigError("fp_scale_range must satisfy 0 < lo < hi")
        object.__setattr__(self, "fp_scale_range", (lo, hi))
        if self.fp_margin < 1:
            raise ConfigError("fp_margin must be >= 1")
        if self.fp_labels not in ("scene", "all"):
            raise ConfigError("fp_labels must be 'scene' or 'all'")
        if self.points_per_object < 0 or self.max_detections < 1:
            raise ConfigError("points_per_object >= 0 and max_detections >= 1 required")
        for name in ("tp_score", "confusion_score", "fp_score"):
            object.__setattr__(self, name, _band(getattr(self, name)))
        confusion = {}
        for src, targets in dict(self.label_confusion).items():
            pairs = tuple((str(t), float(p)) for t, p in targets)
            if any(p < 0 for _, p in pairs) or sum(p for _, p in pairs) > 1 + 1e-12:
                raise ConfigError(f"confusion probabilities for {src!r} must be >= 0 and sum to <= 1")
            confusion[str(src)] = pairs
        object.__setattr__(self, "label_confusion", confusion)

    @classmethod
    def zero(cls, rng_seed: int = 0) -> "DetectorNoiseModel":
        """Perfect detector and noiseless points."""
        return cls(
            base_miss_rate=0.0,
            bbox_jitter_sigma=0.0,
            fp_rate=0.0,
            roll_penalty=RollPenalty(0.0, 0.0),
            point_sigma=0.0,
            rng_seed=rng_seed,
        )


@dataclass
class Session:
    intrinsics: CameraIntrinsics
    categories: dict[int, str]
    frames: list[CameraFrame]
    name: str = "session"


def _tp_score(u: float, band: tuple[float, float]) -> float:
    lo, hi = band
    return lo + (hi - lo) * math.sqrt(u)


def _low_score(u: float, band: tuple[float, float]) -> float:
    lo, hi = band
    return lo + (hi - lo) * (1.0 - math.sqrt(1.0 - u))


def _hull(uv: np.ndarray) -> tuple[float, float, float, float]:
    lo = uv.min(axis=0).tolist()
    hi = uv.max(axis=0).tolist()
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def _jittered_box(x1, y1, x2, y2, jitter: np.ndarray, grow: float = 0.0) -> Optional[BBox]:
    if grow == 0.0 and not jitter.any():
        return BBox.from_corners(float(x1), float(y1), float(x2), float(y2))
    cx, cy = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
    hw, hh = 0.5 * (x2 - x1) * (1 + grow), 0.5 * (y2 - y1) * (1 + grow)
    a = float(cx - hw + jitter[0])
    b = float(cy - hh + jitter[1])
    c = float(cx + hw + jitter[2])
    d = float(cy + hh + jitter[3])
    if c - a < 1.0 or d - b < 1.0:
        return None
    return BBox.from_corners(a, b, c, d)


def _project(points_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    z = points_cam[:, 2]
    return np.column_stack([intr.fx * points_cam[:, 0] / z + intr.cx, intr.fy * points_cam[:, 1] / z + intr.cy])


def _inside_image(uv: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    return (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)


def _sample_faces(obj: SceneObject, cam: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points on the faces of ``obj`` that face the camera (area-weighted)."""
    faces = [f for f in obj.faces() if np.dot(f[1], cam - f[0]) > 0]
    pick = rng.random(n)
    ab = rng.uniform(-1.0, 1.0, size=(n, 2))
    if not faces or n == 0:
        return np.zeros((0, 3))
    areas = np.array([f[4] for f in faces])
    idx = np.searchsorted(np.cumsum(areas) / areas.sum(), pick, side="right")
    idx = np.minimum(idx, len(faces) - 1)
    centers = np.array([f[0] for f in faces])[idx]
    a_axes = np.array([f[2] for f in faces])[idx]
    b_axes = np.array([f[3] for f in faces])[idx]
    return centers + ab[:, :1] * a_axes + ab[:, 1:] * b_axes


def _confused_label(category: str, u: float, confusion: Mapping) -> Optional[str]:
    acc = 0.0
    for target, p in confusion.get(category, ()):
        acc += p
        if u < acc:
            return target
    return None


def _fp_size(entry, lo: float, hi: float, margin: float, rng: np.random.Generator) -> tuple[float, float]:
    """Log-uniform (D_w, D_h) in [lo, hi] outside ``entry``'s bounds by ``margin``."""
    log_lo, log_hi = math.log(lo), math.log(hi)
    for _ in range(200):
        D_w, D_h = np.exp(rng.uniform(log_lo, log_hi, size=2))
        w_out = D_w < entry.min_w / margin or D_w > entry.max_w * margin
        h_out = D_h < entry.min_h / margin or D_h > entry.max_h * margin
        if w_out or h_out:
            return float(D_w), float(D_h)
    raise ConfigError(f"fp_scale_range leaves no implausible size for {entry.category!r}")


def generate_session(
    scene: SceneSpec,
    traj: TrajectorySpec,
    noise: DetectorNoiseModel,
    intr: CameraIntrinsics,
    db: Optional[ScaleDatabase] = None,
    mode: str = "both",
) -> Session:
    """Simulate one AR session; identical inputs give an identical session.

    ``mode`` picks which detector passes are recorded: "original" (rolled
    image only), "corrected" (upright image only) or "both" (original as
    the primary detections, corrected as the alternate set).  Planted
    false positives are listed per frame in ``meta["fp"]`` and
    ``meta["fp_corrected"]`` as indices into the respective lists.
    Ground truth labels both the original image (clipped) and the
    corrected image (unclipped, like the corrected detections).
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if intr.fx != intr.fy:
        raise ConfigError("the simulator needs square pixels (fx == fy)")
    db = db or default_scale_db()
    scene.validate(db)
    for src, targets in noise.label_confusion.items():
        for name in [src, *(t for t, _ in targets)]:
            if name not in db or name not in COCO_IDS:
                raise ConfigError(f"confusion table names unknown category {name!r}")

    seq = np.random.SeedSequence(noise.rng_seed)
    rng_pts, rng_clutter, rng_det, rng_fp = (np.random.default_rng(s) for s in seq.spawn(4))

    positions = traj.positions(scene)
    target = scene.centroid
    lo = np.asarray(scene.bounds_min, dtype=float)
    hi = np.asarray(scene.bounds_max, dtype=float)
    center = intr.center
    fp_pool = scene.categories if noise.fp_labels == "scene" else sorted(db.entries)
    fp_pool = [c for c in fp_pool if c in COCO_IDS]
    corners = [obj.corners() for obj in scene.objects]
    frames = []

    for i in range(traj.n_frames):
        cam = positions[i]
        roll_deg = traj.roll_profile(i, traj.n_frames)
        roll = math.radians(roll_deg)
        R_upright = look_at(cam, target)
        R = R_upright @ roll_about_optical_axis(roll)
        pose = Pose.from_matrix(R, cam)
        R = pose.matrix
        gravity = R.T @ np.array([0.0, 0.0, -1.0])
        gravity /= np.linalg.norm(gravity)

        # visibility and ground truth (original frame)
        visible = []
        for k, obj in enumerate(scene.objects):
            pc = (corners[k] - cam) @ R
            if np.any(pc[:, 2] <= Z_NEAR):
                continue
            uv = _project(pc, intr)
            x1, y1, x2, y2 = _hull(uv)
            try:
                gt = BBox.from_corners(x1, y1, x2, y2).clip(intr.width, intr.height)
            except EmptyBoxError:
                continue
            if gt.area < MIN_VISIBLE_FRACTION * (x2 - x1) * (y2 - y1) or min(gt.w, gt.h) < MIN_BOX_SIDE:
                continue
            true_corr = _hull(rotate_image_points(uv, roll, center))
            visible.append((k, obj, gt, true_corr))

        # sparse points
        pts = [_sample_faces(obj, cam, noise.points_per_object, rng_pts) for _, obj, _, _ in visible]
        n_clutter = rng_clutter.poisson(scene.clutter_density * scene.volume)
        pts.append(rng_clutter.uniform(lo, hi, size=(n_clutter, 3)))

        # detector pass over real objects
        orig_dets: list[tuple[Detection, bool]] = []
        corr_dets: list[tuple[Detection, bool]] = []
        miss_orig = noise.base_miss_rate + noise.roll_penalty.miss(roll_deg)
        grow = noise.roll_penalty.inflate(roll_deg)
        for _, obj, gt, true_corr in visible:
            u_miss = rng_det.random()
            jitter = rng_det.normal(0.0, 1.0, size=4) * noise.bbox_jitter_sigma
            u_conf = rng_det.random()
            u_score = rng_det.random()
            confused = _confused_label(obj.category, u_conf, noise.label_confusion)
            if confused is None:
                label, p = COCO_IDS[obj.category], _tp_score(u_score, noise.tp_score)
            else:
                label, p = COCO_IDS[confused], _low_score(u_score, noise.confusion_score)
            if u_miss >= miss_orig:
                if grow == 0.0 and not jitter.any():
                    box = gt
                else:
                    box = _jittered_box(gt.x, gt.y, gt.x2, gt.y2, jitter, grow)
                try:
                    box = box.clip(intr.width, intr.height) if box else None
                except EmptyBoxError:
                    box = None
                if box is not None:
                    orig_dets.append((Detection(label, p, box), False))
            if u_miss >= noise.base_miss_rate:
                box = _jittered_box(*true_corr, jitter)
                if box is not None:
                    corr_dets.append((Detection(label, p, box), False))

        # planted false positives: fronto-parallel patches of implausible size
        n_fp = rng_fp.poisson(noise.fp_rate)
        for _ in range(n_fp):
            name = fp_pool[int(rng_fp.integers(len(fp_pool)))]
            D_w, D_h = _fp_size(db.entry(name), *noise.fp_scale_range, noise.fp_margin, rng_fp)
            depth = float(rng_fp.uniform(0.8, 6.0))
            u_pos = rng_fp.random(2)
            u_score = float(rng_fp.random())
            jitter = rng_fp.normal(0.0, 1.0, size=4) * noise.bbox_jitter_sigma
            patch = rng_fp.uniform(-0.5, 0.5, size=(noise.points_per_object, 2))
            depth = max(depth, D_w * intr.fx / (0.9 * intr.width), D_h * intr.fy / (0.9 * intr.height))
            bw, bh = D_w * intr.fx / depth, D_h * intr.fy / depth
            uc = bw / 2 + u_pos[0] * (intr.width - bw)
            vc = bh / 2 + u_pos[1] * (intr.height - bh)
            # patch lives in the upright camera, whose image is the corrected frame
            X = (uc - intr.cx) * depth / intr.fx
            Y = (vc - intr.cy) * depth / intr.fy
            local = np.column_stack(
                [X + patch[:, 0] * D_w, Y + patch[:, 1] * D_h, np.full(patch.shape[0], depth)]
            )
            pts.append(local @ R_upright.T + cam)
            p = _tp_score(u_score, noise.fp_score)
            label = COCO_IDS[name]
            corr_box = _jittered_box(uc - bw / 2, vc - bh / 2, uc + bw / 2, vc + bh / 2, jitter)
            if corr_box is None:
                continue
            corr_dets.append((Detection(label, p, corr_box), True))
            back = _hull(rotate_image_points(corr_box.corners(), -roll, center))
            try:
                orig_box = BBox.from_corners(*back).clip(intr.width, intr.height)
            except EmptyBoxError:
                continue
            orig_dets.append((Detection(label, p, orig_box), True))

        points = np.concatenate(pts) if pts else np.zeros((0, 3))
        points = points + rng_pts.normal(0.0, 1.0, size=points.shape) * noise.point_sigma
        pc = (points - cam) @ R
        keep = pc[:, 2] > Z_NEAR
        keep[keep] = _inside_image(_project(pc[keep], intr), intr)
        points = points[keep]

        def top(dets):
            order = sorted(range(len(dets)), key=lambda j: -dets[j][0].p_l)[: noise.max_detections]
            chosen = [dets[j] for j in order]
            return [d for d, _ in chosen], [j for j, (_, fp) in enumerate(chosen) if fp]

        orig_list, orig_fp = top(orig_dets)
        corr_list, corr_fp = top(corr_dets)
        meta = {"roll_deg": roll_deg}
        if mode == "corrected":
            dets, frame_tag, alt = corr_list, DetectionFrame.CORRECTED, None
            meta["fp"] = corr_fp
        else:
            dets, frame_tag = orig_list, DetectionFrame.ORIGINAL
            alt = corr_list if mode == "both" else None
            meta["fp"] = orig_fp
            if mode == "both":
                meta["fp_corrected"] = corr_fp
        frames.append(
            CameraFrame(
                frame_id=i,
                timestamp=i / traj.fps,
                intrinsics=intr,
                pose=pose,
                gravity=gravity,
                points=points,
                detections=dets,
                detection_frame=frame_tag,
                corrected_detections=alt,
                ground_truth=[LabeledBox(COCO_IDS[obj.category], gt) for _, obj, gt, _ in visible],
                corrected_ground_truth=[
                    LabeledBox(COCO_IDS[obj.category], BBox.from_corners(*tc)) for _, obj, _, tc in visible
                ],
                meta=meta,
            )
        )
    return Session(intr, dict(COCO_CATEGORIES), frames, scene.name)
