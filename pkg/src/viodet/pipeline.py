"""Per-frame orchestration: orientation correction, scale filtering, map fusion.

The final score of every detection is ``p_scale * p_map * p_l``; each
factor is exactly 1 when its module is switched off, so the five
ablation rows are plain configurations of one pipeline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ConfigError, EmptyBoxError, SequencingError
from .geometry import (
    BBox,
    CameraFrame,
    Detection,
    DetectionFrame,
    Direction,
    project_points,
    roll_from_gravity,
    rotate_image_points,
    transform_bbox,
)
from .scale import (
    P_SCALE_REJECT,
    ScaleDatabase,
    ScaleEstimate,
    default_scale_db,
    estimate_scales,
    load_scale_db,
    scale_bucket,
)
from .semantic_map import MapConfig, SemanticMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    enable_oc: bool = True
    enable_sf: bool = True
    enable_osm: bool = True
    report_threshold: float = 0.5
    scale_db_path: Optional[str] = None
    map_config: MapConfig = field(default_factory=MapConfig)

    def __post_init__(self):
        if not 0.0 <= self.report_threshold <= 1.0:
            raise ConfigError("report_threshold must lie in [0, 1]")

    @property
    def label(self) -> str:
        """Ablation row name of this module combination."""
        if self.enable_oc and self.enable_sf and self.enable_osm:
            return "ALL"
        parts = [
            name
            for name, on in (("OSM", self.enable_osm), ("SF", self.enable_sf), ("OC", self.enable_oc))
            if on
        ]
        return "+".join(parts + ["SSD"])

    def with_modules(self, oc: bool, sf: bool, osm: bool) -> "PipelineConfig":
        return replace(self, enable_oc=oc, enable_sf=sf, enable_osm=osm)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        data = dict(data)
        if "map_config" in data:
            mc = data["map_config"]
            if not isinstance(mc, Mapping):
                raise ConfigError("map_config must be a mapping")
            unknown = set(mc) - set(MapConfig.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"unknown map_config keys: {sorted(unknown)}")
            data["map_config"] = MapConfig(**mc)
        for key in ("enable_oc", "enable_sf", "enable_osm"):
            if key in data and not isinstance(data[key], bool):
                raise ConfigError(f"{key} must be true or false")
        return cls(**data)


ABLATION_ROWS: tuple[tuple[str, tuple[bool, bool, bool]], ...] = (
    ("SSD", (False, False, False)),
    ("OC+SSD", (True, False, False)),
    ("SF+OC+SSD", (True, True, False)),
    ("OSM+OC+SSD", (True, False, True)),
    ("ALL", (True, True, True)),
)


@dataclass(frozen=True)
class ScoredBox:
    label: int
    p: float
    bbox: BBox


@dataclass(frozen=True)
class DetectionDiagnostics:
    p_l: float
    p_scale: float
    p_map: float
    D_w: Optional[float]
    D_h: Optional[float]
    d: Optional[float]
    roll: float


@dataclass
class FrameResult:
    """Scored detections of one frame.

    ``outputs`` are in the original image frame.  ``native_outputs`` hold
    every scored detection with its box in ``native_frame``, the frame the
    detector actually ran in; they differ from ``outputs`` only when that
    is the corrected frame, where boxes that fall outside the original
    image are dropped from ``outputs``.  ``diagnostics`` align with
    ``native_outputs``.
    """

    frame_id: int
    outputs: list[ScoredBox]
    diagnostics: list[DetectionDiagnostics]
    native_frame: DetectionFrame = DetectionFrame.ORIGINAL
    native_outputs: Optional[list[ScoredBox]] = None

    def __post_init__(self):
        self.native_frame = DetectionFrame(self.native_frame)
        if self.native_outputs is None:
            if self.native_frame is DetectionFrame.CORRECTED:
                raise ConfigError("corrected-frame results need native_outputs")
            self.native_outputs = self.outputs

    def reportable(self, threshold: float) -> list[ScoredBox]:
        return [o for o in self.outputs if o.p >= threshold]


class Pipeline:
    """Stateful per-session processor; feed frames in increasing id order."""

    def __init__(
        self,
        config: Optional[PipelineConfig] = None,
        db: Optional[ScaleDatabase] = None,
        categories: Optional[Mapping[int, str]] = None,
    ):
        self.config = config or PipelineConfig()
        if db is None:
            db = load_scale_db(self.config.scale_db_path) if self.config.scale_db_path else default_scale_db()
        if categories is not None:
            db = db.with_categories(categories)
        self.db = db
        self.map = SemanticMap(db, self.config.map_config)
        self._last_id: Optional[int] = None
        self._roll = 0.0

    def _select(self, frame: CameraFrame) -> tuple[list[Detection], DetectionFrame]:
        if self.config.enable_oc:
            if frame.detection_frame is DetectionFrame.CORRECTED:
                return frame.detections, DetectionFrame.CORRECTED
            if frame.corrected_detections is not None:
                return frame.corrected_detections, DetectionFrame.CORRECTED
        return frame.detections, frame.detection_frame

    def process_frame(self, frame: CameraFrame) -> FrameResult:
        cfg = self.config
        if self._last_id is not None and frame.frame_id <= self._last_id:
            raise SequencingError(f"frame {frame.frame_id} arrived after frame {self._last_id}")
        self._last_id = frame.frame_id

        correction = roll_from_gravity(frame.gravity)
        roll = self._roll if correction.degenerate else correction.roll
        self._roll = roll

        dets, boxes_in = self._select(frame)
        intr = frame.intrinsics
        db = self.db
        cols = [db.column(det.label) for det in dets]
        entries = [db.entry(det.label) for det in dets]

        # Boxes used for size estimation must share a frame with the projected points.
        est_frame_corrected = boxes_in is DetectionFrame.CORRECTED or cfg.enable_oc
        est_boxes: list[Optional[BBox]] = []
        out_boxes: list[Optional[BBox]] = []
        for det in dets:
            if boxes_in is DetectionFrame.CORRECTED:
                est_boxes.append(det.bbox)
                try:
                    out_boxes.append(
                        transform_bbox(det.bbox, roll, intr, Direction.TO_ORIGINAL).clip(intr.width, intr.height)
                    )
                except EmptyBoxError:
                    out_boxes.append(None)
            else:
                out_boxes.append(det.bbox)
                if est_frame_corrected:
                    try:
                        est_boxes.append(transform_bbox(det.bbox, roll, intr, Direction.TO_CORRECTED))
                    except EmptyBoxError:
                        est_boxes.append(None)
                else:
                    est_boxes.append(det.bbox)

        estimates: list[Optional[ScaleEstimate]] = [None] * len(dets)
        if (cfg.enable_sf or cfg.enable_osm) and dets:
            uv, valid = project_points(frame.points, frame.pose, intr)
            if est_frame_corrected and roll != 0.0:
                uv = rotate_image_points(uv, roll, intr.center)
            usable = [i for i, b in enumerate(est_boxes) if b is not None]
            found = estimate_scales(
                [est_boxes[i] for i in usable], frame.points, uv, valid, frame.pose.position, intr.fx, intr.fy
            )
            for i, est in zip(usable, found):
                estimates[i] = est

        cam = frame.pose.position
        outputs: list[ScoredBox] = []
        native: list[ScoredBox] = []
        diagnostics: list[DetectionDiagnostics] = []
        for det, est, out_box, col, entry in zip(dets, estimates, out_boxes, cols, entries):
            p_scale = 1.0
            if cfg.enable_sf and est is not None and not entry.accepts(est.D_w, est.D_h):
                p_scale = P_SCALE_REJECT
            p_map = 1.0
            if cfg.enable_osm and est is not None:
                ray = est.loc - cam
                norm = math.sqrt(float(ray @ ray))
                if norm > 0.0:
                    p_map = self.map.observe(est.loc, col, ray / norm, scale_bucket(est.d), det.p_l)
            p = p_scale * p_map * det.p_l
            native.append(ScoredBox(det.label, p, det.bbox))
            diagnostics.append(
                DetectionDiagnostics(
                    det.p_l,
                    p_scale,
                    p_map,
                    None if est is None else est.D_w,
                    None if est is None else est.D_h,
                    None if est is None else est.d,
                    roll,
                )
            )
            if out_box is None:
                log.debug("frame %s: dropping detection outside the original image", frame.frame_id)
                continue
            outputs.append(ScoredBox(det.label, p, out_box))
        if boxes_in is DetectionFrame.CORRECTED:
            return FrameResult(frame.frame_id, outputs, diagnostics, boxes_in, native)
        return FrameResult(frame.frame_id, outputs, diagnostics)

    def snapshot(self) -> list[dict]:
        return self.map.snapshot()


def process_frame(state: Pipeline, frame: CameraFrame) -> FrameResult:
    return state.process_frame(frame)


def run_session(
    frames: Iterable[CameraFrame],
    cfg: Optional[PipelineConfig] = None,
    db: Optional[ScaleDatabase] = None,
    categories: Optional[Mapping[int, str]] = None,
) -> tuple[list[FrameResult], list[dict]]:
    """Fold ``process_frame`` over a session with a fresh map."""
    pipeline = Pipeline(cfg, db, categories)
    results = [pipeline.process_frame(frame) for frame in frames]
    return results, pipeline.snapshot()
