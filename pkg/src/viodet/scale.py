"""Real-world size estimation from sparse points and per-category scale priors."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .categories import COCO_CATEGORIES
from .errors import ScaleDBError, UnknownCategoryError
from ._kernels import box_medians
from .geometry import BBox, CameraFrame, Detection, project_points

SCALE_DB_HEADER = ("category", "min_w", "max_w", "min_h", "max_h")

N_MIN = 3
D_MIN = 0.1
D_MAX = 50.0
P_SCALE_REJECT = 0.5

_SQRT_HALF = math.sqrt(0.5)

Label = Union[int, str]


@dataclass(frozen=True)
class ScaleEntry:
    category: str
    min_w: float
    max_w: float
    min_h: float
    max_h: float

    def __post_init__(self):
        if not (0 < self.min_w <= self.max_w and 0 < self.min_h <= self.max_h):
            raise ScaleDBError(
                f"{self.category}: bounds must satisfy 0 < min <= max "
                f"(w: {self.min_w}..{self.max_w}, h: {self.min_h}..{self.max_h})"
            )

    @property
    def fuse_radius(self) -> float:
        """Largest extent of the category; radius for gathering superpoints."""
        return max(self.max_w, self.max_h)

    @property
    def create_radius(self) -> float:
        """Smallest extent of the category; radius for new superpoints and rewards."""
        return min(self.min_w, self.min_h)

    def accepts(self, D_w: float, D_h: float) -> bool:
        return self.min_w <= D_w <= self.max_w and self.min_h <= D_h <= self.max_h


@dataclass(frozen=True, eq=False)
class ScaleDatabase:
    """Immutable category -> ScaleEntry table.

    Labels may be given as category names or as integer ids; ids are
    resolved through ``categories`` (COCO ids by default).
    """

    entries: Mapping[str, ScaleEntry]
    categories: Mapping[int, str] = field(default_factory=lambda: dict(COCO_CATEGORIES))

    def __post_init__(self):
        entries = dict(self.entries)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "categories", dict(self.categories))
        names = list(entries)
        object.__setattr__(self, "_names", names)
        object.__setattr__(self, "_columns", {name: i for i, name in enumerate(names)})
        ids = {name: cid for cid, name in self.categories.items() if name in entries}
        object.__setattr__(self, "_ids", ids)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, label: Label) -> bool:
        try:
            self.name(label)
        except UnknownCategoryError:
            return False
        return True

    def name(self, label: Label) -> str:
        if isinstance(label, str):
            name = label
        else:
            try:
                name = self.categories[int(label)]
            except (KeyError, ValueError, TypeError):
                raise UnknownCategoryError(f"unknown category id {label!r}") from None
        if name not in self.entries:
            raise UnknownCategoryError(f"category {name!r} has no scale database entry")
        return name

    def entry(self, label: Label) -> ScaleEntry:
        return self.entries[self.name(label)]

    def __getitem__(self, label: Label) -> ScaleEntry:
        return self.entry(label)

    def column(self, label: Label) -> int:
        """Dense index of a category, stable for the lifetime of the database."""
        return self._columns[self.name(label)]

    def label_id(self, column: int) -> int:
        name = self._names[column]
        try:
            return self._ids[name]
        except KeyError:
            raise UnknownCategoryError(f"category {name!r} has no id") from None

    def fuse_radius(self, label: Label) -> float:
        return self.entry(label).fuse_radius

    def create_radius(self, label: Label) -> float:
        return self.entry(label).create_radius

    @property
    def max_fuse_radius(self) -> float:
        return max(e.fuse_radius for e in self.entries.values())

    def with_categories(self, categories: Mapping[int, str]) -> "ScaleDatabase":
        return ScaleDatabase(self.entries, categories)


def load_scale_db(source, categories: Optional[Mapping[int, str]] = None) -> ScaleDatabase:
    """Parse a scale database from a path, an open file, or CSV text.

    Lines starting with ``#`` are comments.  Raises ScaleDBError naming the
    offending line for bad headers, malformed rows, duplicates and
    min > max violations.
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and "," not in source):
        text = Path(source).read_text(encoding="utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()

    rows = [
        (lineno, line)
        for lineno, line in enumerate(text.splitlines(), start=1)
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not rows:
        raise ScaleDBError("scale database is empty")
    lineno, header = rows[0]
    if tuple(c.strip() for c in next(csv.reader([header]))) != SCALE_DB_HEADER:
        raise ScaleDBError(f"line {lineno}: expected header {','.join(SCALE_DB_HEADER)!r}")

    entries: dict[str, ScaleEntry] = {}
    for lineno, line in rows[1:]:
        cells = [c.strip() for c in next(csv.reader([line]))]
        if len(cells) != 5 or not cells[0]:
            raise ScaleDBError(f"line {lineno}: expected 5 fields in {line!r}")
        try:
            values = [float(c) for c in cells[1:]]
        except ValueError:
            raise ScaleDBError(f"line {lineno}: non-numeric bound in {line!r}") from None
        if not all(math.isfinite(v) for v in values):
            raise ScaleDBError(f"line {lineno}: non-finite bound in {line!r}")
        name = cells[0]
        if name in entries:
            raise ScaleDBError(f"line {lineno}: duplicate category {name!r}")
        try:
            entries[name] = ScaleEntry(name, *values)
        except ScaleDBError as exc:
            raise ScaleDBError(f"line {lineno}: {exc}") from None
    if categories is None:
        return ScaleDatabase(entries)
    return ScaleDatabase(entries, categories)


def default_scale_db_text() -> str:
    return resources.files("viodet").joinpath("data/scale_db.csv").read_text(encoding="utf-8")


def default_scale_db() -> ScaleDatabase:
    return load_scale_db(io.StringIO(default_scale_db_text()))


@dataclass(frozen=True, eq=False)
class ScaleEstimate:
    D_w: float
    D_h: float
    d: float
    loc: np.ndarray
    n_points: int


def points_in_bbox(uv: np.ndarray, valid: np.ndarray, bbox: BBox) -> np.ndarray:
    """Mask of projected points strictly inside ``bbox``."""
    u = uv[:, 0]
    v = uv[:, 1]
    with np.errstate(invalid="ignore"):
        return valid & (u > bbox.x) & (u < bbox.x2) & (v > bbox.y) & (v < bbox.y2)


def _estimate(bbox: BBox, loc: np.ndarray, n: int, cam: np.ndarray, fx: float, fy: float) -> ScaleEstimate:
    dx, dy, dz = (cam - loc).tolist()
    d = math.sqrt(dx * dx + dy * dy + dz * dz)
    d = min(max(d, D_MIN), D_MAX)
    return ScaleEstimate(bbox.w / fx * d, bbox.h / fy * d, d, loc, n)


def estimate_object_scale(
    det: Detection,
    frame: CameraFrame,
    projected: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> Optional[ScaleEstimate]:
    """Lift a detection to a metric size using the sparse points inside its box.

    ``det.bbox`` must be in the same image frame as ``projected`` (the plain
    pinhole projection of ``frame.points`` when omitted).  Returns None with
    fewer than ``N_MIN`` points inside the box.
    """
    uv, valid = projected if projected is not None else project_points(frame.points, frame.pose, frame.intrinsics)
    inside = points_in_bbox(uv, valid, det.bbox)
    n = int(inside.sum())
    if n < N_MIN:
        return None
    loc = np.median(frame.points[inside], axis=0)
    intr = frame.intrinsics
    return _estimate(det.bbox, loc, n, frame.pose.position, intr.fx, intr.fy)


def estimate_scales(
    bboxes: Sequence[BBox],
    points: np.ndarray,
    uv: np.ndarray,
    valid: np.ndarray,
    camera_position: np.ndarray,
    fx: float,
    fy: float,
) -> list[Optional[ScaleEstimate]]:
    """Batch form of :func:`estimate_object_scale` for all boxes of one frame.

    Uses a compiled gather-and-median loop; results are identical to the
    per-box path.
    """
    n_box = len(bboxes)
    if n_box == 0:
        return []
    if points.shape[0] == 0:
        return [None] * n_box
    boxes = np.array([b.as_tuple() for b in bboxes], dtype=np.float64)
    locs, counts = box_medians(boxes, points, uv, valid, N_MIN)
    out: list[Optional[ScaleEstimate]] = [None] * n_box
    for i in range(n_box):
        if counts[i] >= N_MIN:
            out[i] = _estimate(bboxes[i], locs[i], int(counts[i]), camera_position, fx, fy)
    return out


def scale_filter_prob(est: Optional[ScaleEstimate], category: Label, db: ScaleDatabase) -> float:
    """1 when the estimated size fits the category's bounds (inclusive), else 0.5.

    A missing estimate is neutral (1).  Unknown categories raise
    UnknownCategoryError.
    """
    entry = db.entry(category)
    if est is None:
        return 1.0
    return 1.0 if entry.accepts(est.D_w, est.D_h) else P_SCALE_REJECT


def scale_bucket(d: float) -> int:
    """Distance octave: log2(d) rounded to the nearest integer, halves upward.

    Computed from the binary exponent so that doubling ``d`` raises the
    bucket by exactly one.
    """
    if not d > 0:
        raise ValueError(f"distance must be positive, got {d!r}")
    mantissa, exponent = math.frexp(d)
    return exponent if mantissa >= _SQRT_HALF else exponent - 1
