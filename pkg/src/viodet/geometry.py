"""Camera geometry shared by the rest of the package.

Conventions
-----------
World frame: right-handed, z up, gravity along -z.
Camera frame: x right, y down, z forward (optical axis).
Image frame: origin top-left, u right, v down, pixels.
Pose: unit quaternion (w, x, y, z) rotating camera coordinates into the
world, plus the camera origin in world coordinates.

The orientation correction rotates image coordinates about the principal
point by the roll angle ``r`` using the standard 2D rotation matrix
``[[cos r, -sin r], [sin r, cos r]]``.  Because v points down this turns
content clockwise on screen, which brings projected gravity onto +v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .errors import EmptyBoxError, InvalidInputError

Z_NEAR = 0.05
GRAVITY_EPS = 0.1
UNIT_TOL = 1e-3
QUAT_TOL = 1e-6


def _vec3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be three finite numbers, got {value!r}")
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as (w, x, y, z)."""
    w, x, y, z = (float(c) for c in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(R) -> np.ndarray:
    """(w, x, y, z) quaternion of a rotation matrix, canonicalized to w >= 0."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(-1)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise InvalidInputError("rotation must be a (w, x, y, z) quaternion")
        if abs(float(np.linalg.norm(q)) - 1.0) > QUAT_TOL:
            raise InvalidInputError(f"quaternion norm {np.linalg.norm(q)!r} is not 1")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", _vec3(self.translation, "translation"))

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(matrix_to_quaternion(R), t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @cached_property
    def matrix(self) -> np.ndarray:
        # the stored quaternion may be off unit by up to QUAT_TOL (e.g. after 9-digit rounding)
        q = self.rotation
        return quaternion_to_matrix(q / np.linalg.norm(q))

    @property
    def position(self) -> np.ndarray:
        return self.translation

    def world_to_camera(self, points) -> np.ndarray:
        """Map world points, shape (3,) or (N, 3), into camera coordinates."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.matrix

    def camera_to_world(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.translation


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left corner plus size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidInputError(f"bbox size must be positive, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def corners(self) -> np.ndarray:
        return np.array(
            [[self.x, self.y], [self.x2, self.y], [self.x2, self.y2], [self.x, self.y2]]
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(x1, y1, x2 - x1, y2 - y1)

    def clip(self, width: float, height: float) -> "BBox":
        x1, y1 = max(self.x, 0.0), max(self.y, 0.0)
        x2, y2 = min(self.x2, float(width)), min(self.y2, float(height))
        if x2 <= x1 or y2 <= y1:
            raise EmptyBoxError(f"{self} lies outside the {width}x{height} image")
        if (x1, y1, x2, y2) == (self.x, self.y, self.x2, self.y2):
            return self
        return BBox.from_corners(x1, y1, x2, y2)

    def contains(self, other: "BBox", tol: float = 0.0) -> bool:
        return (
            self.x <= other.x + tol
            and self.y <= other.y + tol
            and self.x2 >= other.x2 - tol
            and self.y2 >= other.y2 - tol
        )


@dataclass(frozen=True)
class Detection:
    label: int
    p_l: float
    bbox: BBox

    def __post_init__(self):
        if not (0.0 < self.p_l <= 1.0):
            raise InvalidInputError(f"detection probability {self.p_l!r} outside (0, 1]")


class LabeledBox(NamedTuple):
    label: int
    bbox: BBox


class DetectionFrame(str, Enum):
    ORIGINAL = "original"
    CORRECTED = "corrected"


class Direction(str, Enum):
    TO_CORRECTED = "to_corrected"
    TO_ORIGINAL = "to_original"


@dataclass(eq=False)
class CameraFrame:
    """Everything the AR framework and the detector deliver for one image.

    ``corrected_detections`` optionally carries a second detector pass run
    on the orientation-corrected image (boxes in the corrected frame), so a
    single session can serve both sides of an orientation ablation.
    ``ground_truth`` boxes are in the original image frame and
    ``corrected_ground_truth`` (optional) labels the corrected image.
    """

    frame_id: int
    timestamp: float
    intrinsics: CameraIntrinsics
    pose: Pose
    gravity: np.ndarray
    points: np.ndarray
    detections: list[Detection] = field(default_factory=list)
    detection_frame: DetectionFrame = DetectionFrame.ORIGINAL
    corrected_detections: Optional[list[Detection]] = None
    ground_truth: Optional[list[LabeledBox]] = None
    corrected_ground_truth: Optional[list[LabeledBox]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.gravity = _vec3(self.gravity, "gravity")
        if abs(float(np.linalg.norm(self.gravity)) - 1.0) > UNIT_TOL:
            raise InvalidInputError(f"frame {self.frame_id}: gravity is not unit length")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 3))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"frame {self.frame_id}: points must have shape (N, 3)")
        self.points = pts
        self.detection_frame = DetectionFrame(self.detection_frame)


@dataclass(frozen=True)
class OrientationCorrection:
    roll: float
    degenerate: bool


class ImagePoint(NamedTuple):
    u: float
    v: float


def project_point(p_world, pose: Pose, intr: CameraIntrinsics) -> Optional[ImagePoint]:
    """Pinhole projection of one world point; None when behind the near plane.

    Points projecting outside the image are still returned.
    """
    x, y, z = pose.world_to_camera(_vec3(p_world, "point"))
    if z <= Z_NEAR:
        return None
    return ImagePoint(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def project_points(points, pose: Pose, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project_point`.

    Returns (uv, valid) where uv has shape (N, 2) and rows with
    ``valid == False`` (behind the near plane) hold NaN.
    """
    pc = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    valid = z > Z_NEAR
    uv = np.full((pc.shape[0], 2), np.nan)
    zv = z[valid]
    uv[valid, 0] = intr.fx * pc[valid, 0] / zv + intr.cx
    uv[valid, 1] = intr.fy * pc[valid, 1] / zv + intr.cy
    return uv, valid


def roll_from_gravity(gravity) -> OrientationCorrection:
    """Image roll that makes projected gravity point straight down (+v).

    Raises InvalidInputError if ``gravity`` is not unit length within 1e-3.
    When the in-plane component is shorter than ``GRAVITY_EPS`` the result
    is flagged degenerate and ``roll`` is 0; callers substitute the
    previous frame's roll.
    """
    g = _vec3(gravity, "gravity")
    if abs(float(np.linalg.norm(g)) - 1.0) > UNIT_TOL:
        raise InvalidInputError(f"gravity {g.tolist()} is not unit length")
    gx, gy = float(g[0]), float(g[1])
    if math.hypot(gx, gy) < GRAVITY_EPS:
        return OrientationCorrection(0.0, True)
    roll = math.atan2(gx, gy)
    if roll <= -math.pi:
        roll = math.pi
    return OrientationCorrection(roll, False)


def rotate_image_points(uv, angle: float, center) -> np.ndarray:
    """Rotate (N, 2) image points about ``center`` by ``angle`` radians."""
    uv = np.asarray(uv, dtype=np.float64)
    c, s = math.cos(angle), math.sin(angle)
    cx, cy = center
    du = uv[..., 0] - cx
    dv = uv[..., 1] - cy
    out = np.empty_like(uv)
    out[..., 0] = cx + c * du - s * dv
    out[..., 1] = cy + s * du + c * dv
    return out


def transform_bbox(
    bbox: BBox, roll: float, intr: CameraIntrinsics, direction: Direction | str
) -> BBox:
    """Move a box between the original and the orientation-corrected frame.

    The four corners are rotated about the principal point and the
    axis-aligned hull is returned, so a round trip yields a box that
    encloses (and is usually larger than) the input.  Raises EmptyBoxError
    when the result does not overlap the image at all.
    """
    direction = Direction(direction)
    angle = roll if direction is Direction.TO_CORRECTED else -roll
    if angle == 0.0:
        out = bbox
    else:
        # scalar form of rotate_image_points over the four corners
        c, s = math.cos(angle), math.sin(angle)
        cx, cy = intr.cx, intr.cy
        dus = (bbox.x - cx, bbox.x2 - cx)
        dvs = (bbox.y - cy, bbox.y2 - cy)
        us = [cx + c * du - s * dv for du in dus for dv in dvs]
        vs = [cy + s * du + c * dv for du in dus for dv in dvs]
        out = BBox.from_corners(min(us), min(vs), max(us), max(vs))
    if out.x >= intr.width or out.y >= intr.height or out.x2 <= 0 or out.y2 <= 0:
        raise EmptyBoxError(f"{out} does not overlap the image")
    return out


def angular_difference(a, b) -> float:
    """Angle between two unit vectors in degrees, in [0, 180]."""
    a, b = _vec3(a, "a"), _vec3(b, "b")
    # atan2 keeps precision near 0 and 180 where acos does not
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, b))), float(np.dot(a, b))))


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at ``position`` facing ``target``."""
    forward = _vec3(target, "target") - _vec3(position, "position")
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise InvalidInputError("camera position coincides with its target")
    forward = forward / norm
    right = np.cross(forward, _vec3(up, "up"))
    if np.linalg.norm(right) < 1e-9:
        raise InvalidInputError("viewing direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.column_stack([right, down, forward])


def roll_about_optical_axis(angle: float) -> np.ndarray:
    """Camera-frame rotation turning the device by ``angle`` about its z axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
