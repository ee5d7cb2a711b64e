"""Grasp rectangles, angle codec, pose extraction, and the success metric.

A grasp is an oriented rectangle (x, y, theta, w, h): centre in pixels,
orientation in radians within (-pi/2, pi/2], gripper opening w and jaw
size h. Network outputs are four pixel maps (quality, cos 2theta,
sin 2theta, normalized width) from which a single pose is read at the
quality argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateAngleError, DegenerateRectangleError

# Width map denormalization constant and the metric thresholds.
WIDTH_SCALE = 150.0
ANGLE_THRESHOLD = math.radians(30.0)
JACCARD_THRESHOLD = 0.25


def normalize_angle(theta: float) -> float:
    """Fold an angle into (-pi/2, pi/2] using pi-periodicity."""
    t = math.fmod(theta + math.pi / 2.0, math.pi)
    if t <= 0.0:
        t += math.pi
    return t - math.pi / 2.0


@dataclass
class GraspRect:
    """Oriented grasp rectangle; theta is normalized at construction."""

    x: float
    y: float
    theta: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DegenerateRectangleError(f"rectangle sides must be positive: w={self.w} h={self.h}")
        self.theta = normalize_angle(self.theta)

    def vertices(self) -> np.ndarray:
        """4x2 corner array (x, y), consistent winding order."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        offsets = np.array([[-self.w / 2, -self.h / 2],
                            [self.w / 2, -self.h / 2],
                            [self.w / 2, self.h / 2],
                            [-self.w / 2, self.h / 2]])
        rot = np.array([[c, -s], [s, c]])
        return offsets @ rot.T + np.array([self.x, self.y])


@dataclass
class GraspMaps:
    """Pixel-wise prediction/target stack; all maps share one resolution."""

    quality: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    width: np.ndarray

    def __post_init__(self):
        shapes = {m.shape for m in (self.quality, self.cos, self.sin, self.width)}
        if len(shapes) != 1:
            raise ContractError(f"grasp maps must share one resolution, got {shapes}")

    @property
    def resolution(self):
        return self.quality.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.quality, self.cos, self.sin, self.width])

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "GraspMaps":
        return cls(arr[0], arr[1], arr[2], arr[3])


@dataclass
class GraspPose:
    row: int
    col: int
    theta: float
    width_px: float
    quality: float


def encode_angle(theta: float):
    """theta -> (cos 2theta, sin 2theta); pi-periodic by construction."""
    return math.cos(2.0 * theta), math.sin(2.0 * theta)


def decode_angle(c: float, s: float) -> float:
    """(cos 2theta, sin 2theta) -> theta in (-pi/2, pi/2].

    Uses the two-argument arctangent so c = 0 is well defined and the
    quadrant survives; on c > 0 it coincides with arctan(s/c)/2.
    """
    if c == 0.0 and s == 0.0:
        raise DegenerateAngleError("angle decode needs a nonzero (cos, sin) vector")
    return math.atan2(s, c) / 2.0


def extract_pose(maps: GraspMaps) -> GraspPose:
    """Pose at the quality argmax; ties break to the lowest row-major index."""
    q = maps.quality
    flat = int(np.argmax(q))
    row, col = divmod(flat, q.shape[1])
    try:
        theta = decode_angle(float(maps.cos[row, col]), float(maps.sin[row, col]))
    except DegenerateAngleError:
        theta = 0.0
    width = max(float(maps.width[row, col]) * WIDTH_SCALE, 0.0)
    return GraspPose(row, col, theta, width, float(q[row, col]))


def pose_to_rect(pose: GraspPose):
    """Rectangle for a decoded pose: height is half the opening width."""
    if pose.width_px <= 0:
        raise DegenerateRectangleError(f"pose width {pose.width_px} is not positive")
    rect = GraspRect(x=float(pose.col), y=float(pose.row), theta=pose.theta,
                     w=pose.width_px, h=pose.width_px / 2.0)
    return rect, rect.vertices()


def _polygon_area(points) -> float:
    """Signed shoelace area (positive for the winding used by vertices())."""
    n = len(points)
    acc = 0.0
    for i in range(n):
        x1, y1 = points[i]
        x2, y2 = points[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return acc / 2.0


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of a convex subject against a convex window."""
    if _polygon_area(clip) < 0:
        clip = clip[::-1]
    output = list(subject)
    n = len(clip)
    for i in range(n):
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        if not inp:
            break
        sx, sy = inp[-1]
        s_in = ex * (sy - ay) - ey * (sx - ax) >= 0
        for px, py in inp:
            p_in = ex * (py - ay) - ey * (px - ax) >= 0
            if p_in != s_in:
                denom = (sx - px) * (ay - by) - (sy - py) * (ax - bx)
                if denom != 0:
                    t = ((sx - ax) * (ay - by) - (sy - ay) * (ax - bx)) / denom
                    output.append((sx + t * (px - sx), sy + t * (py - sy)))
            if p_in:
                output.append((px, py))
            sx, sy, s_in = px, py, p_in
    return output


def jaccard(a: GraspRect, b: GraspRect) -> float:
    """Intersection-over-union of two oriented rectangles, exact clipping."""
    va = [tuple(p) for p in a.vertices()]
    vb = [tuple(p) for p in b.vertices()]
    inter_poly = _clip_polygon(va, vb)
    inter = abs(_polygon_area(inter_poly)) if len(inter_poly) >= 3 else 0.0
    area_a = a.w * a.h
    area_b = b.w * b.h
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def angle_distance(t1: float, t2: float) -> float:
    """Pi-periodic angular distance: min_k |t1 - t2 + k*pi|."""
    d = math.fmod(abs(t1 - t2), math.pi)
    return min(d, math.pi - d)


def is_success(pred: GraspRect, truths) -> bool:
    """Paper metric: some truth within 30 degrees AND IoU strictly > 0.25.

    The angle condition is inclusive at the boundary; the overlap
    condition is strict.
    """
    truths = list(truths)
    if not truths:
        raise ContractError("is_success needs at least one ground-truth rectangle")
    for truth in truths:
        if angle_distance(pred.theta, truth.theta) <= ANGLE_THRESHOLD + 1e-12 \
                and jaccard(pred, truth) > JACCARD_THRESHOLD:
            return True
    return False
