"""Oriented 3D box algebra.

Boxes are 7-DoF: center (cx, cy, cz), dimensions (dx, dy, dz) and a yaw
rotation about the vertical (z) axis.  BEV intersection of two rotated
rectangles is computed exactly by convex polygon clipping, so rotated IoU has
no discretization error.
"""

import math
from dataclasses import dataclass, replace

import numpy as np


class InvalidAugmentationError(ValueError):
    """Raised when an augmentation would produce a degenerate geometry."""


def wrap_angle(a):
    """Normalize an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def canonical_yaw(a):
    """Map an angle to (-pi/2, pi/2]: a box is invariant under a pi yaw flip,
    so regression targets must live on a half circle to stay consistent."""
    a = wrap_angle(a)
    if a > 0.5 * math.pi:
        a -= math.pi
    elif a <= -0.5 * math.pi:
        a += math.pi
    return a


def rot_z(yaw):
    """3x3 rotation about the vertical axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (m), strictly positive dims (m), yaw in (-pi, pi]."""
    cx: float
    cy: float
    cz: float
    dx: float
    dy: float
    dz: float
    yaw: float

    def __post_init__(self):
        if min(self.dx, self.dy, self.dz) <= 0.0:
            raise ValueError(f"box dims must be positive, got {(self.dx, self.dy, self.dz)}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self):
        return np.array([self.cx, self.cy, self.cz])

    @property
    def dims(self):
        return np.array([self.dx, self.dy, self.dz])

    @property
    def volume(self):
        return self.dx * self.dy * self.dz

    def as_array(self):
        return np.array([self.cx, self.cy, self.cz, self.dx, self.dy, self.dz, self.yaw])

    @classmethod
    def from_array(cls, a):
        return cls(*[float(v) for v in a])

    def scaled(self, s):
        """Similarity transform: center and dims scaled, yaw unchanged."""
        if s <= 0.0:
            raise InvalidAugmentationError(f"scale must be positive, got {s}")
        return Box3D(self.cx * s, self.cy * s, self.cz * s,
                     self.dx * s, self.dy * s, self.dz * s, self.yaw)

    def enlarged(self, factor):
        return replace(self, dx=self.dx * factor, dy=self.dy * factor, dz=self.dz * factor)

    def bev_corners(self):
        """4x2 BEV corner coordinates, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hx, hy = 0.5 * self.dx, 0.5 * self.dy
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


def _polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(poly, a, b):
    """Keep the part of convex `poly` left of the directed edge a->b."""
    out = []
    n = len(poly)
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp, sq = side(p), side(q)
        if sp >= 0:
            out.append(p)
        if (sp >= 0) != (sq >= 0):
            t = sp / (sp - sq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _convex_intersection_area(pa, pb):
    poly = [tuple(p) for p in pa]
    for i in range(len(pb)):
        poly = _clip_polygon(poly, pb[i], pb[(i + 1) % len(pb)])
        if len(poly) < 3:
            return 0.0
    return _polygon_area(np.array(poly))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Exact rotated-box 3D IoU: BEV polygon clipping x vertical overlap."""
    inter_bev = _convex_intersection_area(a.bev_corners(), b.bev_corners())
    if inter_bev <= 0.0:
        return 0.0
    za0, za1 = a.cz - 0.5 * a.dz, a.cz + 0.5 * a.dz
    zb0, zb1 = b.cz - 0.5 * b.dz, b.cz + 0.5 * b.dz
    inter_z = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_bev * inter_z
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def points_in_box(pts, box: Box3D):
    """Indices of points inside the yaw-rotated box; boundary counts as inside."""
    pts = np.asarray(pts, dtype=np.float64)
    local = (pts - box.center) @ rot_z(box.yaw)  # R(yaw)^T applied row-wise
    half = 0.5 * box.dims
    mask = np.all(np.abs(local) <= half + 1e-12, axis=1)
    return np.flatnonzero(mask)


def canonical_transform(pts, box: Box3D):
    """Express points in the box frame: translate by -center, rotate by -yaw."""
    pts = np.asarray(pts, dtype=np.float64)
    return (pts - box.center) @ rot_z(box.yaw)


def canonical_inverse(pts_local, box: Box3D):
    pts_local = np.asarray(pts_local, dtype=np.float64)
    return pts_local @ rot_z(box.yaw).T + box.center


def _bev_disjoint(a: Box3D, b: Box3D) -> bool:
    """Cheap sufficient condition for zero overlap (circumscribed circles)."""
    dx, dy = a.cx - b.cx, a.cy - b.cy
    ra = 0.5 * math.hypot(a.dx, a.dy)
    rb = 0.5 * math.hypot(b.dx, b.dy)
    return dx * dx + dy * dy > (ra + rb) ** 2


def nms(boxes, scores, iou_thresh, max_keep=None):
    """Greedy descending-score suppression; kept indices in score order.

    `max_keep` stops early once that many boxes survive (the result equals
    the corresponding prefix of the uncapped keep list).
    """
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores lengths differ")
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) and not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(_bev_disjoint(boxes[i], boxes[j]) or
               iou3d(boxes[i], boxes[j]) <= iou_thresh for j in kept):
            kept.append(i)
            if max_keep is not None and len(kept) >= max_keep:
                break
    return kept


def convex_hull_2d(pts):
    """Counter-clockwise convex hull (monotone chain) of an (n, 2) array."""
    pts = np.unique(np.asarray(pts, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(pts):
    """Minimum-area oriented bounding rectangle of 2D points.

    Returns (cx, cy, dx, dy, angle) with dx >= dy and angle in (-pi/2, pi/2]
    (rotating calipers: the optimal rectangle shares a side with the hull).
    """
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("min_area_rect needs at least one point")
    hull = convex_hull_2d(pts)
    if len(hull) == 1:
        return (hull[0][0], hull[0][1], 0.0, 0.0, 0.0)
    best = None
    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    for ex, ey in edges:
        norm = math.hypot(ex, ey)
        if norm < 1e-12:
            continue
        c, s = ex / norm, ey / norm
        rot = hull @ np.array([[c, -s], [s, c]])  # rotate by -angle
        lo, hi = rot.min(axis=0), rot.max(axis=0)
        area = (hi[0] - lo[0]) * (hi[1] - lo[1])
        if best is None or area < best[0]:
            mid = 0.5 * (lo + hi)
            cx = mid[0] * c - mid[1] * s
            cy = mid[0] * s + mid[1] * c
            best = (area, cx, cy, hi[0] - lo[0], hi[1] - lo[1],
                    math.atan2(ey, ex))
    _, cx, cy, dx, dy, ang = best
    if dy > dx:
        dx, dy, ang = dy, dx, ang + 0.5 * math.pi
    return (cx, cy, dx, dy, canonical_yaw(ang))


# ---- augmentations ----------------------------------------------------------


@dataclass(frozen=True)
class GlobalScaleAug:
    """Uniform global scaling of a scene (the input augmentation)."""
    scale: float

    def __post_init__(self):
        if self.scale <= 0.0:
            raise InvalidAugmentationError(f"scale must be positive, got {self.scale}")

    @classmethod
    def draw(cls, rng, lo, hi):
        return cls(scale=float(rng.uniform(lo, hi)))

    def inverse(self):
        return GlobalScaleAug(1.0 / self.scale)


def apply_global_scale(points, boxes, aug: GlobalScaleAug):
    """Scale coordinates, box centers and dims by s; yaw and point order kept."""
    points = np.asarray(points, dtype=np.float64) * aug.scale
    boxes = [b.scaled(aug.scale) for b in boxes]
    return points, boxes


@dataclass(frozen=True)
class RoiAug:
    """Per-box proposal perturbation: axis scales, center jitter, yaw jitter."""
    scale: tuple  # 3 unitless factors
    center_jitter: tuple  # meters
    yaw_jitter: float  # radians

    IDENTITY = None  # set after class definition

    @classmethod
    def draw(cls, rng, box: Box3D, scale_range=(0.9, 1.1),
             center_frac=0.05, yaw_range=0.05):
        """Sample one perturbation for `box`; center jitter is +-frac of dims."""
        sc = rng.uniform(scale_range[0], scale_range[1], size=3)
        cj = rng.uniform(-center_frac, center_frac, size=3) * box.dims
        yj = float(rng.uniform(-yaw_range, yaw_range))
        return cls(scale=tuple(sc), center_jitter=tuple(cj), yaw_jitter=yj)


RoiAug.IDENTITY = RoiAug(scale=(1.0, 1.0, 1.0), center_jitter=(0.0, 0.0, 0.0),
                         yaw_jitter=0.0)


def apply_roi_aug(box: Box3D, aug: RoiAug) -> Box3D:
    dims = box.dims * np.asarray(aug.scale)
    if np.any(dims <= 0.0):
        raise InvalidAugmentationError(f"augmented dims not positive: {dims}")
    center = box.center + np.asarray(aug.center_jitter)
    return Box3D(center[0], center[1], center[2], dims[0], dims[1], dims[2],
                 box.yaw + aug.yaw_jitter)
