"""
Camera projection and 3D box geometry in the KITTI camera frame.

Conventions: x right, y down, z forward. A box's ``location`` is the center of
its bottom face, so the box occupies ``[y - h, y]`` vertically. ``yaw`` is the
KITTI ``rotation_y`` about the camera y axis; at yaw 0 the length runs along x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kitti_io import Calibration, ObjectLabel

CLIP_EPS = 1e-9


class BehindCameraError(ValueError):
    pass


class SingularIntrinsicsError(ValueError):
    pass


@dataclass(frozen=True)
class Box3D:
    location: tuple[float, float, float]
    dims: tuple[float, float, float]  # h, w, l
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "location", tuple(float(v) for v in self.location))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        object.__setattr__(self, "yaw", float(self.yaw))
        if min(self.dims) <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.dims}")

    @classmethod
    def from_label(cls, label: ObjectLabel) -> "Box3D":
        return cls(label.location, label.dims, label.rotation_y)

    @property
    def volume(self) -> float:
        h, w, l = self.dims
        return h * w * l

    @property
    def y_range(self) -> tuple[float, float]:
        y = self.location[1]
        return (y - self.dims[0], y)

    def center(self, reference: str = "bottom") -> tuple[float, float, float]:
        """Reference point: ``"bottom"`` (KITTI location) or ``"volumetric"``."""
        x, y, z = self.location
        if reference == "bottom":
            return (x, y, z)
        if reference == "volumetric":
            return (x, y - 0.5 * self.dims[0], z)
        raise ValueError(f"unknown reference point {reference!r}")


# ---------------------------------------------------------------------------
# projection


def project(point3d: Sequence[float], calib: Calibration) -> tuple[float, float]:
    """Perspective projection of a camera-frame point through P."""
    x, y, z = (float(v) for v in point3d)
    if z <= 0:
        raise BehindCameraError(f"point depth must be positive, got z={z}")
    P = calib.P
    hom = P @ np.array([x, y, z, 1.0])
    if hom[2] <= 0:
        raise BehindCameraError(f"point projects behind the image plane (w={hom[2]})")
    return (float(hom[0] / hom[2]), float(hom[1] / hom[2]))


def project_points(points: np.ndarray, calib: Calibration) -> np.ndarray:
    """Vectorised :func:`project` for an (N, 3) array; returns (N, 2)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if np.any(pts[:, 2] <= 0):
        raise BehindCameraError("all points must have positive depth")
    hom = np.hstack([pts, np.ones((len(pts), 1))]) @ calib.P.T
    return hom[:, :2] / hom[:, 2:3]


def back_project(cw: Sequence[float], depth: float, calib: Calibration) -> tuple[float, float, float]:
    """Recover the camera-frame point at depth ``z`` that projects to pixel ``cw``.

    Solves the two projection equations for (x, y) with z fixed, which reduces to
    ``K^-1 (u z, v z, z)`` when P has no translation column and handles KITTI's
    non-zero P2 translation otherwise. The returned z is ``depth`` unchanged.
    """
    u, v = (float(c) for c in cw)
    z = float(depth)
    if z <= 0:
        raise BehindCameraError(f"depth must be positive, got {z}")
    P = calib.P
    A = np.array(
        [
            [P[0, 0] - u * P[2, 0], P[0, 1] - u * P[2, 1]],
            [P[1, 0] - v * P[2, 0], P[1, 1] - v * P[2, 1]],
        ]
    )
    b = np.array(
        [
            u * (P[2, 2] * z + P[2, 3]) - P[0, 2] * z - P[0, 3],
            v * (P[2, 2] * z + P[2, 3]) - P[1, 2] * z - P[1, 3],
        ]
    )
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    if abs(det) < 1e-12:
        raise SingularIntrinsicsError("projection matrix is singular for back-projection")
    x = (b[0] * A[1, 1] - A[0, 1] * b[1]) / det
    y = (A[0, 0] * b[1] - b[0] * A[1, 0]) / det
    return (float(x), float(y), z)


# ---------------------------------------------------------------------------
# corners and polygons


def _rotation_y(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def box3d_corners(box: Box3D) -> np.ndarray:
    """The 8 corners as an (8, 3) array.

    Corners 0-3 lie on the bottom face (y = location y), 4-7 on the top face,
    each face ordered (+l/2, +w/2), (+l/2, -w/2), (-l/2, -w/2), (-l/2, +w/2) in
    box-local (x, z) before rotation; corner ``i + 4`` sits above corner ``i``.
    """
    h, w, l = box.dims
    x = np.array([l, l, -l, -l, l, l, -l, -l]) / 2.0
    y = np.array([0.0, 0.0, 0.0, 0.0, -h, -h, -h, -h])
    z = np.array([w, -w, -w, w, w, -w, -w, w]) / 2.0
    corners = _rotation_y(box.yaw) @ np.vstack([x, y, z])
    return corners.T + np.asarray(box.location)


def bev_polygon(box: Box3D) -> np.ndarray:
    """Footprint on the x-z plane as a (4, 2) counter-clockwise array."""
    return box3d_corners(box)[[3, 2, 1, 0], :][:, [0, 2]]


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _cross(o, a, p) -> float:
    return (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])


def _line_intersection(p1, p2, q1, q2):
    dx, dy = p2[0] - p1[0], p2[1] - p1[1]
    ex, ey = q2[0] - q1[0], q2[1] - q1[1]
    denom = dx * ey - dy * ex
    if abs(denom) < CLIP_EPS:
        return p2
    t = ((q1[0] - p1[0]) * ey - (q1[1] - p1[1]) * ex) / denom
    return (p1[0] + t * dx, p1[1] + t * dy)


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by convex counter-clockwise ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = tuple(clip[i]), tuple(clip[(i + 1) % n])
        edge_len = math.hypot(b[0] - a[0], b[1] - a[1])
        tol = CLIP_EPS * max(edge_len, 1.0)
        inputs, output = output, []
        prev = inputs[-1]
        prev_in = _cross(a, b, prev) >= -tol
        for cur in inputs:
            cur_in = _cross(a, b, cur) >= -tol
            if cur_in:
                if not prev_in:
                    output.append(_line_intersection(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_line_intersection(prev, cur, a, b))
            prev, prev_in = cur, cur_in
    if len(output) < 3:
        return np.zeros((0, 2))
    return np.array(output)


def _ordered(a, b):
    # fixed argument order makes the pairwise IoUs exactly symmetric
    return (a, b) if _sort_key(a) <= _sort_key(b) else (b, a)


def _sort_key(box: Box3D):
    return box.location + box.dims + (box.yaw,)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    a, b = _ordered(a, b)
    reach = 0.5 * (math.hypot(a.dims[1], a.dims[2]) + math.hypot(b.dims[1], b.dims[2]))
    if math.hypot(a.location[0] - b.location[0], a.location[2] - b.location[2]) > reach:
        return 0.0
    inter = clip_convex(bev_polygon(a), bev_polygon(b))
    return max(polygon_area(inter), 0.0)


def _clamp_unit(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def iou_2d(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two (left, top, right, bottom) rectangles."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return _clamp_unit(inter / union)


def iou_bev(a: Box3D, b: Box3D) -> float:
    if a == b:
        return 1.0
    inter = bev_intersection_area(a, b)
    area_a = a.dims[1] * a.dims[2]
    area_b = b.dims[1] * b.dims[2]
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return _clamp_unit(inter / union)


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.y_range[0], b.y_range[0])
    hi = min(a.y_range[1], b.y_range[1])
    return max(0.0, hi - lo)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Rotated 3D IoU: footprint intersection times vertical slab overlap."""
    if a == b:
        return 1.0
    dy = vertical_overlap(a, b)
    if dy <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dy
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return _clamp_unit(inter / union)


def iou_3d_axis_aligned(s: Sequence[float], s_star: Sequence[float]) -> float:
    """3D IoU of two co-located, co-oriented, co-anchored boxes from sizes alone."""
    s = np.asarray(s, dtype=np.float64)
    s_star = np.asarray(s_star, dtype=np.float64)
    if np.any(s <= 0) or np.any(s_star <= 0):
        raise ValueError("sizes must be positive")
    inter = float(np.prod(np.minimum(s, s_star)))
    return inter / (float(np.prod(s)) + float(np.prod(s_star)) - inter)


# ---------------------------------------------------------------------------
# sampling oracle


def _grid(lo: float, hi: float, n: int) -> np.ndarray:
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5)


def _inside_footprint(box: Box3D, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    h, w, l = box.dims
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = x - box.location[0]
    dz = z - box.location[2]
    # inverse of the yaw rotation used in box3d_corners
    local_x = c * dx - s * dz
    local_z = s * dx + c * dz
    return (np.abs(local_x) <= l / 2) & (np.abs(local_z) <= w / 2)


def _inside_slab(box: Box3D, y: np.ndarray) -> np.ndarray:
    lo, hi = box.y_range
    return (y >= lo) & (y <= hi)


def _union_bounds(a: Box3D, b: Box3D) -> np.ndarray:
    pts = np.vstack([box3d_corners(a), box3d_corners(b)])
    return np.stack([pts.min(axis=0), pts.max(axis=0)])


def iou_3d_oracle(a: Box3D, b: Box3D, resolution: int = 128) -> float:
    """Grid-sampling estimate of 3D IoU.

    Samples ``resolution**3`` cell centers over the union's axis-aligned bounds
    and returns |inside both| / |inside either|. Membership in a yaw-only box
    factors into a footprint test and a vertical test, so the 3D counts are
    assembled from a 2D x-z grid and a 1D y grid; the counts are identical to
    testing every point of the 3D grid.
    """
    if resolution < 32:
        raise ValueError("resolution must be at least 32")
    (x0, y0, z0), (x1, y1, z1) = _union_bounds(a, b)
    xs, ys, zs = _grid(x0, x1, resolution), _grid(y0, y1, resolution), _grid(z0, z1, resolution)
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    fa, fb = _inside_footprint(a, X, Z), _inside_footprint(b, X, Z)
    ya, yb = _inside_slab(a, ys), _inside_slab(b, ys)
    n_a = int(fa.sum()) * int(ya.sum())
    n_b = int(fb.sum()) * int(yb.sum())
    n_both = int((fa & fb).sum()) * int((ya & yb).sum())
    n_either = n_a + n_b - n_both
    return n_both / n_either if n_either else 0.0


def iou_3d_oracle_dense(a: Box3D, b: Box3D, resolution: int = 32) -> float:
    """Same estimate as :func:`iou_3d_oracle`, testing every 3D grid point."""
    (x0, y0, z0), (x1, y1, z1) = _union_bounds(a, b)
    X, Y, Z = np.meshgrid(
        _grid(x0, x1, resolution), _grid(y0, y1, resolution), _grid(z0, z1, resolution), indexing="ij"
    )
    in_a = _inside_footprint(a, X, Z) & _inside_slab(a, Y)
    in_b = _inside_footprint(b, X, Z) & _inside_slab(b, Y)
    either = int((in_a | in_b).sum())
    return int((in_a & in_b).sum()) / either if either else 0.0
