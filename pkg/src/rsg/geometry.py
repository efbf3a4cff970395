"""Planar geometry on polylines and polygons (metres, radians)."""
from __future__ import annotations

import math

import numpy as np

from . import _accel


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w == -math.pi else w


class Polyline:
    """Piecewise-linear path with arc-length parametrisation."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.dirs = seg / np.where(self.seg_len > 0, self.seg_len, 1.0)[:, None]

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def _seg(self, s: float) -> int:
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        return min(max(i, 0), len(self.seg_len) - 1)

    def point_at(self, s: float) -> np.ndarray:
        """Position at arc length ``s``; extrapolates linearly beyond both ends."""
        i = self._seg(s)
        return self.points[i] + self.dirs[i] * (s - self.cum[i])

    def tangent_at(self, s: float) -> np.ndarray:
        return self.dirs[self._seg(s)]

    def heading_at(self, s: float) -> float:
        d = self.tangent_at(s)
        return math.atan2(d[1], d[0])

    def project(self, p) -> tuple[float, float, float]:
        """Closest point: (arc length, signed lateral offset (+ left), distance)."""
        p = np.asarray(p, dtype=np.float64)
        a = self.points[:-1]
        rel = p - a
        t = np.clip(np.einsum("ij,ij->i", rel, self.dirs), 0.0, self.seg_len)
        foot = a + self.dirs * t[:, None]
        d = np.hypot(*(p - foot).T)
        i = int(np.argmin(d))
        cross = self.dirs[i, 0] * rel[i, 1] - self.dirs[i, 1] * rel[i, 0]
        return float(self.cum[i] + t[i]), float(math.copysign(d[i], cross) if d[i] else 0.0), float(d[i])

    def offset_polygon(self, half_width: float) -> np.ndarray:
        """Polygon covering points within ``half_width`` laterally (mitred joints)."""
        n = len(self.points)
        normals = np.stack([-self.dirs[:, 1], self.dirs[:, 0]], axis=1)
        vnorm = np.zeros((n, 2))
        vnorm[0] = normals[0]
        vnorm[-1] = normals[-1]
        for k in range(1, n - 1):
            m = normals[k - 1] + normals[k]
            m /= np.hypot(*m)
            cos = float(m @ normals[k])
            vnorm[k] = m / max(cos, 0.2)
        left = self.points + half_width * vnorm
        right = self.points - half_width * vnorm
        return np.concatenate([left, right[::-1]])


def points_in_polygon(px, py, poly) -> np.ndarray:
    return _accel.points_in_polygon(
        np.ascontiguousarray(px, dtype=np.float64).ravel(),
        np.ascontiguousarray(py, dtype=np.float64).ravel(),
        np.ascontiguousarray(poly, dtype=np.float64),
    )


def point_in_polygon(p, poly) -> bool:
    return bool(points_in_polygon([p[0]], [p[1]], poly)[0])


def point_segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(v, dtype=np.float64) for v in (p, a, b))
    ab = b - a
    L2 = float(ab @ ab)
    t = 0.0 if L2 == 0 else min(max(float((p - a) @ ab) / L2, 0.0), 1.0)
    return float(np.hypot(*(p - (a + t * ab))))


def polygon_distance(p, poly) -> float:
    """0 inside the polygon, else distance to its boundary."""
    if point_in_polygon(p, poly):
        return 0.0
    a = np.asarray(poly, dtype=np.float64)
    ab = np.roll(a, -1, axis=0) - a
    ap = np.asarray(p, dtype=np.float64) - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", ap, ab) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    d = ap - ab * t[:, None]
    return float(np.sqrt(np.min(np.einsum("ij,ij->i", d, d))))


def segment_intersection(p1, p2, q1, q2):
    """Parameters (t, u) where p1 + t(p2-p1) == q1 + u(q2-q1), or None."""
    p1, p2, q1, q2 = (np.asarray(v, dtype=np.float64) for v in (p1, p2, q1, q2))
    r, s = p2 - p1, q2 - q1
    den = r[0] * s[1] - r[1] * s[0]
    if den == 0:
        return None
    qp = q1 - p1
    t = (qp[0] * s[1] - qp[1] * s[0]) / den
    u = (qp[0] * r[1] - qp[1] * r[0]) / den
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return t, u
    return None


def polyline_crossing(line: Polyline, a, b) -> float | None:
    """Arc length where segment a-b crosses ``line``, if it does."""
    for i in range(len(line.seg_len)):
        hit = segment_intersection(line.points[i], line.points[i + 1], a, b)
        if hit is not None:
            return float(line.cum[i] + hit[0] * line.seg_len[i])
    return None


def rect(cx: float, cy: float, w: float, h: float) -> np.ndarray:
    return np.array([[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2],
                     [cx + w / 2, cy + h / 2], [cx - w / 2, cy + h / 2]])


def arc_points(center, radius: float, a0: float, a1: float, n: int = 8) -> np.ndarray:
    ang = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)
