"""Bird's-eye-view rasterisation of a road map around an anchor point."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import points_in_polygon
from .roadmap import RoadMap

DRIVABLE, MARKING, OBSTACLE = 0, 1, 2
CHANNELS = ("drivable", "marking", "obstacle")


@dataclass(frozen=True, eq=False)
class BevGrid:
    data: np.ndarray  # C x W x W, row 0 is the northern edge
    extent: float
    anchor: tuple[float, float]

    @property
    def size(self) -> int:
        return self.data.shape[1]

    def cell_of(self, x: float, y: float) -> tuple[int, int] | None:
        cell = self.extent / self.size
        col = int(np.floor((x - self.anchor[0] + self.extent / 2) / cell))
        row = int(np.floor((self.anchor[1] + self.extent / 2 - y) / cell))
        if 0 <= row < self.size and 0 <= col < self.size:
            return row, col
        return None


def frame_anchor(frame) -> tuple[float, float]:
    """Centroid of the frame's objects (origin for an empty frame)."""
    objs = getattr(frame, "objects", ())
    if not objs:
        return (0.0, 0.0)
    return (float(np.mean([o.x for o in objs])), float(np.mean([o.y for o in objs])))


def cell_centers(size: int, extent: float, anchor) -> tuple[np.ndarray, np.ndarray]:
    cell = extent / size
    offs = -extent / 2 + (np.arange(size) + 0.5) * cell
    xs = anchor[0] + offs
    ys = anchor[1] - offs
    gx, gy = np.meshgrid(xs, ys)  # gy[row, col] decreases with row
    return gx, gy


def rasterize_bev(m: RoadMap, frame=None, size: int = 64, extent: float = 80.0,
                  anchor: tuple[float, float] | None = None) -> BevGrid:
    if size < 8:
        raise ValueError("BEV size must be at least 8")
    if not extent > 0:
        raise ValueError("BEV extent must be positive")
    if anchor is None:
        anchor = frame_anchor(frame)
    anchor = (float(anchor[0]), float(anchor[1]))
    grid = np.zeros((len(CHANNELS), size, size))
    gx, gy = cell_centers(size, extent, anchor)
    px, py = gx.ravel(), gy.ravel()
    cell = extent / size
    lo = np.array([anchor[0] - extent / 2, anchor[1] - extent / 2])
    hi = lo + extent

    def visible(poly):
        return (poly.max(axis=0) >= lo).all() and (poly.min(axis=0) <= hi).all()

    for ln in m.lanes:
        poly = ln.polygon()
        if visible(poly):
            grid[DRIVABLE] = np.maximum(grid[DRIVABLE], points_in_polygon(px, py, poly).reshape(size, size))
        line = ln.line
        n = max(2, int(np.ceil(line.length / (cell / 4))) + 1)
        for s in np.linspace(0.0, line.length, n):
            p = line.point_at(s)
            rc = _cell(p, anchor, extent, size)
            if rc is not None:
                grid[MARKING][rc] = 1.0
    for ob in m.static_obstacles:
        fp = ob.footprint
        if visible(fp):
            grid[OBSTACLE] = np.maximum(grid[OBSTACLE], points_in_polygon(px, py, fp).reshape(size, size))
        rc = _cell(fp.mean(axis=0), anchor, extent, size)
        if rc is not None:
            grid[OBSTACLE][rc] = 1.0
    return BevGrid(grid, float(extent), anchor)


def _cell(p, anchor, extent, size):
    cell = extent / size
    col = int(np.floor((p[0] - anchor[0] + extent / 2) / cell))
    row = int(np.floor((anchor[1] + extent / 2 - p[1]) / cell))
    if 0 <= row < size and 0 <= col < size:
        return row, col
    return None
