"""Vectorized map elements: classes, resampling, permutation classes, masks.

All operations here are pure functions over plain dataclasses and numpy
arrays; nothing touches the gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("divider", "ped_crossing", "boundary")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
NUM_CLASSES = len(CLASS_NAMES)

DEFAULT_NUM_POINTS = 20
DEFAULT_MAX_ELEMENTS = 100


@dataclass
class BevRange:
    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = -30.0
    y_max: float = 30.0

    @property
    def extent(self) -> tuple[float, float]:
        return (self.x_max - self.x_min, self.y_max - self.y_min)

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> bool:
        x, y = points[:, 0], points[:, 1]
        return bool((x >= self.x_min - tol).all() and (x <= self.x_max + tol).all()
                    and (y >= self.y_min - tol).all() and (y <= self.y_max + tol).all())

    def clip(self, points: np.ndarray) -> np.ndarray:
        out = points.copy()
        out[:, 0] = np.clip(out[:, 0], self.x_min, self.x_max)
        out[:, 1] = np.clip(out[:, 1], self.y_min, self.y_max)
        return out


@dataclass
class MapElement:
    class_id: int
    points: np.ndarray          # (n, 2) meters, BEV frame
    closed: bool

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    def validate(self, bev_range: BevRange, n: int = DEFAULT_NUM_POINTS):
        if self.class_id not in range(NUM_CLASSES):
            raise ValueError(f"bad class id {self.class_id}")
        if self.points.shape != (n, 2):
            raise ValueError(f"expected {(n, 2)} points, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("non-finite coordinates")
        if not bev_range.contains(self.points):
            raise ValueError("points outside BEV range")
        if self.closed and np.allclose(self.points[0], self.points[-1]):
            raise ValueError("closed element must not duplicate its first point")


@dataclass
class Camera:
    """Pinhole camera; extrinsics map world to camera frame (X_cam = R X + t)."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray        # (3, 3)
    translation: np.ndarray     # (3,)
    width: int
    height: int

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")


@dataclass
class Scene:
    scene_id: str
    bev_range: BevRange = field(default_factory=BevRange)
    elements: list[MapElement] = field(default_factory=list)
    cameras: list[Camera] = field(default_factory=list)

    def validate(self, n: int = DEFAULT_NUM_POINTS,
                 max_elements: int = DEFAULT_MAX_ELEMENTS):
        if len(self.elements) > max_elements:
            raise ValueError(f"{len(self.elements)} elements exceeds cap {max_elements}")
        for e in self.elements:
            e.validate(self.bev_range, n=n)
        for c in self.cameras:
            c.validate()


def polyline_length(points: np.ndarray, closed: bool) -> float:
    segs = np.diff(points, axis=0)
    total = float(np.hypot(segs[:, 0], segs[:, 1]).sum())
    if closed:
        total += float(np.hypot(*(points[0] - points[-1])))
    return total


def resample_points(raw: np.ndarray, n: int, closed: bool) -> np.ndarray:
    """Equal arc-length resampling to exactly n points.

    Open polylines keep both endpoints (spacing L/(n-1)); closed ones walk the
    full perimeter including the closing segment (spacing L/n, starting at the
    first vertex, last point omitted as the implicit closure).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != 2 or raw.shape[0] < 2:
        raise ValueError(f"need >=2 2-D points, got shape {raw.shape}")
    if not np.isfinite(raw).all():
        raise ValueError("non-finite input coordinates")
    verts = np.vstack([raw, raw[:1]]) if closed else raw
    seg = np.diff(verts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    total = float(seg_len.sum())
    if total <= 0.0:
        raise ValueError("degenerate zero-length polyline")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    if closed:
        targets = np.arange(n) * (total / n)
    else:
        targets = np.arange(n) * (total / (n - 1))
        targets[-1] = total
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg_len) - 1)
    denom = np.where(seg_len[idx] > 0, seg_len[idx], 1.0)
    frac = (targets - cum[idx]) / denom
    return verts[idx] + frac[:, None] * seg[idx]


def resample_element(raw_points: np.ndarray, n: int, closed: bool,
                     class_id: int) -> MapElement:
    return MapElement(class_id=class_id,
                      points=resample_points(raw_points, n, closed),
                      closed=closed)


def equivalent_permutations(n: int, closed: bool) -> np.ndarray:
    """Index orderings that represent the same geometry.

    Open: identity and full reversal (2).  Closed: every cyclic shift of the
    identity and of the reversal (2n).
    """
    base = np.arange(n)
    if not closed:
        return np.stack([base, base[::-1]])
    rev = base[::-1]
    orders = [np.roll(base, -s) for s in range(n)]
    orders += [np.roll(rev, -s) for s in range(n)]
    return np.stack(orders)


def normalize_points(points: np.ndarray, bev_range: BevRange) -> np.ndarray:
    """Affine map from the BEV range onto the unit square."""
    points = np.asarray(points, dtype=np.float64)
    if not bev_range.contains(points):
        raise ValueError("point outside BEV range; clip before normalizing")
    w, h = bev_range.extent
    out = np.empty_like(points)
    out[..., 0] = (points[..., 0] - bev_range.x_min) / w
    out[..., 1] = (points[..., 1] - bev_range.y_min) / h
    return out


def denormalize_points(unit: np.ndarray, bev_range: BevRange) -> np.ndarray:
    unit = np.asarray(unit, dtype=np.float64)
    w, h = bev_range.extent
    out = np.empty_like(unit)
    out[..., 0] = bev_range.x_min + unit[..., 0] * w
    out[..., 1] = bev_range.y_min + unit[..., 1] * h
    return out


def project_points(points_world: np.ndarray, camera: Camera,
                   min_depth: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of (M, 3) world points.

    Returns ((M, 2) pixel coordinates (u, v), (M,) bool validity).  Points
    closer than ``min_depth`` or projecting off-image are invalid; their pixel
    values are unspecified but finite.
    """
    pts = np.asarray(points_world, dtype=np.float64)
    cam_pts = pts @ camera.rotation.T + camera.translation
    depth = cam_pts[:, 2]
    safe = np.where(depth > min_depth, depth, 1.0)
    u = camera.fx * (cam_pts[:, 0] / safe) + camera.cx
    v = camera.fy * (cam_pts[:, 1] / safe) + camera.cy
    pixels = np.stack([u, v], axis=1)
    valid = ((depth > min_depth)
             & (u >= 0) & (u <= camera.width - 1)
             & (v >= 0) & (v <= camera.height - 1))
    return pixels, valid


def cell_centers(bev_range: BevRange, rows: int, cols: int) -> np.ndarray:
    """(rows, cols, 2) metric centers; row 0 is y_min, col 0 is x_min."""
    w, h = bev_range.extent
    xs = bev_range.x_min + (np.arange(cols) + 0.5) * (w / cols)
    ys = bev_range.y_min + (np.arange(rows) + 0.5) * (h / rows)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def _segment_distance(centers: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Distance from each center to segment p0-p1."""
    d = p1 - p0
    seg_sq = float(d @ d)
    if seg_sq == 0.0:
        diff = centers - p0
        return np.hypot(diff[..., 0], diff[..., 1])
    t = ((centers - p0) @ d) / seg_sq
    t = np.clip(t, 0.0, 1.0)
    proj = p0 + t[..., None] * d
    diff = centers - proj
    return np.hypot(diff[..., 0], diff[..., 1])


def rasterize(elements: list[MapElement], bev_range: BevRange,
              rows: int, cols: int) -> np.ndarray:
    """Per-class occupancy masks, shape (num_classes, rows, cols).

    A cell is set when the element's polyline passes within half a cell
    diagonal of the cell center.
    """
    if rows <= 0 or cols <= 0:
        raise ValueError(f"grid extents must be positive, got {rows}x{cols}")
    masks = np.zeros((NUM_CLASSES, rows, cols), dtype=np.uint8)
    centers = cell_centers(bev_range, rows, cols)
    w, h = bev_range.extent
    cell_w, cell_h = w / cols, h / rows
    radius = 0.5 * float(np.hypot(cell_w, cell_h))
    for element in elements:
        pts = element.points
        segs = [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]
        if element.closed:
            segs.append((pts[-1], pts[0]))
        mask = masks[element.class_id]
        for p0, p1 in segs:
            hit = _segment_distance(centers, p0, p1) <= radius
            mask |= hit.astype(np.uint8)
    return masks
