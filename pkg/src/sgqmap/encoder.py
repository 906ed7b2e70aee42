"""Camera-to-BEV encoder: projection-guided kernel cross-attention.

A grid of BEV queries samples multi-view features at the image projections of
per-cell 3D anchor points.  Heights are fixed ("gkt" mode) or shifted by a
learnable, clamped per-height offset predicted from the query content
("gkt-h").  Both modes share one code path (gkt uses a zero offset), so
gkt-h with zeroed projection weights is bit-identical to gkt.

Feature sampling is bilinear in continuous pixel coordinates, which keeps the
whole encoder differentiable, including through the predicted heights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import BevRange, Camera, cell_centers
from .nn import Linear, LayerNorm, ParamStore
from .tensor import Tensor

DEFAULT_HEIGHTS = (-0.5, 0.0, 0.5, 1.0)


@dataclass
class EncoderConfig:
    rows: int = 64
    cols: int = 32
    dim: int = 256
    layers: int = 3
    kernel: int = 3
    mode: str = "gkt-h"                 # "gkt" | "gkt-h"
    heights: tuple[float, ...] = DEFAULT_HEIGHTS
    offset_clamp: float = 1.5           # meters
    bev_range: BevRange = field(default_factory=BevRange)

    def validate(self):
        if self.mode not in ("gkt", "gkt-h"):
            raise ValueError(f"unknown encoder mode {self.mode!r}")
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid extents must be >= 1")
        if len(self.heights) < 1:
            raise ValueError("need at least one anchor height")


def make_bev_anchors(bev_range: BevRange, rows: int, cols: int) -> np.ndarray:
    """(rows*cols, 2) metric anchors at cell centers, row-major."""
    return cell_centers(bev_range, rows, cols).reshape(-1, 2)


class BevEncoder:
    """Stack of kernel cross-attention layers over a learnable query grid."""

    def __init__(self, cfg: EncoderConfig, store: ParamStore,
                 feature_channels: int, name: str = "encoder"):
        cfg.validate()
        self.cfg = cfg
        self.anchors = make_bev_anchors(cfg.bev_range, cfg.rows, cfg.cols)
        self.num_cells = cfg.rows * cfg.cols
        self.content = store.normal(f"{name}.content",
                                    (self.num_cells, cfg.dim), std=0.02)
        self.height_proj = Linear(store, f"{name}.height", cfg.dim,
                                  len(cfg.heights))
        self.layers = []
        for i in range(cfg.layers):
            self.layers.append({
                "key": Linear(store, f"{name}.{i}.key", feature_channels, cfg.dim),
                "value": Linear(store, f"{name}.{i}.value", feature_channels, cfg.dim),
                "out": Linear(store, f"{name}.{i}.out", cfg.dim, cfg.dim),
                "norm": LayerNorm(store, f"{name}.{i}.norm", cfg.dim),
            })

    def sample_heights(self, content: Tensor) -> Tensor:
        """(num_cells, Z) anchor heights for the current query contents."""
        z0 = Tensor(np.asarray(self.cfg.heights, dtype=np.float32))
        base = T.add(Tensor(np.zeros((self.num_cells, len(self.cfg.heights)),
                                     dtype=np.float32)), z0)
        if self.cfg.mode == "gkt":
            offsets = Tensor(np.zeros((self.num_cells, len(self.cfg.heights)),
                                      dtype=np.float32))
        else:
            offsets = T.clamp(self.height_proj(content),
                              -self.cfg.offset_clamp, self.cfg.offset_clamp)
        return T.add(base, offsets)

    def _project(self, heights: Tensor, camera: Camera):
        """Project every (cell, height) anchor into one camera.

        Returns ((M, 2) feature coords (row, col) as a Tensor, (M,) bool
        validity) with M = num_cells * Z.  Stays on the tape so gradient flows
        into predicted heights.
        """
        z_count = heights.shape[1]
        rot = camera.rotation.astype(np.float32)
        xy = self.anchors.astype(np.float32)
        # constant part of the camera-frame coordinates (from x, y and t)
        const = xy @ rot[:, :2].T + camera.translation.astype(np.float32)
        const = np.repeat(const, z_count, axis=0)              # (M, 3)
        z_col = T.reshape(heights, (self.num_cells * z_count, 1))
        cam_pts = T.add(T.matmul(z_col, Tensor(rot[:, 2].reshape(1, 3))),
                        Tensor(const))
        depth = cam_pts[:, 2:3]
        safe_depth = T.clamp(depth, lo=0.1)
        u = T.add(T.mul(T.div(cam_pts[:, 0:1], safe_depth),
                        Tensor(np.float32(camera.fx))),
                  Tensor(np.float32(camera.cx)))
        v = T.add(T.mul(T.div(cam_pts[:, 1:2], safe_depth),
                        Tensor(np.float32(camera.fy))),
                  Tensor(np.float32(camera.cy)))
        coords = T.concat([v, u], axis=1)       # feature maps index (row, col)
        ud, vd, dd = u.data[:, 0], v.data[:, 0], depth.data[:, 0]
        valid = ((dd > 0.1)
                 & (ud >= 0) & (ud <= camera.width - 1)
                 & (vd >= 0) & (vd <= camera.height - 1))
        return coords, valid

    def _kernel_offsets(self) -> np.ndarray:
        k = self.cfg.kernel
        r = k // 2
        offs = [(dr, dc) for dr in range(-r, r + 1) for dc in range(-r, r + 1)]
        return np.asarray(offs, dtype=np.float32)

    def kernel_cross_attention(self, content: Tensor, views: list[Tensor],
                               cameras: list[Camera], layer: dict,
                               heights: Tensor) -> Tensor:
        """One attention layer; cells with no valid projection pass through."""
        cfg = self.cfg
        taps = self._kernel_offsets()
        k2 = len(taps)
        z_count = heights.shape[1]
        keys, values, masks = [], [], []
        for view, camera in zip(views, cameras):
            # (h, w, C) -> per-pixel key/value maps, one projection per layer
            key_map = layer["key"](view)
            value_map = layer["value"](view)
            coords, valid = self._project(heights, camera)
            m = coords.shape[0]
            tap_coords = T.reshape(
                T.add(T.replicate_rows(coords, k2), Tensor(taps)),
                (m * k2, 2))
            keys.append(T.reshape(T.bilinear_sample(key_map, tap_coords),
                                  (self.num_cells, z_count * k2, cfg.dim)))
            values.append(T.reshape(T.bilinear_sample(value_map, tap_coords),
                                    (self.num_cells, z_count * k2, cfg.dim)))
            masks.append(np.repeat(valid, k2).reshape(self.num_cells,
                                                      z_count * k2))
        key_cat = T.concat(keys, axis=1)        # (cells, T, D)
        value_cat = T.concat(values, axis=1)
        mask = np.concatenate(masks, axis=1)    # (cells, T) bool
        q = T.reshape(content, (self.num_cells, 1, cfg.dim))
        scores = T.mul(T.matmul(q, T.transpose(key_cat, (0, 2, 1))),
                       Tensor(np.float32(1.0 / np.sqrt(cfg.dim))))
        bias = np.where(mask, 0.0, -1e9).astype(np.float32)
        scores = T.add(scores, Tensor(bias.reshape(self.num_cells, 1, -1)))
        weights = T.softmax(scores, axis=-1)
        attended = T.reshape(T.matmul(weights, value_cat),
                             (self.num_cells, cfg.dim))
        has_any = mask.any(axis=1).astype(np.float32)[:, None]
        indicator = np.broadcast_to(has_any, (self.num_cells, cfg.dim)).copy()
        return T.add(content, T.mul(layer["out"](attended), Tensor(indicator)))

    def __call__(self, views: list[Tensor], cameras: list[Camera]) -> Tensor:
        """Encode multi-view features into (num_cells, dim) BEV features.

        ``views`` are (h, w, C) per camera.  With zero layers this is the raw
        learnable content table.
        """
        content = self.content
        for layer in self.layers:
            heights = self.sample_heights(content)
            content = self.kernel_cross_attention(content, views, cameras,
                                                  layer, heights)
            content = layer["norm"](content)
        return content

    def as_chw(self, bev: Tensor) -> Tensor:
        """(cells, D) -> (D, rows, cols)."""
        cfg = self.cfg
        return T.transpose(T.reshape(bev, (cfg.rows, cfg.cols, cfg.dim)),
                           (2, 0, 1))


def views_to_tensors(features: np.ndarray) -> list[Tensor]:
    """(num_cams, C, h, w) float array -> list of (h, w, C) tensors."""
    return [Tensor(np.ascontiguousarray(np.moveaxis(cam, 0, -1)))
            for cam in features]
