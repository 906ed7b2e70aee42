"""Deterministic synthetic scenes, camera feature renders, and BEV targets.

Everything is a pure function of (params, index): scene geometry, the camera
rig, and rendered features reproduce bit-identically for the same seed.
Feature images put each class in its own channel (plus smooth positional
channels), so a scene's content is fully recoverable from its render.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (BevRange, Camera, MapElement, NUM_CLASSES, Scene,
                       normalize_points, project_points, rasterize,
                       resample_points)

# feature layout: one channel per class, then (u, v) positional gradients
FEATURE_CHANNELS = NUM_CLASSES + 2


@dataclass
class SynthParams:
    seed: int = 0
    num_points: int = 20
    dividers: tuple[int, int] = (1, 3)        # inclusive count range
    ped_crossings: tuple[int, int] = (1, 2)
    boundaries: tuple[int, int] = (1, 2)
    jitter: float = 0.8                        # meters
    feature_noise: float = 0.0                 # sigma on rendered features
    image_width: int = 128
    image_height: int = 64
    bev_range: BevRange = field(default_factory=BevRange)

    def validate(self):
        for lo, hi in (self.dividers, self.ped_crossings, self.boundaries):
            if lo < 0 or hi < lo:
                raise ValueError("element count ranges must be 0 <= lo <= hi")
        if self.feature_noise < 0:
            raise ValueError("feature noise must be >= 0")


def _rng_for(params: SynthParams, index: int, stream: str) -> np.random.Generator:
    h = np.frombuffer(stream.encode(), dtype=np.uint8).sum()
    return np.random.default_rng(np.random.SeedSequence([params.seed, index, int(h)]))


def default_rig(params: SynthParams) -> list[Camera]:
    """Two pinhole cameras, forward and rearward, 90 degree horizontal FOV,
    mounted 1.6 m above the BEV plane."""
    w, hgt = params.image_width, params.image_height
    fx = w / 2.0                     # 90 deg FOV: fx = (w/2) / tan(45)
    fy = fx
    cams = []
    for yaw in (0.0, math.pi):
        # camera axes: x right, y down, z forward; forward looks along +y world
        c, s = math.cos(yaw), math.sin(yaw)
        forward = np.array([s, c, 0.0])
        right = np.array([c, -s, 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rot = np.stack([right, down, forward])      # world -> camera rows
        center = np.array([0.0, 0.0, 1.6])
        trans = -rot @ center
        cams.append(Camera(fx=fx, fy=fy, cx=w / 2.0, cy=hgt / 2.0,
                           rotation=rot, translation=trans, width=w, height=hgt))
    return cams


def _smooth_open_polyline(rng, params) -> np.ndarray:
    """Divider: a gently curving course running roughly front-to-back."""
    br = params.bev_range
    x0 = rng.uniform(br.x_min + 3.0, br.x_max - 3.0)
    amp = rng.uniform(0.0, 2.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    wavelen = rng.uniform(20.0, 50.0)
    ys = np.linspace(br.y_min + 2.0, br.y_max - 2.0, 24)
    xs = x0 + amp * np.sin(2 * math.pi * ys / wavelen + phase)
    xs += rng.normal(0.0, params.jitter * 0.2, size=xs.shape)
    return np.stack([xs, ys], axis=1)


def _crossing_quad(rng, params) -> np.ndarray:
    br = params.bev_range
    cx = rng.uniform(br.x_min + 4.0, br.x_max - 4.0)
    cy = rng.uniform(br.y_min + 5.0, br.y_max - 5.0)
    half_w = rng.uniform(1.5, 3.5)
    half_h = rng.uniform(1.0, 2.0)
    ang = rng.uniform(0.0, math.pi)
    c, s = math.cos(ang), math.sin(ang)
    corners = np.array([[-half_w, -half_h], [half_w, -half_h],
                        [half_w, half_h], [-half_w, half_h]])
    rot = corners @ np.array([[c, s], [-s, c]])
    return rot + np.array([cx, cy])


def _boundary_loop(rng, params) -> np.ndarray:
    """Boundary: rounded rectangular course inset from the BEV edge."""
    br = params.bev_range
    inset_x = rng.uniform(1.0, 4.0)
    inset_y = rng.uniform(2.0, 7.0)
    x0, x1 = br.x_min + inset_x, br.x_max - inset_x
    y0, y1 = br.y_min + inset_y, br.y_max - inset_y
    corner = min(rng.uniform(1.0, 3.0), (x1 - x0) / 3, (y1 - y0) / 3)
    pts = []
    arc = np.linspace(0, math.pi / 2, 5)
    for cx, cy, start in ((x1 - corner, y1 - corner, 0.0),
                          (x0 + corner, y1 - corner, math.pi / 2),
                          (x0 + corner, y0 + corner, math.pi),
                          (x1 - corner, y0 + corner, 3 * math.pi / 2)):
        for a in arc:
            t = start + a
            pts.append([cx + corner * math.cos(t), cy + corner * math.sin(t)])
    out = np.asarray(pts)
    out += rng.normal(0.0, params.jitter * 0.1, size=out.shape)
    return out


def synth_scene(params: SynthParams, index: int) -> Scene:
    params.validate()
    rng = _rng_for(params, index, "geometry")
    br = params.bev_range
    elements = []
    for _ in range(rng.integers(params.boundaries[0], params.boundaries[1] + 1)):
        raw = br.clip(_boundary_loop(rng, params))
        elements.append(MapElement(2, resample_points(raw, params.num_points, True), True))
    for _ in range(rng.integers(params.dividers[0], params.dividers[1] + 1)):
        raw = br.clip(_smooth_open_polyline(rng, params))
        elements.append(MapElement(0, resample_points(raw, params.num_points, False), False))
    for _ in range(rng.integers(params.ped_crossings[0], params.ped_crossings[1] + 1)):
        raw = br.clip(_crossing_quad(rng, params))
        elements.append(MapElement(1, resample_points(raw, params.num_points, True), True))
    scene = Scene(scene_id=f"synth-{params.seed}-{index:05d}",
                  bev_range=br, elements=elements, cameras=default_rig(params))
    scene.validate(n=params.num_points)
    return scene


def _splat(channel: np.ndarray, u: float, v: float, sigma: float = 1.2):
    h, w = channel.shape
    r = 3
    ui, vi = int(round(u)), int(round(v))
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            x, y = ui + du, vi + dv
            if 0 <= x < w and 0 <= y < h:
                d2 = (x - u) ** 2 + (y - v) ** 2
                channel[y, x] += math.exp(-d2 / (2 * sigma * sigma))


def render_views(scene: Scene, params: SynthParams) -> np.ndarray:
    """Per-camera feature images, shape (num_cams, channels, height, width)."""
    cams = scene.cameras
    out = np.zeros((len(cams), FEATURE_CHANNELS, params.image_height,
                    params.image_width), dtype=np.float32)
    for ci, cam in enumerate(cams):
        for element in scene.elements:
            world = np.concatenate([element.points,
                                    np.zeros((len(element.points), 1))], axis=1)
            pixels, valid = project_points(world, cam)
            for (u, v), ok in zip(pixels, valid):
                if ok:
                    _splat(out[ci, element.class_id], u, v)
        # positional context channels
        u_ramp = np.linspace(0.0, 1.0, params.image_width, dtype=np.float32)
        v_ramp = np.linspace(0.0, 1.0, params.image_height, dtype=np.float32)
        out[ci, NUM_CLASSES] = np.broadcast_to(u_ramp, (params.image_height,
                                                        params.image_width))
        out[ci, NUM_CLASSES + 1] = np.broadcast_to(v_ramp[:, None],
                                                   (params.image_height,
                                                    params.image_width))
    if params.feature_noise > 0:
        rng = _rng_for(params, _scene_index(scene), "features")
        out += rng.normal(0.0, params.feature_noise, size=out.shape).astype(np.float32)
    return out


def _scene_index(scene: Scene) -> int:
    tail = scene.scene_id.rsplit("-", 1)[-1]
    return int(tail) if tail.isdigit() else 0


def scene_to_bev_gt(scene: Scene, rows: int, cols: int):
    """(class masks (C, rows, cols), list of (class_id, normalized points, closed))."""
    masks = rasterize(scene.elements, scene.bev_range, rows, cols)
    targets = [(e.class_id, normalize_points(e.points, scene.bev_range), e.closed)
               for e in scene.elements]
    return masks, targets
