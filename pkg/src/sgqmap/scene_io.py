"""Line-delimited scene and prediction files.

One JSON object per line.  Scene lines carry ``id``, ``bev_range``,
``elements`` and optional ``cameras``; prediction lines reuse the same layout
plus per-element ``confidence`` and ``class_scores``.  Python's float
serialization is shortest-round-trip, so parse(serialize(x)) is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BevRange, Camera, CLASS_IDS, CLASS_NAMES, MapElement, Scene


class SceneFormatError(ValueError):
    pass


def _element_to_dict(e: MapElement) -> dict:
    return {
        "class": e.class_name,
        "closed": bool(e.closed),
        "points": [[float(x), float(y)] for x, y in e.points],
    }


def _element_from_dict(d: dict) -> MapElement:
    cls = d["class"]
    if cls not in CLASS_IDS:
        raise SceneFormatError(f"unknown class {cls!r}; expected one of {CLASS_NAMES}")
    return MapElement(class_id=CLASS_IDS[cls],
                      points=np.asarray(d["points"], dtype=np.float64),
                      closed=bool(d["closed"]))


def _camera_to_dict(c: Camera) -> dict:
    return {
        "fx": float(c.fx), "fy": float(c.fy), "cx": float(c.cx), "cy": float(c.cy),
        "R": [float(v) for v in np.asarray(c.rotation).reshape(9)],
        "t": [float(v) for v in np.asarray(c.translation).reshape(3)],
        "width": int(c.width), "height": int(c.height),
    }


def _camera_from_dict(d: dict) -> Camera:
    return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                  rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                  translation=np.asarray(d["t"], dtype=np.float64),
                  width=int(d["width"]), height=int(d["height"]))


def scene_to_json(scene: Scene) -> str:
    obj = {
        "id": scene.scene_id,
        "bev_range": {
            "x_min": scene.bev_range.x_min, "x_max": scene.bev_range.x_max,
            "y_min": scene.bev_range.y_min, "y_max": scene.bev_range.y_max,
        },
        "elements": [_element_to_dict(e) for e in scene.elements],
    }
    if scene.cameras:
        obj["cameras"] = [_camera_to_dict(c) for c in scene.cameras]
    return json.dumps(obj, separators=(",", ":"))


def scene_from_json(line: str) -> Scene:
    d = json.loads(line)
    br = d["bev_range"]
    return Scene(
        scene_id=str(d["id"]),
        bev_range=BevRange(br["x_min"], br["x_max"], br["y_min"], br["y_max"]),
        elements=[_element_from_dict(e) for e in d["elements"]],
        cameras=[_camera_from_dict(c) for c in d.get("cameras", [])],
    )


def write_scenes(path, scenes: list[Scene]) -> None:
    Path(path).write_text("".join(scene_to_json(s) + "\n" for s in scenes))


def read_scenes(path) -> list[Scene]:
    scenes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            scenes.append(scene_from_json(line))
        except (KeyError, ValueError) as exc:
            raise SceneFormatError(f"{path}:{lineno}: {exc}") from exc
    return scenes


@dataclass
class PredictedElement:
    class_id: int
    points: np.ndarray              # (n, 2) meters
    confidence: float
    class_scores: list[float] = field(default_factory=list)


@dataclass
class ScenePredictions:
    scene_id: str
    elements: list[PredictedElement] = field(default_factory=list)


def predictions_to_json(pred: ScenePredictions) -> str:
    obj = {
        "id": pred.scene_id,
        "elements": [{
            "class": CLASS_NAMES[e.class_id],
            "points": [[float(x), float(y)] for x, y in e.points],
            "confidence": float(e.confidence),
            "class_scores": [float(s) for s in e.class_scores],
        } for e in pred.elements],
    }
    return json.dumps(obj, separators=(",", ":"))


def predictions_from_json(line: str) -> ScenePredictions:
    d = json.loads(line)
    elements = []
    for e in d["elements"]:
        if e["class"] not in CLASS_IDS:
            raise SceneFormatError(f"unknown class {e['class']!r}")
        elements.append(PredictedElement(
            class_id=CLASS_IDS[e["class"]],
            points=np.asarray(e["points"], dtype=np.float64),
            confidence=float(e["confidence"]),
            class_scores=[float(s) for s in e.get("class_scores", [])],
        ))
    return ScenePredictions(scene_id=str(d["id"]), elements=elements)


def write_predictions(path, preds: list[ScenePredictions]) -> None:
    Path(path).write_text("".join(predictions_to_json(p) + "\n" for p in preds))


def read_predictions(path) -> list[ScenePredictions]:
    preds = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            preds.append(predictions_from_json(line))
        except (KeyError, ValueError) as exc:
            raise SceneFormatError(f"{path}:{lineno}: {exc}") from exc
    return preds
