"""Rule-based scene captions from 3D boxes and scene metadata.

Five composable caption parts (quantity, location, orientation, weather, time)
are derived from oriented boxes with deterministic thresholds, joined in
template order with single spaces. Relation predicates between two boxes use a
2 m center-offset threshold on each axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

NUMBER_WORDS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")
ORIENTATION_ORDER = ("forward", "left", "backward", "right")


@dataclass(frozen=True)
class Box3D:
    """Upright box: center (x, y, z), size (length, width, height), yaw in radians."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    class_name: str = "car"

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size must be 3-vectors")
        if min(self.size) <= 0:
            raise ValueError("box sizes must be positive")


@dataclass(frozen=True)
class SceneMeta:
    weather: str = "sunny"
    time: str = "day"

    def __post_init__(self):
        if self.weather not in ("sunny", "rainy"):
            raise ValueError(f"unknown weather {self.weather!r}")
        if self.time not in ("day", "night"):
            raise ValueError(f"unknown time {self.time!r}")


@dataclass(frozen=True)
class AnnotationRules:
    """Thresholds shared by captioning and caption-vs-detection matching."""

    distance_threshold: float = 2.0
    quantity_pivot: int = 5
    orientation_edges_deg: tuple[float, float, float, float] = (45.0, 135.0, 225.0, 315.0)
    class_order: tuple[str, ...] = ("pedestrian", "barrier", "truck")

    def __post_init__(self):
        if not 1 <= self.quantity_pivot <= len(NUMBER_WORDS):
            raise ValueError("quantity pivot outside supported number words")
        e = self.orientation_edges_deg
        if len(e) != 4 or not (0 < e[0] < e[1] < e[2] < e[3] < 360):
            raise ValueError("orientation edges must be 4 increasing angles in (0, 360)")


_PART_ALIASES = {
    "qua": "quantity", "quantity": "quantity",
    "loc": "location", "location": "location",
    "ori": "orientation", "orientation": "orientation",
    "wea": "weather", "weather": "weather",
    "tim": "time", "time": "time",
}


def parse_template(template) -> list[str]:
    """Accepts a part list or an underscore-joined alias string like 'wea_loc'."""
    if isinstance(template, str):
        keys = template.split("_")
    else:
        keys = list(template)
    parts = []
    for key in keys:
        name = _PART_ALIASES.get(key.lower())
        if name is None:
            raise ValueError(f"unknown template part {key!r}")
        parts.append(name)
    if not parts:
        raise ValueError("template selects no parts")
    return parts


def orientation_bin(yaw: float, rules: AnnotationRules = AnnotationRules()) -> str:
    """Bin a yaw (radians) into forward/left/backward/right by its degree value."""
    deg = math.degrees(yaw) % 360.0
    e1, e2, e3, e4 = rules.orientation_edges_deg
    if deg >= e4 or deg < e1:
        return "forward"
    if deg < e2:
        return "left"
    if deg < e3:
        return "backward"
    return "right"


def relation_text(target: Box3D, anchor: Box3D,
                  rules: AnnotationRules = AnnotationRules()) -> tuple[str, str]:
    """Axis-wise relation of target relative to anchor: (ahead/behind/aligned,
    left/right/center), with strict > threshold comparisons."""
    thr = rules.distance_threshold
    cx = target.center[0] - anchor.center[0]
    cy = target.center[1] - anchor.center[1]
    p1 = "ahead" if cx > thr else ("behind" if cx < -thr else "aligned")
    p2 = "left" if cy > thr else ("right" if cy < -thr else "center")
    return p1, p2


def _cars(boxes) -> list[Box3D]:
    return [b for b in boxes if b.class_name == "car"]


def quantity_text(boxes, rules: AnnotationRules = AnnotationRules()) -> str:
    n = len(_cars(boxes))
    if n == 0:
        return "No car."
    if n <= rules.quantity_pivot:
        word = NUMBER_WORDS[n - 1].capitalize()
        return f"{word} car." if n == 1 else f"{word} cars."
    return f"More than {NUMBER_WORDS[rules.quantity_pivot - 1]} cars."


def location_text(boxes, rules: AnnotationRules = AnnotationRules()) -> str:
    """Co-occurrence clauses: one per distinct non-car class, canonical order."""
    if not _cars(boxes):
        return "No car."
    present = {b.class_name for b in boxes if b.class_name != "car"}
    ordered = [c for c in rules.class_order if c in present]
    ordered += sorted(present - set(rules.class_order))
    return " ".join(f"One car is around one {cls}." for cls in ordered)


def orientation_text(boxes, rules: AnnotationRules = AnnotationRules()) -> str:
    cars = _cars(boxes)
    if not cars:
        return "No car."
    bins = {orientation_bin(b.yaw, rules) for b in cars}
    return " ".join(f"One car is facing {b}." for b in ORIENTATION_ORDER if b in bins)


def weather_text(meta: SceneMeta) -> str:
    return "Rainy." if meta.weather == "rainy" else "Sunny."


def time_text(meta: SceneMeta) -> str:
    return "Night." if meta.time == "night" else "Day."


def annotate_scene(boxes, meta: SceneMeta, rules: AnnotationRules = AnnotationRules(),
                   template="qua_loc_ori_wea_tim") -> tuple[str, dict[str, str]]:
    """Build (prompt, parts) for one scene; empty parts are skipped at join time."""
    builders = {
        "quantity": lambda: quantity_text(boxes, rules),
        "location": lambda: location_text(boxes, rules),
        "orientation": lambda: orientation_text(boxes, rules),
        "weather": lambda: weather_text(meta),
        "time": lambda: time_text(meta),
    }
    parts = {name: builders[name]() for name in parse_template(template)}
    prompt = " ".join(text for text in parts.values() if text)
    return prompt, parts


def box_to_dict(box: Box3D) -> dict:
    return {"class": box.class_name, "center": list(box.center),
            "size": list(box.size), "yaw": box.yaw}


def box_from_dict(d: dict) -> Box3D:
    return Box3D(center=tuple(d["center"]), size=tuple(d["size"]),
                 yaw=float(d.get("yaw", 0.0)), class_name=d.get("class", "car"))


def write_sidecar(path, boxes, meta: SceneMeta, extra: dict | None = None) -> None:
    """One-line JSONL sidecar: boxes, weather, time, plus optional extras."""
    rec = {"boxes": [box_to_dict(b) for b in boxes],
           "weather": meta.weather, "time": meta.time}
    if extra:
        rec.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_sidecar(path) -> tuple[list[Box3D], SceneMeta, dict]:
    with open(path, "r", encoding="utf-8") as f:
        rec = json.loads(f.readline())
    boxes = [box_from_dict(d) for d in rec.get("boxes", [])]
    meta = SceneMeta(weather=rec.get("weather", "sunny"), time=rec.get("time", "day"))
    return boxes, meta, rec
