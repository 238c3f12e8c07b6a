"""Caption refinement against ground truth and maneuver intent.

Two rules, applied in order:
  * hallucination removal: mentions of known dynamic-object nouns whose
    class has no ground-truth presence are deleted (with provenance);
  * completion: ground-truth classes the caption never mentions are
    appended ("<k> vehicles ahead"), and a maneuver tag is appended when
    none is present.

Refinement is idempotent: a refined caption mentions exactly the classes
ground truth supports, so a second pass removes and appends nothing.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

# noun -> canonical class; anything here can be checked against GT
NOUN_CLASSES = {
    "vehicle": "vehicle", "car": "vehicle", "truck": "vehicle",
    "bus": "vehicle", "van": "vehicle",
    "pedestrian": "pedestrian", "person": "pedestrian",
    "people": "pedestrian", "walker": "pedestrian",
    "barrier": "barrier", "obstacle": "barrier", "cone": "barrier",
    "dog": "animal", "cat": "animal", "animal": "animal",
    "bicycle": "cyclist", "cyclist": "cyclist", "bike": "cyclist",
}

MANEUVER_TAGS = ("turning left", "turning right", "going straight",
                 "stopping")

_COUNT = r"(?:\d+|a|an|one|two|three|four|five|six|seven|several|some|many)"


def _mention_re(noun: str) -> re.Pattern:
    return re.compile(
        rf"(?:\b{_COUNT}\s+)?\b{noun}s?\b", re.IGNORECASE)


@dataclass
class RefinedCaption:
    frame_id: str
    raw: str
    refined: str
    removed: list = field(default_factory=list)
    appended: list = field(default_factory=list)
    maneuver: str = ""

    def to_dict(self):
        return {"frame_id": self.frame_id, "raw": self.raw,
                "refined": self.refined, "removed": self.removed,
                "appended": self.appended, "maneuver": self.maneuver}


def maneuver_from_expert(expert: np.ndarray) -> str:
    """Classify the GT future: turn direction, stopping, or straight."""
    yaw_change = expert[-1, 2] - expert[0, 2]
    yaw_change = float(np.arctan2(np.sin(yaw_change), np.cos(yaw_change)))
    if yaw_change > 0.15:
        return "turning left"
    if yaw_change < -0.15:
        return "turning right"
    v0, v1 = float(expert[0, 3]), float(expert[-1, 3])
    if v1 < 0.3 and v1 < 0.6 * max(v0, 1e-9):
        return "stopping"
    return "going straight"


def _class_presence(frame) -> dict[str, bool]:
    return {
        "vehicle": frame.vehicle_count > 0,
        "pedestrian": frame.pedestrian_present,
        "barrier": frame.barrier_present,
        "animal": False,          # the synthetic world has none
        "cyclist": False,
    }


def _tidy(text: str) -> str:
    text = re.sub(r"\s{2,}", " ", text)
    text = re.sub(r"\s+([;,.])", r"\1", text)
    text = re.sub(r"([;,])\s*(?=[;,])", "", text)
    text = re.sub(r"^[;,.\s]+", "", text)
    text = re.sub(r"[;,\s]+$", "", text)
    return text


def refine_caption(frame, raw: str, maneuver: str | None = None) -> RefinedCaption:
    present = _class_presence(frame)
    maneuver = maneuver or maneuver_from_expert(frame.expert)
    text = raw
    removed = []
    mentioned: set[str] = set()
    for noun, cls in NOUN_CLASSES.items():
        pattern = _mention_re(noun)
        if not pattern.search(text):
            continue
        if present[cls]:
            mentioned.add(cls)
        else:
            for m in pattern.findall(text):
                removed.append(m.strip())
            text = pattern.sub("", text)
    text = _tidy(text)
    appended = []
    if present["vehicle"] and "vehicle" not in mentioned:
        appended.append(f"{frame.vehicle_count} vehicles ahead")
    if present["pedestrian"] and "pedestrian" not in mentioned:
        appended.append("pedestrians nearby")
    if present["barrier"] and "barrier" not in mentioned:
        appended.append("barriers on the road")
    if not any(tag in text for tag in MANEUVER_TAGS):
        appended.append(f"ego {maneuver}")
    refined = text
    for part in appended:
        refined = f"{refined}; {part}" if refined else part
    refined = _tidy(refined)
    return RefinedCaption(frame_id=frame.frame_id, raw=raw, refined=refined,
                          removed=removed, appended=appended,
                          maneuver=maneuver)
