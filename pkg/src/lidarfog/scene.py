"""Test scenes: planar targets with stochastic surface reflectivity.

Coordinates are sensor-centred: x along boresight, y to the left, z up from
the chamber floor. A target is a set of axis-aligned rectangles in the plane
``x = range_m``, all facing the sensor.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RETRO_THRESHOLD = 100.0
DEFAULT_CHAMBER_LENGTH = 30.0
DEFAULT_SENSOR_HEIGHT = 1.25


class SceneError(ValueError):
    pass


class UnknownTemplate(SceneError):
    pass


class RangeOutOfChamber(SceneError):
    pass


class OverlappingTargets(SceneError):
    pass


class ReflectorClass(str, enum.Enum):
    DIFFUSE = "diffuse"
    RETRO = "retro"


def classify_reflectivity(value: float) -> ReflectorClass:
    """Diffuse below 100 on the byte scale, retro-reflective from 100 up."""
    return ReflectorClass.DIFFUSE if value < RETRO_THRESHOLD else ReflectorClass.RETRO


@dataclass(frozen=True)
class ReflectivityDistribution:
    mean: float
    std_dev: float
    clamp_min: float = 0.0
    clamp_max: float = 255.0

    def __post_init__(self):
        if not 0.0 <= self.clamp_min <= self.mean <= self.clamp_max <= 255.0:
            raise SceneError(
                f"need 0 <= clamp_min <= mean <= clamp_max <= 255, got "
                f"{self.clamp_min}, {self.mean}, {self.clamp_max}"
            )
        if self.std_dev < 0:
            raise SceneError("std_dev must be >= 0")


@dataclass(frozen=True)
class TargetPart:
    """One rectangle of a target, located relative to the target's anchor.

    ``center_y`` is the lateral offset of the rectangle centre from the
    target offset, ``bottom_z`` the height of its lower edge above the
    target base height.
    """

    part_id: str
    reflectivity: ReflectivityDistribution
    width: float
    height: float
    center_y: float = 0.0
    bottom_z: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise SceneError(f"part {self.part_id!r} needs positive width and height")

    @property
    def reflector_class(self) -> ReflectorClass:
        return classify_reflectivity(self.reflectivity.mean)

    def _local_box(self) -> tuple[float, float, float, float]:
        half = 0.5 * self.width
        return (self.center_y - half, self.center_y + half,
                self.bottom_z, self.bottom_z + self.height)


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[1] and b[0] < a[1] and a[2] < b[3] and b[2] < a[3]


@dataclass(frozen=True)
class TargetSpec:
    target_id: str
    parts: tuple[TargetPart, ...]
    range_m: float
    offset_m: float = 0.0
    height_m: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if self.range_m <= 0:
            raise SceneError(f"target {self.target_id!r}: range must be > 0")
        if not self.parts:
            raise SceneError(f"target {self.target_id!r} has no parts")
        ids = [p.part_id for p in self.parts]
        if len(set(ids)) != len(ids):
            raise SceneError(f"target {self.target_id!r} has duplicate part ids")
        boxes = [p._local_box() for p in self.parts]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if _boxes_overlap(boxes[i], boxes[j]):
                    raise SceneError(
                        f"target {self.target_id!r}: parts {ids[i]!r} and {ids[j]!r} overlap"
                    )

    def part(self, part_id: str) -> TargetPart:
        for p in self.parts:
            if p.part_id == part_id:
                return p
        raise KeyError(part_id)

    def part_boxes(self) -> np.ndarray:
        """(n_parts, 4) array of world boxes ``y_lo, y_hi, z_lo, z_hi``."""
        out = np.empty((len(self.parts), 4))
        for i, p in enumerate(self.parts):
            y0, y1, z0, z1 = p._local_box()
            out[i] = (self.offset_m + y0, self.offset_m + y1,
                      self.height_m + z0, self.height_m + z1)
        return out

    def angular_box(self, sensor_height: float) -> tuple[float, float, float, float]:
        """Azimuth and elevation extent (radians) as seen from the sensor."""
        boxes = self.part_boxes()
        y_lo, y_hi = boxes[:, 0].min(), boxes[:, 1].max()
        z_lo, z_hi = boxes[:, 2].min(), boxes[:, 3].max()
        r = self.range_m
        return (math.atan2(y_lo, r), math.atan2(y_hi, r),
                math.atan2(z_lo - sensor_height, r), math.atan2(z_hi - sensor_height, r))


@dataclass(frozen=True)
class Scene:
    targets: tuple[TargetSpec, ...] = ()
    chamber_length: float = DEFAULT_CHAMBER_LENGTH
    sensor_height: float = DEFAULT_SENSOR_HEIGHT

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        ids = [t.target_id for t in self.targets]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate target ids in scene")

    def target(self, target_id: str) -> TargetSpec:
        for t in self.targets:
            if t.target_id == target_id:
                return t
        raise KeyError(target_id)

    def to_dict(self) -> dict:
        return {
            "chamber_length_m": self.chamber_length,
            "sensor_height_m": self.sensor_height,
            "targets": [
                {
                    "target_id": t.target_id,
                    "range_m": t.range_m,
                    "offset_m": t.offset_m,
                    "height_m": t.height_m,
                    "parts": [
                        {
                            "part_id": p.part_id,
                            "mean": p.reflectivity.mean,
                            "std_dev": p.reflectivity.std_dev,
                            "clamp_min": p.reflectivity.clamp_min,
                            "clamp_max": p.reflectivity.clamp_max,
                            "width": p.width,
                            "height": p.height,
                            "center_y": p.center_y,
                            "bottom_z": p.bottom_z,
                        }
                        for p in t.parts
                    ],
                }
                for t in self.targets
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        targets = []
        for t in d.get("targets", []):
            parts = [
                TargetPart(
                    part_id=p["part_id"],
                    reflectivity=ReflectivityDistribution(
                        p["mean"], p["std_dev"], p.get("clamp_min", 0.0), p.get("clamp_max", 255.0)
                    ),
                    width=p["width"],
                    height=p["height"],
                    center_y=p.get("center_y", 0.0),
                    bottom_z=p.get("bottom_z", 0.0),
                )
                for p in t["parts"]
            ]
            targets.append(TargetSpec(t["target_id"], tuple(parts), t["range_m"],
                                      t.get("offset_m", 0.0), t.get("height_m", 0.0)))
        return cls(tuple(targets), d.get("chamber_length_m", DEFAULT_CHAMBER_LENGTH),
                   d.get("sensor_height_m", DEFAULT_SENSOR_HEIGHT))


# --- templates -------------------------------------------------------------

BOARD_STD = 1.0
COMPOSITE_STD = 5.0


def _board(mean: float) -> tuple[TargetPart, ...]:
    return (TargetPart("board", ReflectivityDistribution(mean, BOARD_STD), 0.5, 0.5),)


def _dist(mean: float) -> ReflectivityDistribution:
    return ReflectivityDistribution(mean, COMPOSITE_STD)


# name -> (parts, default base height in m). Means are clear-air averages at 15 m.
TEMPLATES: dict[str, tuple[tuple[TargetPart, ...], float]] = {
    "board_A": (_board(2.75), 1.0),
    "board_B": (_board(22.2), 1.0),
    "board_C": (_board(45.54), 1.0),
    "dummy_model": (
        (
            TargetPart("lower", _dist(2.67), 0.40, 0.85, 0.0, 0.0),
            TargetPart("upper", _dist(17.7), 0.45, 0.85, 0.0, 0.90),
        ),
        0.0,
    ),
    "car": (
        (
            TargetPart("plate", _dist(133.04), 0.52, 0.15, 0.0, 0.35),
            TargetPart("strong", _dist(15.6), 1.75, 0.40, 0.0, 0.55),
            TargetPart("weak", _dist(1.17), 1.40, 0.45, 0.0, 1.00),
        ),
        0.0,
    ),
    "traffic_sign_1": ((TargetPart("sign", _dist(169.9), 0.6, 0.6),), 1.0),
    "traffic_sign_2": ((TargetPart("sign", _dist(209.2), 0.6, 0.6),), 1.0),
}


@dataclass(frozen=True)
class TargetPlacement:
    template: str
    range_m: float
    offset_m: float = 0.0
    height_m: float | None = None
    target_id: str | None = None


@dataclass(frozen=True)
class SceneConfig:
    targets: tuple[TargetPlacement, ...] = ()
    chamber_length_m: float = DEFAULT_CHAMBER_LENGTH
    sensor_height_m: float = DEFAULT_SENSOR_HEIGHT

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {"template", "range_m", "offset_m", "height_m", "target_id"}
        placements = []
        for i, t in enumerate(d.get("targets", [])):
            extra = set(t) - known
            if extra:
                raise SceneError(f"targets[{i}]: unknown fields {sorted(extra)}")
            if "template" not in t or "range_m" not in t:
                raise SceneError(f"targets[{i}]: 'template' and 'range_m' are required")
            placements.append(TargetPlacement(**t))
        return cls(tuple(placements),
                   d.get("chamber_length_m", DEFAULT_CHAMBER_LENGTH),
                   d.get("sensor_height_m", DEFAULT_SENSOR_HEIGHT))

    @classmethod
    def load(cls, path: str | Path) -> "SceneConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "targets": [
                {k: v for k, v in vars(p).items() if v is not None} for p in self.targets
            ],
            "chamber_length_m": self.chamber_length_m,
            "sensor_height_m": self.sensor_height_m,
        }


def build_scene(config: SceneConfig) -> Scene:
    targets = []
    seen: dict[str, int] = {}
    for pl in config.targets:
        if pl.template not in TEMPLATES:
            raise UnknownTemplate(f"unknown target template {pl.template!r}")
        if not 0 < pl.range_m <= config.chamber_length_m:
            raise RangeOutOfChamber(
                f"{pl.template} at {pl.range_m} m outside (0, {config.chamber_length_m}]"
            )
        parts, base = TEMPLATES[pl.template]
        tid = pl.target_id
        if tid is None:
            seen[pl.template] = seen.get(pl.template, 0) + 1
            tid = pl.template if seen[pl.template] == 1 else f"{pl.template}_{seen[pl.template]}"
        height = base if pl.height_m is None else pl.height_m
        targets.append(TargetSpec(tid, parts, pl.range_m, pl.offset_m, height))

    boxes = [t.angular_box(config.sensor_height_m) for t in targets]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if _boxes_overlap(boxes[i], boxes[j]):
                raise OverlappingTargets(
                    f"{targets[i].target_id} and {targets[j].target_id} overlap in the sensor view"
                )
    return Scene(tuple(targets), config.chamber_length_m, config.sensor_height_m)


def sample_reflectivity(part: TargetPart, rng: np.random.Generator, size=None):
    """Gaussian surface byte for ``part``, clamped to its bounds."""
    d = part.reflectivity
    if d.std_dev == 0:
        return d.mean if size is None else np.full(size, d.mean)
    draw = rng.normal(d.mean, d.std_dev, size=size)
    out = np.clip(draw, d.clamp_min, d.clamp_max)
    return float(out) if size is None else out


# --- ray casting -----------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]


@dataclass(frozen=True)
class Hit:
    range: float
    target_id: str
    part_id: str


@dataclass
class _PartTable:
    """All part rectangles of a scene flattened for vectorised casting."""

    x: np.ndarray
    boxes: np.ndarray
    target_index: np.ndarray
    refs: list[tuple[str, str]] = field(default_factory=list)


def _part_table(scene: Scene) -> _PartTable:
    xs, boxes, tidx, refs = [], [], [], []
    for ti, t in enumerate(scene.targets):
        for p, box in zip(t.parts, t.part_boxes()):
            xs.append(t.range_m)
            boxes.append(box)
            tidx.append(ti)
            refs.append((t.target_id, p.part_id))
    return _PartTable(np.asarray(xs, dtype=float), np.asarray(boxes, dtype=float).reshape(-1, 4),
                      np.asarray(tidx, dtype=int), refs)


def intersect_many(scene: Scene, origins: np.ndarray, directions: np.ndarray):
    """Cast many rays at once.

    Returns ``(ranges, part_index)``; rays that miss get ``inf`` and ``-1``.
    ``part_index`` indexes :func:`part_refs`.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    origins = np.broadcast_to(origins, directions.shape)
    n = directions.shape[0]
    best = np.full(n, np.inf)
    which = np.full(n, -1, dtype=int)
    table = _part_table(scene)
    dx = directions[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(table.x.size):
            t = (table.x[k] - origins[:, 0]) / dx
            y = origins[:, 1] + t * directions[:, 1]
            z = origins[:, 2] + t * directions[:, 2]
            y0, y1, z0, z1 = table.boxes[k]
            ok = (dx > 0) & (t > 0) & (y >= y0) & (y <= y1) & (z >= z0) & (z <= z1) & (t < best)
            best[ok] = t[ok]
            which[ok] = k
    return best, which


def part_refs(scene: Scene) -> list[tuple[str, str]]:
    """``(target_id, part_id)`` per flattened part index used by :func:`intersect_many`."""
    return _part_table(scene).refs


def intersect(scene: Scene, ray: Ray) -> Hit | None:
    """Nearest target hit along ``ray`` (unit direction), or None."""
    ranges, which = intersect_many(scene, np.asarray(ray.origin)[None, :],
                                   np.asarray(ray.direction)[None, :])
    if which[0] < 0:
        return None
    tid, pid = part_refs(scene)[which[0]]
    return Hit(float(ranges[0]), tid, pid)
