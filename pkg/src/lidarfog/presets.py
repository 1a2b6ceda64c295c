"""Tested scenarios of the fog campaign, as ready-made simulation inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .scene import SceneConfig, TargetPlacement


@dataclass(frozen=True)
class TraceSpec:
    """A synthetic dissipation run (see ``atmosphere.dissipation_profile``)."""

    v_start: float = 10.0
    v_end: float = 300.0
    duration: int = 600
    noise_std: float = 0.5


@dataclass(frozen=True)
class Scenario:
    name: str
    scene: SceneConfig
    trace: TraceSpec | str = field(default_factory=TraceSpec)   # str: path to a trace CSV


# left to right as seen from the sensor: A, C in the middle, B, then the dummy
BOARD_LAYOUT = (("board_A", 0.9), ("board_C", 0.0), ("board_B", -0.9), ("dummy_model", -1.9))
SIGN_LAYOUT = (("traffic_sign_1", 0.6), ("traffic_sign_2", -0.6))

BOARD_RANGES = (5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0, 22.5, 25.0, 27.0)
CAR_RANGES = (10.0, 15.0, 20.0, 25.0)
SIGN_RANGES = (10.0, 15.0, 20.0, 22.5, 25.0)


def _layout(layout, r: float, **kw) -> SceneConfig:
    return SceneConfig(tuple(TargetPlacement(t, r, off) for t, off in layout), **kw)


def _name(prefix: str, r: float) -> str:
    return f"{prefix}_{r:g}m".replace(".", "p")


def boards_scenarios(ranges=BOARD_RANGES, trace: TraceSpec = TraceSpec(),
                     layout=BOARD_LAYOUT) -> list[Scenario]:
    return [Scenario(_name("boards", r), _layout(layout, r), trace) for r in ranges]


def car_scenarios(ranges=CAR_RANGES, trace: TraceSpec = TraceSpec()) -> list[Scenario]:
    return [Scenario(_name("car", r), SceneConfig((TargetPlacement("car", r),)), trace) for r in ranges]


def sign_scenarios(ranges=SIGN_RANGES, trace: TraceSpec = TraceSpec()) -> list[Scenario]:
    return [Scenario(_name("signs", r), _layout(SIGN_LAYOUT, r), trace) for r in ranges]


def background_scenario(trace: TraceSpec = TraceSpec()) -> Scenario:
    return Scenario("background", SceneConfig(()), trace)


def staggered_boards(ranges=(10.0, 15.0, 20.0, 25.0), gap_deg: float = 1.0,
                     trace: TraceSpec = TraceSpec()) -> Scenario:
    """All board triplets in one scene, each range in its own azimuth sector.

    One recording then covers every distance, and no board hides another.
    """
    board_layout = [(t, off) for t, off in BOARD_LAYOUT if t.startswith("board_")]
    reach = max(abs(off) for _, off in board_layout) + 0.25      # half a board
    half = [math.degrees(math.atan(reach / r)) for r in ranges]
    total = 2 * sum(half) + gap_deg * (len(ranges) - 1)
    edge = -total / 2
    placements = []
    for r, h in zip(ranges, half):
        y0 = r * math.tan(math.radians(edge + h))
        for t, off in board_layout:
            placements.append(TargetPlacement(t, r, y0 + off, target_id=_name(t, r)))
        edge += 2 * h + gap_deg
    return Scenario("boards_staggered", SceneConfig(tuple(placements)), trace)


def preset(name: str) -> list[Scenario]:
    if name == "paper-boards":
        return boards_scenarios()
    if name == "paper-car":
        return car_scenarios()
    if name == "paper-signs":
        return sign_scenarios()
    if name == "paper-background":
        return [background_scenario()]
    if name == "paper-all":
        return boards_scenarios() + car_scenarios() + sign_scenarios() + [background_scenario()]
    if name == "boards-staggered":
        return [staggered_boards()]
    if name == "smoke":
        short = TraceSpec(duration=240)
        return (boards_scenarios((10.0, 20.0), short) + sign_scenarios((15.0,), short)
                + car_scenarios((15.0,), short))
    raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("paper-boards", "paper-car", "paper-signs", "paper-background", "paper-all",
           "boards-staggered", "smoke")
