"""Fog as seen by a transmissometer: visibility, extinction and transmission."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# -ln(0.02): the 2 % contrast-threshold convention for meteorological visibility.
KOSCHMIEDER_CONSTANT = 3.912

V_MIN = 5.0
V_MAX = 1000.0


class AtmosphereError(ValueError):
    pass


class NonPositiveVisibility(AtmosphereError):
    pass


class InvalidRange(AtmosphereError):
    pass


def extinction_from_visibility(visibility, koschmieder_constant: float = KOSCHMIEDER_CONSTANT):
    """Extinction coefficient (1/m) for a meteorological visibility (m)."""
    v = np.asarray(visibility, dtype=float)
    if koschmieder_constant <= 0:
        raise ValueError("koschmieder_constant must be > 0")
    if np.any(~(v > 0)):
        raise NonPositiveVisibility(f"visibility must be > 0, got {visibility!r}")
    out = koschmieder_constant / v
    return float(out) if out.ndim == 0 else out


def visibility_from_extinction(extinction, koschmieder_constant: float = KOSCHMIEDER_CONSTANT):
    a = np.asarray(extinction, dtype=float)
    if np.any(~(a > 0)):
        raise ValueError("extinction must be > 0")
    out = koschmieder_constant / a
    return float(out) if out.ndim == 0 else out


def transmission(extinction, range_m):
    """Round-trip transmission ``exp(-2 alpha R)`` through homogeneous fog."""
    a = np.asarray(extinction, dtype=float)
    r = np.asarray(range_m, dtype=float)
    if np.any(a < 0) or np.any(r < 0):
        raise ValueError("extinction and range must be >= 0")
    out = np.exp(-2.0 * a * r)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class FogState:
    visibility: float
    extinction: float

    @classmethod
    def from_visibility(cls, visibility: float, koschmieder_constant: float = KOSCHMIEDER_CONSTANT):
        return cls(float(visibility), extinction_from_visibility(visibility, koschmieder_constant))

    @classmethod
    def clear(cls) -> "FogState":
        return cls(math.inf, 0.0)


@dataclass(frozen=True)
class VisibilityTrace:
    """1 Hz visibility series: ``visibility[k]`` holds over ``[t0 + k, t0 + k + 1)``."""

    t0: int
    visibility: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.visibility, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "visibility", v)
        object.__setattr__(self, "t0", int(self.t0))
        if v.ndim != 1 or v.size < 2:
            raise ValueError("a trace needs at least two samples")
        if np.any(v < V_MIN) or np.any(v > V_MAX) or not np.all(np.isfinite(v)):
            raise ValueError(f"visibility samples must lie in [{V_MIN}, {V_MAX}] m")

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(self.visibility.size)

    @property
    def t1(self) -> int:
        return self.t0 + self.visibility.size - 1

    @property
    def duration(self) -> int:
        return self.t1 - self.t0

    def __len__(self) -> int:
        return self.visibility.size

    def at(self, t):
        """Visibility in force at time ``t`` (floor to the 1 Hz sample)."""
        k = np.floor(np.asarray(t, dtype=float)).astype(int) - self.t0
        k = np.clip(k, 0, self.visibility.size - 1)
        out = self.visibility[k]
        return float(out) if np.ndim(out) == 0 else out

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_s", "visibility_m"])
        for t, v in zip(self.t, self.visibility):
            w.writerow([int(t), repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "VisibilityTrace":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "VisibilityTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty visibility trace")
        t = np.array([float(r["t_s"]) for r in rows])
        v = np.array([float(r["visibility_m"]) for r in rows])
        if not np.allclose(np.diff(t), 1.0) or t[0] != int(t[0]):
            raise ValueError("trace timestamps must be whole seconds with 1 s spacing")
        return cls(int(t[0]), v)


def dissipation_profile(v_start: float, v_end: float, duration: int, noise_std: float = 0.0,
                        rng: np.random.Generator | None = None, t0: int = 0) -> VisibilityTrace:
    """Fog clearing from ``v_start`` to ``v_end`` along an exponential-in-time law.

    ``V(t) = v_start * (v_end / v_start) ** (t / duration)``, optionally with
    additive Gaussian noise on every sample after the first.
    """
    if not V_MIN <= v_start < v_end <= V_MAX:
        raise InvalidRange(f"need {V_MIN} <= v_start < v_end <= {V_MAX}")
    if int(duration) != duration or duration < 2:
        raise InvalidRange("duration must be an integer >= 2 s")
    duration = int(duration)
    frac = np.arange(duration + 1) / duration
    v = v_start * (v_end / v_start) ** frac
    v[0], v[-1] = v_start, v_end
    if noise_std > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        v[1:] += rng.normal(0.0, noise_std, size=duration)
        np.clip(v, V_MIN, V_MAX, out=v)
    return VisibilityTrace(t0, v)


def wet_reflectivity(beta, visibility, wetness_gain: float = 0.0, v_scale: float = 50.0):
    """Surface byte darkened by a water film; the film thins as fog clears."""
    if not 0.0 <= wetness_gain < 1.0:
        raise ValueError("wetness_gain must be in [0, 1)")
    if wetness_gain == 0.0:
        return beta
    factor = 1.0 - wetness_gain * np.exp(-np.asarray(visibility, dtype=float) / v_scale)
    out = np.asarray(beta, dtype=float) * factor
    return float(out) if out.ndim == 0 else out
