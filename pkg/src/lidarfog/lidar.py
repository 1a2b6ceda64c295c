"""Scanning time-of-flight sensor model.

Each beam of each frame goes through the same chain: cast against the scene,
look up the surface byte of the spot it hits, turn it into received power
through the fog, add a near-field backscatter candidate, then threshold.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from .atmosphere import (
    KOSCHMIEDER_CONSTANT,
    FogState,
    VisibilityTrace,
    extinction_from_visibility,
    wet_reflectivity,
)
from .rng import substream
from .scene import Scene, intersect_many, part_refs, sample_reflectivity

C_LIGHT = 299_792_458.0

# Published VLP-32C laser elevations (deg), sorted bottom to top: 40 deg span,
# 0.333 deg minimum spacing around the horizon.
VLP32C_ELEVATIONS = (
    -25.0, -15.639, -11.31, -8.843, -7.254, -6.148, -5.333, -4.667,
    -4.0, -3.667, -3.333, -3.0, -2.667, -2.333, -2.0, -1.667,
    -1.333, -1.0, -0.667, -0.333, 0.0, 0.333, 0.667, 1.0,
    1.333, 1.667, 2.333, 3.333, 4.667, 7.0, 10.333, 15.0,
)


@dataclass(frozen=True)
class LidarConfig:
    n_rings: int = 32
    vertical_fov: float = 40.0                 # deg
    azimuth_codes_per_rev: int = 1800
    frame_rate: float = 10.0                   # Hz
    range_accuracy_sigma: float = 0.05         # m
    max_range: float = 200.0                   # m
    pulse_energy: float = 1e-6                 # J
    aperture_area: float = 1e-3                # m^2
    system_efficiency: float = 0.5
    noise_floor: float = 6.6e-8                # W
    detection_threshold_factor: float = 4.0
    threshold_jitter: float = 0.1              # relative std of the threshold
    backscatter_gain: float = 1.6e-6           # W m^2 per (1/m)
    clutter_r_min: float = 1.0                 # m, receiver overlap limit
    clutter_jitter: float = 1.0                # m
    clutter_speckle: bool = True               # exponential fluctuation of fog echoes
    retro_boost: float = 9.0
    reflectivity_noise_std: float = 0.5        # byte
    koschmieder_constant: float = KOSCHMIEDER_CONSTANT
    echo_fading: float = 0.6                   # log-std of each beam's echo power in fog
    fading_time: float = 5.0                   # s, correlation time of the fading
    wetness_gain: float = 0.0
    wetness_scale: float = 50.0                # m
    azimuth_window: tuple[int, int] | None = None  # inclusive code range; None = fit the scene
    window_margin: int = 3                     # codes added either side of an automatic window

    def __post_init__(self):
        if self.n_rings < 1:
            raise ValueError("n_rings must be >= 1")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be > 0")
        if self.range_accuracy_sigma <= 0:
            raise ValueError("range_accuracy_sigma must be > 0")
        if self.echo_fading < 0 or self.fading_time <= 0:
            raise ValueError("echo_fading must be >= 0 and fading_time > 0")
        if self.detection_threshold_factor <= 1:
            raise ValueError("detection_threshold_factor must be > 1")
        if self.azimuth_window is not None:
            lo, hi = self.azimuth_window
            object.__setattr__(self, "azimuth_window", (int(lo), int(hi)))
            if not 0 <= lo <= hi < self.azimuth_codes_per_rev:
                raise ValueError("azimuth_window must be an ordered pair of valid codes")

    @property
    def ring_elevations(self) -> np.ndarray:
        """Elevation of each ring in degrees, ring 0 lowest."""
        if self.n_rings == 32 and self.vertical_fov == 40.0:
            return np.array(VLP32C_ELEVATIONS)
        if self.n_rings == 1:
            return np.zeros(1)
        return np.linspace(-0.625 * self.vertical_fov, 0.375 * self.vertical_fov, self.n_rings)

    @property
    def azimuth_resolution(self) -> float:
        return 360.0 / self.azimuth_codes_per_rev

    @property
    def radiometric_constant(self) -> float:
        """``E_p c eta A / 2``, the range-independent factor of the power model."""
        return self.pulse_energy * C_LIGHT * self.system_efficiency * self.aperture_area / 2.0

    @property
    def threshold(self) -> float:
        return self.detection_threshold_factor * self.noise_floor

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["azimuth_window"] is not None:
            d["azimuth_window"] = list(d["azimuth_window"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LidarConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown lidar config fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("azimuth_window") is not None:
            d["azimuth_window"] = tuple(d["azimuth_window"])
        return cls(**d)

    def with_overrides(self, **kw) -> "LidarConfig":
        return replace(self, **kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def azimuth_angle(code, config: LidarConfig):
    """Azimuth (rad) of a code; code ``codes_per_rev // 2`` looks down the boresight."""
    half = config.azimuth_codes_per_rev // 2
    return np.deg2rad((np.asarray(code) - half) * config.azimuth_resolution)


def azimuth_code(angle, config: LidarConfig):
    half = config.azimuth_codes_per_rev // 2
    code = np.round(np.rad2deg(angle) / config.azimuth_resolution).astype(int) + half
    return np.mod(code, config.azimuth_codes_per_rev)


def beam_directions(rings, codes, config: LidarConfig) -> np.ndarray:
    el = np.deg2rad(config.ring_elevations[np.asarray(rings)])
    az = azimuth_angle(codes, config)
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)


# --- radiometry ------------------------------------------------------------

class NonPositiveRange(ValueError):
    pass


def received_power(pulse_energy, aperture_area, efficiency, range_m, gamma, extinction):
    """Received echo power of a Lambertian target through homogeneous fog.

    ``P = E_p c eta A / (2 R^2) * (gamma / pi) * exp(-2 alpha R)``.
    """
    r = np.asarray(range_m, dtype=float)
    if np.any(~(r > 0)):
        raise NonPositiveRange("range must be > 0")
    p = (pulse_energy * C_LIGHT * efficiency * aperture_area / (2.0 * r * r)
         * (np.asarray(gamma, dtype=float) / math.pi)
         * np.exp(-2.0 * np.asarray(extinction, dtype=float) * r))
    return float(p) if np.ndim(p) == 0 else p


def byte_to_gamma(reflectivity, retro_boost: float = 9.0):
    """Effective Lambertian reflectance for a reflectivity byte.

    Diffuse bytes map linearly onto [0, 1]; retro bytes above 100 grow past 1
    to stand in for the stronger-than-Lambertian return of retro-reflectors.
    """
    b = np.asarray(reflectivity, dtype=float)
    g = np.where(b <= 100.0, b / 100.0, 1.0 + retro_boost * (b - 100.0) / 155.0)
    return float(g) if g.ndim == 0 else g


def backscatter_profile(r, extinction, gain):
    """Near-field fog echo power at range ``r``: ``gain * alpha * exp(-2 alpha r) / r^2``."""
    r = np.asarray(r, dtype=float)
    return gain * extinction * np.exp(-2.0 * extinction * r) / (r * r)


def backscatter_peak(extinction: float, backscatter_gain: float, r_min: float,
                     jitter: float = 0.0, rng: np.random.Generator | None = None):
    """Strongest fog echo beyond ``r_min`` as ``(range, power)``.

    The profile falls monotonically for r > 0 (both factors shrink), so its
    maximum over ``r >= r_min`` sits at ``r_min``. With ``jitter`` and an rng
    the reported range is pushed out by a half-normal offset.
    """
    if extinction < 0:
        raise ValueError("extinction must be >= 0")
    if extinction == 0:
        return r_min, 0.0
    power = float(backscatter_profile(r_min, extinction, backscatter_gain))
    r = r_min
    if jitter > 0 and rng is not None:
        r = r_min + abs(rng.normal(0.0, jitter))
    return r, power


# --- detection -------------------------------------------------------------

class Outcome(enum.Enum):
    TARGET = "target"
    CLUTTER = "clutter"
    NONE = "none"


@dataclass(frozen=True)
class DetectionOutcome:
    kind: Outcome
    range: float | None = None
    reflectivity: float | None = None


@dataclass(frozen=True)
class LaserReturn:
    ring: int
    azimuth_code: int
    range: float
    reflectivity: float
    timestamp: float


def _threshold(noise_floor, factor, jitter, z):
    return factor * noise_floor * np.maximum(1.0 + jitter * z, 0.05)


def _pick(target_power, clutter_power, tau):
    """Strongest-return selection: 1 = target, 2 = clutter, 0 = nothing."""
    t_ok = target_power > tau
    c_ok = clutter_power > tau
    target_wins = t_ok & ((target_power >= clutter_power) | ~c_ok)
    return np.where(target_wins, 1, np.where(c_ok, 2, 0))


def detect_pulse(target_power: float, clutter: tuple[float, float], noise_floor: float,
                 threshold_factor: float, rng: np.random.Generator, *,
                 target_range: float = math.nan, target_reflectivity: float = math.nan,
                 clutter_reflectivity: float = 1.0, range_sigma: float = 0.05,
                 threshold_jitter: float = 0.1) -> DetectionOutcome:
    """Threshold one beam's candidates; the strongest one above threshold wins."""
    if target_power < 0 or clutter[1] < 0:
        raise ValueError("powers must be >= 0")
    tau = _threshold(noise_floor, threshold_factor, threshold_jitter, rng.standard_normal())
    choice = _pick(np.float64(target_power), np.float64(clutter[1]), tau)
    if choice == 1:
        return DetectionOutcome(Outcome.TARGET, target_range + rng.normal(0.0, range_sigma),
                                target_reflectivity)
    if choice == 2:
        return DetectionOutcome(Outcome.CLUTTER, clutter[0], clutter_reflectivity)
    return DetectionOutcome(Outcome.NONE)


# --- frames ----------------------------------------------------------------

@dataclass
class BeamGrid:
    """Static per-beam geometry for one scene, flattened ring-major."""

    rings: np.ndarray
    codes: np.ndarray
    hit_range: np.ndarray       # inf where the beam misses
    part_index: np.ndarray      # -1 where the beam misses
    surface_byte: np.ndarray    # nan where the beam misses
    refs: list[tuple[str, str]] = field(default_factory=list)

    @property
    def hit(self) -> np.ndarray:
        return self.part_index >= 0

    def __len__(self) -> int:
        return self.rings.size


def scene_window(scene: Scene, config: LidarConfig) -> tuple[int, int]:
    """Azimuth code range covering every target, plus a margin."""
    if config.azimuth_window is not None:
        return config.azimuth_window
    half = config.azimuth_codes_per_rev // 2
    if not scene.targets:
        return half - 20, half + 20
    los, his = [], []
    for t in scene.targets:
        a0, a1, _, _ = t.angular_box(scene.sensor_height)
        los.append(a0)
        his.append(a1)
    res = np.deg2rad(config.azimuth_resolution)
    lo = int(math.floor(min(los) / res)) + half - config.window_margin
    hi = int(math.ceil(max(his) / res)) + half + config.window_margin
    return max(lo, 0), min(hi, config.azimuth_codes_per_rev - 1)


def prepare_beams(scene: Scene, config: LidarConfig, surface: int | np.random.Generator) -> BeamGrid:
    """Cast the azimuth window once and fix the surface byte of every lit spot.

    ``surface`` is either a seed, in which case each spot's byte comes from
    its own ``(seed, "surface", ring, code)`` substream, or a generator
    drawn from in beam order.
    """
    lo, hi = scene_window(scene, config)
    codes_1d = np.arange(lo, hi + 1)
    rings, codes = np.meshgrid(np.arange(config.n_rings), codes_1d, indexing="ij")
    rings, codes = rings.ravel(), codes.ravel()
    dirs = beam_directions(rings, codes, config)
    origin = np.array([0.0, 0.0, scene.sensor_height])
    hit_range, part_index = intersect_many(scene, origin[None, :], dirs)
    refs = part_refs(scene)
    parts = [scene.target(tid).part(pid) for tid, pid in refs]
    surface_byte = np.full(rings.size, np.nan)
    for i in np.flatnonzero(part_index >= 0):
        part = parts[part_index[i]]
        if isinstance(surface, np.random.Generator):
            rng = surface
        else:
            rng = substream(surface, "surface", int(rings[i]), int(codes[i]))
        surface_byte[i] = sample_reflectivity(part, rng)
    return BeamGrid(rings, codes, hit_range, part_index, surface_byte, refs)


class FrameReturns(NamedTuple):
    index: np.ndarray      # beam index into the grid
    range_m: np.ndarray
    refl: np.ndarray
    is_clutter: np.ndarray


def simulate_frame(beams: BeamGrid, fog: FogState, config: LidarConfig,
                   rng: np.random.Generator, fading: np.ndarray | None = None) -> FrameReturns:
    """One frame over a prepared beam grid. Draw order is fixed per frame.

    ``fading`` multiplies the target echo power of each beam.
    """
    n = len(beams)
    z_thr = rng.standard_normal(n)
    speckle = rng.standard_exponential(n)
    z_clutter = rng.standard_normal(n)
    z_range = rng.standard_normal(n)
    z_refl = rng.standard_normal(n)

    alpha = fog.extinction
    hit = beams.hit
    r_true = np.where(hit, beams.hit_range, 1.0)
    byte = np.where(hit, beams.surface_byte, 0.0)
    if config.wetness_gain > 0 and alpha > 0:
        byte = wet_reflectivity(byte, fog.visibility, config.wetness_gain, config.wetness_scale)
    gamma = byte_to_gamma(byte, config.retro_boost)
    p_target = np.where(
        hit,
        received_power(config.pulse_energy, config.aperture_area, config.system_efficiency,
                       r_true, gamma, alpha),
        0.0,
    )
    if fading is not None:
        p_target = p_target * fading

    r_c, p_c = backscatter_peak(alpha, config.backscatter_gain, config.clutter_r_min)
    p_clutter = np.full(n, p_c)
    if config.clutter_speckle:
        p_clutter = p_clutter * speckle
    clutter_range = r_c + np.abs(z_clutter) * config.clutter_jitter
    clutter_range = np.where(hit, np.minimum(clutter_range, 0.9 * r_true), clutter_range)

    tau = _threshold(config.noise_floor, config.detection_threshold_factor,
                     config.threshold_jitter, z_thr)
    choice = _pick(p_target, p_clutter, tau)

    rng_out = np.where(choice == 1, r_true + config.range_accuracy_sigma * z_range, clutter_range)
    refl_target = byte * np.exp(-alpha * r_true) + config.reflectivity_noise_std * z_refl
    refl_clutter = np.abs(z_refl)
    refl_out = np.clip(np.where(choice == 1, refl_target, refl_clutter), 0.0, 255.0)

    keep = (choice > 0) & (rng_out > 0) & (rng_out <= config.max_range)
    idx = np.flatnonzero(keep)
    return FrameReturns(idx, np.round(rng_out[idx], 4), np.round(refl_out[idx], 2),
                        choice[idx] == 2)


def scan_frame(scene: Scene, fog_state: FogState, config: LidarConfig, t: float,
               rng: np.random.Generator, beams: BeamGrid | None = None) -> list[LaserReturn]:
    """All returns of a single frame at time ``t``.

    Without a prepared ``beams`` grid, surface bytes are drawn from ``rng``.
    """
    if beams is None:
        beams = prepare_beams(scene, config, rng)
    out = simulate_frame(beams, fog_state, config, rng)
    return [
        LaserReturn(int(beams.rings[i]), int(beams.codes[i]), float(r), float(b), float(t))
        for i, r, b in zip(out.index, out.range_m, out.refl)
    ]


def _frame_times(n_frames: int, t0: float, frame_rate: float) -> np.ndarray:
    return t0 + np.arange(n_frames) / frame_rate


def echo_fading(n_seconds: int, n_beams: int, config: LidarConfig, seed: int) -> np.ndarray | None:
    """Per-second, per-beam echo power factors ``exp(xi)``; ``xi`` is AR(1) in time.

    Droplets drifting through each beam make its echo flicker for seconds at
    a time. A fixed spread in log power is a large relative change for a
    faint echo and a small one for a strong echo. ``None`` when disabled.
    """
    s = config.echo_fading
    if s == 0 or n_seconds == 0:
        return None
    rng = substream(seed, "echo_fading")
    rho = math.exp(-1.0 / config.fading_time)
    xi = np.empty((n_seconds, n_beams))
    xi[0] = s * rng.standard_normal(n_beams)
    innov = s * math.sqrt(1.0 - rho * rho)
    for k in range(1, n_seconds):
        xi[k] = rho * xi[k - 1] + innov * rng.standard_normal(n_beams)
    return np.exp(xi)


def _run_frames(args):
    beams, config, seed, tag, visibilities, clear, frame_ids, t0, fading = args
    cols = [[], [], [], [], []]
    for k, vis in zip(frame_ids, visibilities):
        fog = FogState.clear() if clear else FogState(vis, extinction_from_visibility(
            vis, config.koschmieder_constant))
        rng = substream(seed, "frame", tag, int(k))
        factor = None if fading is None else fading[int(k // config.frame_rate)]
        out = simulate_frame(beams, fog, config, rng, factor)
        # k / rate is correctly rounded; k * (1 / rate) is not
        t = t0 + k / config.frame_rate
        cols[0].append(np.full(out.index.size, t))
        cols[1].append(beams.rings[out.index])
        cols[2].append(beams.codes[out.index])
        cols[3].append(out.range_m)
        cols[4].append(out.refl)
    return [np.concatenate(c) if c else np.empty(0) for c in cols]


def simulate_test(scene: Scene, trace: VisibilityTrace, config: LidarConfig, seed: int, *,
                  clear: bool = False, jobs: int = 1):
    """Record a whole fog test (or, with ``clear``, a fog-free reference).

    Frames run at ``config.frame_rate`` over ``[t0, t1)``; the fog holds each
    1 Hz visibility sample for a full second. Surface bytes depend only on
    ``seed``, so a reference and a fog run sharing a seed see the same
    targets. Results do not depend on ``jobs``.
    """
    from .recording import Recording

    beams = prepare_beams(scene, config, seed)
    n_frames = int(round(trace.duration * config.frame_rate))
    times = _frame_times(n_frames, trace.t0, config.frame_rate)
    vis = trace.at(times) if n_frames else np.empty(0)
    tag = "clear" if clear else "fog"
    ids = np.arange(n_frames)
    fading = None if clear else echo_fading(int(math.ceil(trace.duration)), len(beams), config, seed)

    if jobs > 1 and n_frames > 0:
        chunks = np.array_split(ids, jobs)
        tasks = [(beams, config, seed, tag, vis[c], clear, c, trace.t0, fading)
                 for c in chunks if c.size]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_frames, tasks))
        cols = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    else:
        cols = _run_frames((beams, config, seed, tag, vis, clear, ids, trace.t0, fading))

    return Recording(
        t=cols[0].astype(float), ring=cols[1].astype(np.int16), az=cols[2].astype(np.int16),
        range_m=cols[3].astype(float), refl=cols[4].astype(float),
        trace=trace, scene=scene, config=config, seed=int(seed), clear=clear,
    )


def simulate_reference(scene: Scene, config: LidarConfig, seed: int, duration: int = 10):
    """Fog-free reference recording sharing the surface of ``seed``."""
    trace = VisibilityTrace(0, np.full(duration + 1, 1000.0))
    return simulate_test(scene, trace, config, seed, clear=True)


def detection_rate(reflectivity: float, range_m: float, visibility: float, config: LidarConfig,
                   trials: int = 1000, seed: int = 0) -> float:
    """Fraction of single-beam shots that return the target (not clutter, not nothing)."""
    rng = substream(seed, "detection_rate")
    alpha = extinction_from_visibility(visibility, config.koschmieder_constant)
    gamma = byte_to_gamma(reflectivity, config.retro_boost)
    p_t = received_power(config.pulse_energy, config.aperture_area, config.system_efficiency,
                         range_m, gamma, alpha)
    _, p_c = backscatter_peak(alpha, config.backscatter_gain, config.clutter_r_min)
    z = rng.standard_normal(trials)
    p_clutter = p_c * (rng.standard_exponential(trials) if config.clutter_speckle else 1.0)
    tau = _threshold(config.noise_floor, config.detection_threshold_factor,
                     config.threshold_jitter, z)
    return float(np.mean(_pick(np.full(trials, p_t), p_clutter, tau) == 1))
