"""From raw recordings to disappear-visibility samples.

Pipeline: clear-air reference -> laser ROIs -> per-second averages of the fog
run -> the lowest visibility at which a beam stably reads its true range.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .atmosphere import VisibilityTrace
from .lidar import LaserReturn, LidarConfig, beam_directions
from .scene import RETRO_THRESHOLD, Scene, intersect_many, part_refs

FORMAT = "lidarfog-recording/1"
DEFAULT_SIGMA = 0.15
DEFAULT_WINDOW = 5
DEFAULT_SIGMA_ROI = 0.3

DATASET_FIELDS = ["range_m", "reflectivity", "v_dis_m", "target", "part", "ring", "az"]


class EmptyROI(LookupError):
    pass


def _beam_key(ring, az):
    return np.asarray(ring, dtype=np.int64) * 4096 + np.asarray(az, dtype=np.int64)


@dataclass(eq=False)
class Recording:
    """Returns of one test, column-wise, with everything needed to interpret them."""

    t: np.ndarray
    ring: np.ndarray
    az: np.ndarray
    range_m: np.ndarray
    refl: np.ndarray
    trace: VisibilityTrace
    scene: Scene
    config: LidarConfig
    seed: int
    clear: bool = False

    def __post_init__(self):
        n = self.t.size
        if not all(a.size == n for a in (self.ring, self.az, self.range_m, self.refl)):
            raise ValueError("recording columns differ in length")
        if n and (self.t.min() < self.trace.t0 or self.t.max() > self.trace.t1):
            raise ValueError("return timestamps fall outside the visibility trace")

    def __len__(self) -> int:
        return self.t.size

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    @property
    def returns(self) -> list[LaserReturn]:
        return list(self.iter_returns())

    def iter_returns(self) -> Iterator[LaserReturn]:
        for t, r, a, x, b in zip(self.t.tolist(), self.ring.tolist(), self.az.tolist(),
                                 self.range_m.tolist(), self.refl.tolist()):
            yield LaserReturn(r, a, x, b, t)

    # -- JSON Lines ---------------------------------------------------------

    def header(self) -> dict:
        return {
            "type": "header",
            "format": FORMAT,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "clear": self.clear,
            "lidar": self.config.to_dict(),
            "scene": self.scene.to_dict(),
            "trace": {"t0": self.trace.t0, "visibility_m": self.trace.visibility.tolist()},
        }

    def to_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        fh_raw = open(path, "wb")
        # no name and mtime=0 keep gzip output byte-identical; level 1 is ~10x faster than 9
        raw = (gzip.GzipFile("", "wb", compresslevel=1, fileobj=fh_raw, mtime=0)
               if path.suffix == ".gz" else fh_raw)
        with fh_raw, raw:
            with io.TextIOWrapper(raw, encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
                for t, r, a, x, b in zip(self.t.tolist(), self.ring.tolist(), self.az.tolist(),
                                         self.range_m.tolist(), self.refl.tolist()):
                    fh.write(f'{{"t": {t!r}, "ring": {r}, "az": {a}, "range_m": {x!r}, "refl": {b!r}}}\n')

    @classmethod
    def from_jsonl(cls, path: str | Path, trace: VisibilityTrace | None = None) -> "Recording":
        """Load a recording; ``trace`` replaces the embedded one (e.g. a measured CSV)."""
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rt", encoding="utf-8") as fh:
            head = json.loads(fh.readline())
            if head.get("type") != "header":
                raise ValueError(f"{path}: first record must be the header")
            cols = {k: [] for k in ("t", "ring", "az", "range_m", "refl")}
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    for k, v in cols.items():
                        v.append(row[k])
        if trace is None:
            tr = head.get("trace")
            if tr is None:
                raise ValueError(f"{path}: no embedded trace; pass one explicitly")
            trace = VisibilityTrace(tr["t0"], np.asarray(tr["visibility_m"], dtype=float))
        return cls(
            t=np.array(cols["t"], dtype=float), ring=np.array(cols["ring"], dtype=np.int16),
            az=np.array(cols["az"], dtype=np.int16), range_m=np.array(cols["range_m"], dtype=float),
            refl=np.array(cols["refl"], dtype=float),
            trace=trace, scene=Scene.from_dict(head["scene"]),
            config=LidarConfig.from_dict(head["lidar"]), seed=int(head.get("seed", 0)),
            clear=bool(head.get("clear", False)),
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "ring", "az", "range_m", "refl"])
            w.writerows(zip(self.t.tolist(), self.ring.tolist(), self.az.tolist(),
                            self.range_m.tolist(), self.refl.tolist()))


# --- ROIs --------------------------------------------------------------------

@dataclass(frozen=True)
class LaserROI:
    target_id: str
    part_id: str
    beams: tuple[tuple[int, int], ...]
    truth_range: float
    beam_range: tuple[float, ...]          # clear-air mean range per beam
    beam_reflectivity: tuple[float, ...]   # clear-air mean byte per beam

    def __post_init__(self):
        if not self.beams:
            raise EmptyROI(f"{self.target_id}/{self.part_id} has no beams")

    @property
    def truth_reflectivity(self) -> float:
        return float(np.mean(self.beam_reflectivity))

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id, "part_id": self.part_id,
            "truth_range": self.truth_range,
            "beams": [list(b) for b in self.beams],
            "beam_range": list(self.beam_range),
            "beam_reflectivity": list(self.beam_reflectivity),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LaserROI":
        return cls(d["target_id"], d["part_id"], tuple(tuple(b) for b in d["beams"]),
                   d["truth_range"], tuple(d["beam_range"]), tuple(d["beam_reflectivity"]))


def _beam_means(rec: Recording):
    """Per-beam mean range and byte: ``(keys, rings, codes, range, refl)``."""
    keys = _beam_key(rec.ring, rec.az)
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv)
    mean_r = np.bincount(inv, weights=rec.range_m) / counts
    mean_b = np.bincount(inv, weights=rec.refl) / counts
    return uniq, (uniq // 4096).astype(int), (uniq % 4096).astype(int), mean_r, mean_b


def extract_roi(clear_recording: Recording, target_id: str,
                sigma_roi: float = DEFAULT_SIGMA_ROI) -> list[LaserROI]:
    """ROIs of every visible part of ``target_id``, found in the clear-air reference.

    A beam belongs to a part when the part is the first thing it hits and its
    clear-air mean range agrees with that geometric range within ``sigma_roi``.
    """
    scene = clear_recording.scene
    try:
        target = scene.target(target_id)
    except KeyError:
        raise EmptyROI(f"target {target_id!r} not in scene") from None
    if len(clear_recording) == 0:
        raise EmptyROI(f"target {target_id!r}: reference recording is empty")

    _, rings, codes, mean_r, mean_b = _beam_means(clear_recording)
    dirs = beam_directions(rings, codes, clear_recording.config)
    origin = np.array([[0.0, 0.0, scene.sensor_height]])
    expected, which = intersect_many(scene, origin, dirs)
    refs = part_refs(scene)

    rois = []
    for part in target.parts:
        k = refs.index((target_id, part.part_id))
        sel = np.flatnonzero((which == k) & (np.abs(mean_r - expected) < sigma_roi))
        if sel.size == 0:
            continue
        rois.append(LaserROI(
            target_id, part.part_id,
            tuple(zip(rings[sel].tolist(), codes[sel].tolist())),
            target.range_m,
            tuple(mean_r[sel].tolist()), tuple(mean_b[sel].tolist()),
        ))
    if not rois:
        raise EmptyROI(f"target {target_id!r} not visible in the clear-air reference")
    return rois


# --- per-second averages -----------------------------------------------------

@dataclass(frozen=True)
class AveragedSeries:
    beam: tuple[int, int]
    seconds: np.ndarray
    mean_range: np.ndarray
    mean_refl: np.ndarray
    visibility: np.ndarray

    def __len__(self) -> int:
        return self.seconds.size


def per_second_average(recording: Recording, roi: LaserROI) -> list[AveragedSeries]:
    """Mean range and byte of each ROI beam over each whole second.

    Seconds in which a beam returned nothing get no entry.
    """
    roi_keys = _beam_key([b[0] for b in roi.beams], [b[1] for b in roi.beams])
    keys = _beam_key(recording.ring, recording.az)
    mask = np.isin(keys, roi_keys)
    keys = keys[mask]
    sec = np.floor(recording.t[mask]).astype(np.int64)
    rng, refl = recording.range_m[mask], recording.refl[mask]

    out = []
    order = np.argsort(keys, kind="stable")
    keys, sec, rng, refl = keys[order], sec[order], rng[order], refl[order]
    bounds = np.searchsorted(keys, roi_keys, side="left"), np.searchsorted(keys, roi_keys, side="right")
    for beam, lo, hi in zip(roi.beams, *bounds):
        s = sec[lo:hi]
        uniq, inv = np.unique(s, return_inverse=True)
        counts = np.bincount(inv)
        mr = np.bincount(inv, weights=rng[lo:hi]) / counts
        mb = np.bincount(inv, weights=refl[lo:hi]) / counts
        vis = np.asarray(recording.trace.at(uniq), dtype=float) if uniq.size else np.empty(0)
        out.append(AveragedSeries(tuple(beam), uniq, mr, mb, vis))
    return out


def lock_second(series: AveragedSeries, truth_range: float, sigma: float = DEFAULT_SIGMA,
                window: int = DEFAULT_WINDOW) -> tuple[int, float] | None:
    """``(second, visibility)`` of the lowest-visibility stable lock, or None.

    A second ``s`` locks when every second in ``[s, s + window)`` has an
    average within ``sigma`` of ``truth_range``.
    """
    if sigma <= 0 or window < 1:
        raise ValueError("need sigma > 0 and window >= 1")
    if len(series) == 0:
        return None
    s0 = int(series.seconds[0])
    span = int(series.seconds[-1]) - s0 + 1
    good = np.zeros(span + window, dtype=np.int64)
    ok = np.abs(series.mean_range - truth_range) < sigma
    good[series.seconds[ok] - s0] = 1
    run = np.convolve(good, np.ones(window, dtype=np.int64), mode="full")[window - 1:window - 1 + span]
    starts = np.flatnonzero(run == window)
    if starts.size == 0:
        return None
    vis_by_sec = np.full(span, np.inf)
    vis_by_sec[series.seconds - s0] = series.visibility
    v = vis_by_sec[starts]
    best = int(np.argmin(v))  # first of equal minima: earliest second
    return s0 + int(starts[best]), float(v[best])


def disappear_visibility(series: AveragedSeries, truth_range: float, sigma: float = DEFAULT_SIGMA,
                         window: int = DEFAULT_WINDOW) -> float | None:
    """Lowest visibility at which the beam stably reads ``truth_range``."""
    hit = lock_second(series, truth_range, sigma, window)
    return None if hit is None else hit[1]


# --- dataset -------------------------------------------------------------------

@dataclass(frozen=True)
class DisappearSample:
    mean_range: float
    reflectivity: float
    v_dis: float
    target_id: str = ""
    part_id: str = ""
    ring: int = -1
    az: int = -1

    @property
    def x(self) -> tuple[float, float]:
        return self.mean_range, self.reflectivity


@dataclass
class ExtractionLog:
    entries: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)


def extract_samples(fog: Recording, clear: Recording, *, sigma: float = DEFAULT_SIGMA,
                    window: int = DEFAULT_WINDOW, sigma_roi: float = DEFAULT_SIGMA_ROI,
                    name: str = "", log: ExtractionLog | None = None) -> list[DisappearSample]:
    """Samples of one test: one per ROI beam that locks during the fog run."""
    samples = []
    for target in clear.scene.targets:
        try:
            rois = extract_roi(clear, target.target_id, sigma_roi)
        except EmptyROI as exc:
            if log is not None:
                log.errors.append({"recording": name, "target": target.target_id, "error": str(exc)})
            continue
        for roi in rois:
            for series, r_true, beta in zip(per_second_average(fog, roi), roi.beam_range,
                                            roi.beam_reflectivity):
                hit = lock_second(series, r_true, sigma, window)
                if log is not None:
                    log.entries.append({
                        "recording": name, "target": roi.target_id, "part": roi.part_id,
                        "ring": series.beam[0], "az": series.beam[1],
                        "lock_t_s": None if hit is None else hit[0],
                        "v_dis_m": None if hit is None else hit[1],
                    })
                if hit is not None:
                    samples.append(DisappearSample(r_true, beta, hit[1], roi.target_id,
                                                   roi.part_id, series.beam[0], series.beam[1]))
    samples.sort(key=lambda s: (s.ring, s.az))
    return samples


def assemble_dataset(recordings: Sequence[tuple[Recording, Recording]], sigma: float = DEFAULT_SIGMA,
                     window: int = DEFAULT_WINDOW, *, sigma_roi: float = DEFAULT_SIGMA_ROI,
                     names: Sequence[str] | None = None,
                     log: ExtractionLog | None = None) -> list[DisappearSample]:
    """Pool samples over ``(fog, clear)`` recording pairs, in recording order."""
    names = list(names) if names is not None else [str(i) for i in range(len(recordings))]
    out = []
    for name, (fog, clear) in zip(names, recordings):
        seen = set()
        for s in extract_samples(fog, clear, sigma=sigma, window=window, sigma_roi=sigma_roi,
                                 name=name, log=log):
            if (s.ring, s.az) not in seen:
                seen.add((s.ring, s.az))
                out.append(s)
    return out


def split_by_class(samples: Iterable[DisappearSample]):
    diffuse, retro = [], []
    for s in samples:
        (diffuse if s.reflectivity < RETRO_THRESHOLD else retro).append(s)
    return diffuse, retro


def write_dataset(samples: Iterable[DisappearSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_FIELDS)
        for s in samples:
            w.writerow([repr(float(s.mean_range)), repr(float(s.reflectivity)), repr(float(s.v_dis)),
                        s.target_id, s.part_id, s.ring, s.az])


def read_dataset(path: str | Path) -> list[DisappearSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(DATASET_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            DisappearSample(float(r["range_m"]), float(r["reflectivity"]), float(r["v_dis_m"]),
                            r["target"], r["part"], int(r["ring"]), int(r["az"]))
            for r in reader
        ]


def write_rois(rois: Iterable[LaserROI], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in rois], indent=1) + "\n")


def read_rois(path: str | Path) -> list[LaserROI]:
    return [LaserROI.from_dict(d) for d in json.loads(Path(path).read_text())]
