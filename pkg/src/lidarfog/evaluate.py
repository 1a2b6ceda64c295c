"""Scoring the two GP models against disappear-visibility samples."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gpr import GPModel
from .recording import DisappearSample
from .rng import substream
from .scene import RETRO_THRESHOLD, ReflectorClass, classify_reflectivity

FAILURE_RANGE_EDGES = (0.0, 10.0, 15.0, 20.0, 25.0, 30.0)
ERROR_RANGE_EDGES = (10.0, 15.0, 20.0, 25.0, 30.0)
ERROR_REFL_EDGES = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 100.0, 200.0, 255.0)
GRID_RANGES = (10.0, 15.0, 20.0, 25.0)
GRID_REFLS = (1.0, 5.0, 10.0, 30.0, 50.0, 80.0, 120.0, 180.0, 250.0)
EMPTY = "-"


def _bin_index(values, edges) -> np.ndarray:
    """Bin of each value for half-open bins, the last one closed; -1 outside."""
    v = np.asarray(values, dtype=float)
    idx = np.searchsorted(edges, v, side="right") - 1
    idx = np.where(v == edges[-1], len(edges) - 2, idx)
    return np.where((v < edges[0]) | (v > edges[-1]), -1, idx)


def _label(lo, hi) -> str:
    return f"{lo:g}-{hi:g}"


def holdout_split(samples: Sequence, fraction: float = 0.2, seed: int = 0):
    """Seeded shuffle split into ``(train_idx, test_idx)``, each sorted."""
    n = len(samples)
    perm = substream(seed, "holdout").permutation(n)
    n_test = int(round(fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


@dataclass
class Assessment:
    """Per-sample prediction against truth."""

    regime: np.ndarray          # class value ("diffuse" / "retro") per sample
    truth: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    range_m: np.ndarray
    reflectivity: np.ndarray

    @property
    def failed(self) -> np.ndarray:
        return np.abs(self.truth - self.mean) > 2.0 * self.std

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.truth - self.mean)


def assess(model_d: GPModel | None, model_r: GPModel | None, samples: Sequence[DisappearSample],
           include_noise: bool = True) -> Assessment:
    """Predict every sample with the model of its reflector class.

    ``include_noise`` widens the band by the fitted observation noise, making
    it a region for measured values rather than for the latent mean.
    """
    n = len(samples)
    X = np.array([[s.mean_range, s.reflectivity] for s in samples]).reshape(n, 2)
    truth = np.array([s.v_dis for s in samples], dtype=float)
    regime = np.array([classify_reflectivity(b).value for b in X[:, 1]], dtype="<U7")
    mean = np.full(n, np.nan)
    std = np.full(n, np.nan)
    for cls, model in ((ReflectorClass.DIFFUSE, model_d), (ReflectorClass.RETRO, model_r)):
        sel = np.flatnonzero(regime == cls.value)
        if sel.size == 0:
            continue
        if model is None:
            raise ValueError(f"samples of class {cls.value} but no {cls.value} model")
        p = model.predict(X[sel], include_noise=include_noise)
        mean[sel], std[sel] = p.mean, p.std
    return Assessment(regime, truth, mean, std, X[:, 0], X[:, 1])


# --- failure rates -------------------------------------------------------------------

@dataclass(frozen=True)
class FailureBin:
    range_lo: float
    range_hi: float
    regime: ReflectorClass
    n: int
    failures: int

    @property
    def rate(self) -> float:
        return self.failures / self.n if self.n else float("nan")


@dataclass
class FailureReport:
    bins: list[FailureBin]
    overall: dict[ReflectorClass, tuple[int, int]]   # class -> (n, failures)
    outside: int = 0

    def rate(self, regime: ReflectorClass) -> float:
        n, f = self.overall[regime]
        return f / n if n else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["range_bin", "class", "n", "failures", "rate"])
        for b in self.bins:
            w.writerow([_label(b.range_lo, b.range_hi), b.regime.value, b.n, b.failures,
                        "" if not b.n else repr(b.rate)])
        for cls, (n, f) in self.overall.items():
            w.writerow(["overall", cls.value, n, f, "" if not n else repr(f / n)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'R':>10} | {'[0-100)':>9} {'[100-255]':>10}"]
        los = sorted({(b.range_lo, b.range_hi) for b in self.bins})
        cell = {(b.range_lo, b.range_hi, b.regime): b for b in self.bins}

        def fmt(n, f):
            return EMPTY if n == 0 else f"{100.0 * f / n:.1f}%"

        for lo, hi in los:
            d = cell[(lo, hi, ReflectorClass.DIFFUSE)]
            r = cell[(lo, hi, ReflectorClass.RETRO)]
            lines.append(f"{_label(lo, hi) + 'm':>10} | {fmt(d.n, d.failures):>9} {fmt(r.n, r.failures):>10}")
        d, r = self.overall[ReflectorClass.DIFFUSE], self.overall[ReflectorClass.RETRO]
        lines.append(f"{'Overall':>10} | {fmt(*d):>9} {fmt(*r):>10}")
        return "\n".join(lines) + "\n"


def failure_rate(model_d, model_r, samples, range_edges=FAILURE_RANGE_EDGES,
                 include_noise: bool = True) -> FailureReport:
    """Share of samples outside the 2-sigma band, per range bin and class.

    Samples outside the range edges are left out of the bins and the overall
    rates and counted in ``outside``.
    """
    a = assess(model_d, model_r, samples, include_noise)
    idx = _bin_index(a.range_m, range_edges)
    failed = a.failed
    bins = []
    overall = {}
    for cls in (ReflectorClass.DIFFUSE, ReflectorClass.RETRO):
        of_cls = a.regime == cls.value
        for k in range(len(range_edges) - 1):
            sel = of_cls & (idx == k)
            bins.append(FailureBin(range_edges[k], range_edges[k + 1], cls,
                                   int(sel.sum()), int(failed[sel].sum())))
        sel = of_cls & (idx >= 0)
        overall[cls] = (int(sel.sum()), int(failed[sel].sum()))
    return FailureReport(bins, overall, int((idx < 0).sum()))


# --- error table -----------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorCell:
    n: int               # non-failed samples scored
    n_failed: int
    mean_abs_error: float | None


@dataclass
class ErrorTable:
    range_edges: tuple[float, ...]
    refl_edges: tuple[float, ...]
    cells: dict[tuple[int, int], ErrorCell]
    rows: dict[int, ErrorCell] = field(default_factory=dict)

    def row_overall(self, i: int) -> float | None:
        return self.rows[i].mean_abs_error

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["range_bin", "reflectivity_bin", "n", "n_failed", "mean_abs_error_m"])
        for i in range(len(self.range_edges) - 1):
            rl = _label(self.range_edges[i], self.range_edges[i + 1])
            for j in range(len(self.refl_edges) - 1):
                c = self.cells[(i, j)]
                w.writerow([rl, _label(self.refl_edges[j], self.refl_edges[j + 1]), c.n, c.n_failed,
                            "" if c.mean_abs_error is None else repr(c.mean_abs_error)])
            c = self.rows[i]
            w.writerow([rl, "overall", c.n, c.n_failed,
                        "" if c.mean_abs_error is None else repr(c.mean_abs_error)])
        return buf.getvalue()

    def to_text(self) -> str:
        heads = [f"[{_label(self.refl_edges[j], self.refl_edges[j + 1])})"
                 for j in range(len(self.refl_edges) - 1)] + ["Overall"]
        lines = [f"{'Distance':>10} | " + " ".join(f"{h:>10}" for h in heads)]

        def fmt(c):
            return EMPTY if c.mean_abs_error is None else f"{c.mean_abs_error:.2f}m"

        for i in range(len(self.range_edges) - 1):
            vals = [fmt(self.cells[(i, j)]) for j in range(len(self.refl_edges) - 1)]
            vals.append(fmt(self.rows[i]))
            label = _label(self.range_edges[i], self.range_edges[i + 1]) + "m"
            lines.append(f"{label:>10} | " + " ".join(f"{v:>10}" for v in vals))
        return "\n".join(lines) + "\n"


def _cell(abs_err, failed) -> ErrorCell:
    ok = ~failed
    n = int(ok.sum())
    return ErrorCell(n, int(failed.sum()), float(abs_err[ok].mean()) if n else None)


def error_table(model_d, model_r, samples, range_edges=ERROR_RANGE_EDGES,
                refl_edges=ERROR_REFL_EDGES, include_noise: bool = True) -> ErrorTable:
    """Mean absolute error of the non-failed predictions per range x reflectivity cell."""
    a = assess(model_d, model_r, samples, include_noise)
    ri = _bin_index(a.range_m, range_edges)
    bi = _bin_index(a.reflectivity, refl_edges)
    err, failed = a.abs_error, a.failed
    cells, rows = {}, {}
    for i in range(len(range_edges) - 1):
        in_row = (ri == i) & (bi >= 0)
        for j in range(len(refl_edges) - 1):
            sel = in_row & (bi == j)
            cells[(i, j)] = _cell(err[sel], failed[sel])
        rows[i] = _cell(err[in_row], failed[in_row])
    return ErrorTable(tuple(range_edges), tuple(refl_edges), cells, rows)


def class_error_by_range(table: ErrorTable, regime: ReflectorClass = ReflectorClass.DIFFUSE):
    """Pooled mean absolute error per range bin over the reflectivity bins of one class."""
    lo, hi = (0.0, RETRO_THRESHOLD) if regime is ReflectorClass.DIFFUSE else (RETRO_THRESHOLD, 255.0)
    cols = [j for j in range(len(table.refl_edges) - 1)
            if table.refl_edges[j] >= lo and table.refl_edges[j + 1] <= hi]
    out = []
    for i in range(len(table.range_edges) - 1):
        cs = [table.cells[(i, j)] for j in cols if table.cells[(i, j)].n]
        n = sum(c.n for c in cs)
        out.append(sum(c.n * c.mean_abs_error for c in cs) / n if n else None)
    return out


def error_trend(table: ErrorTable, regime: ReflectorClass = ReflectorClass.DIFFUSE) -> dict:
    """Flag: the class's mean absolute error rises strictly from each range bin to the next."""
    maes = class_error_by_range(table, regime)
    filled = [m for m in maes if m is not None]
    labels = [_label(table.range_edges[i], table.range_edges[i + 1])
              for i in range(len(table.range_edges) - 1)]
    return {
        "regime": regime.value,
        "mean_abs_error_m": dict(zip(labels, maes)),
        "increasing": len(filled) == len(maes) and bool(np.all(np.diff(filled) > 0)),
    }


# --- prediction grid ---------------------------------------------------------------------

@dataclass(frozen=True)
class GridRow:
    range_m: float
    reflectivity: float
    mean: float
    std: float
    extrapolated: bool
    regime: ReflectorClass


def _model_for(models, beta):
    if isinstance(models, GPModel):
        return models
    cls = classify_reflectivity(beta)
    for m in models:
        if m is not None and m.regime is cls:
            return m
    raise ValueError(f"no model for reflectivity {beta} ({cls.value})")


def prediction_grid(models, range_values=GRID_RANGES, refl_values=GRID_REFLS) -> list[GridRow]:
    """Predictions over a range x reflectivity grid, range-major.

    ``models`` is one model or a ``(diffuse, retro)`` pair chosen per reflectivity.
    """
    rows = []
    for r in range_values:
        for b in refl_values:
            m = _model_for(models, b)
            p = m.predict(np.array([[r, b]], dtype=float))
            rows.append(GridRow(float(r), float(b), float(p.mean[0]), float(p.std[0]),
                                bool(p.extrapolated[0]), m.regime))
    return rows


def grid_to_csv(rows: Sequence[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["range_m", "reflectivity", "mean_m", "std_m", "extrapolated", "model"])
    for g in rows:
        w.writerow([repr(g.range_m), repr(g.reflectivity), repr(g.mean), repr(g.std),
                    int(g.extrapolated), g.regime.value])
    return buf.getvalue()


def grid_to_text(rows: Sequence[GridRow]) -> str:
    ranges = sorted({g.range_m for g in rows})
    refls = sorted({g.reflectivity for g in rows})
    table = {(g.range_m, g.reflectivity): g for g in rows}
    corner = "R \\ beta"
    lines = [f"{corner:>8} | " + " ".join(f"{b:>7g}" for b in refls)]
    for r in ranges:
        cells = [f"{table[(r, b)].mean:>7.1f}" if (r, b) in table else f"{EMPTY:>7}" for b in refls]
        lines.append(f"{r:>7g}m | " + " ".join(cells))
    return "\n".join(lines) + "\n"


def grid_monotonicity(rows: Sequence[GridRow], tol: float = 1e-9) -> dict:
    """Pass/fail flags: mean non-increasing in reflectivity, non-decreasing in range."""
    table = {(g.range_m, g.reflectivity): g.mean for g in rows}
    ranges = sorted({g.range_m for g in rows})
    refls = sorted({g.reflectivity for g in rows})
    in_refl = {}
    for r in ranges:
        m = [table[(r, b)] for b in refls if (r, b) in table]
        in_refl[repr(r)] = bool(np.all(np.diff(m) <= tol))
    in_range = {}
    for b in refls:
        m = [table[(r, b)] for r in ranges if (r, b) in table]
        in_range[repr(b)] = bool(np.all(np.diff(m) >= -tol))
    return {
        "nonincreasing_in_reflectivity": in_refl,
        "nondecreasing_in_range": in_range,
        "all_pass": all(in_refl.values()) and all(in_range.values()),
    }


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text)
