"""In-process pipeline: scenarios -> recordings -> dataset -> models -> reports.

The command line front-end is a thin layer over these functions; tests and
scripts call them directly to skip the file round trip.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluate as ev
from .atmosphere import VisibilityTrace, dissipation_profile
from .gpr import FitConfig, GPModel, InsufficientData, fit
from .lidar import LidarConfig, simulate_reference, simulate_test
from .presets import Scenario, TraceSpec
from .recording import (DEFAULT_SIGMA, DEFAULT_SIGMA_ROI, DEFAULT_WINDOW, DisappearSample,
                        ExtractionLog, Recording, extract_samples)
from .rng import derive_seed, substream
from .scene import ReflectorClass, build_scene

REFERENCE_DURATION_S = 10

# Hyperparameters of the published fits on the physical campaign, normalized units.
REFERENCE_HYPERPARAMETERS = {
    "diffuse": {"amplitude": 0.0678, "lengthscale": 0.1128, "noise_std": 0.0561},
    "retro": {"amplitude": 0.0338, "lengthscale": 0.2545, "noise_std": 0.0261},
}


@dataclass(frozen=True)
class ExtractParams:
    sigma: float = DEFAULT_SIGMA
    window: int = DEFAULT_WINDOW
    sigma_roi: float = DEFAULT_SIGMA_ROI


def make_trace(spec: TraceSpec | str | Path, seed: int, name: str) -> VisibilityTrace:
    if isinstance(spec, (str, Path)):
        return VisibilityTrace.from_csv(spec)
    rng = substream(seed, "trace", name)
    return dissipation_profile(spec.v_start, spec.v_end, spec.duration, spec.noise_std, rng)


def simulate_scenario(scenario: Scenario, lidar: LidarConfig, seed: int,
                      jobs: int = 1) -> tuple[Recording, Recording]:
    """``(fog, clear)`` recordings of one scenario; both share the scenario seed."""
    scene = build_scene(scenario.scene)
    trace = make_trace(scenario.trace, seed, scenario.name)
    s = derive_seed(seed, "scenario", scenario.name)
    fog = simulate_test(scene, trace, lidar, s, jobs=jobs)
    clear = simulate_reference(scene, lidar, s, REFERENCE_DURATION_S)
    return fog, clear


@dataclass
class ScenarioResult:
    name: str
    samples: list[DisappearSample]
    log: ExtractionLog
    n_returns: int


def _run_one(args) -> ScenarioResult:
    scenario, lidar, seed, params, out_dir = args
    fog, clear = simulate_scenario(scenario, lidar, seed)
    if out_dir is not None:
        d = Path(out_dir) / scenario.name
        d.mkdir(parents=True, exist_ok=True)
        fog.to_jsonl(d / "fog.jsonl.gz")
        clear.to_jsonl(d / "clear.jsonl.gz")
        fog.trace.to_csv(d / "trace.csv")
    log = ExtractionLog()
    samples = extract_samples(fog, clear, sigma=params.sigma, window=params.window,
                              sigma_roi=params.sigma_roi, name=scenario.name, log=log)
    return ScenarioResult(scenario.name, samples, log, len(fog))


def run_scenarios(scenarios: Sequence[Scenario], lidar: LidarConfig, seed: int,
                  params: ExtractParams = ExtractParams(), jobs: int = 1,
                  out_dir: str | Path | None = None) -> list[ScenarioResult]:
    """Simulate and extract every scenario, optionally saving the recordings.

    Scenarios run in parallel across processes when ``jobs > 1``; results come
    back in scenario order and do not depend on ``jobs``.
    """
    tasks = [(s, lidar, seed, params, out_dir) for s in scenarios]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]


def pool_samples(results: Sequence[ScenarioResult]) -> tuple[list[DisappearSample], ExtractionLog]:
    samples, log = [], ExtractionLog()
    for r in results:
        samples.extend(r.samples)
        log.entries.extend(r.log.entries)
        log.errors.extend(r.log.errors)
    return samples, log


@dataclass
class FitResult:
    models: dict[str, GPModel]
    train_idx: np.ndarray
    test_idx: np.ndarray
    errors: dict[str, str] = field(default_factory=dict)

    def report(self) -> dict:
        out = {
            "n_train": int(self.train_idx.size),
            "n_test": int(self.test_idx.size),
            "train_idx": self.train_idx.tolist(),
            "test_idx": self.test_idx.tolist(),
            "models": {},
            "reference_hyperparameters": REFERENCE_HYPERPARAMETERS,
            "errors": self.errors,
        }
        for regime, m in self.models.items():
            out["models"][regime] = {
                "hyperparameters": asdict(m.params),
                "log_marginal_likelihood": m.lml,
                **m.meta,
            }
        return out


def fit_models(samples: Sequence[DisappearSample], config: FitConfig = FitConfig(), seed: int = 0,
               holdout: float = 0.2, regimes: Sequence[str] = ("diffuse", "retro")) -> FitResult:
    """Fit one GP per requested regime on the training part of a seeded split.

    ``holdout=0`` trains on everything. Raises ``InsufficientData`` when a
    requested regime has fewer than two training samples.
    """
    train_idx, test_idx = ev.holdout_split(samples, holdout, seed)
    train = [samples[i] for i in train_idx]
    models = {}
    for regime in regimes:
        models[regime] = fit(train, ReflectorClass(regime), config, seed)
    return FitResult(models, train_idx, test_idx)


@dataclass
class Reports:
    failure: ev.FailureReport
    errors: ev.ErrorTable
    grid: list[ev.GridRow]
    flags: dict


def evaluate_models(model_d: GPModel | None, model_r: GPModel | None,
                    samples: Sequence[DisappearSample], include_noise: bool = True) -> Reports:
    failure = ev.failure_rate(model_d, model_r, samples, include_noise=include_noise)
    errors = ev.error_table(model_d, model_r, samples, include_noise=include_noise)
    models = tuple(m for m in (model_d, model_r) if m is not None)
    grid = ev.prediction_grid(models if len(models) > 1 else models[0])
    flags = {"grid": ev.grid_monotonicity(grid), "error_trend": ev.error_trend(errors)}
    return Reports(failure, errors, grid, flags)


__all__ = [
    "ExtractParams", "FitResult", "InsufficientData", "REFERENCE_HYPERPARAMETERS", "Reports",
    "ScenarioResult", "evaluate_models", "fit_models", "make_trace", "pool_samples",
    "run_scenarios", "simulate_scenario",
]
