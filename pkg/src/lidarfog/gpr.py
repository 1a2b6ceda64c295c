"""Exact Gaussian-process regression of disappear visibility on (range, reflectivity).

Zero prior mean, Matern 3/2 covariance, Gaussian noise. Inputs and outputs
are min-max scaled to [0, 1]; all linear algebra goes through the Cholesky
factor of ``K + sigma_n^2 I``.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .rng import substream
from .scene import ReflectorClass, classify_reflectivity

SQRT3 = math.sqrt(3.0)
NOISE_VAR_FLOOR = 1e-18   # only guards sigma_n -> 0; fitted sigma_n stays >= 1e-5
LOG_2PI = math.log(2.0 * math.pi)


class NotPositiveDefinite(LinAlgError):
    pass


class InsufficientData(ValueError):
    pass


class AllStartsFailed(RuntimeError):
    pass


# --- kernel ---------------------------------------------------------------------

@dataclass(frozen=True)
class KernelParams:
    amplitude: float
    lengthscale: float
    noise_std: float

    def __post_init__(self):
        if not (self.amplitude > 0 and self.lengthscale > 0 and self.noise_std > 0):
            raise ValueError(f"kernel parameters must be > 0: {self}")

    @property
    def log(self) -> np.ndarray:
        return np.log([self.amplitude, self.lengthscale, self.noise_std])

    @classmethod
    def from_log(cls, theta) -> "KernelParams":
        a, l, s = np.exp(np.asarray(theta, dtype=float))
        return cls(float(a), float(l), float(s))

    @property
    def noise_var(self) -> float:
        return max(self.noise_std ** 2, NOISE_VAR_FLOOR)


def matern32(x, x2, amplitude: float, lengthscale: float) -> float:
    """``amplitude * (1 + sqrt(3) d / l) * exp(-sqrt(3) d / l)`` for ``d = |x - x2|``."""
    d = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)))
    s = SQRT3 * d / lengthscale
    return amplitude * (1.0 + s) * math.exp(-s)


def matern32_matrix(A, B, amplitude: float, lengthscale: float) -> np.ndarray:
    s = SQRT3 * cdist(np.atleast_2d(A), np.atleast_2d(B)) / lengthscale
    return amplitude * (1.0 + s) * np.exp(-s)


def gram(X, params: KernelParams) -> np.ndarray:
    """Noise-free covariance of the training inputs."""
    return matern32_matrix(X, X, params.amplitude, params.lengthscale)


def _factor(X, params: KernelParams):
    K = gram(X, params)
    Ky = K + params.noise_var * np.eye(K.shape[0])
    try:
        L = cholesky(Ky, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.isfinite(L)):
        raise NotPositiveDefinite("non-finite Cholesky factor")
    return K, L


def log_marginal_likelihood(X, y, params: KernelParams) -> float:
    X = np.atleast_2d(X)
    y = np.asarray(y, dtype=float)
    _, L = _factor(X, params)
    alpha = cho_solve((L, True), y, check_finite=False)
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * y.size * LOG_2PI)


def _lml_and_grad(X, y, params: KernelParams):
    K, L = _factor(X, params)
    n = y.size
    alpha = cho_solve((L, True), y, check_finite=False)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
    Kinv = cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv

    s = SQRT3 * cdist(X, X) / params.lengthscale
    dK_dlog_amp = K
    dK_dlog_len = params.amplitude * s * s * np.exp(-s)
    g_amp = 0.5 * np.sum(W * dK_dlog_amp)
    g_len = 0.5 * np.sum(W * dK_dlog_len)
    if params.noise_std ** 2 > NOISE_VAR_FLOOR:
        g_noise = params.noise_var * np.trace(W)
    else:
        g_noise = 0.0
    return float(lml), np.array([g_amp, g_len, g_noise])


def lml_gradient(X, y, params: KernelParams) -> np.ndarray:
    """Gradient of the log marginal likelihood in (log amplitude, log l, log sigma_n)."""
    return _lml_and_grad(np.atleast_2d(X), np.asarray(y, dtype=float), params)[1]


# --- normalisation ----------------------------------------------------------------

def normalize(v, lo, hi):
    return (np.asarray(v, dtype=float) - lo) / (hi - lo)


def denormalize(v, lo, hi):
    return np.asarray(v, dtype=float) * (hi - lo) + lo


@dataclass(frozen=True)
class NormalizationBounds:
    range_m: tuple[float, float]
    reflectivity: tuple[float, float]
    v_dis: tuple[float, float]

    def __post_init__(self):
        for name in ("range_m", "reflectivity", "v_dis"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"bounds {name}: need max > min, got ({lo}, {hi})")

    @classmethod
    def from_data(cls, X, y) -> "NormalizationBounds":
        X = np.atleast_2d(X)
        y = np.asarray(y, dtype=float)

        def span(v):
            lo, hi = float(np.min(v)), float(np.max(v))
            return (lo, hi) if hi > lo else (lo, lo + 1.0)

        return cls(span(X[:, 0]), span(X[:, 1]), span(y))

    @property
    def x_lo(self) -> np.ndarray:
        return np.array([self.range_m[0], self.reflectivity[0]])

    @property
    def x_hi(self) -> np.ndarray:
        return np.array([self.range_m[1], self.reflectivity[1]])

    def normalize_x(self, X) -> np.ndarray:
        return normalize(X, self.x_lo, self.x_hi)

    def denormalize_x(self, Xn) -> np.ndarray:
        return denormalize(Xn, self.x_lo, self.x_hi)

    def normalize_y(self, y):
        return normalize(y, *self.v_dis)

    def denormalize_y(self, yn):
        return denormalize(yn, *self.v_dis)

    @property
    def y_scale(self) -> float:
        return self.v_dis[1] - self.v_dis[0]

    def to_dict(self) -> dict:
        return {"range_m": list(self.range_m), "reflectivity": list(self.reflectivity),
                "v_dis_m": list(self.v_dis)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationBounds":
        return cls(tuple(d["range_m"]), tuple(d["reflectivity"]), tuple(d["v_dis_m"]))


# --- model --------------------------------------------------------------------------

class Prediction(NamedTuple):
    mean: np.ndarray
    std: np.ndarray
    extrapolated: np.ndarray


@dataclass(eq=False)
class GPModel:
    X: np.ndarray                 # normalised inputs, (n, 2)
    y: np.ndarray                 # normalised targets, (n,)
    params: KernelParams
    bounds: NormalizationBounds
    regime: ReflectorClass
    meta: dict = field(default_factory=dict)
    chol: np.ndarray = field(init=False, repr=False)
    alpha_vec: np.ndarray = field(init=False, repr=False)
    lml: float = field(init=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        if self.y.size < 1 or self.X.shape != (self.y.size, 2):
            raise ValueError("GPModel needs n >= 1 inputs of shape (n, 2)")
        _, self.chol = _factor(self.X, self.params)
        self.alpha_vec = cho_solve((self.chol, True), self.y, check_finite=False)
        self.lml = float(-0.5 * self.y @ self.alpha_vec - np.log(np.diag(self.chol)).sum()
                         - 0.5 * self.y.size * LOG_2PI)

    @property
    def n(self) -> int:
        return self.y.size

    def predict_normalized(self, Xn, include_noise: bool = False):
        """Mean and variance of the latent function at normalised inputs."""
        Xn = np.atleast_2d(Xn)
        Ks = matern32_matrix(Xn, self.X, self.params.amplitude, self.params.lengthscale)
        mean = Ks @ self.alpha_vec
        v = solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        var = self.params.amplitude - np.sum(v * v, axis=0)
        var = np.maximum(var, 0.0)
        if include_noise:
            var = var + self.params.noise_var
        return mean, var

    def predict(self, X, include_noise: bool = False) -> Prediction:
        """Predictive mean and std (metres) at raw ``(range, reflectivity)`` rows.

        Inputs outside the training bounds are clamped onto them and flagged.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xn = self.bounds.normalize_x(X)
        extrapolated = np.any((Xn < 0.0) | (Xn > 1.0), axis=1)
        mean, var = self.predict_normalized(np.clip(Xn, 0.0, 1.0), include_noise)
        return Prediction(self.bounds.denormalize_y(mean), np.sqrt(var) * self.bounds.y_scale,
                          extrapolated)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "bounds": self.bounds.to_dict(),
            "params": {"amplitude": self.params.amplitude, "lengthscale": self.params.lengthscale,
                       "noise_std": self.params.noise_std},
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "meta": {**self.meta, "lml": self.lml},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict, tol: float = 1e-6) -> "GPModel":
        try:
            p = d["params"]
            model = cls(np.asarray(d["X"], dtype=float), np.asarray(d["y"], dtype=float),
                        KernelParams(p["amplitude"], p["lengthscale"], p["noise_std"]),
                        NormalizationBounds.from_dict(d["bounds"]), ReflectorClass(d["regime"]),
                        dict(d.get("meta", {})))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed model: {exc}") from None
        stored = model.meta.pop("lml", None)
        if stored is not None and abs(stored - model.lml) > tol:
            raise ValueError(f"stored LML {stored} does not match recomputed {model.lml}")
        return model

    @classmethod
    def load(cls, path: str | Path) -> "GPModel":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a model file ({exc})") from None
        return cls.from_dict(d)


def predict(model: GPModel, x, include_noise: bool = False) -> tuple[float, float]:
    """Single-point prediction: ``(mean, std)`` in metres."""
    p = model.predict(np.asarray(x, dtype=float)[None, :], include_noise)
    if p.extrapolated[0]:
        warnings.warn(f"{tuple(x)} outside the training bounds; clamped", stacklevel=2)
    return float(p.mean[0]), float(p.std[0])


# --- training -------------------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    n_starts: int = 8
    init_low: float = 1e-3
    init_high: float = 1.0
    max_train: int = 565
    grid_cells: int = 10
    cell_cap: int | None = 12
    maxiter: int = 200
    train_range: tuple[float, float] | None = (10.0, 30.0)   # metres; None keeps every range
    log_bounds: tuple[tuple[float, float], ...] = (
        (math.log(1e-4), math.log(1e2)),
        (math.log(1e-3), math.log(1e2)),
        (math.log(1e-5), math.log(10.0)),
    )
    n_jobs: int = 1


def stratified_subset(Xn: np.ndarray, cap: int, cells: int, rng: np.random.Generator,
                      cell_cap: int | None = None) -> np.ndarray:
    """Indices of at most ``cap`` rows, spread evenly over a cells x cells grid.

    No cell keeps more than ``cell_cap`` rows, so densely sampled regions do
    not dominate the fit.
    """
    ij = np.clip((Xn * cells).astype(int), 0, cells - 1)
    cell = ij[:, 0] * cells + ij[:, 1]
    members = [rng.permutation(np.flatnonzero(cell == c)) for c in range(cells * cells)]
    if cell_cap is not None:
        members = [m[:cell_cap] for m in members]
    sizes = np.array([m.size for m in members])
    if sizes.sum() <= cap:
        return np.sort(np.concatenate(members))
    per_cell = 0
    while np.minimum(sizes, per_cell + 1).sum() <= cap:
        per_cell += 1
    chosen = np.concatenate([m[:per_cell] for m in members])
    spare = cap - chosen.size
    if spare > 0:
        rest = np.concatenate([m[per_cell:per_cell + 1] for m in members])
        chosen = np.concatenate([chosen, rng.permutation(rest)[:spare]])
    return np.sort(chosen)


def _optimize(Xn, yn, theta0, config: FitConfig):
    def objective(theta):
        try:
            lml, grad = _lml_and_grad(Xn, yn, KernelParams.from_log(theta))
        except (NotPositiveDefinite, ValueError):
            return 1e25, np.zeros(3)
        return -lml, -grad

    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   bounds=config.log_bounds, options={"maxiter": config.maxiter})
    if not np.isfinite(res.fun) or res.fun >= 1e25:
        return None
    return float(-res.fun), res.x


def fit_arrays(X, y, regime: ReflectorClass | str, config: FitConfig = FitConfig(), seed: int = 0,
               bounds: NormalizationBounds | None = None) -> GPModel:
    """Fit a GP to raw ``(range, reflectivity) -> v_dis`` arrays."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    regime = ReflectorClass(regime)
    if y.size < 2:
        raise InsufficientData(f"{regime.value}: need >= 2 samples, got {y.size}")
    bounds = bounds or NormalizationBounds.from_data(X, y)
    Xn, yn = bounds.normalize_x(X), bounds.normalize_y(y)

    rng = substream(seed, "gp", regime.value)
    keep = stratified_subset(Xn, config.max_train, config.grid_cells, rng, config.cell_cap)
    Xn, yn = Xn[keep], yn[keep]
    starts = np.log(rng.uniform(config.init_low, config.init_high, size=(config.n_starts, 3)))

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            results = list(pool.map(lambda th: _optimize(Xn, yn, th, config), starts))
    else:
        results = [_optimize(Xn, yn, th, config) for th in starts]

    best = None
    for i, r in enumerate(results):
        if r is not None and (best is None or r[0] > best[1][0]):
            best = (i, r)
    if best is None:
        raise AllStartsFailed(f"{regime.value}: every optimisation start failed")
    params = KernelParams.from_log(best[1][1])
    meta = {"seed": int(seed), "n_starts": config.n_starts, "best_start": best[0],
            "n_train": int(yn.size), "n_available": int(y.size)}
    return GPModel(Xn, yn, params, bounds, regime, meta)


def fit(samples: Sequence, regime: ReflectorClass | str, config: FitConfig = FitConfig(),
        seed: int = 0) -> GPModel:
    """Fit the GP of one reflector class to disappear-visibility samples.

    Only samples inside ``config.train_range`` are used.
    """
    regime = ReflectorClass(regime)
    own = [s for s in samples if classify_reflectivity(s.reflectivity) is regime]
    if config.train_range is not None:
        lo, hi = config.train_range
        own = [s for s in own if lo <= s.mean_range <= hi]
    if len(own) < 2:
        raise InsufficientData(f"{regime.value}: need >= 2 samples, got {len(own)}")
    X = np.array([[s.mean_range, s.reflectivity] for s in own])
    y = np.array([s.v_dis for s in own])
    return fit_arrays(X, y, regime, config, seed)
