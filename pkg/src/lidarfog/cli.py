"""Command line front-end: simulate | extract | fit | predict | evaluate.

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 a requested
monotonicity check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .atmosphere import KOSCHMIEDER_CONSTANT, AtmosphereError, VisibilityTrace
from .gpr import FitConfig, GPModel, InsufficientData
from .lidar import LidarConfig
from .pipeline import ExtractParams, evaluate_models, fit_models, make_trace, simulate_scenario
from .presets import PRESETS, Scenario, TraceSpec, preset
from .recording import (ExtractionLog, EmptyROI, Recording, extract_roi, extract_samples,
                        read_dataset, write_dataset, write_rois)
from .scene import SceneConfig, SceneError, build_scene

log = logging.getLogger("lidarfog")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
MANIFEST_FORMAT = "lidarfog-manifest/1"


class ConfigError(ValueError):
    """Invalid run configuration; the message names the file and field."""


# --- run configuration ----------------------------------------------------------------

@dataclass
class RunConfig:
    scenarios: list[Scenario] = field(default_factory=list)
    preset: str | None = None
    lidar: dict = field(default_factory=dict)
    extract: ExtractParams = ExtractParams()
    koschmieder: float = KOSCHMIEDER_CONSTANT
    gpr: FitConfig = FitConfig()
    holdout: float = 0.2
    seed: int | None = None
    out: Path | None = None
    jobs: int = 1

    def lidar_config(self) -> LidarConfig:
        return LidarConfig.from_dict({**self.lidar, "koschmieder_constant": self.koschmieder})


def _section(d: dict, key: str, where: str, allowed: set[str]) -> dict:
    sec = d.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{where}: {key}: expected an object")
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"{where}: {key}: unknown fields {sorted(extra)}")
    return sec


def _scenario(i: int, d: dict, base: Path, where: str) -> Scenario:
    at = f"{where}: scenarios[{i}]"
    if not isinstance(d, dict) or "name" not in d or "scene" not in d:
        raise ConfigError(f"{at}: needs 'name' and 'scene'")
    scene = d["scene"]
    try:
        if isinstance(scene, str):
            path = base / scene
            if not path.is_file():
                raise ConfigError(f"{at}.scene: file not found: {path}")
            scene_cfg = SceneConfig.load(path)
        else:
            scene_cfg = SceneConfig.from_dict(scene)
    except (SceneError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{at}.scene: {exc}") from None
    trace = d.get("trace", {})
    if isinstance(trace, str):
        path = base / trace
        if not path.is_file():
            raise ConfigError(f"{at}.trace: file not found: {path}")
        trace = str(path)
    else:
        known = {f.name for f in fields(TraceSpec)}
        if not isinstance(trace, dict) or set(trace) - known:
            raise ConfigError(f"{at}.trace: expected a CSV path or an object with {sorted(known)}")
        trace = TraceSpec(**trace)
    return Scenario(str(d["name"]), scene_cfg, trace)


def load_run_config(path: str | Path | None) -> RunConfig:
    """Parse and validate a JSON run configuration; relative paths resolve next to it."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    where, base = str(path), path.parent
    allowed = {"preset", "scenarios", "lidar", "pipeline", "gpr", "evaluate", "seed", "out", "jobs"}
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown fields {sorted(extra)}")

    cfg = RunConfig()
    if "preset" in d:
        if d["preset"] not in PRESETS:
            raise ConfigError(f"{where}: preset: unknown {d['preset']!r}; choose from {list(PRESETS)}")
        cfg.preset = d["preset"]
    cfg.scenarios = [_scenario(i, s, base, where) for i, s in enumerate(d.get("scenarios", []))]
    names = [s.name for s in cfg.scenarios]
    if len(set(names)) != len(names):
        raise ConfigError(f"{where}: scenarios: names must be unique")

    cfg.lidar = _section(d, "lidar", where, {f.name for f in fields(LidarConfig)})
    pipe = _section(d, "pipeline", where, {"sigma", "window", "sigma_roi", "koschmieder"})
    cfg.koschmieder = float(pipe.pop("koschmieder", KOSCHMIEDER_CONSTANT))
    cfg.extract = ExtractParams(**pipe)
    gpr = _section(d, "gpr", where, {f.name for f in fields(FitConfig)})
    if "train_range" in gpr and gpr["train_range"] is not None:
        gpr["train_range"] = tuple(gpr["train_range"])
    if "log_bounds" in gpr:
        gpr["log_bounds"] = tuple(tuple(b) for b in gpr["log_bounds"])
    cfg.gpr = FitConfig(**gpr)
    evs = _section(d, "evaluate", where, {"holdout"})
    cfg.holdout = float(evs.get("holdout", 0.2))
    if "seed" in d:
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError(f"{where}: seed: expected a non-negative integer")
        cfg.seed = d["seed"]
    if "out" in d:
        cfg.out = base / d["out"]
    if "jobs" in d:
        cfg.jobs = int(d["jobs"])
    try:
        cfg.lidar_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: lidar: {exc}") from None
    return cfg


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require_seed(cfg: RunConfig, command: str) -> int:
    if cfg.seed is None:
        raise ConfigError(f"{command}: a seed is required (--seed N or \"seed\" in the config)")
    return cfg.seed


def _out(cfg: RunConfig) -> Path:
    return cfg.out if cfg.out is not None else Path(".")


# --- simulate -------------------------------------------------------------------------

def _simulate_one(args):
    scenario, lidar, seed, out_dir = args
    fog, clear = simulate_scenario(scenario, lidar, seed)
    d = Path(out_dir) / "recordings" / scenario.name
    d.mkdir(parents=True, exist_ok=True)
    fog.to_jsonl(d / "fog.jsonl.gz")
    clear.to_jsonl(d / "clear.jsonl.gz")
    fog.trace.to_csv(d / "trace.csv")
    return scenario.name, len(fog), len(clear)


def cmd_simulate(cfg: RunConfig, args) -> int:
    seed = _require_seed(cfg, "simulate")
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"--preset: unknown {args.preset!r}; choose from {list(PRESETS)}")
        cfg.preset = args.preset
    scenarios = list(cfg.scenarios)
    if cfg.preset:
        scenarios = preset(cfg.preset) + scenarios
    if not scenarios:
        raise ConfigError("simulate: nothing to do; give --preset or scenarios in --config")
    lidar = cfg.lidar_config()
    # build every scene and trace up front so a bad input leaves nothing behind
    for s in scenarios:
        try:
            build_scene(s.scene)
            make_trace(s.trace, seed, s.name)
        except (SceneError, AtmosphereError, ValueError) as exc:
            raise ConfigError(f"scenario {s.name}: {exc}") from None

    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".simulate-", dir=out))
    try:
        tasks = [(s, lidar, seed, tmp) for s in scenarios]
        if cfg.jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(cfg.jobs) as pool:
                counts = list(pool.map(_simulate_one, tasks))
        else:
            counts = [_simulate_one(t) for t in tasks]
        dest = out / "recordings"
        if dest.exists():
            shutil.rmtree(dest)
        (tmp / "recordings").rename(dest)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)

    entries, files = [], {}
    for s, (_, n_fog, n_clear) in zip(scenarios, counts):
        rel = {k: f"recordings/{s.name}/{f}" for k, f in
               (("fog", "fog.jsonl.gz"), ("clear", "clear.jsonl.gz"), ("trace", "trace.csv"))}
        for r in rel.values():
            files[r] = _sha256(out / r)
        entries.append({"name": s.name, "scene": s.scene.to_dict(), "returns": n_fog,
                        "reference_returns": n_clear, **rel})
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "preset": cfg.preset,
        "lidar": lidar.to_dict(),
        "lidar_config_hash": lidar.config_hash(),
        "scenarios": entries,
        "files": files,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"simulated {len(entries)} scenarios into {out}")
    return EXIT_OK


# --- extract --------------------------------------------------------------------------

def _load_manifest(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"{path}: manifest not found (run simulate first or pass --manifest)")
    m = json.loads(path.read_text())
    if m.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{path}: not a recording manifest")
    for rel, digest in m["files"].items():
        f = path.parent / rel
        if not f.is_file():
            raise ConfigError(f"{path}: listed file missing: {rel}")
        if _sha256(f) != digest:
            raise ConfigError(f"{path}: hash mismatch for {rel}")
    return m


def _extract_one(args):
    name, fog_path, clear_path, trace_path, params = args
    trace = VisibilityTrace.from_csv(trace_path) if trace_path else None
    fog = Recording.from_jsonl(fog_path, trace)
    clear = Recording.from_jsonl(clear_path)
    log_ = ExtractionLog()
    samples = extract_samples(fog, clear, sigma=params.sigma, window=params.window,
                              sigma_roi=params.sigma_roi, name=name, log=log_)
    rois = []
    for t in clear.scene.targets:
        try:
            rois.extend(extract_roi(clear, t.target_id, params.sigma_roi))
        except EmptyROI:
            pass
    return name, samples, log_, rois


def cmd_extract(cfg: RunConfig, args) -> int:
    params = ExtractParams(
        args.sigma if args.sigma is not None else cfg.extract.sigma,
        args.window if args.window is not None else cfg.extract.window,
        args.sigma_roi if args.sigma_roi is not None else cfg.extract.sigma_roi,
    )
    out = _out(cfg)
    if args.fog or args.clear:
        if not (args.fog and args.clear):
            raise ConfigError("extract: --fog and --clear go together")
        for p in (args.fog, args.clear, args.trace):
            if p and not Path(p).is_file():
                raise ConfigError(f"extract: file not found: {p}")
        tasks = [(args.name, args.fog, args.clear, args.trace, params)]
    else:
        mpath = Path(args.manifest) if args.manifest else out / "manifest.json"
        m = _load_manifest(mpath)
        base = mpath.parent
        tasks = [(s["name"], base / s["fog"], base / s["clear"], None, params) for s in m["scenarios"]]

    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_extract_one, tasks))
    else:
        results = [_extract_one(t) for t in tasks]

    samples, entries, errors = [], [], []
    for name, s, lg, rois in results:
        samples.extend(s)
        entries.extend(lg.entries)
        errors.extend(lg.errors)
        (out / "rois").mkdir(parents=True, exist_ok=True)
        write_rois(rois, out / "rois" / f"{name}.json")
    for e in errors:
        log.warning("empty ROI: %s / %s: %s", e["recording"], e["target"], e["error"])
    write_dataset(samples, out / "dataset.csv")
    _write_json(out / "extraction_log.json", {"params": asdict(params), "beams": entries,
                                              "errors": errors})
    print(f"extracted {len(samples)} samples into {out / 'dataset.csv'}")
    return EXIT_OK


# --- fit ------------------------------------------------------------------------------

def _dataset_path(cfg: RunConfig, args) -> Path:
    p = Path(args.dataset) if args.dataset else _out(cfg) / "dataset.csv"
    if not p.is_file():
        raise ConfigError(f"{p}: dataset not found")
    return p


def cmd_fit(cfg: RunConfig, args) -> int:
    seed = _require_seed(cfg, "fit")
    dpath = _dataset_path(cfg, args)
    samples = read_dataset(dpath)
    regimes = ("diffuse", "retro") if args.regime == "both" else (args.regime,)
    holdout = 0.0 if args.paper_mode else (args.holdout if args.holdout is not None else cfg.holdout)
    gpr = cfg.gpr
    if args.starts is not None:
        gpr = FitConfig(**{**asdict(gpr), "n_starts": args.starts})
    if cfg.jobs > 1:
        gpr = FitConfig(**{**asdict(gpr), "n_jobs": cfg.jobs})
    result = fit_models(samples, gpr, seed, holdout, regimes)

    out = _out(cfg) / "models"
    out.mkdir(parents=True, exist_ok=True)
    for regime, model in result.models.items():
        model.save(out / f"model_{regime}.json")
    report = result.report()
    report.update({"seed": seed, "holdout": holdout, "dataset": str(dpath),
                   "dataset_sha256": _sha256(dpath), "n_samples": len(samples)})
    _write_json(out / "fit_report.json", report)
    for regime, m in result.models.items():
        p = m.params
        print(f"{regime}: amplitude={p.amplitude:.4g} lengthscale={p.lengthscale:.4g} "
              f"noise_std={p.noise_std:.4g} lml={m.lml:.4f} n={m.n}")
    return EXIT_OK


# --- predict --------------------------------------------------------------------------

def _values(spec: str) -> list[float]:
    """``"10,15,20"`` or ``"start:stop:step"`` (stop inclusive)."""
    try:
        if ":" in spec:
            a, b, step = (float(x) for x in spec.split(":"))
            if step <= 0:
                raise ValueError
            n = int(np.floor((b - a) / step + 1e-9)) + 1
            return [a + i * step for i in range(n)]
        return [float(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad value list {spec!r}; use '10,15,20' or '10:30:5'") from None


def _load_models(paths) -> list[GPModel]:
    models = []
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"{p}: model file not found")
        models.append(GPModel.load(p))
    return models


def cmd_predict(cfg: RunConfig, args) -> int:
    models = _load_models(args.model)
    pick = models[0] if len(models) == 1 else tuple(models)
    if args.range is not None or args.refl is not None:
        if args.range is None or args.refl is None:
            raise ConfigError("predict: a single point needs both --range and --refl")
        rows = ev.prediction_grid(pick, [args.range], [args.refl])
        g = rows[0]
        if g.extrapolated:
            print(f"warning: ({g.range_m:g} m, {g.reflectivity:g}) lies outside the training "
                  "bounds; the prediction is clamped", file=sys.stderr)
        print(f"{g.mean:.4f} ± {g.std:.4f}")
        return EXIT_OK
    rows = ev.prediction_grid(pick, _values(args.ranges), _values(args.refls))
    n_out = sum(g.extrapolated for g in rows)
    if n_out:
        print(f"warning: {n_out} grid points lie outside the training bounds (extrapolated=1)",
              file=sys.stderr)
    text = ev.grid_to_csv(rows)
    if cfg.out is not None:
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "predictions.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# --- evaluate -------------------------------------------------------------------------

CHECKS = ("grid", "error-trend")


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    mdir = Path(args.models) if args.models else out / "models"
    paths = {r: mdir / f"model_{r}.json" for r in ("diffuse", "retro")}
    models = {r: GPModel.load(p) for r, p in paths.items() if p.is_file()}
    if not models:
        raise ConfigError(f"{mdir}: no model_diffuse.json or model_retro.json")
    dpath = _dataset_path(cfg, args)
    samples = read_dataset(dpath)

    if args.paper_mode:
        subset, mode = samples, "all samples"
    else:
        rpath = mdir / "fit_report.json"
        if not rpath.is_file():
            raise ConfigError(f"{rpath}: fit report not found (needed for the held-out split)")
        rep = json.loads(rpath.read_text())
        if rep.get("dataset_sha256") != _sha256(dpath):
            raise ConfigError(f"{dpath}: differs from the dataset the models were fitted on")
        subset, mode = [samples[i] for i in rep["test_idx"]], "held-out split"
    present = {"diffuse": False, "retro": False}
    for s in subset:
        present["retro" if s.reflectivity >= 100 else "diffuse"] = True
    subset = [s for s in subset if models.get("retro" if s.reflectivity >= 100 else "diffuse")]

    reports = evaluate_models(models.get("diffuse"), models.get("retro"), subset)
    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    ev.write_text(rdir / "failure.csv", reports.failure.to_csv())
    ev.write_text(rdir / "failure.txt", reports.failure.to_text())
    ev.write_text(rdir / "errors.csv", reports.errors.to_csv())
    ev.write_text(rdir / "errors.txt", reports.errors.to_text())
    ev.write_text(rdir / "grid.csv", ev.grid_to_csv(reports.grid))
    ev.write_text(rdir / "grid.txt", ev.grid_to_text(reports.grid))
    flags = {**reports.flags, "mode": mode, "n_evaluated": len(subset)}
    _write_json(rdir / "flags.json", flags)

    print(f"evaluated {len(subset)} samples ({mode})\n")
    print(reports.failure.to_text())
    print(reports.errors.to_text())
    print(ev.grid_to_text(reports.grid))
    status = {"grid": flags["grid"]["all_pass"], "error-trend": flags["error_trend"]["increasing"]}
    failed = [c for c in (args.check or []) if not status[c]]
    for c in failed:
        print(f"check failed: {c}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


# --- entry point ----------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="JSON run configuration")
    g.add_argument("--seed", metavar="N", type=int, default=argparse.SUPPRESS, help="master seed")
    g.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    g.add_argument("--jobs", metavar="N", type=int, default=argparse.SUPPRESS,
                   help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarfog", description=__doc__.splitlines()[0])
    _common(parser)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="record fog runs and clear references")
    _common(p)
    p.add_argument("--preset", help=f"built-in scenario set: {', '.join(PRESETS)}")

    p = sub.add_parser("extract", help="turn recordings into disappear-visibility samples")
    _common(p)
    p.add_argument("--manifest", help="manifest from simulate (default OUT/manifest.json)")
    p.add_argument("--fog", help="a fog recording (.jsonl or .jsonl.gz) to replay")
    p.add_argument("--clear", help="its clear-air reference recording")
    p.add_argument("--trace", help="visibility CSV replacing the trace embedded in --fog")
    p.add_argument("--name", default="recording", help="label for --fog/--clear samples")
    p.add_argument("--sigma", type=float, help="lock tolerance on the averaged range, m")
    p.add_argument("--window", type=int, help="seconds the lock must hold")
    p.add_argument("--sigma-roi", type=float, help="ROI range tolerance, m")

    p = sub.add_parser("fit", help="fit the diffuse and retro GP models")
    _common(p)
    p.add_argument("--dataset", help="dataset CSV (default OUT/dataset.csv)")
    p.add_argument("--regime", choices=("both", "diffuse", "retro"), default="both")
    p.add_argument("--holdout", type=float, help="share of samples held out (default 0.2)")
    p.add_argument("--paper-mode", action="store_true", help="train on every sample")
    p.add_argument("--starts", type=int, help="optimizer starts per model")

    p = sub.add_parser("predict", help="predict disappear visibility")
    _common(p)
    p.add_argument("--model", action="append", required=True,
                   help="model JSON; pass twice for a diffuse/retro pair")
    p.add_argument("--range", type=float, help="target range, m")
    p.add_argument("--refl", type=float, help="reflectivity byte")
    p.add_argument("--ranges", default="10:30:5", help="grid ranges, '10,15' or '10:30:5'")
    p.add_argument("--refls", default="0:255:5", help="grid reflectivities")

    p = sub.add_parser("evaluate", help="failure rates, error table and prediction grid")
    _common(p)
    p.add_argument("--models", help="directory with model_*.json (default OUT/models)")
    p.add_argument("--dataset", help="dataset CSV (default OUT/dataset.csv)")
    p.add_argument("--paper-mode", action="store_true", help="score every sample, not the held-out split")
    p.add_argument("--check", action="append", choices=CHECKS,
                   help="exit with 3 when this monotonicity flag fails (repeatable)")
    return parser


COMMANDS = {"simulate": cmd_simulate, "extract": cmd_extract, "fit": cmd_fit,
            "predict": cmd_predict, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = load_run_config(getattr(args, "config", None))
        if hasattr(args, "seed"):
            cfg.seed = args.seed
        if hasattr(args, "out"):
            cfg.out = Path(args.out)
        if hasattr(args, "jobs"):
            cfg.jobs = args.jobs
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, SceneError, AtmosphereError, InsufficientData, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
