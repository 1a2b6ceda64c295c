"""Repeat the default run over several seeds and tabulate the model-quality checks.

    python3 scripts/seed_robustness.py --seeds 42 1 2 3 4
"""

import argparse
import time

from lidarfog.lidar import LidarConfig
from lidarfog.pipeline import evaluate_models, fit_models, pool_samples, run_scenarios
from lidarfog.presets import preset
from lidarfog.scene import ReflectorClass


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[42, 1, 2, 3, 4])
    ap.add_argument("--preset", default="paper-all")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    print(f"{'seed':>5} {'n':>6} {'fail_d':>7} {'fail_r':>7} {'retro<diffuse':>14} "
          f"{'mae_trend':>10} {'grid':>5} {'sec':>5}")
    for seed in args.seeds:
        t0 = time.perf_counter()
        samples, _ = pool_samples(run_scenarios(preset(args.preset), LidarConfig(), seed, jobs=args.jobs))
        fitted = fit_models(samples, seed=seed)
        test = [samples[i] for i in fitted.test_idx]
        rep = evaluate_models(fitted.models["diffuse"], fitted.models["retro"], test)
        d = rep.failure.rate(ReflectorClass.DIFFUSE)
        r = rep.failure.rate(ReflectorClass.RETRO)
        print(f"{seed:>5} {len(samples):>6} {d:>7.3f} {r:>7.3f} {str(r < d):>14} "
              f"{str(rep.flags['error_trend']['increasing']):>10} "
              f"{str(rep.flags['grid']['all_pass']):>5} {time.perf_counter() - t0:>5.0f}")


if __name__ == "__main__":
    main()
