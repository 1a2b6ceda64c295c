"""Median disappear visibility of boards A/B/C by range over many seeds.

    python3 scripts/board_ordering.py --seeds 30
"""

import argparse
import collections

import numpy as np

from lidarfog.lidar import LidarConfig
from lidarfog.pipeline import run_scenarios
from lidarfog.presets import _name, staggered_boards


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=30)
    ap.add_argument("--ranges", type=float, nargs="+", default=[10.0, 15.0, 20.0, 25.0])
    ap.add_argument("--echo-fading", type=float, default=LidarConfig().echo_fading)
    args = ap.parse_args()

    lidar = LidarConfig(echo_fading=args.echo_fading)
    scenario = staggered_boards(tuple(args.ranges))
    pool = collections.defaultdict(list)
    for seed in range(args.seeds):
        (res,) = run_scenarios([scenario], lidar, seed)
        for s in res.samples:
            pool[s.target_id].append(s.v_dis)

    print(f"{'board':>6} " + " ".join(f"{r:>12g}m" for r in args.ranges))
    for b in "ABC":
        cells = []
        for r in args.ranges:
            v = pool[_name(f"board_{b}", r)]
            cells.append(f"{np.median(v):>7.1f} ({len(v):>4})" if v else f"{'-':>13}")
        print(f"{b:>6} " + " ".join(cells))


if __name__ == "__main__":
    main()
