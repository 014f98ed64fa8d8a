"""Rejection rates of frt, min, pair_half and pair over a tau grid.

    python3 scripts/run_power_study.py --N 300 --n-hotspots 10 --n-treated 4 \
        --taus 0 1 --sims 500 --R 500 --out power.csv

Any SimConfig field not exposed here can be set with --set key=json_value.
"""

import argparse
import json
import sys
import time

from pnrt.sim import SimConfig, run_power_study


def parse(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--N", type=int, default=1000)
    p.add_argument("--n-hotspots", type=int, default=20)
    p.add_argument("--n-treated", type=int, default=7)
    p.add_argument("--taus", type=float, nargs="+", default=None)
    p.add_argument("--sims", type=int, default=200)
    p.add_argument("--R", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    return p.parse_args(argv)


def main(argv=None):
    a = parse(argv)
    cfg = dict(N=a.N, n_hotspots=a.n_hotspots, n_treated=a.n_treated, sims=a.sims, R=a.R,
               seed=a.seed, workers=a.workers)
    if a.taus is not None:
        cfg["taus"] = a.taus
    for item in a.set:
        k, _, v = item.partition("=")
        cfg[k] = json.loads(v)
    sim = SimConfig.from_dict(cfg)
    t0 = time.perf_counter()
    table = run_power_study(sim)
    text = table.to_csv()
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"# {time.perf_counter() - t0:.1f}s", file=sys.stderr)


if __name__ == "__main__":
    main()
