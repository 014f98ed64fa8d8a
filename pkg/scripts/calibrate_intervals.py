"""Average interval populations (near spillover, far spillover, control) over seeds.

Useful when changing the placement settings: the defaults aim at about 420/250/320.
"""

import argparse

import numpy as np

from pnrt.sim import SimConfig, interval_populations


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--background", type=float, default=None)
    p.add_argument("--hotspot-core-share", type=float, default=None)
    a = p.parse_args()
    kw = {}
    if a.background is not None:
        kw["background"] = a.background
    if a.hotspot_core_share is not None:
        kw["hotspot_core_share"] = a.hotspot_core_share
    pops = np.array([interval_populations(SimConfig(seed=s, **kw), draws=a.draws)
                     for s in range(a.seeds)])
    for s, row in enumerate(pops):
        print(f"seed {s}: " + " ".join(f"{v:7.1f}" for v in row))
    print("mean:   " + " ".join(f"{v:7.1f}" for v in pops.mean(axis=0)))


if __name__ == "__main__":
    main()
