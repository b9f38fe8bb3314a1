#!/usr/bin/env python3
"""Empirical convergence certification on a smooth single-block host.

Builds a softplus host network, estimates the stability constants from
random samples, then integrates many trajectories started inside the
block- and unit-attraction regions and tallies the certification verdicts.

    python3 scripts/certify_stability.py [--trials 25] [--t-end 10]
"""

import argparse
from collections import Counter

from gatecut import odelab
from gatecut.model import BlockSpec, NetworkSpec, init_weights
from gatecut.numerics import Rng


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=25)
    ap.add_argument("--t-end", type=float, default=10.0)
    ap.add_argument("--dt", type=float, default=1e-2)
    args = ap.parse_args()

    spec = NetworkSpec(
        [BlockSpec(3, 2, 2, activation="softplus", skip="dense", gate_2=False)]
    )
    spec.validate()
    rng = Rng(5)
    w = init_weights(spec, rng)
    x = rng.standard_normal(40 * 3).reshape(40, 3)
    y = rng.standard_normal(40 * 2).reshape(40, 2)
    host = odelab.make_host(spec, w, x, y, nu=0.3, alpha=0.2, beta=0.5, lam=1.0)

    eta, kappa = odelab.estimate_eta_kappa(host, 200, Rng(6), 1.0)
    sc = odelab.stability_consts(host, eta, kappa)
    print(f"eta={eta:.4f} kappa={kappa:.4f} region threshold={sc.threshold:.6f}")

    for which in ("B", "U"):
        tally = Counter()
        for trial in range(args.trials):
            s0 = odelab.random_state_in_region(host, sc, Rng(1000 * trial + 17), which, 0)
            v = odelab.certify(
                host, s0, sc, dt=args.dt, t_end=args.t_end, which=which, unit=0
            )
            tally[v.status] += 1
        line = " ".join(f"{k}:{n}" for k, n in sorted(tally.items()))
        print(f"region {which}: {line} over {args.trials} trials")


if __name__ == "__main__":
    main()
