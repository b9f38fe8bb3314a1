#!/usr/bin/env python3
"""Pruning-pressure sweep on a teacher/student regression task.

Trains the same 8-block student under increasing regularization strength nu
and reports the seed-median FLOPS and parameter pruning ratios, plus the
effect of the layer-emphasis weight alpha on surviving depth.

    python3 scripts/directional_sweep.py [--seeds 3] [--epochs 12]
"""

import argparse

import numpy as np

from gatecut.data import gen_teacher_student
from gatecut.model import init_weights, network_from_widths
from gatecut.numerics import Rng
from gatecut.trainer import Hyperparams, train


def make_data(seed):
    tspec = network_from_widths(4, 10, 2, 5, activation="tanh")
    tw = init_weights(tspec, Rng(777))
    for bw in tw.blocks:
        if bw.w1 is not None:
            bw.w1 *= 4.0
    return gen_teacher_student(tspec, tw, 10_000, 0.01, Rng(100 + seed))


def run(nu, alpha, seed, epochs):
    spec = network_from_widths(4, 16, 2, 8, activation="tanh")
    hp = Hyperparams(
        nu=nu, alpha=alpha, beta=0.5, epochs=epochs, seed=seed,
        w_lr=0.01, theta_lr=0.005, finalize_epoch=max(2, epochs - 2),
    )
    m = train(spec, make_data(seed), hp).metrics[-1]
    return m


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=12)
    args = ap.parse_args()
    seeds = range(args.seeds)

    print(f"{'nu':>6} {'alpha':>6} {'fPR':>8} {'pPR':>8} {'layers':>7} {'loss':>10}")
    for nu in (0.0, 0.01, 0.05):
        for alpha in (0.0, 0.5):
            ms = [run(nu, alpha, s, args.epochs) for s in seeds]
            print(
                f"{nu:>6} {alpha:>6} "
                f"{np.median([m.fpr for m in ms]):>8.3f} "
                f"{np.median([m.ppr for m in ms]):>8.3f} "
                f"{np.median([m.layers_left for m in ms]):>7.0f} "
                f"{np.median([m.train_loss for m in ms]):>10.4f}"
            )


if __name__ == "__main__":
    main()
