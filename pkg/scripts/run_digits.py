#!/usr/bin/env python3
"""Prune a 6-block MLP on a small image-classification task.

Uses MNIST when the IDX files are present under --mnist-dir (see
scripts/fetch_mnist.py); otherwise falls back to scikit-learn's 8x8 digits.
Trains a dense baseline and a gated run side by side and prints the
accuracy/pruning trade-off.

    python3 scripts/run_digits.py [--nu 0.03]
"""

import argparse
import os

import numpy as np

from gatecut.data import load_idx
from gatecut.model import network_from_widths
from gatecut.numerics import Rng
from gatecut.trainer import Hyperparams, train

MNIST_NAMES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def load_dataset(mnist_dir):
    paths = [os.path.join(mnist_dir, n) for n in MNIST_NAMES]
    if all(os.path.exists(p) for p in paths):
        return load_idx(*paths), 6
    from sklearn.datasets import load_digits

    import gatecut.data as data

    d = load_digits()
    images = (d.images * (255.0 / 16.0)).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    order = np.argsort(Rng(42).uniform(len(images)), kind="stable")
    images, labels = images[order], labels[order]
    import tempfile

    tmp = tempfile.mkdtemp()
    n_test = 360
    tr = (os.path.join(tmp, "tr-i"), os.path.join(tmp, "tr-l"))
    te = (os.path.join(tmp, "te-i"), os.path.join(tmp, "te-l"))
    data.write_idx(*tr, images[n_test:], labels[n_test:])
    data.write_idx(*te, images[:n_test], labels[:n_test])
    return load_idx(tr[0], tr[1], te[0], te[1]), 40


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nu", type=float, default=0.03)
    ap.add_argument("--mnist-dir", default=os.path.join("data", "mnist"))
    args = ap.parse_args()
    ds, epochs = load_dataset(args.mnist_dir)
    in_width = ds.inputs.shape[1]
    print(f"dataset: {ds.provenance}, {ds.n_train} train / {ds.test_idx.size} test")

    for nu in (0.0, args.nu):
        spec = network_from_widths(
            in_width, 128, 10, 6, activation="relu", task="classification"
        )
        hp = Hyperparams(
            nu=nu, alpha=0.0, beta=0.0, epochs=epochs, seed=0, batch_size=32,
            w_lr=0.02, w_schedule="cosine", theta_lr=0.005,
            finalize_epoch=epochs - 5 if nu > 0 else None,
        )
        m = train(spec, ds, hp).metrics[-1]
        print(
            f"nu={nu}: test acc {m.test_acc:.3f}, fPR {m.fpr:.3f}, "
            f"pPR {m.ppr:.3f}, layers left {m.layers_left}"
        )


if __name__ == "__main__":
    main()
