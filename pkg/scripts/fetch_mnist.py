#!/usr/bin/env python3
"""Download the MNIST IDX files into data/mnist/.

The library itself never touches the network; training configs point at
these files once fetched.  Usage:

    python3 scripts/fetch_mnist.py [--out data/mnist]
"""

import argparse
import gzip
import os
import urllib.request

MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist"
FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=os.path.join("data", "mnist"))
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for name in FILES:
        dest = os.path.join(args.out, name)
        if os.path.exists(dest):
            print(f"{dest}: already present")
            continue
        url = f"{MIRROR}/{name}.gz"
        print(f"fetching {url}")
        with urllib.request.urlopen(url) as resp:
            raw = gzip.decompress(resp.read())
        with open(dest, "wb") as fh:
            fh.write(raw)
        print(f"wrote {dest} ({len(raw)} bytes)")


if __name__ == "__main__":
    main()
