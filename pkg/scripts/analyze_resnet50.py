#!/usr/bin/env python3
"""Print the static complexity report for the bundled ResNet50 descriptor.

    python3 scripts/analyze_resnet50.py [path/to/other.arch]
"""

import os
import sys

import gatecut
from gatecut.archfile import load_arch
from gatecut.complexity import analyze_static


def main():
    if len(sys.argv) > 1:
        path = sys.argv[1]
    else:
        path = os.path.join(
            os.path.dirname(gatecut.__file__), "descriptors", "resnet50.arch"
        )
    rep = analyze_static(load_arch(path))
    print(rep.to_text())
    print(f"params: {rep.total_params / 1e6:.3f}M  flops: {rep.total_flops / 1e9:.3f}G")


if __name__ == "__main__":
    main()
