#!/usr/bin/env python3
"""Regenerate the bundled miniature example under data/mini128/.

The scene is procedural and seeded, so the committed files are
reproducible: curves.json holds eight random arcs on a 128x128 canvas and
features.nsfs the nine synthetic view channels for them. style.cfg is the
default oracle style used by the walkthrough in the README.
"""
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from strokestyle import io as sio
from strokestyle import synth

OUT = os.path.join(os.path.dirname(__file__), "..", "data", "mini128")

STYLE_CFG = """\
# procedural oracle style for the mini example
t0 = 2.0
t1 = 1.0
freq = 1.0
t2 = 0.0
amp = 1.0
disp_freq = 1.0
ink = 0.1,0.1,0.1
"""


def main():
    os.makedirs(OUT, exist_ok=True)
    curves, vmaps = synth.make_example_scene(size=128, n_paths=8, seed=0)
    sio.write_curves(os.path.join(OUT, "curves.json"), curves)
    sio.write_feature_stack(os.path.join(OUT, "features.nsfs"), vmaps)
    with open(os.path.join(OUT, "style.cfg"), "w") as f:
        f.write(STYLE_CFG)
    n_pts = sum(p.shape[0] for p in curves.paths)
    print(f"wrote {len(curves.paths)} curves ({n_pts} points) and "
          f"{vmaps.shape} features to {OUT}")


if __name__ == "__main__":
    main()
