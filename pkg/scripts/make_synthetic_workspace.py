"""Write a self-contained synthetic workspace for trying the CLI.

Creates train/, val/, images/ and gt/ directories of synthetic ROIs plus a
config.toml that wires oracle scorers to the ground truth. Afterwards:

    mitodet fit-ensemble --config WS/config.toml --train WS/train --val WS/val --out WS/forest.json
    mitodet detect --config WS/config.toml --images WS/images --out WS/pred
    mitodet evaluate --pred WS/pred --gt WS/gt --out WS/report.json
"""

import argparse
from pathlib import Path

from mitodet import io
from mitodet.synthetic import make_world

CONFIG = """\
workers = 1

[track1]
segmenter = "seg"
classifiers = ["clf_a", "clf_b", "clf_c"]
forest = "forest.json"

[track2]
classifiers = ["atyp_a", "atyp_b", "atyp_c"]

[[backends]]
name = "seg"
kind = "segmenter"
backend = "oracle-segmenter"
path = "all_gt"
[backends.options]
radius = 45
noise = {noise}
"""

CLASSIFIER = """
[[backends]]
name = "{name}"
kind = "classifier"
backend = "oracle-classifier"
path = "all_gt"
[backends.options]
sharpness = {sharpness}
noise = {noise}
seed = {seed}
"""

CONSTANT = """
[[backends]]
name = "{name}"
kind = "classifier"
backend = "constant"
input_size = 128
[backends.options]
value = {value}
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out", type=Path)
    ap.add_argument("--size", type=int, default=2048)
    ap.add_argument("--n-mitoses", type=int, default=50)
    ap.add_argument("--n-mimickers", type=int, default=50)
    ap.add_argument("--n-test", type=int, default=2, help="number of evaluation ROIs")
    ap.add_argument("--noise", type=float, default=0.0, help="oracle output noise (std)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    def world(name, sub, seed, group="synthetic"):
        w = make_world(name, args.size, args.size, args.n_mitoses, args.n_mimickers,
                       seed=args.seed * 1000 + seed, group=group)
        io.write_png(args.out / sub / f"{name}.png", w.image)
        io.write_annotations(args.out / "all_gt" / f"{name}.json", w.ref, w.annotations)
        if sub in ("train", "val"):
            io.write_annotations(args.out / sub / f"{name}.json", w.ref, w.annotations)
        else:
            io.write_annotations(args.out / "gt" / f"{name}.json", w.ref, w.annotations)

    world("train0", "train", 1)
    world("val0", "val", 2)
    for i in range(args.n_test):
        world(f"roi{i}", "images", 10 + i, group=f"scanner{i % 2}")

    text = CONFIG.format(noise=args.noise)
    for i, (name, sharp) in enumerate((("clf_a", 0.3), ("clf_b", 0.5), ("clf_c", 0.8))):
        text += CLASSIFIER.format(name=name, sharpness=sharp, noise=args.noise, seed=i)
    for name, value in (("atyp_a", 0.2), ("atyp_b", 0.4), ("atyp_c", 0.6)):
        text += CONSTANT.format(name=name, value=value)
    (args.out / "config.toml").write_text(text)
    print(f"workspace written to {args.out}")


if __name__ == "__main__":
    main()
