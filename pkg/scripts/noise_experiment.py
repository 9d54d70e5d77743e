"""Detection quality of the two-stage pipeline as oracle noise grows.

For each noise level, fits the stump forest on one synthetic train/val pair,
detects on held-out ROIs and reports F1, the swept threshold and the width of
the F1 plateau around it. Prints a table and optionally writes JSON.
"""

import argparse
import json
import time

from mitodet.evaluation import MatchCounts, match_detections, prf1
from mitodet.models import oracle_classifier, oracle_segmenter
from mitodet.pipeline import TrainingImage, Track1Config, detect, fit_track1_ensemble, track1_roster
from mitodet.synthetic import make_world


def run(noise: float, size: int, n: int, n_test: int, seed: int, workers: int) -> dict:
    worlds = [make_world(f"w{i}", size, size, n, n, seed=seed * 100 + i) for i in range(2 + n_test)]
    planted = [a for w in worlds for a in w.annotations]
    seg = oracle_segmenter(planted, noise=noise, seed=seed)
    clfs = [oracle_classifier(planted, sharpness=s, noise=noise, seed=seed + i, name=f"clf{i}")
            for i, s in enumerate((0.3, 0.5, 0.8))]
    cfg = Track1Config(seed=seed)
    roster = track1_roster(clfs, cfg)
    train, val, *test = worlds
    forest, report, counts = fit_track1_ensemble(
        [TrainingImage(train.image, train.ref, train.annotations)],
        [TrainingImage(val.image, val.ref, val.annotations)],
        seg, roster, cfg, seed=seed, workers=workers)
    total = MatchCounts(0, 0, 0)
    for w in test:
        dets = detect(w.image, w.ref, cfg, seg, roster, forest, workers=workers)
        total = total + match_detections(dets, w.mitoses, cfg.match_radius).counts
    p, r, f1 = prf1(total)
    return {"noise": noise, "precision": p, "recall": r, "f1": f1,
            "threshold": report.best_threshold, "val_f1": report.best_f1,
            "plateau_width": report.plateau_width, "train_counts": counts}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2])
    ap.add_argument("--size", type=int, default=2048)
    ap.add_argument("--n", type=int, default=50, help="mitoses (and mimickers) per ROI")
    ap.add_argument("--n-test", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", help="optional JSON output path")
    args = ap.parse_args()

    rows = []
    print(f"{'noise':>6} {'P':>6} {'R':>6} {'F1':>6} {'thr':>6} {'plateau':>8} {'secs':>6}")
    for noise in args.noise:
        t0 = time.perf_counter()
        row = run(noise, args.size, args.n, args.n_test, args.seed, args.workers)
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        print(f"{noise:6.2f} {row['precision']:6.3f} {row['recall']:6.3f} {row['f1']:6.3f} "
              f"{row['threshold']:6.3f} {row['plateau_width']:8.3f} {row['seconds']:6.1f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
