"""Target detection benchmark on random disc images (recall, centre error, false positives).

    python scripts/bench_detection.py --seeds 100 --pitch 0.5
"""

import argparse
import time

import numpy as np

from scanrecon import synth
from scanrecon.targets import detect_circles


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--pitch", type=float, default=0.5)
    ap.add_argument("--size", type=int, default=160, help="image rows and columns")
    ap.add_argument("--min-in-view", type=float, default=0.6)
    ap.add_argument("--contrast-min", type=float, default=0.3)
    args = ap.parse_args()

    errs, missed, fp, fp_blank = [], [], 0, 0
    t0 = time.perf_counter()
    for seed in range(args.seeds):
        scene, discs = synth.disc_trial(seed, args.size, args.size, args.pitch,
                                        contrast=(args.contrast_min, 0.7), min_in_view=args.min_in_view)
        got = np.array([t.center_px for t in detect_circles(synth.render_pass(scene, 0).image)]).reshape(-1, 2)
        used = set()
        for r, c, rad, con in discs:
            d = np.hypot(got[:, 0] - r, got[:, 1] - c) if len(got) else np.array([np.inf])
            j = int(np.argmin(d))
            if d[j] <= max(2.0, 0.5 * rad):
                used.add(j)
                errs.append(d[j])
            else:
                missed.append((seed, rad * args.pitch, con))
        fp += len(got) - len(used)
        blank, _ = synth.disc_trial(seed, args.size, args.size, args.pitch, blank=True)
        fp_blank += len(detect_circles(synth.render_pass(blank, 0).image))
    errs = np.array(errs)
    n = len(errs) + len(missed)
    print(f"{args.seeds} images, {n} discs, {time.perf_counter() - t0:.1f} s")
    print(f"recall {len(errs) / n:.4f}")
    print(f"centre error px: mean {errs.mean():.4f}  p99 {np.percentile(errs, 99):.4f}  max {errs.max():.4f}")
    print(f"false positives: {fp} on disc images, {fp_blank} on blank images")
    for seed, r_mm, con in missed:
        print(f"  missed: seed {seed} radius {r_mm:.2f} mm contrast {con:.2f}")


if __name__ == "__main__":
    main()
