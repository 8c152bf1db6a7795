"""Plot per-slice PSNR/SSIM against distance from the brain extremity.

    python3 scripts/plot_distance_curve.py runs/desk/eval/distance_curve.csv curve.png
"""

import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def main(src, dst):
    curves = defaultdict(lambda: defaultdict(list))
    with open(src, newline="") as fh:
        for r in csv.DictReader(fh):
            for metric in ("psnr", "ssim"):
                curves[(r["shell"], metric)][float(r["distance_mm"])].append(float(r[metric]))
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric in zip(axes, ("psnr", "ssim")):
        for shell in ("b0", "b1300"):
            pts = curves[(shell, metric)]
            d = sorted(pts)
            vals = [np.array(pts[k])[np.isfinite(pts[k])] for k in d]
            ax.errorbar(d, [v.mean() for v in vals], yerr=[v.std() for v in vals], label=shell, capsize=2)
        ax.set_xlabel("distance from brain extremity (mm)")
        ax.set_ylabel(metric.upper())
        ax.legend()
    fig.tight_layout()
    fig.savefig(dst, dpi=120)


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
