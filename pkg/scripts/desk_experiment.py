"""Desk-scale experiment: train on phantoms, impute held-out cut phantoms, summarize.

    python3 scripts/desk_experiment.py --out runs/desk
    python3 scripts/desk_experiment.py --out runs/desk --skip-train   # reuse runs/desk/bundle

Every stage goes through the ``fovx`` command line, so the directory left
behind is exactly what a user of the CLI would get.
"""

import argparse
import csv
import math
import sys
import time
from pathlib import Path

import numpy as np
from scipy import stats

from fovx.cli import EXIT_OK, main as fovx

ROOT = Path(__file__).resolve().parents[1]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*args):
    print("fovx", " ".join(str(a) for a in args), flush=True)
    t = time.monotonic()
    code = fovx([str(a) for a in args])
    if code != EXIT_OK:
        sys.exit(f"fovx {args[0]} failed with exit code {code}")
    print(f"  done in {time.monotonic() - t:.0f} s", flush=True)


def summarize(ev: Path):
    scores = rows(ev / "psnr_ssim.csv")
    print("\nshell   PSNR    baseline  SSIM   baseline")
    for shell in ("b0", "b1300"):
        sel = [r for r in scores if r["shell"] == shell]
        m = {k: np.mean([float(r[k]) for r in sel]) for k in ("psnr", "baseline_psnr", "ssim", "baseline_ssim")}
        print(f"{shell:<6} {m['psnr']:6.2f}  {m['baseline_psnr']:6.2f}    {m['ssim']:.3f}  {m['baseline_ssim']:.3f}")

    curve = [r for r in rows(ev / "distance_curve.csv") if math.isfinite(float(r["psnr"]))]
    rho, p = stats.spearmanr([float(r["distance_mm"]) for r in curve], [float(r["psnr"]) for r in curve])
    print(f"\nPSNR vs distance from brain extremity: Spearman {rho:+.3f} (p {p:.2e})")
    for shell in ("b0", "b1300"):
        sel = [r for r in curve if r["shell"] == shell]
        rho, p = stats.spearmanr([float(r["distance_mm"]) for r in sel], [float(r["psnr"]) for r in sel])
        print(f"  {shell}: {rho:+.3f} (p {p:.2e})")

    print()
    for r in rows(ev / "statistics.csv"):
        print(f"{r['test']:<15} {r['groups']:<28} n={r['n']:<4} stat={float(r['statistic']):.3f}  "
              f"p={float(r['p_value']):.3g}")


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/desk"))
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.json")
    p.add_argument("--heldout", type=Path, default=ROOT / "configs" / "heldout.json")
    p.add_argument("--skip-train", action="store_true")
    return p.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    out = args.out
    if not args.skip_train:
        run("phantom", "--config", args.config, "--out", out / "train")
        run("train", "--config", args.config, "--manifest", out / "train" / "manifest.csv",
            "--bundle", out / "bundle", "-v")
    run("phantom", "--config", args.heldout, "--out", out / "heldout")
    run("impute", "--config", args.heldout, "--manifest", out / "heldout" / "manifest_cut.csv",
        "--bundle", out / "bundle", "--out", out / "imputed")
    run("evaluate", "--config", args.heldout, "--manifest", out / "heldout" / "manifest.csv",
        "--inputs", out / "heldout" / "manifest_cut.csv", "--test-dir", out / "imputed",
        "--out", out / "eval")
    summarize(out / "eval")


if __name__ == "__main__":
    main()
