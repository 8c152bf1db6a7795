"""Paired evaluation of imputed studies against complete references.

Everything here works in subject space on intensities scaled by the
reference study's normalization parameters, so PSNR peaks stay at 1.0 for
the reference, the incomplete input and the imputed output alike.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CUT_AXIS, Mask3D, ShellId, Volume4D, require_same_grid
from .fov import FovCut, compute_acquired_mask
from .metrics import (adc_map, bland_altman, dice, kruskal_wallis, paired_t_test,
                      per_distance_curve, psnr, split_region_dice, ssim3d)
from .preprocess import normalize_intensity
from .segment import segment_structures

ADC_SCALE = 1000.0   # ADC in 1e-3 mm^2/s
ADC_RANGE = 3.0      # free water at body temperature is ~3e-3 mm^2/s

PSNR_SSIM_COLUMNS = ("subject", "shell", "n_volumes", "region_voxels", "psnr", "ssim",
                     "baseline_psnr", "baseline_ssim")
DISTANCE_COLUMNS = ("subject", "shell", "side", "distance_mm", "psnr", "ssim")
ADC_COLUMNS = ("subject", "volume", "bval", "gx", "gy", "gz", "adc_psnr")
DICE_COLUMNS = ("subject", "structure", "crosses_cut", "dice_incomplete", "dice_imputed",
                "dice_incomplete_acquired", "dice_imputed_acquired", "dice_imputed_imputed")
BLAND_ALTMAN_COLUMNS = ("measure", "input", "n", "mean_diff", "sd_diff", "loa_low", "loa_high")
STATISTICS_COLUMNS = ("test", "groups", "n", "statistic", "p_value")
MEASURE_COLUMNS = ("subject", "structure", "measure", "reference", "incomplete", "imputed")


def fmt(x) -> str:
    """CSV cell text: ints verbatim, floats with 10 significant digits, inf as 'inf'."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.10g}"
    return str(x)


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])


def missing_cuts(acquired: Mask3D) -> list[FovCut]:
    """Describe the unacquired slices at each end of the grid as cuts."""
    keep = acquired.data.any(axis=(0, 1))
    n = keep.size
    dz = acquired.spacing[CUT_AXIS]
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return [FovCut("top", n * dz, (0, n))]
    cuts = []
    if idx[-1] < n - 1:
        cuts.append(FovCut("top", (n - 1 - idx[-1]) * dz, (int(idx[-1]) + 1, n)))
    if idx[0] > 0:
        cuts.append(FovCut("bottom", idx[0] * dz, (0, int(idx[0]))))
    return cuts


def nearest_slice_fill(study: Volume4D, acquired: Mask3D) -> Volume4D:
    """Baseline imputation: copy the nearest acquired axial slice outward."""
    keep = np.flatnonzero(acquired.data.any(axis=(0, 1)))
    if keep.size == 0:
        return study
    k = np.arange(study.dims[CUT_AXIS])
    src = np.clip(k, keep[0], keep[-1])
    return study.with_data(np.ascontiguousarray(study.data[:, :, src, :]))


@dataclass
class EvalCase:
    """One subject: complete reference, incomplete input and imputed output."""

    subject_id: str
    ref: Volume4D
    incomplete: Volume4D
    imputed: Volume4D
    brain: Mask3D
    atlas: dict[str, Mask3D] = field(default_factory=dict)
    acquired: Mask3D | None = None

    def __post_init__(self):
        require_same_grid(self.ref, self.incomplete, self.imputed, self.brain)
        if self.acquired is None:
            norm, _ = normalize_intensity(self.incomplete)
            self.acquired = compute_acquired_mask(norm)

    def normalized(self) -> tuple[Volume4D, Volume4D, Volume4D]:
        _, params = normalize_intensity(self.ref)
        p = np.float32(params.p999)

        def scale(s):
            return s.with_data(np.clip(s.data, 0, p) / p)
        return scale(self.ref), scale(self.incomplete), scale(self.imputed)

    @property
    def region(self) -> np.ndarray:
        return self.brain.data & ~self.acquired.data


def _shell_volumes(study: Volume4D) -> dict[ShellId, list[int]]:
    shells = study.gradient.shells()
    return {sh: [v for v, s in enumerate(shells) if s == sh] for sh in ShellId}


def image_scores(case: EvalCase, ref, test, baseline=None) -> list[dict]:
    """Mean PSNR/SSIM per shell over the imputed region."""
    region = case.region
    rows = []
    for shell, vols in _shell_volumes(ref).items():
        if not vols:
            continue
        row = {"subject": case.subject_id, "shell": shell.value, "n_volumes": len(vols),
               "region_voxels": int(region.sum())}
        for prefix, img in (("", test), ("baseline_", baseline)):
            if img is None or not region.any():
                row[prefix + "psnr"] = row[prefix + "ssim"] = float("nan")
                continue
            ps = [psnr(ref.data[..., v], img.data[..., v], region) for v in vols]
            ss = [ssim3d(ref.data[..., v], img.data[..., v], region) for v in vols]
            row[prefix + "psnr"] = float(np.mean(ps))
            row[prefix + "ssim"] = float(np.mean(ss))
        rows.append(row)
    return rows


def distance_rows(case: EvalCase, ref, test) -> list[dict]:
    """Per-slice curves averaged over the volumes of each shell."""
    rows = []
    for cut in missing_cuts(case.acquired):
        for shell, vols in _shell_volumes(ref).items():
            if not vols:
                continue
            curves = [per_distance_curve(ref.volume(v), test.volume(v), cut, case.brain)
                      for v in vols]
            for i, point in enumerate(curves[0]):
                rows.append({"subject": case.subject_id, "shell": shell.value, "side": cut.side,
                             "distance_mm": point.distance_mm,
                             "psnr": float(np.mean([c[i].psnr for c in curves])),
                             "ssim": float(np.mean([c[i].ssim for c in curves]))})
    return rows


def adc_rows(case: EvalCase, ref, test) -> list[dict]:
    """Imputed-region PSNR of every diffusion-weighted volume's ADC map."""
    region = case.region
    if not region.any():
        return []
    rows = []
    for v in _shell_volumes(ref)[ShellId.B1300]:
        a = adc_map(ref, v, case.brain).data * ADC_SCALE
        b = adc_map(test, v, case.brain).data * ADC_SCALE
        g = ref.gradient.bvecs[v]
        rows.append({"subject": case.subject_id, "volume": v, "bval": float(ref.gradient.bvals[v]),
                     "gx": g[0], "gy": g[1], "gz": g[2],
                     "adc_psnr": psnr(a, b, region, data_range=ADC_RANGE)})
    return rows


def structure_measures(mask: np.ndarray, spacing) -> dict[str, float]:
    """Size and inferior-superior extent of a segmented structure."""
    ks = np.flatnonzero(mask.any(axis=(0, 1)))
    extent = (ks[-1] - ks[0] + 1) * spacing[CUT_AXIS] if ks.size else 0.0
    return {"volume_mm3": float(mask.sum() * np.prod(spacing)), "extent_mm": float(extent)}


def dice_rows(case: EvalCase) -> tuple[list[dict], list[dict]]:
    """Structure Dice of incomplete and imputed segmentations against the reference."""
    seg = {name: segment_structures(img, case.atlas)
           for name, img in (("ref", case.ref), ("incomplete", case.incomplete),
                             ("imputed", case.imputed))}
    m = case.acquired.data
    rows, measures = [], []
    for structure in seg["ref"]:
        r = seg["ref"][structure].data
        c = seg["incomplete"][structure].data
        t = seg["imputed"][structure].data
        c_acq, _ = split_region_dice(r, c, m)
        t_acq, t_imp = split_region_dice(r, t, m)
        rows.append({"subject": case.subject_id, "structure": structure,
                     "crosses_cut": bool((r & ~m).any() and (r & m).any()),
                     "dice_incomplete": dice(r, c), "dice_imputed": dice(r, t),
                     "dice_incomplete_acquired": c_acq, "dice_imputed_acquired": t_acq,
                     "dice_imputed_imputed": t_imp})
        sizes = {k: structure_measures(seg[k][structure].data, case.ref.spacing) for k in seg}
        for measure in ("volume_mm3", "extent_mm"):
            measures.append({"subject": case.subject_id, "structure": structure, "measure": measure,
                             "reference": sizes["ref"][measure],
                             "incomplete": sizes["incomplete"][measure],
                             "imputed": sizes["imputed"][measure]})
    return rows, measures


@dataclass
class MetricsReport:
    psnr_ssim: list[dict] = field(default_factory=list)
    distance_curve: list[dict] = field(default_factory=list)
    adc_directions: list[dict] = field(default_factory=list)
    dice: list[dict] = field(default_factory=list)
    measures: list[dict] = field(default_factory=list)

    def add(self, case: EvalCase, baseline: bool = True, structures: bool = True):
        ref, inc, imp = case.normalized()
        base = nearest_slice_fill(inc, case.acquired) if baseline else None
        self.psnr_ssim += image_scores(case, ref, imp, base)
        self.distance_curve += distance_rows(case, ref, imp)
        self.adc_directions += adc_rows(case, ref, imp)
        if structures:
            d, m = dice_rows(case)
            self.dice += d
            self.measures += m

    def bland_altman(self) -> list[dict]:
        rows = []
        for measure in sorted({m["measure"] for m in self.measures}):
            sel = [m for m in self.measures if m["measure"] == measure]
            if len(sel) < 2:
                continue
            for which in ("incomplete", "imputed"):
                ba = bland_altman([m["reference"] for m in sel], [m[which] for m in sel])
                rows.append({"measure": measure, "input": which, "n": len(sel), **ba._asdict()})
        return rows

    def statistics(self) -> list[dict]:
        rows = []
        by_dir: dict[int, list[float]] = {}
        for r in self.adc_directions:
            if math.isfinite(r["adc_psnr"]):
                by_dir.setdefault(r["volume"], []).append(r["adc_psnr"])
        if len(by_dir) >= 2:
            h, p = kruskal_wallis([by_dir[k] for k in sorted(by_dir)])
            rows.append({"test": "kruskal_wallis", "groups": "adc_psnr_by_direction",
                         "n": sum(map(len, by_dir.values())), "statistic": h, "p_value": p})
        crossing = [r for r in self.dice if r["crosses_cut"]]
        if len(crossing) >= 2:
            t, p = paired_t_test([r["dice_incomplete"] for r in crossing],
                                 [r["dice_imputed"] for r in crossing])
            rows.append({"test": "paired_t", "groups": "dice_imputed_vs_incomplete",
                         "n": len(crossing), "statistic": t, "p_value": p})
        return rows

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "psnr_ssim.csv": (PSNR_SSIM_COLUMNS, self.psnr_ssim),
            "distance_curve.csv": (DISTANCE_COLUMNS, self.distance_curve),
            "adc_directions.csv": (ADC_COLUMNS, self.adc_directions),
            "dice.csv": (DICE_COLUMNS, self.dice),
            "structure_measures.csv": (MEASURE_COLUMNS, self.measures),
            "bland_altman.csv": (BLAND_ALTMAN_COLUMNS, self.bland_altman()),
            "statistics.csv": (STATISTICS_COLUMNS, self.statistics()),
        }
        for name, (cols, rows) in files.items():
            write_rows(out / name, cols, rows)
        return [out / n for n in files]
