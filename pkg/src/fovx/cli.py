"""``fovx`` command line: phantom | train | impute | evaluate | qa.

Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import DatasetManifest, ManifestRow, RunConfig, load_config, subject_seed
from .core import Mask3D, Volume4D
from .errors import ConfigError, FovxError
from .evaluation import EvalCase, MetricsReport, write_rows
from .fov import compute_acquired_mask, cut_from_brain, cutoff_side, estimate_cutoff
from .io import (read_affine, read_gradient_table, read_mask, read_nifti, write_gradient_table,
                 write_nifti)
from .model import impute_study, load_bundle, prepare_sample, save_bundle, train
from .phantom import default_gradient_table, make_study
from .model.train import LOG_COLUMNS, T1_BRAIN_THRESHOLD
from .preprocess import mask_to_normalized_space, normalize_intensity, normalize_t1, resample
from .segment import threshold_brain

log = logging.getLogger("fovx")

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
QA_COLUMNS = ("subject", "top_mm", "bottom_mm", "thickness_mm", "side")
OUTPUT_SUFFIX = "_fovx"


def _nifti_ext(path: Path) -> str:
    return ".nii.gz" if path.name.endswith(".nii.gz") else ".nii"


def _stem(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def load_row(row: ManifestRow, b0_threshold: float):
    """(study, t1, reg, brain-in-T1-space or None, atlas) for one manifest row."""
    dwi = read_nifti(row.dwi)
    if not isinstance(dwi, Volume4D):
        dwi = Volume4D(dwi.data[..., None], dwi.spacing, dwi.affine)
    study = dwi.with_gradient(read_gradient_table(row.bvals, row.bvecs, b0_threshold))
    t1 = read_nifti(row.t1)
    reg = np.eye(4) if row.reg is None else read_affine(row.reg)
    brain = read_mask(row.brain) if row.brain is not None else None
    atlas = {k: read_mask(p) for k, p in row.structures.items()}
    return study, t1, reg, brain, atlas


def brain_on_dwi_grid(study: Volume4D, t1, reg, brain: Mask3D | None) -> Mask3D:
    """Brain mask on the DWI grid: the supplied T1-space mask, else a thresholded T1."""
    if brain is None:
        t1n, _ = normalize_t1(t1)
        t1_on_dwi = resample(replace(t1n, affine=reg @ t1n.affine), study.grid)
        return Mask3D.on_grid(t1_on_dwi.data > T1_BRAIN_THRESHOLD, study.grid)
    return mask_to_normalized_space(brain, study.grid, reg)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# phantom ---------------------------------------------------------------------------------

def cmd_phantom(cfg: RunConfig, out: Path) -> DatasetManifest:
    pc = cfg.phantom
    out.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if pc.compress else ".nii"
    table = default_gradient_table(pc.n_directions, pc.n_b0)
    n_train, _ = pc.split_counts()
    rows, cut_rows = [], []
    for i in range(pc.n_subjects):
        sid = f"sub-{i:03d}"
        spec = replace(pc.spec, seed=subject_seed(cfg.seed, i))
        ps = make_study(spec, table)
        paths = {k: out / f"{sid}_{k}{ext}" for k in ("dwi", "t1", "brain")}
        write_nifti(ps.dwi, paths["dwi"])
        write_nifti(ps.t1, paths["t1"])
        write_nifti(ps.phantom.brain, paths["brain"])
        write_gradient_table(table, out / f"{sid}.bval", out / f"{sid}.bvec")
        structures = {}
        for name, mask in ps.phantom.masks.items():
            if name.startswith("tract"):
                structures[name] = out / f"{sid}_{name}{ext}"
                write_nifti(mask, structures[name])
        split = "train" if i < n_train else "val"
        row = ManifestRow(sid, paths["dwi"], out / f"{sid}.bval", out / f"{sid}.bvec", paths["t1"],
                          None, paths["brain"], structures, split)
        rows.append(row)
        if pc.cut_mm is not None:
            cut, _, _ = cut_from_brain(ps.dwi, ps.phantom.brain, pc.cut_mm, pc.cut_side)
            cut_path = out / f"{sid}_dwi_cut{ext}"
            write_nifti(cut, cut_path)
            cut_rows.append(replace(row, dwi=cut_path, split="test"))
    manifest = DatasetManifest(rows, out)
    manifest.write(out / "manifest.csv")
    if pc.cut_mm is not None:
        DatasetManifest(cut_rows, out).write(out / "manifest_cut.csv")
    (out / "phantom_config.json").write_text(
        json.dumps({"seed": cfg.seed, "phantom": cfg.to_dict()["phantom"]}, indent=2, sort_keys=True) + "\n")
    return manifest


# train -----------------------------------------------------------------------------------

def _samples(rows, cfg: RunConfig):
    out = []
    for row in rows:
        study, t1, reg, brain, _ = load_row(row, cfg.shells.b0_threshold)
        out.append(prepare_sample(study, t1, reg, brain, cfg.grid_dims, row.subject))
    return out


def cmd_train(cfg: RunConfig, manifest: DatasetManifest, bundle_dir: Path):
    train_rows, val_rows = manifest.split("train"), manifest.split("val")
    if not train_rows:
        raise ConfigError("manifest has no 'train' rows")
    if not val_rows:
        raise ConfigError("manifest has no 'val' rows")
    result = train(_samples(train_rows, cfg), _samples(val_rows, cfg), cfg.train, cfg.generator,
                   log_path=None)
    bundle = result.bundle
    bundle.info["run_config"] = cfg.to_dict()
    save_bundle(bundle, bundle_dir)
    write_rows(bundle_dir / "training_log.csv", LOG_COLUMNS, result.history)
    return result


# impute ----------------------------------------------------------------------------------

def _impute_one(args):
    row, bundle_dir, out, b0_threshold = args
    bundle = load_bundle(bundle_dir)
    study, t1, reg, _, _ = load_row(row, b0_threshold)
    result = impute_study(study, t1, reg, bundle)
    target = out / f"{row.subject}{OUTPUT_SUFFIX}{_nifti_ext(row.dwi)}"
    write_nifti(result, target)
    shutil.copyfile(row.bvals, out / f"{row.subject}{OUTPUT_SUFFIX}.bval")
    shutil.copyfile(row.bvecs, out / f"{row.subject}{OUTPUT_SUFFIX}.bvec")
    return target


def cmd_impute(cfg: RunConfig, rows, bundle_dir: Path, out: Path) -> list[Path]:
    load_bundle(bundle_dir)  # fail before writing anything
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(r, bundle_dir, out, cfg.shells.b0_threshold) for r in rows]
    return _map(_impute_one, jobs, cfg.jobs)


def find_output(test_dir: Path, subject: str) -> Path:
    for ext in (".nii", ".nii.gz"):
        p = test_dir / f"{subject}{OUTPUT_SUFFIX}{ext}"
        if p.is_file():
            return p
    raise FileNotFoundError(f"no imputed output for subject {subject!r} in {test_dir}")


# evaluate --------------------------------------------------------------------------------

def _evaluate_one(args):
    ref_row, input_row, test_path, b0_threshold = args
    ref, t1, reg, brain_t1, atlas_t1 = load_row(ref_row, b0_threshold)
    test = read_nifti(test_path)
    if not isinstance(test, Volume4D) or test.dims != ref.dims or test.n_volumes != ref.n_volumes:
        raise FovxError(f"{test_path}: does not match the reference study of {ref_row.subject}")
    test = Volume4D(test.data, ref.spacing, ref.affine, ref.gradient)
    if brain_t1 is not None:
        brain = brain_on_dwi_grid(ref, t1, reg, brain_t1)
    else:
        brain = Mask3D.on_grid(threshold_brain(ref), ref.grid)
    atlas = {k: mask_to_normalized_space(m, ref.grid, reg) for k, m in atlas_t1.items()}
    if input_row is not None:
        inc = read_nifti(input_row.dwi)
        inc = Volume4D(inc.data, ref.spacing, ref.affine, ref.gradient)
        case = EvalCase(ref_row.subject, ref, inc, test, brain, atlas)
    else:
        # no incomplete input: score the whole brain as if everything were imputed
        none = Mask3D.on_grid(np.zeros(ref.dims, bool), ref.grid)
        case = EvalCase(ref_row.subject, ref, test, test, brain, atlas, acquired=none)
    part = MetricsReport()
    part.add(case, baseline=input_row is not None)
    return part


def cmd_evaluate(cfg: RunConfig, ref: DatasetManifest, test_dir: Path, out: Path,
                 inputs: DatasetManifest | None = None, splits=None) -> MetricsReport:
    rows = ref.split(*splits) if splits else ref.rows
    by_id = inputs.by_subject() if inputs is not None else {}
    jobs = []
    for row in rows:
        if inputs is not None and row.subject not in by_id:
            raise FileNotFoundError(f"input manifest has no subject {row.subject!r}")
        jobs.append((row, by_id.get(row.subject), find_output(test_dir, row.subject),
                     cfg.shells.b0_threshold))
    report = MetricsReport()
    for part in _map(_evaluate_one, jobs, cfg.jobs):
        for name in ("psnr_ssim", "distance_curve", "adc_directions", "dice", "measures"):
            getattr(report, name).extend(getattr(part, name))
    report.write(out)
    return report


# qa --------------------------------------------------------------------------------------

def _qa_one(args):
    row, b0_threshold = args
    study, t1, reg, brain_t1, _ = load_row(row, b0_threshold)
    norm, _ = normalize_intensity(study)
    acquired = compute_acquired_mask(norm)
    brain = brain_on_dwi_grid(study, t1, reg, brain_t1)
    top, bottom = estimate_cutoff(acquired, brain)
    return {"subject": row.subject, "top_mm": top, "bottom_mm": bottom,
            "thickness_mm": top + bottom, "side": cutoff_side(top, bottom)}


def cmd_qa(cfg: RunConfig, manifest: DatasetManifest, out: Path) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    rows = _map(_qa_one, [(r, cfg.shells.b0_threshold) for r in manifest.rows], cfg.jobs)
    write_rows(out / "qa.csv", QA_COLUMNS, rows)
    return rows


# entry point -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel subjects")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--bundle", type=Path, help="model bundle directory")
    common.add_argument("--manifest", type=Path, help="dataset manifest CSV")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fovx", description="Fill in slices missing from a diffusion MRI field of view.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="write a synthetic phantom dataset")
    sub.add_parser("train", parents=[common], help="train the four generators")
    imp = sub.add_parser("impute", parents=[common], help="fill missing slices")
    imp.add_argument("--split", action="append", help="only rows with this split tag")
    for flag in ("dwi", "bvals", "bvecs", "t1", "reg"):
        imp.add_argument(f"--{flag}", type=Path, help="single-study input instead of --manifest")
    ev = sub.add_parser("evaluate", parents=[common], help="score imputed outputs")
    ev.add_argument("--test-dir", type=Path, required=True, help="directory of *_fovx outputs")
    ev.add_argument("--inputs", type=Path, help="manifest of the incomplete inputs")
    ev.add_argument("--split", action="append")
    sub.add_parser("qa", parents=[common], help="estimate missing thickness per subject")
    return p


def _need(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return Path(value)


def run(args) -> int:
    cfg = load_config(args.config, seed=args.seed, jobs=args.jobs,
                      manifest=str(args.manifest) if args.manifest else None,
                      bundle=str(args.bundle) if args.bundle else None,
                      out=str(args.out) if args.out else None)
    if args.command == "phantom":
        cmd_phantom(cfg, _need(cfg.out, "--out"))
    elif args.command == "train":
        cmd_train(cfg, DatasetManifest.load(_need(cfg.manifest, "--manifest")),
                  _need(cfg.bundle, "--bundle"))
    elif args.command == "impute":
        bundle, out = _need(cfg.bundle, "--bundle"), _need(cfg.out, "--out")
        if args.dwi is not None:
            missing = [f for f in ("bvals", "bvecs", "t1") if getattr(args, f) is None]
            if missing:
                raise ConfigError(f"single-study impute needs --{', --'.join(missing)}")
            rows = [ManifestRow(_stem(args.dwi), args.dwi, args.bvals, args.bvecs, args.t1,
                                args.reg, None, {}, "test")]
        else:
            manifest = DatasetManifest.load(_need(cfg.manifest, "--manifest"))
            rows = manifest.split(*args.split) if args.split else manifest.rows
        cmd_impute(cfg, rows, bundle, out)
    elif args.command == "evaluate":
        inputs = DatasetManifest.load(args.inputs) if args.inputs else None
        cmd_evaluate(cfg, DatasetManifest.load(_need(cfg.manifest, "--manifest")), args.test_dir,
                     _need(cfg.out, "--out"), inputs, args.split)
    elif args.command == "qa":
        cmd_qa(cfg, DatasetManifest.load(_need(cfg.manifest, "--manifest")), _need(cfg.out, "--out"))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"fovx: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FovxError, OSError) as exc:
        print(f"fovx: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        log.exception("unexpected failure")
        print(f"fovx: unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
