"""Adversarial training of the four slice generators on randomly cut studies.

One optimizer *step* updates each of the four (shell, plane) generators
once, together with its own discriminator.  For every update a study and a
volume of the matching shell are drawn, a random slab of brain is cut from
the top or bottom, and a batch of slabs is taken from the cut volume.  The
target is always the uncut centre slice.

Inference can only normalize the incomplete study, whose 99.9th percentile
drops when bright tissue is cut away.  With ``renormalize_cuts`` the cut
input and its target are rescaled by the cut study's own percentile so that
training sees the same intensity scale as inference.
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..core import GENERATOR_KEYS, Mask3D, ShellId, Volume3D, Volume4D
from ..errors import ConfigError, UnsupportedShellError
from ..fov import TRAIN_CUT_RANGE_MM, brain_extent, draw_training_cut
from ..metrics import psnr, ssim3d
from ..patches import as_slices, slab_batch
from ..preprocess import (mask_to_normalized_space, nearest_rank_percentile, normalize_intensity,
                          normalize_t1, percentile_rank, to_normalized_space)
from .bundle import ModelBundle
from .impute import predict_volume
from .losses import (combined_generator_objective, discriminator_loss,
                     generator_adversarial_loss, l1_loss)
from .networks import DiscriminatorConfig, GeneratorConfig, PatchDiscriminator, ResnetGenerator

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "d_loss", "g_gan", "g_l1", "val_l1_imputed", "val_psnr_imputed",
               "val_ssim_imputed")
T1_BRAIN_THRESHOLD = 0.05


@dataclass
class TrainConfig:
    lambda_l1: float = 100.0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 8
    max_steps: int = 2000
    val_interval: int = 100
    cut_range_mm: tuple[float, float] = TRAIN_CUT_RANGE_MM
    seed: int = 0
    saturating: bool = False
    discriminator: DiscriminatorConfig = field(default_factory=lambda: DiscriminatorConfig(base_width=16))
    val_b1300_volumes: int = 2
    val_min_depth_mm: float = 5.0
    max_seconds: float | None = None
    renormalize_cuts: bool = True

    def validate(self):
        if self.lambda_l1 < 0:
            raise ConfigError("lambda_l1 must be >= 0")
        lo, hi = self.cut_range_mm
        if not (0 <= lo <= hi <= 50):
            raise ConfigError(f"cut_range_mm must lie within [0, 50], got {self.cut_range_mm}")
        if self.batch_size < 1 or self.max_steps < 0 or self.val_interval < 1:
            raise ConfigError("batch_size and val_interval must be >= 1, max_steps >= 0")
        if self.learning_rate <= 0 or not (0 <= self.beta1 < 1):
            raise ConfigError("bad optimizer hyperparameters")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cut_range_mm"] = list(self.cut_range_mm)
        return d


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """A study on the normalized grid with its T1 and brain mask."""

    dwi: Volume4D
    t1: Volume3D
    brain: Mask3D
    subject_id: str = ""

    @property
    def shells(self) -> list[ShellId]:
        return self.dwi.gradient.shells()


def prepare_sample(study: Volume4D, t1: Volume3D, reg_affine=None, brain: Mask3D | None = None,
                   dims=(256, 256, 256), subject_id: str = "") -> TrainingSample:
    """Normalize intensities and move a subject to the normalized grid.

    Without a brain mask the T1 is thresholded at 5% of its normalized range.
    """
    norm, _ = normalize_intensity(study)
    t1n, _ = normalize_t1(t1)
    ns, nt1, grid = to_normalized_space(norm, t1n, reg_affine, dims)
    if brain is None:
        mask = Mask3D.on_grid(nt1.data > T1_BRAIN_THRESHOLD, grid)
    else:
        mask = mask_to_normalized_space(brain, grid, reg_affine)
    return TrainingSample(ns, nt1, mask, subject_id)


def cut_array(vol: np.ndarray, brain_range: tuple[int, int] | None, depth_slices: int,
              side: str) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero ``depth_slices`` of brain plus everything beyond it on ``side``."""
    nk = vol.shape[2]
    if brain_range is None or depth_slices <= 0:
        return vol, (0, 0)
    if side == "top":
        start = max(0, brain_range[1] + 1 - depth_slices)
        rng = (start, nk)
    else:
        rng = (0, min(nk, brain_range[0] + depth_slices))
    out = vol.copy()
    out[:, :, rng[0]:rng[1]] = 0
    return out, rng


class CutScales:
    """Cached 99.9th percentile of each sample's 4D study after a cut."""

    def __init__(self, samples):
        self.samples = samples
        self.extent = [brain_extent(s.brain) for s in samples]
        self._cache: dict[tuple[int, int, str], float] = {}

    def __call__(self, i: int, depth: int, side: str) -> float:
        key = (i, depth, side)
        if key not in self._cache:
            data = self.samples[i].dwi.data
            _, (lo, hi) = cut_array(data[..., :1], self.extent[i], depth, side)
            if hi > lo:
                kept = np.concatenate([data[:, :, :lo].ravel(), data[:, :, hi:].ravel()])
                # cut voxels are zeros and rank below everything kept
                r = percentile_rank(data.size) - (data.size - kept.size)
                p = float(np.partition(kept, r - 1)[r - 1]) if r > 0 else 0.0
            else:
                p = nearest_rank_percentile(data)
            self._cache[key] = p if p > 0 else 1.0
        return self._cache[key]


def rescale(x: np.ndarray, p: float) -> np.ndarray:
    if p == 1.0:
        return x
    return np.clip(x / np.float32(p), 0, 1).astype(np.float32)


def _check_dataset(samples, what: str):
    if not samples:
        raise ConfigError(f"{what} set is empty")
    found = set()
    for s in samples:
        if s.dwi.gradient is None:
            raise ConfigError(f"{what} study {s.subject_id!r} has no gradient table")
        try:
            found.update(s.shells)
        except UnsupportedShellError as exc:
            raise ConfigError(f"{what} study {s.subject_id!r}: {exc}") from exc
    missing = [sh.value for sh in ShellId if sh not in found]
    if missing:
        raise ConfigError(f"{what} set lacks volumes of shell(s) {missing}")


class _Sampler:
    """Draws training batches for one (shell, plane) generator."""

    def __init__(self, samples, rng: np.random.Generator, config: TrainConfig, n: int):
        self.samples = samples
        self.rng = rng
        self.config = config
        self.n = n
        self.extent = [brain_extent(s.brain) for s in samples]
        self.scales = CutScales(samples) if config.renormalize_cuts else None
        self.by_shell = {sh: [(i, v) for i, s in enumerate(samples)
                              for v, vs in enumerate(s.shells) if vs == sh] for sh in ShellId}

    def batch(self, shell: ShellId, plane):
        pool = self.by_shell[shell]
        i, v = pool[self.rng.integers(len(pool))]
        s = self.samples[i]
        extent_mm, side = draw_training_cut(self.rng, self.config.cut_range_mm)
        depth = int(np.floor(extent_mm / s.dwi.spacing[2] + 0.5))
        full = s.dwi.data[..., v]
        cut, _ = cut_array(full, self.extent[i], depth, side)
        if self.scales is not None:
            p = self.scales(i, depth, side)
            cut, full = rescale(cut, p), rescale(full, p)
        brain_idx = np.flatnonzero(as_slices(s.brain.data, plane).any(axis=(1, 2)))
        if brain_idx.size == 0:
            brain_idx = np.arange(full.shape[plane.axis])
        centers = self.rng.choice(brain_idx, size=self.config.batch_size)
        x = slab_batch(cut, s.t1.data, plane, centers, self.n)
        y = as_slices(full, plane)[centers][:, None]
        return torch.from_numpy(x), torch.from_numpy(np.ascontiguousarray(y))


def validation_cases(samples, config: TrainConfig):
    """Fixed (sample, volumes, depth, side) cases drawn once from a seeded stream."""
    rng = np.random.default_rng([config.seed, 7919])
    cases = []
    for i, s in enumerate(samples):
        shells = s.shells
        b0 = [v for v, sh in enumerate(shells) if sh == ShellId.B0][:1]
        dw = [v for v, sh in enumerate(shells) if sh == ShellId.B1300][:config.val_b1300_volumes]
        extent_mm, side = draw_training_cut(rng, (max(config.val_min_depth_mm, config.cut_range_mm[0]),
                                                  max(config.val_min_depth_mm, config.cut_range_mm[1])))
        depth = int(np.floor(extent_mm / s.dwi.spacing[2] + 0.5))
        cases.append((i, b0 + dw, depth, side))
    return cases


def evaluate_imputed(bundle: ModelBundle, samples, cases, renormalize: bool = True) -> dict:
    """Mean L1 / PSNR / SSIM over cut brain voxels for the validation cases.

    Predictions are returned to the uncut study's scale before scoring, as
    inference would.
    """
    scales = CutScales(samples) if renormalize else None
    l1s, psnrs, ssims = [], [], []
    for i, volumes, depth, side in cases:
        s = samples[i]
        shells = s.shells
        extent = brain_extent(s.brain)
        for v in volumes:
            full = s.dwi.data[..., v]
            cut, rng = cut_array(full, extent, depth, side)
            region = np.zeros(full.shape, dtype=bool)
            region[:, :, rng[0]:rng[1]] = True
            region &= s.brain.data
            if not region.any():
                continue
            if scales is not None:
                p = np.float32(scales(i, depth, side))
                pred = predict_volume(bundle, shells[v], rescale(cut, p), s.t1.data) * p
            else:
                pred = predict_volume(bundle, shells[v], cut, s.t1.data)
            l1s.append(float(np.abs(pred[region] - full[region]).mean()))
            psnrs.append(psnr(full, pred, region))
            try:
                ssims.append(ssim3d(full, pred, region))
            except ValueError:
                pass
    return {
        "val_l1_imputed": float(np.mean(l1s)) if l1s else float("nan"),
        "val_psnr_imputed": float(np.mean(psnrs)) if psnrs else float("nan"),
        "val_ssim_imputed": float(np.mean(ssims)) if ssims else float("nan"),
    }


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[dict]
    best_step: int


def train(train_set, val_set, config: TrainConfig, gen_config: GeneratorConfig | None = None,
          log_path=None) -> TrainResult:
    """Train four generators and return the bundle with the best validation L1."""
    config.validate()
    gen_config = gen_config or GeneratorConfig()
    gen_config.validate()
    _check_dataset(train_set, "training")
    _check_dataset(val_set, "validation")
    grid_dims = train_set[0].dwi.dims
    if any(s.dwi.dims != grid_dims for s in list(train_set) + list(val_set)):
        raise ConfigError("all studies must share the normalized grid")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    cond = config.discriminator.conditional_on_input
    d_in = 1 + (gen_config.in_channels if cond else 0)
    gens = {k: ResnetGenerator(gen_config) for k in GENERATOR_KEYS}
    discs = {k: PatchDiscriminator(config.discriminator, d_in) for k in GENERATOR_KEYS}
    betas = (config.beta1, 0.999)
    opt_g = {k: torch.optim.Adam(gens[k].parameters(), lr=config.learning_rate, betas=betas)
             for k in GENERATOR_KEYS}
    opt_d = {k: torch.optim.Adam(discs[k].parameters(), lr=config.learning_rate, betas=betas)
             for k in GENERATOR_KEYS}
    sampler = _Sampler(list(train_set), rng, config, gen_config.n)
    cases = validation_cases(list(val_set), config)
    bundle = ModelBundle(gens, gen_config, grid_dims, train_set[0].dwi.spacing,
                         info={"train_config": config.to_dict()})

    writer = None
    if log_path is not None:
        log_file = open(Path(log_path), "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_COLUMNS)
        writer.writeheader()

    history = []
    best = (np.inf, 0, copy.deepcopy({k: g.state_dict() for k, g in gens.items()}))
    acc = {"d_loss": [], "g_gan": [], "g_l1": []}
    started = time.monotonic()

    def validate(step):
        nonlocal best
        for g in gens.values():
            g.eval()
        scores = evaluate_imputed(bundle, list(val_set), cases, config.renormalize_cuts)
        row = {"step": step, **{k: (float(np.mean(v)) if v else float("nan")) for k, v in acc.items()},
               **scores}
        for v in acc.values():
            v.clear()
        history.append(row)
        if writer is not None:
            writer.writerow(row)
            log_file.flush()
        log.info("step %d  val L1 %.4f  PSNR %.2f", step, row["val_l1_imputed"], row["val_psnr_imputed"])
        if row["val_l1_imputed"] < best[0]:
            best = (row["val_l1_imputed"], step,
                    copy.deepcopy({k: g.state_dict() for k, g in gens.items()}))

    try:
        validate(0)
        for step in range(1, config.max_steps + 1):
            for key in GENERATOR_KEYS:
                shell, plane = key
                g, d = gens[key], discs[key]
                g.train()
                x, y = sampler.batch(shell, plane)
                fake = g(x)
                real_in = torch.cat([y, x], 1) if cond else y
                fake_in = torch.cat([fake, x], 1) if cond else fake

                opt_d[key].zero_grad()
                d_loss = discriminator_loss(d(real_in), d(fake_in.detach()))
                d_loss.backward()
                opt_d[key].step()

                opt_g[key].zero_grad()
                for p in d.parameters():
                    p.requires_grad_(False)
                adv = generator_adversarial_loss(d(fake_in), config.saturating)
                l1 = l1_loss(y, fake)
                combined_generator_objective(adv, l1, config.lambda_l1).backward()
                for p in d.parameters():
                    p.requires_grad_(True)
                opt_g[key].step()

                acc["d_loss"].append(d_loss.item())
                acc["g_gan"].append(adv.item())
                acc["g_l1"].append(l1.item())
            if step % config.val_interval == 0:
                validate(step)
            if config.max_seconds is not None and time.monotonic() - started > config.max_seconds:
                log.warning("stopping at step %d: time budget of %.0f s spent", step, config.max_seconds)
                if step % config.val_interval:
                    validate(step)
                break
    finally:
        if writer is not None:
            log_file.close()

    _, best_step, state = best
    for k, g in gens.items():
        g.load_state_dict(state[k])
        g.eval()
    bundle.info["best_step"] = best_step
    bundle.info["best_val_l1_imputed"] = float(best[0])
    return TrainResult(bundle, history, best_step)
