"""Run configuration (one JSON file plus flag overrides) and dataset manifests.

Every section of :class:`RunConfig` mirrors a dataclass used elsewhere in
the package.  Unknown keys are rejected, so a typo in a config file fails
before any work starts.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import B0_THRESHOLD, B_SHELL, SHELL_TOLERANCE
from .errors import ConfigError, ManifestError, ValidationError
from .model.networks import GeneratorConfig
from .model.train import TrainConfig
from .phantom import PhantomSpec

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("subject", "dwi", "bvals", "bvecs", "t1", "reg", "brain", "structures", "split")


@dataclass
class ShellConfig:
    b0_threshold: float = B0_THRESHOLD

    def validate(self):
        if not 0 <= self.b0_threshold < B_SHELL - SHELL_TOLERANCE:
            raise ConfigError(f"b0_threshold must lie in [0, {B_SHELL - SHELL_TOLERANCE:g})")


@dataclass
class PhantomDatasetConfig:
    n_subjects: int = 20
    train_fraction: float = 0.8
    n_directions: int = 40
    n_b0: int = 1
    cut_mm: float | None = None
    cut_side: str = "top"
    compress: bool = False
    spec: PhantomSpec = field(default_factory=PhantomSpec)

    def validate(self):
        if self.n_subjects < 0:
            raise ConfigError("n_subjects must be >= 0")
        if not 0 <= self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in [0, 1]")
        if self.n_directions < 1 or self.n_b0 < 1:
            raise ConfigError("phantoms need at least one b0 and one diffusion direction")
        if self.cut_side not in ("top", "bottom"):
            raise ConfigError(f"cut_side must be top or bottom, got {self.cut_side!r}")
        if self.cut_mm is not None and self.cut_mm < 0:
            raise ConfigError("cut_mm must be >= 0")
        try:
            self.spec.validate()
        except ValidationError as exc:
            raise ConfigError(f"phantom spec: {exc}") from exc

    def split_counts(self) -> tuple[int, int]:
        n_train = int(round(self.n_subjects * self.train_fraction))
        return n_train, self.n_subjects - n_train


@dataclass
class RunConfig:
    seed: int = 0
    grid_dims: tuple[int, int, int] = (256, 256, 256)
    jobs: int = 1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomDatasetConfig = field(default_factory=PhantomDatasetConfig)
    shells: ShellConfig = field(default_factory=ShellConfig)
    manifest: str | None = None
    bundle: str | None = None
    out: str | None = None

    def validate(self):
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 8:
            raise ConfigError(f"grid_dims must be three ints >= 8, got {self.grid_dims}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        try:
            self.generator.validate()
        except ValidationError as exc:
            raise ConfigError(f"generator: {exc}") from exc
        step = 2 ** self.generator.n_downsampling
        if any(d % step for d in self.grid_dims):
            raise ConfigError(f"grid_dims must be multiples of {step} for this generator")
        self.train.seed = self.seed
        self.train.validate()
        self.phantom.validate()
        self.shells.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"].pop("seed")
        return d


def _build(cls, data: dict, where: str, exclude=()):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in names or key in exclude:
            raise ConfigError(f"unknown config key {path!r}")
        f = names[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                raise ConfigError(f"{path} must be a list of {len(default)} values")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    train = data.get("train")
    if isinstance(train, dict) and "seed" in train:
        raise ConfigError("unknown config key 'train.seed' (use the top-level seed)")
    return _build(RunConfig, data, "")


def load_config(path=None, **overrides) -> RunConfig:
    """Read a JSON config (if given), apply non-None overrides, validate."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(data)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def subject_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass(frozen=True)
class ManifestRow:
    subject: str
    dwi: Path
    bvals: Path
    bvecs: Path
    t1: Path
    reg: Path | None
    brain: Path | None
    structures: dict[str, Path]
    split: str


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    root: Path = Path(".")

    def split(self, *names: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split in names]

    def by_subject(self) -> dict[str, ManifestRow]:
        return {r.subject: r for r in self.rows}

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        """Parse a manifest CSV; relative paths resolve against its directory."""
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        reader = csv.DictReader(text.splitlines())
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        root = path.parent
        rows, seen = [], set()
        for n, rec in enumerate(reader, start=2):
            sid = rec["subject"].strip()
            if not sid:
                raise ManifestError(f"{path}:{n}: empty subject id")
            if sid in seen:
                raise ManifestError(f"{path}:{n}: duplicate subject id {sid!r}")
            seen.add(sid)
            split = rec["split"].strip()
            if split not in SPLITS:
                raise ManifestError(f"{path}:{n}: split must be one of {SPLITS}, got {split!r}")

            def resolve(value, what, optional=False):
                value = (value or "").strip()
                if not value:
                    if optional:
                        return None
                    raise ManifestError(f"{path}:{n}: {what} path is empty")
                p = root / value
                if not p.is_file():
                    raise ManifestError(f"{path}:{n}: {what} file {p} does not exist")
                return p

            reg = rec["reg"].strip()
            structures = {}
            for item in filter(None, (s.strip() for s in rec["structures"].split(";"))):
                name, _, p = item.partition("=")
                if not name or not p:
                    raise ManifestError(f"{path}:{n}: structure entries must be name=path")
                structures[name.strip()] = resolve(p, f"structure {name}")
            rows.append(ManifestRow(
                sid, resolve(rec["dwi"], "dwi"), resolve(rec["bvals"], "bvals"),
                resolve(rec["bvecs"], "bvecs"), resolve(rec["t1"], "t1"),
                None if reg in ("", "identity") else resolve(reg, "reg"),
                resolve(rec["brain"], "brain", optional=True), structures, split))
        return cls(rows, root)

    def write(self, path) -> None:
        path = Path(path)
        base = path.parent.resolve()

        def rel(p):
            return "" if p is None else Path(p).resolve().relative_to(base).as_posix()

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in self.rows:
                structures = ";".join(f"{k}={rel(v)}" for k, v in r.structures.items())
                w.writerow([r.subject, rel(r.dwi), rel(r.bvals), rel(r.bvecs), rel(r.t1),
                            "identity" if r.reg is None else rel(r.reg), rel(r.brain),
                            structures, r.split])
