"""The four-generator model bundle and its on-disk container.

Layout of a saved bundle directory::

    manifest.json                 config, grid, tensor index
    <shell>_<plane>__<param>.f32  raw little-endian float32, C order

Every parameter and buffer of every generator gets one blob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ..core import GENERATOR_KEYS, Plane, ShellId
from ..errors import CorruptionError, ValidationError
from .networks import GeneratorConfig, ResnetGenerator

FORMAT_VERSION = 1


def key_name(key: tuple[ShellId, Plane]) -> str:
    shell, plane = key
    return f"{shell.value}_{plane.value}"


def parse_key(name: str) -> tuple[ShellId, Plane]:
    shell, plane = name.split("_", 1)
    return ShellId(shell), Plane(plane)


@dataclass
class ModelBundle:
    generators: dict[tuple[ShellId, Plane], nn.Module]
    config: GeneratorConfig
    grid_dims: tuple[int, int, int] = (256, 256, 256)
    grid_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [key_name(k) for k in GENERATOR_KEYS if k not in self.generators]
        if missing:
            raise ValidationError(f"bundle lacks generators {missing}")
        extra = [k for k in self.generators if k not in GENERATOR_KEYS]
        if extra:
            raise ValidationError(f"bundle has unexpected generator keys {extra}")
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.grid_spacing = tuple(float(s) for s in self.grid_spacing)
        for g in self.generators.values():
            g.eval()

    def generator(self, shell: ShellId, plane: Plane) -> nn.Module:
        return self.generators[(shell, plane)]

    @classmethod
    def initialize(cls, config: GeneratorConfig, seed: int = 0, **kw) -> "ModelBundle":
        torch.manual_seed(seed)
        gens = {key: ResnetGenerator(config) for key in GENERATOR_KEYS}
        return cls(gens, config, **kw)


def _blob_name(key, param: str) -> str:
    return f"{key_name(key)}__{param}.f32"


def save_bundle(bundle: ModelBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    for key in GENERATOR_KEYS:
        for name, t in bundle.generators[key].state_dict().items():
            arr = t.detach().cpu().numpy().astype("<f4")
            blob = _blob_name(key, name)
            (path / blob).write_bytes(arr.tobytes(order="C"))
            tensors.append({"generator": key_name(key), "name": name,
                            "shape": list(arr.shape), "file": blob})
    manifest = {
        "format_version": FORMAT_VERSION,
        "generator_config": bundle.config.to_dict(),
        "grid": {"dims": list(bundle.grid_dims), "spacing": list(bundle.grid_spacing)},
        "info": bundle.info,
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CorruptionError(f"{path}: no manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptionError(f"{path}: unsupported bundle format {manifest.get('format_version')}")
    try:
        config = GeneratorConfig(**manifest["generator_config"])
        config.validate()
    except (TypeError, ValidationError) as exc:
        raise CorruptionError(f"{path}: bad generator config ({exc})") from exc

    index = {(t["generator"], t["name"]): t for t in manifest["tensors"]}
    generators = {}
    for key in GENERATOR_KEYS:
        gen = ResnetGenerator(config)
        state = {}
        for name, ref in gen.state_dict().items():
            entry = index.pop((key_name(key), name), None)
            if entry is None:
                raise CorruptionError(f"{path}: manifest lists no tensor {key_name(key)}/{name}")
            if tuple(entry["shape"]) != tuple(ref.shape):
                raise CorruptionError(
                    f"{path}: {key_name(key)}/{name} has shape {entry['shape']}, "
                    f"config (n={config.n}, {config.in_channels} input channels) needs {list(ref.shape)}")
            blob = path / entry["file"]
            if not blob.is_file():
                raise CorruptionError(f"{path}: missing blob {entry['file']}")
            raw = blob.read_bytes()
            if len(raw) != 4 * int(np.prod(ref.shape, dtype=np.int64)):
                raise CorruptionError(f"{path}: blob {entry['file']} has {len(raw)} bytes")
            arr = np.frombuffer(raw, dtype="<f4").reshape(ref.shape)
            state[name] = torch.from_numpy(arr.astype(np.float32))
        gen.load_state_dict(state)
        generators[key] = gen
    if index:
        raise CorruptionError(f"{path}: manifest lists unknown tensors {sorted(index)[:3]}")
    grid = manifest.get("grid", {})
    return ModelBundle(generators, config, tuple(grid.get("dims", (256,) * 3)),
                       tuple(grid.get("spacing", (1.0,) * 3)), manifest.get("info", {}))
