"""Project directories, config files and provenance sidecars."""
from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import list_images, load_image
from .errors import ConfigurationError, DomainError, OverwriteError
from .masks import (
    REFERENCE_NONFACE, SOURCE_FACE, RectangleSegmenter, RegionMask, SidecarSegmenter, acquire_mask,
    read_mask_png, write_mask_png,
)
from .templates import REFERENCE, SOURCE

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_NAMES = ("config.toml", "config.json")
SECTIONS = {"backend", "concepts", "masks", "train", "generate", "plugins", "evaluate"}


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except ValueError as exc:
        raise ConfigurationError(f"{path}: cannot parse config: {exc}") from None
    unknown = sorted(set(data) - SECTIONS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown section(s) {unknown}; expected some of {sorted(SECTIONS)}")
    return data


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """``section.key=value`` overrides; the value is parsed as JSON when possible."""
    config = json.loads(json.dumps(config))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node = config
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key}: {p} is not a section")
        node[leaf] = value
    return config


@dataclass
class ProjectLayout:
    root: Path

    @classmethod
    def from_config_path(cls, path: str | Path) -> "ProjectLayout":
        p = Path(path).resolve()
        return cls(p.parent if p.is_file() or p.suffix else p)

    def config_path(self) -> Path:
        for name in CONFIG_NAMES:
            if (self.root / name).exists():
                return self.root / name
        raise ConfigurationError(f"no config.toml or config.json in {self.root}")

    def inside(self, rel: str | Path) -> Path:
        """Resolve ``rel`` against the root and refuse paths that escape it."""
        p = (self.root / rel).resolve()
        if p != self.root and self.root not in p.parents:
            raise ConfigurationError(f"path {rel} resolves outside the project root {self.root}")
        return p

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def outputs(self) -> Path:
        return self.root / "outputs"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def masks(self) -> Path:
        return self.root / "masks"

    def checkpoint_dir(self, phase: int) -> Path:
        return self.checkpoints / f"phase{phase}"

    def next_run_dir(self, parent: Path, prefix: str) -> Path:
        """First unused ``<prefix>_NNN`` directory under ``parent``."""
        parent.mkdir(parents=True, exist_ok=True)
        i = 0
        while (parent / f"{prefix}_{i:03d}").exists():
            i += 1
        return parent / f"{prefix}_{i:03d}"


def concept_settings(config: dict, cid: str) -> dict:
    defaults = {
        SOURCE: {"token": "<v1>", "init_word": "person", "dir": "source"},
        REFERENCE: {"token": "<v2>", "init_word": "style", "dir": "reference"},
    }[cid]
    return {**defaults, **config.get("concepts", {}).get(cid, {})}


def make_segmenter(config: dict):
    m = config.get("masks", {})
    kind = m.get("segmenter", "rectangle")
    box = m.get("default_box")
    box = tuple(box) if box is not None else None
    if kind == "rectangle":
        return RectangleSegmenter(box)
    if kind == "sidecar":
        return SidecarSegmenter(RectangleSegmenter(box))
    raise ConfigurationError(f"masks.segmenter: unknown segmenter {kind!r} (rectangle, sidecar)")


def load_concept_images(layout: ProjectLayout, directory: str) -> tuple[list[Path], torch.Tensor]:
    d = layout.inside(directory)
    if not d.is_dir():
        raise DomainError(f"image directory {d} does not exist")
    paths = list_images(d)
    if not paths:
        raise DomainError(f"no images found in {d}")
    images = torch.stack([load_image(p) for p in paths])
    return paths, images


def ensure_masks(layout: ProjectLayout, cid: str, paths: list[Path], images: torch.Tensor, segmenter) -> list[RegionMask]:
    """Segment every image; cache the oriented masks under ``masks/<concept>/``.

    Existing mask files are reused when they agree with the segmenter and
    never silently replaced when they do not.
    """
    role = SOURCE_FACE if cid == SOURCE else REFERENCE_NONFACE
    out_dir = layout.masks / cid
    out_dir.mkdir(parents=True, exist_ok=True)
    masks = []
    for path, img in zip(paths, images):
        mask = acquire_mask(img.numpy(), role, segmenter, path)
        target = out_dir / f"{path.stem}.png"
        if target.exists():
            if not np.array_equal(read_mask_png(target), mask.bitmap):
                raise OverwriteError(f"{target} differs from the freshly segmented mask; delete it to regenerate")
        else:
            write_mask_png(mask.bitmap, target)
        masks.append(mask)
    return masks


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(argv: list[str], config: dict, inputs: list[Path] | None = None, **extra) -> dict:
    """Everything needed to re-run the producing command."""
    return {
        "command": ["conceptfuse", *argv],
        "config": config,
        "package_version": __version__,
        "python": sys.version.split()[0],
        "torch": torch.__version__,
        "platform": platform.platform(),
        "inputs": {str(p): file_sha256(p) for p in (inputs or [])},
        **extra,
    }


def write_json(path: Path, data: dict, overwrite: bool = False) -> None:
    if path.exists() and not overwrite:
        raise OverwriteError(f"{path} already exists")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


TOY_CONFIG = """\
# Toy-backend project: two source and two reference 32x32 images.
# Paths are relative to this file's directory.

[backend]
name = "toy"

[concepts.source]
token = "<v1>"
init_word = "person"
dir = "source"

[concepts.reference]
token = "<v2>"
init_word = "style"
dir = "reference"

[masks]
# "rectangle" reads <image>.mask.json; "sidecar" reads <image>.mask.png first.
segmenter = "rectangle"
default_box = [8, 8, 24, 24]

[train]
phase1_steps = 300
phase2_steps = 300
# Toy token embeddings have unit-scale coordinates, far larger than a real
# text encoder's, so the first-phase embedding rate is raised for this backend.
phase1_lr_embeddings = 5e-3
phase2_lr_lora = 1e-4
phase2_lr_embeddings = 1e-5
batch_size = 1
grad_accum = 4
seed = 0

[train.weights]
lambda_id = 1.0
lambda_attn = 2.5

[plugins]
identity_embedder = "toy"
image_embedder = "toy"
# aesthetic = "toy-constant"

[generate]
num_images = 4
guidance_scale = 7.5
num_denoise_steps = 50
seed = 0
postprocess = []
"""


def write_toy_project(root: str | Path, n_source: int = 2, n_reference: int = 2, seed: int = 0) -> Path:
    from .data import FACE_BOX, toy_images, write_toy_images

    root = Path(root)
    if (root / "config.toml").exists():
        raise OverwriteError(f"{root / 'config.toml'} already exists")
    src, ref = toy_images(n_source, n_reference, seed=seed)
    write_toy_images(root / "source", src, "src", FACE_BOX)
    write_toy_images(root / "reference", ref, "ref", FACE_BOX)
    (root / "config.toml").write_text(TOY_CONFIG)
    return root / "config.toml"
