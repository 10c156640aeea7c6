"""Perception plugins: face identity, patch features, image embeddings,
aesthetic scoring and postprocessing.

Real models (face recogniser, detector, CLIP-like embedder, aesthetic
predictor, super-resolution, face restoration) live outside this package and
are registered at runtime. The ``Toy*`` classes are small deterministic
stand-ins used by tests and the toy project.
"""
from __future__ import annotations

import importlib.util
import logging
import os
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, PluginError

log = logging.getLogger(__name__)

PLUGIN_PATH_ENV = "CONCEPTFUSE_PLUGIN_PATH"


class ToyFaceEmbedder:
    """Detector crops a fixed box; the recogniser mean-pools the crop to a
    ``pool x pool`` grid per channel and L2-normalises.

    Detection fails when the crop's standard deviation is below ``min_std``
    (a featureless crop, e.g. a blurry high-noise estimate).
    """

    def __init__(self, box: tuple[int, int, int, int] | None = None, pool: int = 2, min_std: float = 0.05):
        self.box = box
        self.pool = pool
        self.min_std = min_std

    def detect(self, image):
        if self.box is None:
            crop = image
        else:
            x0, y0, x1, y1 = self.box
            crop = image[..., y0:y1, x0:x1]
        if crop.numel() == 0 or float(crop.detach().std()) < self.min_std:
            return None
        return crop

    def embed(self, crop):
        pooled = F.adaptive_avg_pool2d(crop.reshape(-1, *crop.shape[-3:]), self.pool).flatten()
        return F.normalize(pooled, dim=0)


class ToyPatchExtractor:
    """Frozen random linear features over non-overlapping patches."""

    def __init__(self, patch: int = 8, dim: int = 16, channels: int = 3, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        self.patch = patch
        fan_in = channels * patch * patch
        self.key_proj = torch.randn(fan_in, dim, generator=gen, dtype=torch.float64) / fan_in**0.5
        self.cls_proj = torch.randn(dim, dim, generator=gen, dtype=torch.float64) / dim**0.5

    def _patches(self, image):
        x = image.reshape(1, *image.shape[-3:])
        return F.unfold(x, self.patch, stride=self.patch)[0].T

    def keys(self, image):
        return self._patches(image) @ self.key_proj.to(image.dtype)

    def global_embedding(self, image):
        return self.keys(image).mean(dim=0) @ self.cls_proj.to(image.dtype)


class ToyImageEmbedder:
    """CLIP stand-in: mean colour over a ``pool x pool`` grid, flattened."""

    def __init__(self, pool: int = 4):
        self.pool = pool

    def __call__(self, image):
        return F.adaptive_avg_pool2d(image.reshape(-1, *image.shape[-3:]), self.pool).flatten()


class ConstantAesthetic:
    def __init__(self, score: float = 5.0):
        self.score = float(score)

    def __call__(self, image) -> float:
        return self.score


class ContrastAesthetic:
    """Toy predictor: 5 + 5 * pixel standard deviation, clipped to [1, 10]."""

    def __call__(self, image) -> float:
        return float(min(10.0, max(1.0, 5.0 + 5.0 * float(image.std()))))


# postprocessing --------------------------------------------------------------

def upscale2x(image: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour 2x upscale (super-resolution stand-in)."""
    return F.interpolate(image[None], scale_factor=2, mode="nearest")[0]


class CropFace:
    """Crop a fixed pixel box (face-restoration stand-in with a visible shape effect)."""

    def __init__(self, box: tuple[int, int, int, int] = (8, 8, 24, 24)):
        self.box = box

    def __call__(self, image):
        x0, y0, x1, y1 = self.box
        return image[:, y0:y1, x0:x1].clone()


POSTPROCESSORS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "upscale2x": upscale2x,
    "crop-face": CropFace(),
}
AESTHETIC_PREDICTORS: dict[str, Callable] = {
    "toy-constant": ConstantAesthetic(),
    "toy-contrast": ContrastAesthetic(),
}
IDENTITY_EMBEDDERS: dict[str, Callable[..., object]] = {"toy": ToyFaceEmbedder}
IMAGE_EMBEDDERS: dict[str, Callable[..., object]] = {"toy": ToyImageEmbedder}
FEATURE_EXTRACTORS: dict[str, Callable[..., object]] = {"toy": ToyPatchExtractor}


def register_postprocessor(name: str, fn: Callable[[torch.Tensor], torch.Tensor]) -> None:
    POSTPROCESSORS[name] = fn


def register_aesthetic(name: str, fn: Callable) -> None:
    AESTHETIC_PREDICTORS[name] = fn


def resolve_postprocessors(ids) -> list[Callable]:
    """Look every id up before any work is done."""
    unknown = [i for i in ids if i not in POSTPROCESSORS]
    if unknown:
        raise ConfigurationError(f"unknown postprocessor(s) {unknown}; registered: {sorted(POSTPROCESSORS)}")
    return [POSTPROCESSORS[i] for i in ids]


def load_plugin_modules(path: str | os.PathLike | None = None) -> list[str]:
    """Import every ``*.py`` under the plugin directory so they can register themselves.

    The directory defaults to ``$CONCEPTFUSE_PLUGIN_PATH``. Plugins find their
    model weights relative to that directory.
    """
    root = path or os.environ.get(PLUGIN_PATH_ENV)
    if not root:
        return []
    loaded = []
    for file in sorted(Path(root).glob("*.py")):
        spec = importlib.util.spec_from_file_location(f"conceptfuse_plugin_{file.stem}", file)
        module = importlib.util.module_from_spec(spec)
        try:
            spec.loader.exec_module(module)
        except Exception as exc:
            raise PluginError(f"plugin {file} failed to load: {exc}") from exc
        loaded.append(file.stem)
        log.info("loaded plugin %s", file)
    return loaded
