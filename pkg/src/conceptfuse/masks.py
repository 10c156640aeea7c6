"""Binary region masks and their resampling to latent / attention grids."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from PIL import Image

from .errors import DomainError, PluginError

log = logging.getLogger(__name__)

SOURCE_FACE = "source-face"
REFERENCE_NONFACE = "reference-nonface"
CUSTOM = "custom"
ROLES = (SOURCE_FACE, REFERENCE_NONFACE, CUSTOM)


class FaceSegmenter(Protocol):
    def segment(self, image: np.ndarray, path: str | Path | None = None) -> np.ndarray | None:
        """Binary (H, W) face bitmap, or None when no face is found."""


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix; row i averages the input span covered by output cell i."""
    edges = np.arange(n_out + 1, dtype=np.float64) * n_in / n_out
    lo = np.arange(n_in, dtype=np.float64)
    overlap = np.clip(np.minimum(edges[1:, None], lo[None] + 1) - np.maximum(edges[:-1, None], lo[None]), 0, None)
    return overlap / (n_in / n_out)


def downsample(bitmap: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-average then threshold at 0.5; ties go to 1."""
    h, w = bitmap.shape
    oh, ow = size
    if oh > h or ow > w or oh < 1 or ow < 1:
        raise DomainError(f"cannot resample {h}x{w} mask to {oh}x{ow}: only downsampling is supported")
    if (oh, ow) == (h, w):
        return bitmap.astype(np.uint8).copy()
    avg = _area_weights(h, oh) @ bitmap.astype(np.float64) @ _area_weights(w, ow).T
    return (avg >= 0.5 - 1e-12).astype(np.uint8)


@dataclass
class RegionMask:
    bitmap: np.ndarray
    role: str = CUSTOM
    pyramid: dict[tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        bm = np.asarray(self.bitmap)
        if bm.ndim != 2:
            raise DomainError("mask bitmap must be 2-D")
        if not np.isin(bm, (0, 1)).all():
            raise DomainError("mask bitmap must be binary")
        if self.role not in ROLES:
            raise DomainError(f"unknown mask role {self.role!r}")
        self.bitmap = bm.astype(np.uint8)
        self.bitmap.setflags(write=False)

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.bitmap.shape)

    def resample(self, size: tuple[int, int]) -> np.ndarray:
        size = (int(size[0]), int(size[1]))
        if size not in self.pyramid:
            level = downsample(self.bitmap, size)
            level.setflags(write=False)
            self.pyramid[size] = level
        return self.pyramid[size]

    def tensor(self, size: tuple[int, int] | None = None, dtype=torch.float32) -> torch.Tensor:
        bm = self.bitmap if size is None else self.resample(size)
        return torch.from_numpy(bm.astype(np.float64)).to(dtype)

    def complement(self, role: str = CUSTOM) -> "RegionMask":
        return RegionMask(1 - self.bitmap, role)


def resample(mask: RegionMask, size: tuple[int, int]) -> np.ndarray:
    return mask.resample(size)


def acquire_mask(image: np.ndarray, role: str, segmenter: FaceSegmenter, path: str | Path | None = None,
                 allow_missing_reference: bool = True) -> RegionMask:
    """Run the segmenter and orient the result for ``role``.

    Source masks cover the face; reference masks cover everything except the
    face. A missing face is fatal for source images. For reference images it
    yields an all-ones mask (the whole image is style) when allowed.
    """
    if role not in (SOURCE_FACE, REFERENCE_NONFACE):
        raise DomainError(f"acquire_mask needs a face role, got {role!r}")
    face = segmenter.segment(image, path)
    if face is None:
        where = f" in {path}" if path else ""
        if role == SOURCE_FACE or not allow_missing_reference:
            raise PluginError(f"segmenter found no face{where}")
        log.warning("no face found%s; using an all-ones reference mask", where)
        return RegionMask(np.ones(_image_hw(np.asarray(image)), dtype=np.uint8), role)
    face = np.asarray(face).astype(np.uint8)
    return RegionMask(face if role == SOURCE_FACE else 1 - face, role)


def _image_hw(image: np.ndarray) -> tuple[int, int]:
    # (H, W), (H, W, C) or (C, H, W) with C <= 4
    if image.ndim == 2:
        return image.shape
    if image.shape[0] <= 4 and image.shape[-1] > 4:
        return image.shape[1:]
    return image.shape[:2]


class RectangleSegmenter:
    """Toy segmenter: the face is an axis-aligned rectangle.

    The rectangle comes from ``<stem>.mask.json`` next to the image
    (``{"face": [x0, y0, x1, y1]}``, end-exclusive pixel coordinates), or from
    ``default_box`` when no sidecar exists. With neither, no face is found.
    """

    def __init__(self, default_box: tuple[int, int, int, int] | None = None):
        self.default_box = default_box

    def segment(self, image, path=None):
        box = self.default_box
        if path is not None:
            ann = annotation_path(path)
            if ann.exists():
                box = json.loads(ann.read_text())["face"]
        if box is None:
            return None
        h, w = _image_hw(np.asarray(image))
        x0, y0, x1, y1 = (int(v) for v in box)
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise PluginError(f"face box {box} outside {w}x{h} image")
        bm = np.zeros((h, w), dtype=np.uint8)
        bm[y0:y1, x0:x1] = 1
        return bm


class SidecarSegmenter:
    """Reads ``<stem>.mask.png`` face bitmaps, falling back to another segmenter."""

    def __init__(self, fallback: FaceSegmenter | None = None):
        self.fallback = fallback

    def segment(self, image, path=None):
        if path is not None and mask_path(path).exists():
            return read_mask_png(mask_path(path))
        return self.fallback.segment(image, path) if self.fallback else None


def mask_path(image_path: str | Path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".mask.png")


def annotation_path(image_path: str | Path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".mask.json")


def write_mask_png(bitmap: np.ndarray, path: str | Path) -> None:
    Image.fromarray((np.asarray(bitmap, dtype=np.uint8) * 255), mode="L").save(path)


def read_mask_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)
