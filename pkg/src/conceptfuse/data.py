"""Image I/O and the synthetic toy dataset."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".webp", ".bmp")

FACE_BOX = (8, 8, 24, 24)


def load_image(path: str | Path) -> torch.Tensor:
    """(C, H, W) float32 in [-1, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = ((image.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def save_image(image: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES and not p.name.endswith(".mask.png"))


def load_images(paths) -> torch.Tensor:
    return torch.stack([load_image(p) for p in paths])


def _face(img: np.ndarray, box, color, rng) -> None:
    x0, y0, x1, y1 = box
    img[y0:y1, x0:x1] = color + rng.normal(0, 0.03, 3)
    w = x1 - x0
    ey = y0 + (y1 - y0) // 3
    for ex in (x0 + w // 4, x0 + 3 * w // 4 - 3):
        img[ey:ey + 3, ex:ex + 3] = -0.9
    img[y1 - 4:y1 - 2, x0 + w // 3:x1 - w // 3] = -0.5


SOURCE_FACE_COLOUR = (0.1, -0.7, 0.9)
REFERENCE_FACE_COLOUR = (-0.3, 0.6, 0.2)
REFERENCE_STYLE = ((-0.7, 0.1, 0.8), (-0.2, 0.5, 0.9))


def toy_images(n_source: int = 2, n_reference: int = 2, size: int = 32, seed: int = 0,
               box=FACE_BOX, source_face=SOURCE_FACE_COLOUR, reference_face=REFERENCE_FACE_COLOUR,
               style=REFERENCE_STYLE) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic source and reference sets as (N, H, W, 3) arrays in [-1, 1].

    Source images share one face (colour plus dark eye / mouth marks) over
    unrelated backgrounds. Reference images share one striped background
    style around a different face.
    """
    rng = np.random.default_rng(seed)
    source_face = np.asarray(source_face, dtype=np.float64)
    ref_face = np.asarray(reference_face, dtype=np.float64)
    style_a, style_b = (np.asarray(c, dtype=np.float64) for c in style)
    src, ref = [], []
    for _ in range(n_source):
        img = np.empty((size, size, 3))
        img[:] = rng.uniform(-0.8, 0.8, 3)
        img += np.linspace(-0.15, 0.15, size)[:, None, None] * rng.choice([-1, 1])
        _face(img, box, source_face, rng)
        src.append(img)
    for _ in range(n_reference):
        img = np.empty((size, size, 3))
        stripes = (np.arange(size) // 4) % 2 == 0
        img[stripes] = style_a
        img[~stripes] = style_b
        img += rng.normal(0, 0.03, img.shape)
        _face(img, box, ref_face, rng)
        ref.append(img)
    return np.clip(np.stack(src), -1, 1), np.clip(np.stack(ref), -1, 1)


def as_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) -> (N, C, H, W) float32."""
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def write_toy_images(directory: str | Path, images: np.ndarray, prefix: str, box=FACE_BOX) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = directory / f"{prefix}_{i:02d}.png"
        save_image(torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1), path)
        (directory / f"{prefix}_{i:02d}.mask.json").write_text(json.dumps({"face": list(box)}))
        paths.append(path)
    return paths
