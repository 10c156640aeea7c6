"""Identity, masked-style and aesthetic metrics over generated images."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, PluginError
from .masks import RegionMask

log = logging.getLogger(__name__)


@dataclass
class MetricResult:
    value: float | None
    coverage: float = 1.0
    diagnostic: str | None = None


@dataclass
class EvalReport:
    csim: float | None = None
    csim_coverage: float | None = None
    style: float | None = None
    aesthetic: float | None = None
    per_image: list[dict] = field(default_factory=list)
    notices: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("csim", "style"):
            v = getattr(self, name)
            if v is not None and not -1.0 - 1e-6 <= v <= 1.0 + 1e-6:
                raise DomainError(f"{name} = {v} outside [-1, 1]")

    def metrics(self) -> dict:
        """Scalar columns actually present (absent metrics are omitted)."""
        out = {}
        for name in ("csim", "csim_coverage", "style", "aesthetic"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    def to_dict(self) -> dict:
        return {**self.metrics(), "per_image": self.per_image, "notices": self.notices}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [(k, f"{v:.6f}") for k, v in self.metrics().items()]
        width = max([len(k) for k, _ in rows] + [6])
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  --------"]
        lines += [f"{k:<{width}}  {v}" for k, v in rows]
        lines.append(f"{'images':<{width}}  {len(self.per_image)}")
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            csim=data.get("csim"), csim_coverage=data.get("csim_coverage"), style=data.get("style"),
            aesthetic=data.get("aesthetic"), per_image=list(data.get("per_image", [])),
            notices=list(data.get("notices", [])),
        )

    @staticmethod
    def parse_table(text: str) -> dict[str, float]:
        out = {}
        for line in text.splitlines()[2:]:
            name, value = line.split()
            if name != "images":
                out[name] = float(value)
        return out


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def _cos(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.detach().flatten().to(torch.float64)
    b = b.detach().flatten().to(torch.float64)
    return float(F.cosine_similarity(a, b, dim=0).clamp(-1.0, 1.0))


def _face_embeddings(images, embedder, jobs: int) -> list[torch.Tensor | None]:
    def one(img):
        crop = embedder.detect(img)
        return None if crop is None else embedder.embed(crop)

    return _map(one, list(images), jobs)


REDUCTIONS = ("nearest", "mean")


def _reduce(sims: np.ndarray, reduction: str) -> float:
    """``sims`` is (generated, targets).

    "nearest" averages the best-match score of every image in both
    directions, so it is symmetric and a set evaluated against itself scores
    exactly 1. "mean" averages every pair.
    """
    if reduction == "nearest":
        return float(0.5 * (sims.max(axis=1).mean() + sims.max(axis=0).mean()))
    if reduction == "mean":
        return float(sims.mean())
    raise DomainError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def _row(sims: np.ndarray, reduction: str) -> float:
    """Per-image score: best match under "nearest", average under "mean"."""
    _reduce(sims[None], reduction)
    return float(sims.max() if reduction == "nearest" else sims.mean())


def eval_csim(generated: Sequence[torch.Tensor], source_images: Sequence[torch.Tensor], embedder,
              jobs: int = 1, reduction: str = "nearest") -> MetricResult:
    """Cosine similarity of face embeddings, generated against source.

    Images without a detected face are skipped and counted; ``coverage`` is
    the fraction of generated images that contributed.
    """
    if len(generated) == 0 or len(source_images) == 0:
        raise DomainError("eval_csim needs at least one generated and one source image")
    gen = _face_embeddings(generated, embedder, jobs)
    src = [e for e in _face_embeddings(source_images, embedder, jobs) if e is not None]
    gen_ok = [e for e in gen if e is not None]
    coverage = len(gen_ok) / len(gen)
    if not gen_ok or not src:
        missing = "generated" if not gen_ok else "source"
        return MetricResult(None, coverage, f"no face detected in any {missing} image")
    sims = np.array([[_cos(g, s) for s in src] for g in gen_ok])
    return MetricResult(_reduce(sims, reduction), coverage)


def mask_faces(images: Sequence[torch.Tensor], face_masks: Sequence[RegionMask | np.ndarray],
               fill: torch.Tensor) -> list[torch.Tensor]:
    """Replace face pixels by ``fill`` (a per-channel colour)."""
    out = []
    for img, m in zip(images, face_masks, strict=True):
        bm = m.bitmap if isinstance(m, RegionMask) else np.asarray(m)
        face = torch.from_numpy(bm.astype(bool))
        if tuple(face.shape) != tuple(img.shape[-2:]):
            raise DomainError(f"mask {tuple(face.shape)} does not match image {tuple(img.shape[-2:])}")
        x = img.clone()
        x[:, face] = fill.to(img.dtype)[:, None]
        out.append(x)
    return out


def dataset_mean_colour(*sets: Sequence[torch.Tensor]) -> torch.Tensor:
    pixels = torch.cat([img.reshape(img.shape[0], -1) for s in sets for img in s], dim=1)
    return pixels.to(torch.float64).mean(dim=1)


def eval_style(generated: Sequence[torch.Tensor], reference_images: Sequence[torch.Tensor],
               image_embedder: Callable, generated_face_masks, reference_face_masks,
               jobs: int = 1, reduction: str = "nearest") -> MetricResult:
    """Cosine similarity of image embeddings with faces filled by the mean colour.

    The fill colour is the mean over both sets, so swapping the arguments
    (with their masks) gives the same value.
    """
    if len(generated) == 0 or len(reference_images) == 0:
        raise DomainError("eval_style needs at least one generated and one reference image")
    fill = dataset_mean_colour(generated, reference_images)
    g = mask_faces(generated, generated_face_masks, fill)
    r = mask_faces(reference_images, reference_face_masks, fill)

    def embed(img):
        try:
            return image_embedder(img)
        except Exception as exc:
            raise PluginError(f"image embedder failed: {exc}") from exc

    eg, er = _map(embed, g, jobs), _map(embed, r, jobs)
    return MetricResult(_reduce(np.array([[_cos(a, b) for b in er] for a in eg]), reduction))


def eval_aesthetic(generated: Sequence[torch.Tensor], predictor: Callable | None, jobs: int = 1) -> MetricResult:
    if len(generated) == 0:
        raise DomainError("eval_aesthetic needs at least one image")
    if predictor is None:
        return MetricResult(None, 0.0, "no aesthetic predictor plugin; metric omitted")

    def score(img):
        try:
            return float(predictor(img))
        except Exception as exc:
            raise PluginError(f"aesthetic predictor failed: {exc}") from exc

    return MetricResult(float(np.mean(_map(score, list(generated), jobs))))


def evaluate(generated, source_images, reference_images, *, identity_embedder, image_embedder,
             generated_face_masks, reference_face_masks, aesthetic=None, names=None, jobs: int = 1,
             reduction: str = "nearest") -> EvalReport:
    """Run all three metrics and assemble an :class:`EvalReport`."""
    report = EvalReport()
    c = eval_csim(generated, source_images, identity_embedder, jobs, reduction)
    report.csim, report.csim_coverage = c.value, c.coverage
    if c.diagnostic:
        report.notices.append(f"csim absent: {c.diagnostic}")
    report.style = eval_style(generated, reference_images, image_embedder,
                              generated_face_masks, reference_face_masks, jobs, reduction).value
    a = eval_aesthetic(generated, aesthetic, jobs)
    report.aesthetic = a.value
    if a.diagnostic:
        report.notices.append(a.diagnostic)
        log.warning(a.diagnostic)

    src = [e for e in _face_embeddings(source_images, identity_embedder, 1) if e is not None]
    fill = dataset_mean_colour(generated, reference_images)
    masked = mask_faces(generated, generated_face_masks, fill)
    ref_masked = mask_faces(reference_images, reference_face_masks, fill)
    ref_emb = [image_embedder(r) for r in ref_masked]
    names = list(names) if names is not None else [f"img_{i:03d}" for i in range(len(generated))]
    for name, img, m in zip(names, generated, masked):
        rec: dict = {"image": name}
        crop = identity_embedder.detect(img)
        rec["face_detected"] = crop is not None
        if crop is not None and src:
            e = identity_embedder.embed(crop)
            rec["csim"] = _row(np.array([_cos(e, s) for s in src]), reduction)
        emb = image_embedder(m)
        rec["style"] = _row(np.array([_cos(emb, r) for r in ref_emb]), reduction)
        if aesthetic is not None:
            rec["aesthetic"] = float(aesthetic(img))
        report.per_image.append(rec)
    report.__post_init__()
    return report
