"""Estimator-style wrappers: fit two concepts, then generate or score."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint, build_backend
from .data import FACE_BOX
from .errors import DomainError
from .evaluation import evaluate
from .generation import GenerationRequest, generate
from .losses import LossWeights
from .masks import REFERENCE_NONFACE, SOURCE_FACE, RectangleSegmenter, RegionMask, acquire_mask
from .plugins import ToyFaceEmbedder, ToyImageEmbedder
from .templates import COMPOSED_TEMPLATES, REFERENCE, SOURCE
from .trainer import ConceptSpec, TrainConfig, Trainer


def check_images(images, channels: int = 3, name: str = "images") -> torch.Tensor:
    """Accept (N, C, H, W) / (N, H, W, C) tensors or arrays in [-1, 1]; return float32 NCHW."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise DomainError(f"{name}: expected 4-D image batch, got shape {tuple(x.shape)}")
    if x.shape[1] != channels and x.shape[-1] == channels:
        x = x.permute(0, 3, 1, 2)
    if x.shape[1] != channels:
        raise DomainError(f"{name}: expected {channels} channels, got shape {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise DomainError(f"{name}: empty image batch")
    x = x.to(torch.float32).contiguous()
    if not torch.isfinite(x).all():
        raise DomainError(f"{name}: non-finite pixel values")
    if x.min() < -1.0 - 1e-6 or x.max() > 1.0 + 1e-6:
        raise DomainError(f"{name}: pixel values must lie in [-1, 1]")
    return x


class RegionMasker(BaseEstimator, TransformerMixin):
    """Images -> binary region masks for one role via a face segmenter."""

    def __init__(self, role: str = SOURCE_FACE, segmenter=None, box=FACE_BOX):
        self.role = role
        self.segmenter = segmenter
        self.box = box

    def fit(self, X, y=None):
        check_images(X)
        self.segmenter_ = self.segmenter if self.segmenter is not None else RectangleSegmenter(self.box)
        return self

    def transform(self, X) -> list[RegionMask]:
        check_is_fitted(self, "segmenter_")
        x = check_images(X)
        return [acquire_mask(img.numpy(), self.role, self.segmenter_) for img in x]


class ConceptComposer(BaseEstimator):
    """Learns a source subject and a reference style, then renders them together.

    ``fit(source_images, reference_images)`` runs both training phases;
    ``generate`` samples composed-prompt images; ``score`` reports the
    identity similarity to the source set.
    """

    def __init__(self, backend: str = "toy", backend_options: dict | None = None,
                 phase1_steps: int = 1200, phase2_steps: int = 1500, phase1_lr_embeddings: float = 5e-4,
                 phase2_lr_lora: float = 1e-4, phase2_lr_embeddings: float = 1e-5, batch_size: int = 1,
                 grad_accum: int = 4, lambda_id: float = 1.0, lambda_attn: float = 2.5, t_id_max: float = 0.6,
                 lora_rank: int = 4, source_token: str = "<v1>", reference_token: str = "<v2>",
                 source_init: str | None = "person", reference_init: str | None = "style",
                 face_box=FACE_BOX, identity_embedder=None, random_state: int = 0):
        self.backend = backend
        self.backend_options = backend_options
        self.phase1_steps = phase1_steps
        self.phase2_steps = phase2_steps
        self.phase1_lr_embeddings = phase1_lr_embeddings
        self.phase2_lr_lora = phase2_lr_lora
        self.phase2_lr_embeddings = phase2_lr_embeddings
        self.batch_size = batch_size
        self.grad_accum = grad_accum
        self.lambda_id = lambda_id
        self.lambda_attn = lambda_attn
        self.t_id_max = t_id_max
        self.lora_rank = lora_rank
        self.source_token = source_token
        self.reference_token = reference_token
        self.source_init = source_init
        self.reference_init = reference_init
        self.face_box = face_box
        self.identity_embedder = identity_embedder
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            phase1_steps=self.phase1_steps, phase2_steps=self.phase2_steps,
            phase1_lr_embeddings=self.phase1_lr_embeddings, phase2_lr_lora=self.phase2_lr_lora,
            phase2_lr_embeddings=self.phase2_lr_embeddings, batch_size=self.batch_size,
            grad_accum=self.grad_accum, t_id_max=self.t_id_max, lora_rank=self.lora_rank,
            weights=LossWeights(lambda_id=self.lambda_id, lambda_attn=self.lambda_attn),
            seed=self.random_state,
        )

    def fit(self, source_images, reference_images, source_masks=None, reference_masks=None):
        src = check_images(source_images, name="source_images")
        ref = check_images(reference_images, name="reference_images")
        if source_masks is None:
            source_masks = RegionMasker(SOURCE_FACE, box=self.face_box).fit(src).transform(src)
        if reference_masks is None:
            reference_masks = RegionMasker(REFERENCE_NONFACE, box=self.face_box).fit(ref).transform(ref)
        config = self._config()
        backend = build_backend({"name": self.backend, "options": dict(self.backend_options or {})})
        embedder = self.identity_embedder if self.identity_embedder is not None else ToyFaceEmbedder(self.face_box)
        concepts = [
            ConceptSpec(SOURCE, self.source_token, src, list(source_masks), self.source_init),
            ConceptSpec(REFERENCE, self.reference_token, ref, list(reference_masks), self.reference_init),
        ]
        self.trainer_ = Trainer(config, concepts, backend, embedder=embedder)
        self.trainer_.run_phase1()
        self.checkpoint_: Checkpoint = self.trainer_.run_phase2()
        self.backend_ = backend
        self.source_images_ = src
        self.reference_images_ = ref
        self.reference_masks_ = list(reference_masks)
        self.history_ = self.trainer_.history
        return self

    def generate(self, n_images: int = 1, prompt: str = COMPOSED_TEMPLATES[0], extra: str | None = None,
                 seed: int = 0, guidance_scale: float = 7.5, num_denoise_steps: int = 50) -> torch.Tensor:
        check_is_fitted(self, "backend_")
        hw = tuple(self.source_images_.shape[-2:])
        request = GenerationRequest(prompt=prompt, extra=extra, num_images=n_images, seed=seed,
                                    guidance_scale=guidance_scale, num_denoise_steps=num_denoise_steps,
                                    image_hw=hw)
        raw, _ = generate(self.backend_, request)
        return torch.stack(raw)

    predict = generate

    def score(self, X, y=None) -> float:
        """Mean identity similarity of images ``X`` to the fitted source set."""
        check_is_fitted(self, "backend_")
        x = check_images(X)
        masker = RegionMasker(SOURCE_FACE, box=self.face_box).fit(x)
        faces = masker.transform(x)
        ref_faces = [m.complement() for m in self.reference_masks_]
        embedder = self.identity_embedder if self.identity_embedder is not None else ToyFaceEmbedder(self.face_box)
        report = evaluate(list(x), list(self.source_images_), list(self.reference_images_),
                          identity_embedder=embedder, image_embedder=ToyImageEmbedder(),
                          generated_face_masks=faces, reference_face_masks=ref_faces)
        return float("nan") if report.csim is None else report.csim
