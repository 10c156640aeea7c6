"""Training objectives.

Every loss is a pure function of tensors produced by a forward pass, so each
can be checked against finite differences in isolation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Protocol, Sequence

import torch
import torch.nn.functional as F

from .diffusion import AttentionRecord
from .errors import ConfigurationError, DomainError
from .masks import RegionMask

RANGE_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_id: float = 1.0
    lambda_attn: float = 2.5
    lambda_ssim: float = 0.1
    lambda_contra: float = 0.2
    lambda_style: float = 2.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


def _broadcast_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    mask = mask.to(like.dtype)
    if like.ndim == 4 and mask.ndim == 3:
        mask = mask[:, None]
    elif like.ndim == 3 and mask.ndim == 2:
        mask = mask[None]
    elif like.ndim == 4 and mask.ndim == 2:
        mask = mask[None, None]
    try:
        torch.broadcast_shapes(mask.shape, like.shape)
    except RuntimeError:
        raise DomainError(f"mask shape {tuple(mask.shape)} does not fit latent {tuple(like.shape)}") from None
    return mask


def masked_reconstruction_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor, mask: torch.Tensor,
                               per_sample: bool = False) -> torch.Tensor:
    """Squared masked residual normalised by the element count (not mask area).

    ``mask`` is ``(h, w)``, ``(B, h, w)`` or ``(B, 1, h, w)`` and is broadcast
    over latent channels.
    """
    if eps_true.shape != eps_pred.shape:
        raise DomainError(f"eps shapes differ: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    m = _broadcast_mask(mask, eps_true)
    sq = ((eps_true - eps_pred) * m) ** 2
    if per_sample:
        return sq.flatten(1).mean(dim=1)
    return sq.mean()


def composed_masked_loss(eps_true, eps_pred, reference_mask, per_sample: bool = False) -> torch.Tensor:
    """Same form as the masked reconstruction loss; the inputs are the noised
    reference latent (its noise as pseudo-label) predicted under the composed prompt."""
    return masked_reconstruction_loss(eps_true, eps_pred, reference_mask, per_sample=per_sample)


# attention refocusing --------------------------------------------------------

def scale_maps(maps: torch.Tensor, stats: tuple[torch.Tensor, torch.Tensor] | None = None) -> torch.Tensor:
    """Per-map min-max scaling to [0, 1] over the last two dims.

    The min / max are detached (treated as constants in backward). Maps whose
    range is below 1e-8 scale to all zeros.
    """
    if stats is None:
        flat = maps.detach().flatten(-2)
        lo = flat.min(dim=-1).values[..., None, None]
        hi = flat.max(dim=-1).values[..., None, None]
    else:
        lo, hi = stats
    rng = hi - lo
    ok = rng >= RANGE_EPS
    scaled = (maps - lo) / torch.where(ok, rng, torch.ones_like(rng))
    return torch.where(ok, scaled, torch.zeros_like(scaled))


def refocusing_map_loss(attn_map: torch.Tensor, target: torch.Tensor, reduction: str = "grid",
                        stats=None) -> torch.Tensor:
    """Penalty on the scaled map where ``target == 0``; batch dims are averaged.

    ``reduction="grid"`` divides the squared norm by the number of grid cells;
    ``"penalized"`` divides by the number of cells where ``target == 0``.
    """
    if attn_map.shape[-2:] != target.shape[-2:]:
        raise ConfigurationError(
            f"mask resolution {tuple(target.shape[-2:])} != map resolution {tuple(attn_map.shape[-2:])}"
        )
    outside = (target == 0).to(attn_map.dtype)
    outside = outside.expand_as(attn_map) if outside.shape != attn_map.shape else outside
    sq = ((scale_maps(attn_map, stats) - target.to(attn_map.dtype)) * outside) ** 2
    total = sq.flatten(-2).sum(-1)
    if reduction == "grid":
        per_map = total / (attn_map.shape[-1] * attn_map.shape[-2])
    elif reduction == "penalized":
        count = outside.flatten(-2).sum(-1)
        per_map = torch.where(count > 0, total / count.clamp(min=1), torch.zeros_like(total))
    else:
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    return per_map.mean()


def attention_refocusing_loss(
    record: AttentionRecord,
    masks: Mapping[int, RegionMask | Mapping[tuple[int, int], torch.Tensor]],
    token_positions: Sequence[int] | None = None,
    batch_index: int | None = None,
    reduction: str = "grid",
) -> torch.Tensor:
    """Mean refocusing penalty over every recorded layer and each token.

    ``masks`` maps a token index to its target region: a :class:`RegionMask`
    (resampled to each layer's grid) or a dict of ready-made tensors keyed by
    ``(h, w)``. ``batch_index`` selects one sample of a batched record.
    """
    tokens = list(token_positions) if token_positions is not None else list(masks)
    if not record.layer_resolutions:
        raise ConfigurationError("attention record has no layers")
    terms = []
    for layer, hw in record.layer_resolutions.items():
        for token in tokens:
            region = masks[token]
            if isinstance(region, RegionMask):
                target = region.tensor(hw)
            else:
                if tuple(hw) not in region:
                    raise ConfigurationError(f"no mask at resolution {hw} for layer {layer!r}")
                target = region[tuple(hw)]
            amap = record.token_map(layer, token)
            if batch_index is not None:
                amap = amap[batch_index]
            terms.append(refocusing_map_loss(amap, target.to(amap.dtype), reduction))
    return torch.stack(terms).mean()


# identity ----------------------------------------------------------------------

class IdentityEmbedder(Protocol):
    def detect(self, image: torch.Tensor) -> torch.Tensor | None:
        """Face crop of a (C, H, W) image, or None when no face is detected."""

    def embed(self, crop: torch.Tensor) -> torch.Tensor:
        """Unit-norm identity embedding of a face crop."""


def identity_loss(x0_hat: torch.Tensor, source_images: Sequence[torch.Tensor] | torch.Tensor,
                  embedder: IdentityEmbedder, source_index: int | None = None) -> torch.Tensor | None:
    """1 - cos(R(B(x0_hat)), R(B(source))), or None when no face is found in ``x0_hat``.

    With ``source_index=None`` the loss is averaged over all source images.
    Source images whose face cannot be detected are ignored.
    """
    if x0_hat.ndim == 4:
        if x0_hat.shape[0] != 1:
            raise DomainError("identity_loss takes one estimated image")
        x0_hat = x0_hat[0]
    if len(source_images) == 0:
        raise DomainError("need at least one source image")
    crop = embedder.detect(x0_hat)
    if crop is None:
        return None
    e_hat = embedder.embed(crop)
    picks = [source_images[source_index]] if source_index is not None else list(source_images)
    losses = []
    for src in picks:
        src_crop = embedder.detect(src)
        if src_crop is None:
            continue
        e_src = embedder.embed(src_crop).detach()
        losses.append(1.0 - F.cosine_similarity(e_hat.flatten(), e_src.flatten().to(e_hat.dtype), dim=0))
    if not losses:
        return None
    return torch.stack(losses).mean()


# general-object structure / style -------------------------------------------------

class FeatureExtractor(Protocol):
    def keys(self, image: torch.Tensor) -> torch.Tensor:
        """(num_patches, dim) patch keys."""

    def global_embedding(self, image: torch.Tensor) -> torch.Tensor:
        """Summary ([CLS]-like) embedding."""


def self_similarity(keys: torch.Tensor) -> torch.Tensor:
    k = F.normalize(keys, dim=-1)
    return k @ k.T


def patch_contrastive_loss(query_keys: torch.Tensor, positive_keys: torch.Tensor,
                           temperature: float = 0.07) -> torch.Tensor:
    """InfoNCE over patches: patch i of the query should match patch i of the
    positive set against every other patch of that set."""
    q = F.normalize(query_keys, dim=-1)
    k = F.normalize(positive_keys, dim=-1)
    logits = q @ k.T / temperature
    target = torch.arange(q.shape[0])
    return F.cross_entropy(logits, target)


def structure_style_losses(x0_hat: torch.Tensor, source_image: torch.Tensor, reference_image: torch.Tensor,
                           extractor: FeatureExtractor, temperature: float = 0.07):
    """(L_ssim, L_contra, L_style) for one estimated image.

    L_ssim: mean squared difference of key self-similarity matrices (x0_hat vs source).
    L_contra: patch InfoNCE with x0_hat keys as queries and source keys as positives.
    L_style: mean squared difference of global embeddings (x0_hat vs reference).
    """
    k_hat = extractor.keys(x0_hat)
    k_src = extractor.keys(source_image).detach()
    l_ssim = ((self_similarity(k_hat) - self_similarity(k_src)) ** 2).mean()
    l_contra = patch_contrastive_loss(k_hat, k_src, temperature)
    g_hat = extractor.global_embedding(x0_hat)
    g_ref = extractor.global_embedding(reference_image).detach()
    l_style = ((g_hat - g_ref) ** 2).mean()
    return l_ssim, l_contra, l_style
