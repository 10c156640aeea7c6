"""Deterministic desk-scale diffusion backend.

A pixel-unshuffle codec (exactly invertible), a word-vocabulary tokenizer
and a three-block convolutional denoiser with one cross-attention layer per
block. Everything is initialised from a seed so that two backends built with
the same options are bit-identical; by default the denoiser then loads the
shipped pretrained weights (see :mod:`conceptfuse.toy_pretrain`).

The denoiser predicts a clean-latent mean ``mu`` and a per-pixel variance
``s2`` and converts them to a noise prediction with the Gaussian-posterior
rule

    eps = sqrt(1 - a) (z - sqrt(a) mu) / (a s2 + 1 - a)

which is the Bayes-optimal noise estimate when ``x0 ~ N(mu, s2)``.
"""
from __future__ import annotations

import math
import re
import zlib
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import AttentionRecord, DiffusionBackend, NoiseSchedule, PromptSpec
from .errors import ConfigurationError, DomainError

PAD, BOS, EOS = 0, 1, 2
_WORD = re.compile(r"<[^<>\s]+>|[a-z0-9']+")


FACE_WORDS = ("pale", "tan", "olive", "rosy", "ashen", "golden", "ruddy", "dusky")
STYLE_WORDS = ("crimson", "azure", "emerald", "violet", "amber", "teal", "scarlet", "cobalt")
VOCAB = (
    "a", "an", "the", "of", "in", "photo", "picture", "image", "portrait", "person", "style",
    "close", "up", "high", "quality", "detailed", "studio", "lighting", "sharp", "focus",
    "professional", "wearing", "sunglasses",
) + FACE_WORDS + STYLE_WORDS


class ToyTokenizer:
    """Fixed word vocabulary, hashed buckets for unknown words, ``<name>`` concept tokens."""

    def __init__(self, n_buckets: int = 8, max_length: int = 20, vocab: Sequence[str] = VOCAB):
        self.vocab = {w: 3 + i for i, w in enumerate(vocab)}
        self.n_buckets = n_buckets
        self.max_length = max_length
        self.special: dict[str, int] = {}

    @property
    def n_base(self) -> int:
        return 3 + len(self.vocab) + self.n_buckets

    def word_id(self, word: str) -> int:
        if word in self.vocab:
            return self.vocab[word]
        return 3 + len(self.vocab) + zlib.crc32(word.encode("utf-8")) % self.n_buckets

    def add_special(self, token: str) -> int:
        if not (token.startswith("<") and token.endswith(">")):
            raise ConfigurationError(f"special token must look like <name>, got {token!r}")
        if token in self.special:
            raise ConfigurationError(f"special token {token!r} already registered")
        self.special[token] = self.n_base + len(self.special)
        return self.special[token]

    def __call__(self, text: str) -> list[int]:
        ids = [BOS]
        for word in _WORD.findall(text.lower()):
            if word.startswith("<"):
                if word not in self.special:
                    raise ConfigurationError(
                        f"unknown special token {word} (available: {sorted(self.special)})"
                    )
                ids.append(self.special[word])
            else:
                ids.append(self.word_id(word))
        ids.append(EOS)
        if len(ids) > self.max_length:
            raise DomainError(f"prompt has {len(ids)} tokens, limit is {self.max_length}")
        return ids + [PAD] * (self.max_length - len(ids))


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.to(torch.float64)[:, None] * 1000.0 / T) * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, context_dim: int, heads: int = 2, head_dim: int = 32):
        super().__init__()
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.to_q = nn.Linear(channels, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, channels)

    def forward(self, h: torch.Tensor, context: torch.Tensor):
        B, C, H, W = h.shape
        x = h.flatten(2).transpose(1, 2)

        def split(y):
            return y.reshape(B, y.shape[1], self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.to_q(x)), split(self.to_k(context)), split(self.to_v(context))
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(B, H * W, -1)
        out = self.to_out(out).transpose(1, 2).reshape(B, C, H, W)
        return out, probs.mean(dim=1)


class Block(nn.Module):
    def __init__(self, channels: int, context_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, channels)
        self.attn = CrossAttention(channels, context_dim)
        self.norm2 = nn.GroupNorm(4, channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, h, temb, context):
        h = h + temb[:, :, None, None]
        a, probs = self.attn(self.norm1(h), context)
        h = h + a
        h = h + self.conv(F.silu(self.norm2(h)))
        return h, probs


class ToyBackend(nn.Module, DiffusionBackend):
    """Small, seeded, CPU-only implementation of :class:`DiffusionBackend`."""

    def __init__(
        self,
        seed: int = 0,
        image_channels: int = 3,
        downscale_factor: int = 4,
        latent_hw: int = 8,
        channels: int = 64,
        context_dim: int = 64,
        n_buckets: int = 8,
        max_length: int = 20,
        prior_var: float = 0.05,
        output_gain: float = 0.1,
        input_gain: float = 0.1,
        timesteps: int = 1000,
        pretrained: bool = True,
    ):
        super().__init__()
        self.options = dict(
            seed=seed, image_channels=image_channels, downscale_factor=downscale_factor,
            latent_hw=latent_hw, channels=channels, context_dim=context_dim,
            n_buckets=n_buckets, max_length=max_length, prior_var=prior_var, output_gain=output_gain,
            input_gain=input_gain,
            timesteps=timesteps, pretrained=pretrained,
        )
        self.schedule = NoiseSchedule.scaled_linear(timesteps)
        self.image_channels = image_channels
        self.downscale_factor = downscale_factor
        self.latent_channels = image_channels * downscale_factor**2
        self.latent_hw = latent_hw
        self.prior_var = prior_var
        self.input_gain = input_gain
        self.tokenizer = ToyTokenizer(n_buckets, max_length)
        self._concept_tokens: dict[str, str] = {}

        gen = torch.Generator().manual_seed(seed)
        lc = self.latent_channels
        perm = torch.randperm(lc, generator=gen)
        signs = torch.randint(0, 2, (lc,), generator=gen) * 2 - 1
        self.register_buffer("codec_perm", perm)
        self.register_buffer("codec_sign", signs.float())

        self.token_embedding = nn.Parameter(torch.randn(self.tokenizer.n_base, context_dim, generator=gen))
        self.position_embedding = nn.Parameter(0.1 * torch.randn(max_length, context_dim, generator=gen))
        self.concept_embeddings = nn.ParameterDict()

        self.conv_in = nn.Conv2d(lc, channels, 3, padding=1)
        self.spatial_embedding = nn.Parameter(0.1 * torch.randn(1, channels, latent_hw, latent_hw, generator=gen))
        self.time_proj = nn.Linear(channels, channels)
        self.down = Block(channels, context_dim)
        self.mid = Block(channels, context_dim)
        self.up = Block(channels, context_dim)
        self.conv_out = nn.Conv2d(channels, 2 * lc, 3, padding=1)
        self._init_weights(gen)
        with torch.no_grad():
            self.conv_out.weight.mul_(output_gain)
        if pretrained:
            from .toy_pretrain import load_backbone

            load_backbone(self)
        self.requires_grad_(False)

    def _init_weights(self, gen: torch.Generator) -> None:
        for name, p in self.named_parameters():
            if name in ("token_embedding", "position_embedding", "spatial_embedding"):
                continue
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                elif "norm" in name:
                    p.fill_(1.0)
                else:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))

    # codec -------------------------------------------------------------
    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != self.image_channels:
            raise DomainError(f"expected (B, {self.image_channels}, H, W) images, got {tuple(images.shape)}")
        self.latent_shape(tuple(images.shape[-2:]))
        z = F.pixel_unshuffle(images, self.downscale_factor)
        return z[:, self.codec_perm] * self.codec_sign.to(z.dtype)[None, :, None, None]

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 4 or latents.shape[1] != self.latent_channels:
            raise DomainError(f"expected (B, {self.latent_channels}, h, w) latents, got {tuple(latents.shape)}")
        inv = torch.argsort(self.codec_perm)
        z = latents * self.codec_sign.to(latents.dtype)[None, :, None, None]
        return F.pixel_shuffle(z[:, inv], self.downscale_factor)

    # text --------------------------------------------------------------
    def add_concept(self, concept_id: str, token: str, init_word: str | None = None) -> None:
        if concept_id in self._concept_tokens:
            raise ConfigurationError(f"concept {concept_id!r} already registered")
        self.tokenizer.add_special(token)
        if init_word:
            init = self.token_embedding[self.tokenizer.word_id(init_word.lower())].detach().clone()
        else:
            init = torch.zeros(self.token_embedding.shape[1], dtype=self.token_embedding.dtype)
        self.concept_embeddings[concept_id] = nn.Parameter(init, requires_grad=False)
        self._concept_tokens[concept_id] = token

    def concept_parameters(self) -> dict[str, nn.Parameter]:
        return dict(self.concept_embeddings.items())

    def concept_tokens(self) -> dict[str, str]:
        return dict(self._concept_tokens)

    def resolve_prompt(self, text: str, template: str | None = None) -> PromptSpec:
        ids = self.tokenizer(text)
        positions: dict[str, int] = {}
        for cid, token in self._concept_tokens.items():
            tid = self.tokenizer.special[token]
            hits = [i for i, x in enumerate(ids) if x == tid]
            if len(hits) > 1:
                raise ConfigurationError(f"{token} appears {len(hits)} times in {text!r}")
            if hits:
                positions[cid] = hits[0]
        return PromptSpec(template=template or text, text=text, token_ids=tuple(ids),
                          special_positions=positions)

    def encode_prompts(self, prompts: Sequence[PromptSpec]) -> torch.Tensor:
        ids = torch.tensor([p.token_ids for p in prompts], dtype=torch.long)
        parts = [self.token_embedding]
        if len(self.concept_embeddings):
            parts.append(torch.stack([self.concept_embeddings[c] for c in self._concept_tokens]))
        table = torch.cat(parts, dim=0)
        return table[ids] + self.position_embedding[None, : ids.shape[1]]

    # denoiser ----------------------------------------------------------
    def predict(self, z, t, context, record_tokens: Sequence[int] = (), keep_rows: bool = False):
        B = z.shape[0]
        t_vec = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t_vec.numel() == 1:
            t_vec = t_vec.expand(B)
        a = self.schedule.alpha(t_vec, like=z)
        temb = timestep_embedding(t_vec, self.time_proj.in_features, self.schedule.T).to(z.dtype)
        temb = self.time_proj(temb)

        h = self.input_gain * self.conv_in(z) + self.spatial_embedding
        h0, p_down = self.down(h, temb, context)
        h1, p_mid = self.mid(F.avg_pool2d(h0, 2), temb, context)
        h2, p_up = self.up(F.interpolate(h1, scale_factor=2, mode="nearest") + h0, temb, context)
        mu, log_var = self.conv_out(h2).chunk(2, dim=1)
        s2 = self.prior_var * torch.exp(log_var.clamp(-10.0, 4.0))
        eps = (1.0 - a).sqrt() * (z - a.sqrt() * mu) / (a * s2 + 1.0 - a)

        record = AttentionRecord(tokens=tuple(int(k) for k in record_tokens), d=self.down.attn.head_dim)
        record.rows = {} if keep_rows else None
        for name, probs, hh in (("down", p_down, h0), ("mid", p_mid, h1), ("up", p_up, h2)):
            hw = tuple(hh.shape[-2:])
            record.layer_resolutions[name] = hw
            if record.tokens:
                record.maps[name] = probs[:, :, list(record.tokens)].transpose(1, 2).reshape(B, -1, *hw)
            if keep_rows:
                record.rows[name] = probs
        return eps, record

    def projection_names(self) -> list[str]:
        return [f"{blk}.attn.{p}" for blk in ("down", "mid", "up") for p in ("to_q", "to_k", "to_v", "to_out")]

    def backbone_parameters(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in self.named_parameters():
            if name.startswith("concept_embeddings.") or ".lora_" in name:
                continue
            out[name.replace(".base.", ".")] = p
        return out

    def spec(self) -> dict:
        return {"name": "toy", "options": dict(self.options)}
