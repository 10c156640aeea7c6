"""Noise schedule math, latent noising / Tweedie inversion and the backend contract."""
from __future__ import annotations

import abc
import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alphas[t - 1]`` for ``t = 1..T``."""

    alphas: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        if alphas.ndim != 1 or alphas.size == 0:
            raise DomainError("alphas must be a non-empty 1-D sequence")
        if np.any(alphas <= 0.0) or np.any(alphas > 1.0):
            raise DomainError("alphas must lie in (0, 1]")
        if np.any(np.diff(alphas) > 0.0):
            raise DomainError("alphas must be non-increasing in t")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    @property
    def T(self) -> int:
        return int(self.alphas.size)

    @classmethod
    def scaled_linear(cls, T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
        """The latent-diffusion default: betas linear in sqrt space."""
        if T < 1:
            raise DomainError("T must be positive")
        betas = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
        return cls(np.cumprod(1.0 - betas))

    @classmethod
    def from_betas(cls, betas: Sequence[float]):
        return cls(np.cumprod(1.0 - np.asarray(betas, dtype=np.float64)))

    @classmethod
    def from_config(cls, config: Mapping):
        """Load a backend-provided schedule.

        Accepts either explicit ``alphas_cumprod`` / ``betas`` arrays or a
        diffusers-style scheduler config (``num_train_timesteps``,
        ``beta_start``, ``beta_end``, ``beta_schedule``).
        """
        if "alphas_cumprod" in config:
            return cls(np.asarray(config["alphas_cumprod"], dtype=np.float64))
        if "betas" in config or "trained_betas" in config:
            return cls.from_betas(config.get("betas", config.get("trained_betas")))
        T = int(config.get("num_train_timesteps", 1000))
        start = float(config.get("beta_start", 0.00085))
        end = float(config.get("beta_end", 0.012))
        kind = config.get("beta_schedule", "scaled_linear")
        if kind == "scaled_linear":
            return cls.scaled_linear(T, start, end)
        if kind == "linear":
            return cls.from_betas(np.linspace(start, end, T))
        raise ConfigurationError(f"unsupported beta_schedule {kind!r}")

    def check_timestep(self, t) -> None:
        t_arr = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
        if t_arr.size == 0 or np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise DomainError(f"timestep {t_arr.tolist()} outside [1, {self.T}]")

    def alpha(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        """alpha_t as a tensor broadcastable against ``like`` (batch-first)."""
        self.check_timestep(t)
        idx = torch.as_tensor(t, dtype=torch.long) - 1
        a = torch.from_numpy(self.alphas.copy())[idx]
        if like is not None:
            a = a.to(dtype=like.dtype, device=like.device)
            if a.ndim == 1:
                a = a.reshape(-1, *([1] * (like.ndim - 1)))
        return a

    def digest(self) -> str:
        return hashlib.sha256(self.alphas.tobytes()).hexdigest()

    def to_config(self) -> dict:
        return {"alphas_cumprod": self.alphas.tolist()}


@dataclass
class LatentState:
    """A (possibly noised) latent. ``t == 0`` means clean, with no noise draw."""

    z: torch.Tensor
    t: int | torch.Tensor = 0
    eps: torch.Tensor | None = None

    def __post_init__(self):
        if self.eps is not None and self.eps.shape != self.z.shape:
            raise DomainError("eps must have the latent's shape")


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> LatentState:
    """z = sqrt(a_t) x0 + sqrt(1 - a_t) eps; ``t`` may be an int or a per-sample tensor."""
    if eps.shape != x0.shape:
        raise DomainError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    a = sched.alpha(t, like=x0)
    z = a.sqrt() * x0 + (1.0 - a).sqrt() * eps
    return LatentState(z=z, t=t, eps=eps)


def tweedie_estimate(state: LatentState, eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Clean-latent estimate x0 = (z - sqrt(1 - a_t) eps_pred) / sqrt(a_t)."""
    if eps_pred.shape != state.z.shape:
        raise DomainError("eps_pred must have the latent's shape")
    a = sched.alpha(state.t, like=state.z)
    if torch.any(a <= 0):
        raise DomainError("alpha_t = 0: Tweedie estimate is singular")
    return (state.z - (1.0 - a).sqrt() * eps_pred) / a.sqrt()


@dataclass
class PromptSpec:
    template: str
    text: str
    token_ids: tuple[int, ...]
    special_positions: dict[str, int] = field(default_factory=dict)

    def position(self, concept_id: str) -> int:
        try:
            return self.special_positions[concept_id]
        except KeyError:
            raise ConfigurationError(
                f"concept {concept_id!r} not present in prompt {self.text!r}"
            ) from None


@dataclass
class AttentionRecord:
    """Cross-attention maps captured during one denoiser forward pass.

    ``maps[layer]`` has shape ``(batch, len(tokens), h, w)``: head-averaged
    post-softmax probabilities for the requested token columns. ``rows`` keeps
    the full ``(batch, h*w, seq_len)`` matrices when requested.
    """

    tokens: tuple[int, ...] = ()
    maps: dict[str, torch.Tensor] = field(default_factory=dict)
    layer_resolutions: dict[str, tuple[int, int]] = field(default_factory=dict)
    d: int = 0
    rows: dict[str, torch.Tensor] | None = None

    @property
    def layers(self) -> list[str]:
        return list(self.layer_resolutions)

    def token_map(self, layer: str, token: int) -> torch.Tensor:
        """(batch, h, w) map of one recorded token index."""
        try:
            col = self.tokens.index(token)
        except ValueError:
            raise ConfigurationError(f"token index {token} was not recorded") from None
        return self.maps[layer][:, col]


class DiffusionBackend(abc.ABC):
    """What the trainer, sampler and CLI need from a diffusion engine.

    Implementations own the text encoder (with per-concept embedding rows),
    the latent codec, the noise schedule and a denoiser that can record
    cross-attention maps.
    """

    schedule: NoiseSchedule
    downscale_factor: int
    latent_channels: int
    image_channels: int

    @abc.abstractmethod
    def encode(self, images: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def decode(self, latents: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def add_concept(self, concept_id: str, token: str, init_word: str | None = None) -> None: ...

    @abc.abstractmethod
    def concept_parameters(self) -> dict[str, torch.nn.Parameter]: ...

    @abc.abstractmethod
    def concept_tokens(self) -> dict[str, str]: ...

    @abc.abstractmethod
    def resolve_prompt(self, text: str, template: str | None = None) -> PromptSpec: ...

    @abc.abstractmethod
    def encode_prompts(self, prompts: Sequence[PromptSpec]) -> torch.Tensor: ...

    @abc.abstractmethod
    def predict(
        self,
        z: torch.Tensor,
        t,
        context: torch.Tensor,
        record_tokens: Sequence[int] = (),
        keep_rows: bool = False,
    ) -> tuple[torch.Tensor, AttentionRecord]: ...

    @abc.abstractmethod
    def projection_names(self) -> list[str]:
        """Dotted names of every cross-attention projection (q, k, v, out)."""

    @abc.abstractmethod
    def backbone_parameters(self) -> dict[str, torch.Tensor]:
        """Every parameter that is not a concept embedding or adapter tensor."""

    @abc.abstractmethod
    def spec(self) -> dict:
        """JSON-able description sufficient to rebuild the frozen backend."""

    def latent_shape(self, image_hw: tuple[int, int]) -> tuple[int, int, int]:
        h, w = image_hw
        f = self.downscale_factor
        if h % f or w % f:
            raise DomainError(f"image size {h}x{w} not divisible by downscale factor {f}")
        return self.latent_channels, h // f, w // f


def backend_predict(
    backend: DiffusionBackend,
    state: LatentState,
    prompt: PromptSpec | Sequence[PromptSpec],
    record_tokens: Sequence[int] = (),
    keep_rows: bool = False,
) -> tuple[torch.Tensor, AttentionRecord]:
    prompts = [prompt] if isinstance(prompt, PromptSpec) else list(prompt)
    known = set(backend.concept_tokens())
    for p in prompts:
        missing = set(p.special_positions) - known
        if missing:
            raise ConfigurationError(f"prompt {p.text!r} references unknown concepts {sorted(missing)}")
    context = backend.encode_prompts(prompts)
    if context.shape[0] != state.z.shape[0]:
        context = context.expand(state.z.shape[0], -1, -1)
    return backend.predict(state.z, state.t, context, record_tokens=record_tokens, keep_rows=keep_rows)


def tensor_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    """Order-independent sha256 over named tensors (names, dtypes, shapes, bytes)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(json.dumps([name, str(t.dtype), list(t.shape)]).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
