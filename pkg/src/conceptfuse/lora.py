"""Low-rank residual adapters on cross-attention projections.

An adapted projection computes ``(W + scale * U @ V.T) x`` where ``W`` is the
frozen ``(n, m)`` base weight, ``U`` is ``(n, r)`` and ``V`` is ``(m, r)``.
"""
from __future__ import annotations

import fnmatch
from dataclasses import dataclass
from typing import Iterable

import torch
from torch import nn

from .errors import ConfigurationError, StateError


class LoraLinear(nn.Module):
    """Wraps an ``nn.Linear``; the wrapped module's weight is never written
    except by :meth:`merge` / :meth:`unmerge`."""

    def __init__(self, base: nn.Linear, rank: int, scale: float = 1.0, init_std: float = 0.01,
                 generator: torch.Generator | None = None):
        super().__init__()
        n, m = base.weight.shape
        if rank < 1 or rank >= min(n, m):
            raise ConfigurationError(f"rank {rank} must satisfy 1 <= r < min({n}, {m})")
        self.base = base
        self.rank = rank
        self.scale = float(scale)
        self.merged = False
        dtype = base.weight.dtype
        self.lora_U = nn.Parameter(torch.zeros(n, rank, dtype=dtype))
        self.lora_V = nn.Parameter((init_std * torch.randn(m, rank, generator=generator)).to(dtype))

    def delta(self) -> torch.Tensor:
        return self.scale * self.lora_U @ self.lora_V.T

    def forward(self, x):
        out = self.base(x)
        if self.merged or self.scale == 0.0:
            return out
        return out + self.scale * (x @ self.lora_V) @ self.lora_U.T

    @torch.no_grad()
    def merge(self) -> torch.Tensor:
        if self.merged:
            raise StateError("adapter already merged")
        self._unmerged_weight = self.base.weight.detach().clone()
        self.base.weight += self.delta()
        self.merged = True
        return self.base.weight

    @torch.no_grad()
    def unmerge(self) -> torch.Tensor:
        if not self.merged:
            raise StateError("adapter is not merged")
        # restore from the saved copy: subtracting the delta back is not bit-exact
        self.base.weight.copy_(self._unmerged_weight)
        del self._unmerged_weight
        self.merged = False
        return self.base.weight


@dataclass
class LoraAdapter:
    """Handle to one attached adapter."""

    target: str
    module: LoraLinear

    @property
    def U(self) -> nn.Parameter:
        return self.module.lora_U

    @property
    def V(self) -> nn.Parameter:
        return self.module.lora_V

    @property
    def rank(self) -> int:
        return self.module.rank

    @property
    def scale(self) -> float:
        return self.module.scale

    def delta(self) -> torch.Tensor:
        return self.module.delta()

    def merge(self):
        return self.module.merge()

    def unmerge(self):
        return self.module.unmerge()


def _parent(root: nn.Module, name: str) -> tuple[nn.Module, str]:
    parent_name, _, attr = name.rpartition(".")
    return (root.get_submodule(parent_name) if parent_name else root), attr


def select_targets(backend, targets: str | Iterable[str] = "*") -> list[str]:
    """Resolve glob patterns (``"*.to_k"``) or exact names against the backend's projections."""
    available = backend.projection_names()
    patterns = [targets] if isinstance(targets, str) else list(targets)
    chosen = []
    for pat in patterns:
        hits = fnmatch.filter(available, pat)
        if not hits:
            raise ConfigurationError(f"no cross-attention projection matches {pat!r}; available: {available}")
        chosen.extend(h for h in hits if h not in chosen)
    return chosen


def attach(backend: nn.Module, targets: str | Iterable[str] = "*", rank: int = 4, scale: float = 1.0,
           init_std: float = 0.01, seed: int = 0) -> list[LoraAdapter]:
    """Attach adapters with ``U = 0`` so the adapted model starts equal to the base."""
    gen = torch.Generator().manual_seed(seed)
    adapters = []
    for name in select_targets(backend, targets):
        parent, attr = _parent(backend, name)
        module = getattr(parent, attr)
        if isinstance(module, LoraLinear):
            raise StateError(f"adapter already attached to {name}")
        if not isinstance(module, nn.Linear):
            raise ConfigurationError(f"{name} is not a linear projection")
        wrapped = LoraLinear(module, rank, scale, init_std, generator=gen)
        setattr(parent, attr, wrapped)
        adapters.append(LoraAdapter(name, wrapped))
    return adapters


def attached(backend: nn.Module) -> list[LoraAdapter]:
    return [LoraAdapter(name, m) for name, m in backend.named_modules() if isinstance(m, LoraLinear)]


def detach(backend: nn.Module, adapters: Iterable[LoraAdapter] | None = None) -> None:
    """Restore the original linear modules. Merged adapters are unmerged first."""
    for adapter in list(adapters if adapters is not None else attached(backend)):
        parent, attr = _parent(backend, adapter.target)
        module = getattr(parent, attr)
        if module is not adapter.module:
            raise StateError(f"adapter on {adapter.target} is not attached")
        if module.merged:
            module.unmerge()
        setattr(parent, attr, module.base)


def adapter_parameters(adapters: Iterable[LoraAdapter]) -> list[nn.Parameter]:
    params = []
    for a in adapters:
        params.extend([a.U, a.V])
    return params


def adapter_state(adapters: Iterable[LoraAdapter]) -> dict[str, torch.Tensor]:
    state = {}
    for a in adapters:
        state[f"{a.target}.U"] = a.U.detach().clone()
        state[f"{a.target}.V"] = a.V.detach().clone()
    return state
