"""Checkpoint directories: ``manifest.json`` + safetensors blobs.

Layout::

    manifest.json          concepts, adapters, backend spec, schedule hash, config
    embeddings.safetensors learned special-token rows, keyed by concept id
    lora.safetensors       "<target>.U" / "<target>.V" for every adapter (phase 2)
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file

from . import lora
from .errors import ConfigurationError, OverwriteError

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
EMBEDDINGS = "embeddings.safetensors"
LORA = "lora.safetensors"


def _backend_factories():
    from .toy import ToyBackend

    return {"toy": ToyBackend}


def build_backend(spec: dict):
    factories = _backend_factories()
    name = spec.get("name")
    if name not in factories:
        raise ConfigurationError(f"unknown backend {name!r}; available: {sorted(factories)}")
    return factories[name](**spec.get("options", {}))


@dataclass
class Checkpoint:
    phase: int
    backend: dict
    schedule_hash: str
    concepts: dict[str, dict]
    embeddings: dict[str, torch.Tensor]
    adapters: dict[str, dict] = field(default_factory=dict)
    lora_tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, backend, phase: int, concepts: dict[str, dict], config: dict | None = None):
        adapters = lora.attached(backend)
        return cls(
            phase=phase,
            backend=backend.spec(),
            schedule_hash=backend.schedule.digest(),
            concepts={k: dict(v) for k, v in concepts.items()},
            embeddings={k: p.detach().clone().contiguous() for k, p in backend.concept_parameters().items()},
            adapters={a.target: {"rank": a.rank, "scale": a.scale} for a in adapters},
            lora_tensors={k: v.contiguous() for k, v in lora.adapter_state(adapters).items()},
            config=config or {},
        )

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "phase": self.phase,
            "backend": self.backend,
            "schedule_hash": self.schedule_hash,
            "concepts": self.concepts,
            "adapters": self.adapters,
            "config": self.config,
        }

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for group in (self.embeddings, self.lora_tensors):
            for name in sorted(group):
                h.update(name.encode())
                h.update(group[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path, overwrite: bool = False) -> Path:
        directory = Path(directory)
        if (directory / MANIFEST).exists() and not overwrite:
            raise OverwriteError(f"checkpoint already exists at {directory}")
        directory.mkdir(parents=True, exist_ok=True)
        save_file(self.embeddings, str(directory / EMBEDDINGS))
        if self.lora_tensors:
            save_file(self.lora_tensors, str(directory / LORA))
        manifest = self.manifest()
        manifest["digest"] = self.digest()
        (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        path = directory / MANIFEST
        if not path.exists():
            raise ConfigurationError(f"no checkpoint manifest at {path}")
        m = json.loads(path.read_text())
        if m.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint format {m.get('format_version')}")
        lora_tensors = load_file(str(directory / LORA)) if m["adapters"] else {}
        return cls(
            phase=m["phase"], backend=m["backend"], schedule_hash=m["schedule_hash"],
            concepts=m["concepts"], embeddings=load_file(str(directory / EMBEDDINGS)),
            adapters=m["adapters"], lora_tensors=lora_tensors, config=m.get("config", {}),
        )

    def restore(self, backend=None):
        """Rebuild (or populate) a backend: concepts, learned rows, adapters."""
        backend = backend if backend is not None else build_backend(self.backend)
        if backend.schedule.digest() != self.schedule_hash:
            raise ConfigurationError("backend schedule does not match the checkpoint's schedule hash")
        known = backend.concept_tokens()
        for cid, info in self.concepts.items():
            if cid not in known:
                backend.add_concept(cid, info["token"], info.get("init_word"))
        params = backend.concept_parameters()
        with torch.no_grad():
            for cid, value in self.embeddings.items():
                params[cid].copy_(value)
        if self.adapters:
            existing = {a.target: a for a in lora.attached(backend)}
            for target, info in self.adapters.items():
                adapter = existing.get(target)
                if adapter is None:
                    (adapter,) = lora.attach(backend, target, rank=info["rank"], scale=info["scale"])
                with torch.no_grad():
                    adapter.U.copy_(self.lora_tensors[f"{target}.U"])
                    adapter.V.copy_(self.lora_tensors[f"{target}.V"])
        return backend


def directory_digest(directory: str | Path) -> str:
    """The digest recorded in a saved checkpoint's manifest."""
    return json.loads((Path(directory) / MANIFEST).read_text())["digest"]
