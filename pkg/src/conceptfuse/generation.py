"""Composed-prompt sampling and postprocessing."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .data import save_image
from .diffusion import DiffusionBackend, LatentState, PromptSpec, tweedie_estimate
from .errors import ConfigurationError, DomainError, OverwriteError, PluginError
from .plugins import resolve_postprocessors
from .templates import COMPOSED_TEMPLATES, fill

log = logging.getLogger(__name__)


@dataclass
class GenerationRequest:
    prompt: str = COMPOSED_TEMPLATES[0]
    extra: str | None = None
    num_images: int = 1
    guidance_scale: float = 7.5
    num_denoise_steps: int = 50
    seed: int = 0
    postprocess: list[str] = field(default_factory=list)
    image_hw: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if self.num_images < 1:
            raise DomainError("num_images must be >= 1")
        if self.num_denoise_steps < 1:
            raise DomainError("num_denoise_steps must be >= 1")

    def final_prompt(self, tokens: dict[str, str]) -> str:
        return fill(self.prompt, tokens, self.extra)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps ending at 1 (``steps`` of them)."""
    if steps > T:
        raise DomainError(f"cannot take {steps} steps on a {T}-step schedule")
    stride = T // steps
    return [int(i * stride + 1) for i in range(steps)][::-1]


@torch.no_grad()
def sample(backend: DiffusionBackend, prompt: PromptSpec, num_images: int = 1, seed: int = 0,
           steps: int = 50, guidance_scale: float = 7.5, image_hw: tuple[int, int] = (32, 32)) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) sampling with classifier-free guidance.

    Returns decoded images ``(num_images, C, H, W)`` clamped to [-1, 1].
    """
    sched = backend.schedule
    shape = (num_images, *backend.latent_shape(image_hw))
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen)
    cond = backend.encode_prompts([prompt]).expand(num_images, -1, -1)
    uncond = backend.encode_prompts([backend.resolve_prompt("")]).expand(num_images, -1, -1)
    ts = sampling_timesteps(sched.T, steps)
    x0 = z
    for i, t in enumerate(ts):
        if guidance_scale == 1.0:
            eps, _ = backend.predict(z, t, cond)
        else:
            eps_c, _ = backend.predict(z, t, cond)
            eps_u, _ = backend.predict(z, t, uncond)
            eps = eps_u + guidance_scale * (eps_c - eps_u)
        x0 = tweedie_estimate(LatentState(z, t), eps, sched)
        a_prev = float(sched.alphas[ts[i + 1] - 1]) if i + 1 < len(ts) else 1.0
        z = a_prev**0.5 * x0 + (1.0 - a_prev) ** 0.5 * eps
    return backend.decode(x0).clamp(-1.0, 1.0)


def postprocess(image: torch.Tensor, pipeline) -> torch.Tensor:
    """Apply postprocessor plugins in order. Every id is resolved before any runs."""
    fns = resolve_postprocessors(list(pipeline))
    for name, fn in zip(pipeline, fns):
        try:
            image = fn(image)
        except Exception as exc:
            raise PluginError(f"postprocessor {name!r} failed: {exc}") from exc
    return image


def generate(backend: DiffusionBackend, request: GenerationRequest) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Returns (raw images, postprocessed images); the second list equals the
    first when no postprocessors are configured."""
    text = request.final_prompt(backend.concept_tokens())
    prompt = backend.resolve_prompt(text, request.prompt)
    raw = sample(backend, prompt, request.num_images, request.seed, request.num_denoise_steps,
                 request.guidance_scale, request.image_hw)
    raw_list = list(raw)
    if not request.postprocess:
        return raw_list, raw_list
    resolve_postprocessors(request.postprocess)
    return raw_list, [postprocess(img, request.postprocess) for img in raw_list]


def write_outputs(out_dir: str | Path, backend: DiffusionBackend, request: GenerationRequest,
                  checkpoint_digest: str | None = None, extra_provenance: dict | None = None) -> list[Path]:
    """Sample, then save ``img_XXX.png`` with a JSON sidecar per image.

    Raw images and sidecars are written before any postprocessor runs, so a
    failing plugin leaves them in place. Postprocessed copies go to
    ``img_XXX.post.png``. Existing files are never overwritten.
    """
    out_dir = Path(out_dir)
    pipeline = list(request.postprocess)
    fns = resolve_postprocessors(pipeline)
    targets = [out_dir / f"img_{i:03d}.png" for i in range(request.num_images)]
    clash = [p for p in targets if p.exists() or p.with_suffix(".json").exists()]
    if clash:
        raise OverwriteError(f"{clash[0]} already exists")
    text = request.final_prompt(backend.concept_tokens())
    prompt = backend.resolve_prompt(text, request.prompt)
    raw = sample(backend, prompt, request.num_images, request.seed, request.num_denoise_steps,
                 request.guidance_scale, request.image_hw)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecars = []
    for i, (path, img) in enumerate(zip(targets, raw)):
        save_image(img, path)
        side = {
            "prompt": text,
            "template": request.prompt,
            "extra": request.extra,
            "seed": request.seed,
            "index": i,
            "num_images": request.num_images,
            "num_denoise_steps": request.num_denoise_steps,
            "guidance_scale": request.guidance_scale,
            "image_hw": list(request.image_hw),
            "checkpoint_digest": checkpoint_digest,
            "postprocess": pipeline,
            **(extra_provenance or {}),
        }
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
        sidecars.append(side)
    for path, img, side in zip(targets, raw, sidecars):
        for name, fn in zip(pipeline, fns):
            try:
                img = fn(img)
            except Exception as exc:
                raise PluginError(f"postprocessor {name!r} failed on {path.name}: {exc}; raw images kept") from exc
        if pipeline:
            post = path.with_name(path.stem + ".post.png")
            save_image(img, post)
            side["postprocessed"] = post.name
            path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return targets


def read_sidecar(image_path: str | Path) -> dict:
    return json.loads(Path(image_path).with_suffix(".json").read_text())


def request_from_dict(data: dict) -> GenerationRequest:
    known = set(GenerationRequest.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown generation field(s) {unknown}")
    data = dict(data)
    if "image_hw" in data:
        data["image_hw"] = tuple(data["image_hw"])
    return GenerationRequest(**data)


def request_to_dict(request: GenerationRequest) -> dict:
    d = asdict(request)
    d["image_hw"] = list(request.image_hw)
    return d
