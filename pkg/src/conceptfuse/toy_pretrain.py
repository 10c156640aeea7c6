"""Pretraining of the toy denoiser on synthetic captioned images.

Personalisation only works on top of a backbone that already maps words to
image content. The toy gets that from a short, seeded run on images of a
coloured face box over a background, captioned with one face-colour word and
one background-style word. The result ships as a package asset; run
``python -m conceptfuse.toy_pretrain`` to regenerate it.
"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .data import FACE_BOX, _face
from .errors import ConfigurationError
from .toy import FACE_WORDS, STYLE_WORDS, ToyBackend

log = logging.getLogger(__name__)

ASSET = Path(__file__).with_name("assets") / "toy_backbone.safetensors"

# A representative colour per word; samples are drawn around it.
FACE_COLOURS = np.array([
    [0.9, 0.75, 0.6], [0.6, 0.3, 0.0], [0.3, 0.4, -0.2], [0.9, 0.3, 0.3],
    [0.2, 0.2, 0.25], [0.85, 0.55, -0.3], [0.7, 0.0, -0.2], [-0.2, -0.35, -0.4],
])
STYLE_COLOURS = np.array([
    [[0.8, -0.6, -0.6], [0.4, -0.8, -0.5]],
    [[-0.4, 0.3, 0.9], [-0.7, 0.1, 0.8]],
    [[-0.6, 0.7, -0.4], [-0.3, 0.4, -0.7]],
    [[0.2, -0.6, 0.7], [-0.1, -0.8, 0.4]],
    [[0.9, 0.4, -0.7], [0.7, 0.2, -0.8]],
    [[-0.7, 0.5, 0.5], [-0.4, 0.8, 0.7]],
    [[0.95, -0.2, -0.3], [0.6, -0.5, 0.1]],
    [[-0.8, -0.5, 0.7], [-0.5, -0.2, 0.95]],
])


def synthetic_batch(rng: np.random.Generator, n: int, size: int = 32, box=FACE_BOX,
                    empty_rate: float = 0.1) -> tuple[np.ndarray, list[str]]:
    """(n, H, W, 3) images in [-1, 1] with matching captions.

    Each image gets a face colour near one face word and either a striped
    background near one style word or a plain random one. Captions name
    the face, the style, both, or nothing.
    """
    images, captions = [], []
    for _ in range(n):
        f = int(rng.integers(len(FACE_WORDS)))
        s = int(rng.integers(len(STYLE_WORDS)))
        striped = rng.random() < 0.6
        img = np.empty((size, size, 3))
        if striped:
            period = int(rng.choice([2, 4, 8]))
            rows = (np.arange(size) // period) % 2 == 0
            jitter = rng.normal(0, 0.08, 3)
            img[rows] = STYLE_COLOURS[s, 0] + jitter
            img[~rows] = STYLE_COLOURS[s, 1] + jitter
        else:
            img[:] = rng.uniform(-0.8, 0.8, 3)
            img += np.linspace(-0.15, 0.15, size)[:, None, None] * rng.choice([-1, 1])
        img += rng.normal(0, 0.03, img.shape)
        _face(img, box, FACE_COLOURS[f] + rng.normal(0, 0.08, 3), rng)
        images.append(np.clip(img, -1, 1))

        face, style = FACE_WORDS[f], STYLE_WORDS[s]
        u = rng.random()
        if u < empty_rate:
            captions.append("")
        elif not striped or u < 0.4:
            captions.append(f"a photo of {face} person")
        elif u < 0.6:
            captions.append(f"a photo of a person in the {style} style")
        else:
            captions.append(f"a photo of {face} person in the {style} style")
    return np.stack(images), captions


def pretrain(backend: ToyBackend, steps: int = 3000, batch_size: int = 64, lr: float = 1e-3,
             seed: int = 0) -> list[float]:
    """Full noise-prediction training of every backbone weight; returns per-step losses."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    params = [p for n, p in backend.named_parameters() if not n.startswith("concept_embeddings.")]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    losses = []
    for step in range(steps):
        imgs, caps = synthetic_batch(rng, batch_size)
        x0 = backend.encode(torch.from_numpy(imgs.astype(np.float32)).permute(0, 3, 1, 2))
        t = torch.randint(1, backend.schedule.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        a = backend.schedule.alpha(t, like=x0)
        z = a.sqrt() * x0 + (1 - a).sqrt() * eps
        context = backend.encode_prompts([backend.resolve_prompt(c) for c in caps])
        pred, _ = backend.predict(z, t, context)
        loss = F.mse_loss(pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 250 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    backend.requires_grad_(False)
    return losses


def save_backbone(backend: ToyBackend, path: str | Path = ASSET) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous() for k, v in backend.backbone_parameters().items()}
    meta = {k: str(v) for k, v in backend.options.items() if k != "pretrained"}
    save_file(tensors, str(path), metadata=meta)


def load_backbone(backend: ToyBackend, path: str | Path = ASSET) -> None:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    wanted = {k: str(v) for k, v in backend.options.items() if k != "pretrained"}
    if meta != wanted:
        diff = sorted(k for k in set(meta) | set(wanted) if meta.get(k) != wanted.get(k))
        raise ConfigurationError(
            f"pretrained toy weights were built with different options {diff}; pass pretrained=false"
        )
    tensors = load_file(str(path))
    params = dict(backend.named_parameters())
    with torch.no_grad():
        for name, value in tensors.items():
            params[name].copy_(value)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="Regenerate the pretrained toy backbone asset.")
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(ASSET))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.manual_seed(args.seed)
    backend = ToyBackend(pretrained=False)
    losses = pretrain(backend, args.steps, args.batch_size, args.lr, args.seed)
    log.info("final loss (mean of last 100 steps) %.4f", float(np.mean(losses[-100:])))
    save_backbone(backend, args.out)


if __name__ == "__main__":
    main()
