"""Per-token cross-attention grids: one cell per recorded layer plus the aggregate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .diffusion import DiffusionBackend, PromptSpec
from .errors import ConfigurationError
from .losses import scale_maps


@dataclass
class TokenAttention:
    concept_id: str
    position: int
    cells: list[tuple[str, torch.Tensor]]  # (name, (H, W) map scaled to [0, 1])
    region: np.ndarray | None = None

    def outside_mean(self) -> float | None:
        """Mean scaled aggregate attention outside the token's target region."""
        if self.region is None:
            return None
        agg = self.cells[-1][1]
        outside = torch.from_numpy(self.region == 0)
        if not outside.any():
            return 0.0
        return float(agg[outside].mean())


@torch.no_grad()
def token_attention(backend: DiffusionBackend, prompt: PromptSpec, z: torch.Tensor, t: int,
                    image_hw: tuple[int, int], regions: dict[str, np.ndarray] | None = None) -> list[TokenAttention]:
    """Record every special token of ``prompt`` at timestep ``t``.

    Layer maps are upsampled (nearest) to the image size. The aggregate is
    the mean of the upsampled raw maps. Every cell is min-max scaled.
    """
    if not prompt.special_positions:
        raise ConfigurationError(
            f"prompt {prompt.text!r} contains no special token; available: {sorted(backend.concept_tokens().values())}"
        )
    regions = regions or {}
    positions = dict(sorted(prompt.special_positions.items(), key=lambda kv: kv[1]))
    context = backend.encode_prompts([prompt])
    _, record = backend.predict(z, t, context, record_tokens=list(positions.values()))
    out = []
    for cid, pos in positions.items():
        ups = []
        cells = []
        for layer in record.layers:
            m = record.token_map(layer, pos)[:1]
            up = F.interpolate(m[:, None], size=image_hw, mode="nearest")[0, 0]
            ups.append(up)
            cells.append((layer, scale_maps(up[None])[0]))
        agg = torch.stack(ups).mean(dim=0)
        cells.append(("aggregate", scale_maps(agg[None])[0]))
        out.append(TokenAttention(cid, pos, cells, regions.get(cid)))
    return out


def _outline(region: np.ndarray) -> np.ndarray:
    r = region.astype(bool)
    pad = np.pad(r, 1, mode="edge")
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return r & ~interior


def render_grid(item: TokenAttention, zoom: int = 4, gap: int = 2) -> Image.Image:
    """Cells left to right (layers, then aggregate); the target region is outlined in red."""
    h, w = item.cells[0][1].shape
    n = len(item.cells)
    canvas = np.full((h * zoom, n * w * zoom + (n - 1) * gap, 3), 255, dtype=np.uint8)
    edge = _outline(item.region) if item.region is not None else None
    for i, (_, cell) in enumerate(item.cells):
        v = (cell.clamp(0, 1).numpy() * 255).round().astype(np.uint8)
        rgb = np.repeat(v[..., None], 3, axis=-1)
        if edge is not None:
            rgb[edge] = (255, 0, 0)
        rgb = rgb.repeat(zoom, 0).repeat(zoom, 1)
        x0 = i * (w * zoom + gap)
        canvas[:, x0:x0 + w * zoom] = rgb
    return Image.fromarray(canvas, mode="RGB")
