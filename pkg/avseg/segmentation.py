"""Top-down FPN mask decoder and binarization.

All resampling is bilinear with align_corners=False.
"""
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conf import DecoderConfig
from .encoders import MultiScaleVisualFeatures
from .errors import ConfigError, ShapeError
from .util import sanitize_id, save_binary_png, save_gray_png, save_overlay_png


class FPNDecoder(nn.Module):
    def __init__(self, dim: int, stages: int, cfg: DecoderConfig, image_size: tuple[int, int]):
        super().__init__()
        width = cfg.fpn_width
        self.image_size = tuple(image_size)
        self.lateral = nn.ModuleList(nn.Conv2d(dim, width, 1) for _ in range(stages))
        self.smooth = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in range(stages - 1))
        self.head = nn.Conv2d(width, 1, 1)
        if cfg.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward_logits(self, z: MultiScaleVisualFeatures) -> torch.Tensor:
        if len(z) != len(self.lateral):
            raise ShapeError(f'decoder built for {len(self.lateral)} stages, got {len(z)}')
        p = self.lateral[-1](z[-1])
        for s in range(len(z) - 2, -1, -1):
            x = z[s]
            p = F.interpolate(p, size=x.shape[-2:], mode='bilinear', align_corners=False) + self.lateral[s](x)
            p = F.relu(self.smooth[s](p))
        logits = F.interpolate(self.head(p), size=self.image_size, mode='bilinear', align_corners=False)
        return logits[:, 0]

    def forward(self, z: MultiScaleVisualFeatures) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(z))


def decode(z: MultiScaleVisualFeatures, decoder: FPNDecoder) -> torch.Tensor:
    return decoder(z)


def binarize(m, threshold: float = 0.5):
    """1 where m >= threshold."""
    if not 0 < threshold < 1:
        raise ConfigError(f'threshold must be in (0, 1), got {threshold}')
    if isinstance(m, torch.Tensor):
        return (m >= threshold).to(torch.uint8)
    return (np.asarray(m) >= threshold).astype(np.uint8)


def export_masks(soft: torch.Tensor, ids: Sequence[str], out_dir: Path, threshold: float = 0.5):
    out_dir = Path(out_dir)
    for mask, sample_id in zip(soft.detach().cpu().numpy(), ids):
        name = sanitize_id(sample_id)
        save_gray_png(mask, out_dir / 'soft' / f'{name}.png')
        save_binary_png(binarize(mask, threshold), out_dir / 'binary' / f'{name}.png')


def export_overlays(images: torch.Tensor, masks: torch.Tensor, ids: Sequence[str], out_dir: Path):
    """One RGB PNG per sample: the frame with its binary mask tinted red."""
    out_dir = Path(out_dir)
    for image, mask, sample_id in zip(images, masks.detach().cpu().numpy(), ids):
        save_overlay_png(image, mask, out_dir / f'{sanitize_id(sample_id)}.png')
