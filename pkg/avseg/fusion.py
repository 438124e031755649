"""Pixel-wise audio-visual fusion and the max-pooled audio-visual similarity.

Reshape convention for the fusion update: a D x H x W map is flattened to
D x N with N = H*W. theta(v)^T phi(a_hat) is then an N x N matrix divided by
N (no softmax), and it mixes the N columns of omega(v).
"""
import logging

import torch
import torch.nn.functional as F
from torch import nn

from .conf import FusionConfig
from .encoders import MultiScaleVisualFeatures
from .errors import ShapeError

logger = logging.getLogger(__name__)

EPS = 1e-8


class FusedFeatures(MultiScaleVisualFeatures):
    pass


def duplicate_audio(a: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(..., D) -> (..., D, h, w) with every location equal to `a`."""
    if h < 1 or w < 1:
        raise ShapeError(f'spatial size must be >= 1, got {h}x{w}')
    return a[..., None, None].expand(*a.shape, h, w)


class FusionStage(nn.Module):
    def __init__(self, dim: int, cfg: FusionConfig):
        super().__init__()
        self.theta = nn.Conv2d(dim, dim, 1, bias=cfg.bias)
        self.phi = nn.Conv2d(dim, dim, 1, bias=cfg.bias)
        self.omega = nn.Conv2d(dim, dim, 1, bias=cfg.bias)
        self.mu = nn.Conv2d(dim, dim, 1, bias=cfg.bias)
        if cfg.zero_init_mu:
            nn.init.zeros_(self.mu.weight)
            if self.mu.bias is not None:
                nn.init.zeros_(self.mu.bias)

    def forward(self, v: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        b, d, h, w = v.shape
        if a.shape != (b, d):
            raise ShapeError(f'audio embedding {tuple(a.shape)} does not match visual stage {tuple(v.shape)}')
        n = h * w
        a_hat = duplicate_audio(a, h, w)
        theta = self.theta(v).flatten(2)
        phi = self.phi(a_hat).flatten(2)
        omega = self.omega(v).flatten(2)
        attention = theta.transpose(1, 2) @ phi / n
        mixed = (attention @ omega.transpose(1, 2)).transpose(1, 2).reshape(b, d, h, w)
        return v + self.mu(mixed)


class AudioVisualFusion(nn.Module):
    def __init__(self, dim: int, stages: int, cfg: FusionConfig):
        super().__init__()
        self.stages = nn.ModuleList(FusionStage(dim, cfg) for _ in range(stages))

    def forward(self, v: MultiScaleVisualFeatures, a: torch.Tensor) -> FusedFeatures:
        if len(v) != len(self.stages):
            raise ShapeError(f'fusion built for {len(self.stages)} stages, got {len(v)}')
        return FusedFeatures([stage(x, a) for stage, x in zip(self.stages, v)])


def fuse_stage(v: torch.Tensor, a: torch.Tensor, stage: FusionStage) -> torch.Tensor:
    squeeze = v.ndim == 3
    z = stage(v[None] if squeeze else v, a[None] if a.ndim == 1 else a)
    return z[0] if squeeze else z


def fuse_all(v: MultiScaleVisualFeatures, a: torch.Tensor, fusion: AudioVisualFusion) -> FusedFeatures:
    return fusion(v, a)


def _normalized_audio(a: torch.Tensor) -> torch.Tensor:
    norm = a.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ShapeError('degenerate audio embedding')
    return a / norm


def _normalized_visual(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-3, keepdim=True).clamp_min(EPS)


def max_pooled_similarity(a: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Max over locations of cos(a, v[:, y, x]); `a` is D, `v` is D x H x W."""
    if a.shape[-1] != v.shape[-3]:
        raise ShapeError(f'audio dim {a.shape[-1]} does not match visual dim {v.shape[-3]}')
    cos = torch.einsum('d,dn->n', _normalized_audio(a), _normalized_visual(v).flatten(-2))
    return cos.max()


def similarity_matrix(audio: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
    """B x B matrix of sim(a_i, v_m) for a B x D audio batch and a B x D x H x W stage."""
    if audio.shape[-1] != visual.shape[1]:
        raise ShapeError(f'audio dim {audio.shape[-1]} does not match visual dim {visual.shape[1]}')
    cos = torch.einsum('id,mdn->imn', _normalized_audio(audio), _normalized_visual(visual).flatten(2))
    return cos.amax(dim=-1)


def audio_visual_heatmap(a: torch.Tensor, v: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    """Per-location cosine map of the deepest stage, upsampled and rescaled to [0, 1] per sample."""
    cos = torch.einsum('bd,bdhw->bhw', _normalized_audio(a), _normalized_visual(v))
    up = F.interpolate(cos[:, None], size=tuple(image_size), mode='bilinear', align_corners=False)[:, 0]
    lo = up.amin(dim=(1, 2), keepdim=True)
    hi = up.amax(dim=(1, 2), keepdim=True)
    span = hi - lo
    return torch.where(span > 0, (up - lo) / span.clamp_min(EPS), torch.full_like(up, 0.5))
