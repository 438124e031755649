import logging
from dataclasses import dataclass
from typing import Optional

import torch

from .conf import LossConfig
from .errors import ShapeError
from .fusion import similarity_matrix

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class BatchEmbeddings:
    audio: torch.Tensor
    visual: list[torch.Tensor]
    temperature: float = 0.07

    def __post_init__(self):
        if self.temperature <= 0:
            raise ShapeError(f'temperature must be > 0, got {self.temperature}')
        b = self.audio.shape[0]
        for s, stage in enumerate(self.visual):
            if stage.shape[0] != b or stage.shape[1] != self.audio.shape[1]:
                raise ShapeError(f'stage {s} has shape {tuple(stage.shape)}, audio batch is {tuple(self.audio.shape)}')

    @property
    def batch_size(self) -> int:
        return self.audio.shape[0]

    def similarities(self) -> torch.Tensor:
        """S x B x B tensor; entry [s, i, m] is sim(a_i, v_m^s)."""
        if self.batch_size < 2:
            raise ShapeError('contrastive loss needs ≥2 samples')
        return torch.stack([similarity_matrix(self.audio, stage) for stage in self.visual])


@dataclass
class LossReport:
    l_a2v: torch.Tensor
    l_v2a: torch.Tensor
    l_avf: torch.Tensor
    l_pmr: torch.Tensor
    total: torch.Tensor

    def to_record(self, **extra) -> dict:
        record = {name: float(getattr(self, name).detach()) for name in ('l_a2v', 'l_v2a', 'l_avf', 'l_pmr', 'total')}
        record.update(extra)
        return record

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total.detach()))


def _check_pairs(sims: torch.Tensor):
    if sims.ndim != 3 or sims.shape[1] != sims.shape[2]:
        raise ShapeError(f'similarities must be S x B x B, got {tuple(sims.shape)}')
    if sims.shape[1] < 2:
        raise ShapeError('contrastive loss needs ≥2 samples')


def a2v_from_similarity(sims: torch.Tensor, temperature: float) -> torch.Tensor:
    """-(1/B) sum_i sum_s log softmax_m(sim[s, i, m] / tau)[i]."""
    _check_pairs(sims)
    log_p = torch.log_softmax(sims / temperature, dim=2)
    return -log_p.diagonal(dim1=1, dim2=2).sum(dim=0).mean()


def v2a_from_similarity(sims: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mirror of a2v: the softmax runs over audio samples m for a fixed visual bag i."""
    _check_pairs(sims)
    log_p = torch.log_softmax(sims / temperature, dim=1)
    return -log_p.diagonal(dim1=1, dim2=2).sum(dim=0).mean()


def loss_a2v(b: BatchEmbeddings) -> torch.Tensor:
    return a2v_from_similarity(b.similarities(), b.temperature)


def loss_v2a(b: BatchEmbeddings) -> torch.Tensor:
    return v2a_from_similarity(b.similarities(), b.temperature)


def loss_avf(b: BatchEmbeddings) -> torch.Tensor:
    sims = b.similarities()
    return a2v_from_similarity(sims, b.temperature) + v2a_from_similarity(sims, b.temperature)


def loss_mask_bce(m: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if m.shape != target.shape:
        raise ShapeError(f'mask {tuple(m.shape)} and target {tuple(target.shape)} differ')
    m = m.clamp(BCE_EPS, 1 - BCE_EPS)
    y = target.to(m.dtype)
    return -(y * torch.log(m) + (1 - y) * torch.log(1 - m)).mean()


def loss_total(b: Optional[BatchEmbeddings], m: Optional[torch.Tensor], target: Optional[torch.Tensor],
               cfg: Optional[LossConfig] = None) -> LossReport:
    """L = w_avf * L_avf + w_pmr * L_pmr; a term whose inputs are None is zero."""
    cfg = cfg or LossConfig()
    ref = b.audio if b is not None else m
    if ref is None:
        raise ShapeError('loss_total needs embeddings or a mask')
    zero = ref.new_zeros(())
    if b is not None:
        sims = b.similarities()
        l_a2v = a2v_from_similarity(sims, b.temperature)
        l_v2a = v2a_from_similarity(sims, b.temperature)
    else:
        l_a2v = l_v2a = zero
    l_avf = l_a2v + l_v2a
    l_pmr = loss_mask_bce(m, target) if m is not None and target is not None else zero
    total = cfg.avf_weight * l_avf + cfg.pmr_weight * l_pmr
    return LossReport(l_a2v=l_a2v, l_v2a=l_v2a, l_avf=l_avf, l_pmr=l_pmr, total=total)
