import logging
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .conf import RunConfig, model_config_hash
from .encoders import MultiScaleVisualFeatures, build_encoders, load_checkpoint
from .fusion import AudioVisualFusion, FusedFeatures, audio_visual_heatmap
from .losses import BatchEmbeddings
from .segmentation import FPNDecoder

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    audio: torch.Tensor
    visual: MultiScaleVisualFeatures
    fused: FusedFeatures
    logits: torch.Tensor

    @property
    def mask(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    def embeddings(self, temperature: float, features: str = 'pre_fusion') -> BatchEmbeddings:
        stages = self.visual if features == 'pre_fusion' else self.fused
        return BatchEmbeddings(self.audio, list(stages), temperature)

    def heatmap(self, image_size: tuple[int, int]) -> torch.Tensor:
        return audio_visual_heatmap(self.audio, self.visual[-1], image_size)


class AVSegModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        enc = cfg.encoder
        self.audio_encoder, self.visual_encoder = build_encoders(enc, cfg.audio, cfg.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 1)
            self.fusion = AudioVisualFusion(enc.dim, enc.stages, cfg.fusion)
            self.decoder = FPNDecoder(enc.dim, enc.stages, cfg.decoder, enc.image_size)

    def forward(self, image: torch.Tensor, spectrogram: torch.Tensor) -> ModelOutput:
        a = self.audio_encoder(spectrogram)
        v = self.visual_encoder(image)
        z = self.fusion(v, a)
        return ModelOutput(audio=a, visual=v, fused=z, logits=self.decoder.forward_logits(z))


def build_model(cfg: RunConfig) -> AVSegModel:
    model = AVSegModel(cfg)
    n_params = sum(p.numel() for p in model.parameters())
    logger.debug(f'Built {cfg.encoder.backbone} model with {n_params} parameters')
    return model


def load_model(cfg: RunConfig, path: Path, device: torch.device | str = 'cpu') -> AVSegModel:
    model = build_model(cfg)
    load_checkpoint(path, model_config_hash(cfg), {'model': model})
    return model.to(device).eval()
