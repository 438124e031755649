"""Two-stream encoders.

The audio branch maps a B x F x T spectrogram batch to global embeddings
(B x D). The visual branch maps a B x 3 x H x W image batch to S feature
maps, stage s at stride 2**(s+2), each projected to D channels by its own
1x1 head.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import torch
from torch import nn

from .audio import Spectrogram
from .conf import AudioConfig, EncoderConfig
from .errors import CheckpointError, ConfigError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class MultiScaleVisualFeatures:
    stages: list[torch.Tensor]

    def __post_init__(self):
        if not 1 <= len(self.stages) <= 4:
            raise ShapeError(f'expected 1..4 stages, got {len(self.stages)}')
        if len({s.shape[-3] for s in self.stages}) != 1:
            raise ShapeError(f'stages disagree on channel dim: {[s.shape[-3] for s in self.stages]}')
        shapes = self.stage_shapes
        for (h0, w0), (h1, w1) in zip(shapes, shapes[1:]):
            if h1 > h0 or w1 > w0 or (h1, w1) == (h0, w0):
                raise ShapeError(f'stage sizes must shrink with depth, got {shapes}')

    @property
    def stage_shapes(self) -> list[tuple[int, int]]:
        return [tuple(s.shape[-2:]) for s in self.stages]

    @property
    def dim(self) -> int:
        return self.stages[0].shape[-3]

    def __len__(self) -> int:
        return len(self.stages)

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter(self.stages)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.stages[index]


def _conv(in_channels: int, out_channels: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, stride, 1), nn.ReLU(inplace=True))


class StagedTrunk(nn.Module):
    """A stem followed by blocks whose outputs are the stage features."""

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        outputs = []
        for block in self.blocks:
            x = block(x)
            outputs.append(x)
        return outputs


class ToyVisualTrunk(StagedTrunk):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.stem = _conv(3, cfg.stem_width, 2)
        self.widths = list(cfg.visual_widths[:cfg.stages])
        blocks, in_channels = [], cfg.stem_width
        for width in self.widths:
            blocks.append(nn.Sequential(_conv(in_channels, width, 2), _conv(width, width, 1)))
            in_channels = width
        self.blocks = nn.ModuleList(blocks)


class ResNetVisualTrunk(StagedTrunk):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.blocks = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4][:cfg.stages])
        self.widths = [256, 512, 1024, 2048][:cfg.stages]


class ToyAudioTrunk(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        layers, in_channels = [], 1
        for width in cfg.audio_widths:
            layers.append(_conv(in_channels, width, 2))
            in_channels = width
        self.body = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.width = in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class ResNetAudioTrunk(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
        net.fc = nn.Identity()
        self.body = net
        self.width = 2048

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class AudioEncoder(nn.Module):
    """f_a followed by the linear projection head g_a."""

    def __init__(self, cfg: EncoderConfig, audio: AudioConfig):
        super().__init__()
        self.expected_shape = (audio.freq_bins, audio.time_steps)
        self.trunk = ResNetAudioTrunk(cfg) if cfg.backbone == 'resnet50' else ToyAudioTrunk(cfg)
        self.head = nn.Linear(self.trunk.width, cfg.dim)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.ndim == 2:
            spec = spec[None]
        if tuple(spec.shape[-2:]) != self.expected_shape:
            raise ConfigError(f'expected spectrogram {self.expected_shape}, got {tuple(spec.shape[-2:])}')
        return self.head(self.trunk(spec[:, None]))


class VisualEncoder(nn.Module):
    """f_v followed by per-stage 1x1 projection heads g_v."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.image_size = tuple(cfg.image_size)
        self.trunk = ResNetVisualTrunk(cfg) if cfg.backbone == 'resnet50' else ToyVisualTrunk(cfg)
        if cfg.per_stage_heads:
            self.heads = nn.ModuleList(nn.Conv2d(w, cfg.dim, 1) for w in self.trunk.widths)
        else:
            shared = nn.Conv2d(self.trunk.widths[0], cfg.dim, 1)
            self.heads = nn.ModuleList([shared] * cfg.stages)

    def forward(self, image: torch.Tensor) -> MultiScaleVisualFeatures:
        if image.ndim == 3:
            image = image[None]
        if image.shape[1] != 3 or tuple(image.shape[-2:]) != self.image_size:
            raise ConfigError(f'expected image 3x{self.image_size[0]}x{self.image_size[1]}, '
                              f'got {"x".join(map(str, image.shape[1:]))}')
        return MultiScaleVisualFeatures([head(f) for head, f in zip(self.heads, self.trunk(image))])


def build_encoders(cfg: EncoderConfig, audio: AudioConfig, seed: int = 0) -> tuple[AudioEncoder, VisualEncoder]:
    # torch's default conv/linear init is fan-in scaled uniform; only the seed is ours
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return AudioEncoder(cfg, audio), VisualEncoder(cfg)


def encode_audio(s: Spectrogram | torch.Tensor, encoder: AudioEncoder) -> torch.Tensor:
    return encoder(s.values if isinstance(s, Spectrogram) else s)


def encode_visual(image: torch.Tensor, encoder: VisualEncoder) -> MultiScaleVisualFeatures:
    return encoder(image)


def save_checkpoint(path: Path, config_hash: str, modules: dict[str, nn.Module], **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'version': CHECKPOINT_VERSION,
        'config_hash': config_hash,
        'state': {name: module.state_dict() for name, module in modules.items()},
        **extra,
    }
    tmp = path.with_suffix('.tmp')
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path, config_hash: str, modules: dict[str, nn.Module] | None = None) -> dict:
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except (OSError, RuntimeError, EOFError) as e:
        raise CheckpointError(f'cannot read checkpoint {path}: {e}', path=str(path)) from e
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f'checkpoint {path} has version {payload.get("version")}, '
                              f'expected {CHECKPOINT_VERSION}')
    if payload.get('config_hash') != config_hash:
        raise CheckpointError(f'checkpoint {path} was written for config {str(payload.get("config_hash"))[:12]}, '
                              f'this run is {config_hash[:12]}')
    for name, module in (modules or {}).items():
        module.load_state_dict(payload['state'][name])
    return payload
