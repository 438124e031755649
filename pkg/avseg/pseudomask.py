"""Pseudo masks from a contrastive class-agnostic activation map.

A 1x1 head with a sigmoid turns the deepest visual features into a D_A
channel activation. Activation-weighted and (1 - activation)-weighted pooling
give foreground and background vectors; the loss pulls fg-fg and bg-bg pairs
together and pushes fg-bg pairs apart across the batch. The upsampled map A
and a saliency map S are then fused per pixel by

    Y = L[argmax([S; A])],  L = [zeros(1); ones(D_A)]

with ties resolved toward the saliency channel.
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .conf import EncoderConfig, PseudoMaskConfig, RunConfig, config_hash
from .encoders import VisualEncoder, load_checkpoint, save_checkpoint
from .errors import DataError, ShapeError
from .util import (get_device, load_binary_png, load_gray_png, read_jsonl, sanitize_id, save_binary_png,
                   write_jsonl)

logger = logging.getLogger(__name__)

EPS = 1e-8
# pooling weight mass below which a pool falls back to the unweighted mean
MASS_EPS = 1e-6


@dataclass
class ClassAgnosticMap:
    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f'class-agnostic map must be D_A x H x W, got {tuple(self.values.shape)}')
        if not torch.isfinite(self.values).all() or self.values.min() < 0 or self.values.max() > 1:
            raise ShapeError('class-agnostic map entries must lie in [0, 1]')


@dataclass
class SaliencyMap:
    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != 1:
            raise ShapeError(f'saliency map must be 1 x H x W, got {tuple(self.values.shape)}')
        if self.values.min() < 0 or self.values.max() > 1:
            raise ShapeError('saliency entries must lie in [0, 1]')


def build_label_tensor(channels: int, h: int, w: int, invert: bool = False) -> torch.Tensor:
    """[L_S; L_A]: zeros for the saliency channel, ones for the D_A map channels."""
    l_s = torch.full((1, h, w), int(invert), dtype=torch.uint8)
    l_a = torch.full((channels, h, w), int(not invert), dtype=torch.uint8)
    return torch.cat([l_s, l_a])


def refine_pseudo_mask(s_map: SaliencyMap, a: ClassAgnosticMap, invert_label: bool = False) -> torch.Tensor:
    if s_map.values.shape[-2:] != a.values.shape[-2:]:
        raise ShapeError(f'saliency {tuple(s_map.values.shape)} and map {tuple(a.values.shape)} differ in size')
    stacked = torch.cat([s_map.values.to(a.values.dtype), a.values])
    # torch.argmax returns the first maximal index
    index = stacked.argmax(dim=0, keepdim=True)
    labels = build_label_tensor(a.values.shape[0], *a.values.shape[-2:], invert=invert_label)
    return labels.gather(0, index)[0]


def _rescale(x: torch.Tensor) -> torch.Tensor:
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return torch.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def derive_saliency(a: ClassAgnosticMap) -> SaliencyMap:
    """Background activation 1 - max_c A, min-max rescaled; a constant map gives 0.5."""
    return SaliencyMap(_rescale(1 - a.values.amax(dim=0, keepdim=True)))


class SaliencyProvider(Protocol):
    def __call__(self, a: ClassAgnosticMap, sample_id: str, image: torch.Tensor) -> SaliencyMap:
        ...


class ActivationSaliency:
    def __call__(self, a: ClassAgnosticMap, sample_id: str, image: torch.Tensor) -> SaliencyMap:
        return derive_saliency(a)


class FileSaliency:
    """Externally computed saliency, one grayscale PNG per sample id."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def __call__(self, a: ClassAgnosticMap, sample_id: str, image: torch.Tensor) -> SaliencyMap:
        path = self.root / f'{sanitize_id(sample_id)}.png'
        if not path.exists():
            raise DataError(f'missing saliency map {path}', path=str(path))
        values = torch.from_numpy(load_gray_png(path))[None]
        if values.shape[-2:] != a.values.shape[-2:]:
            raise ShapeError(f'saliency map {path} is {tuple(values.shape[-2:])}, '
                             f'expected {tuple(a.values.shape[-2:])}')
        return SaliencyMap(values)


class SaliencyDetector(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(images)


class DetectorSaliency:
    def __init__(self, detector: SaliencyDetector):
        self.detector = detector.eval()

    @torch.no_grad()
    def __call__(self, a: ClassAgnosticMap, sample_id: str, image: torch.Tensor) -> SaliencyMap:
        return SaliencyMap(_rescale(torch.sigmoid(self.detector(image[None]))[0]))


def train_saliency_detector(images: torch.Tensor, targets: torch.Tensor, epochs: int, lr: float,
                            batch_size: int, seed: int = 0) -> SaliencyDetector:
    """Fit the detector to soft background maps with per-pixel BCE."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        detector = SaliencyDetector()
    optimizer = torch.optim.Adam(detector.parameters(), lr=lr)
    n = images.shape[0]
    for epoch in range(epochs):
        order = torch.randperm(n, generator=torch.Generator().manual_seed(seed + epoch))
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = F.binary_cross_entropy_with_logits(detector(images[idx]), targets[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
        logger.info(f'Saliency detector epoch {epoch + 1}/{epochs}: bce={total / n:.4f}')
    return detector.eval()


class ClassAgnosticHead(nn.Module):
    def __init__(self, dim: int, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(dim, channels, 1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.proj(features))


def pool_foreground_background(features: torch.Tensor, activation: torch.Tensor
                               ) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Activation-weighted (fg) and complement-weighted (bg) means of B x D x h x w features."""
    weight = activation.mean(dim=1, keepdim=True)
    fallback = False
    pooled = []
    for w in (weight, 1 - weight):
        mass = w.sum(dim=(2, 3))
        weighted = (features * w).sum(dim=(2, 3)) / mass.clamp_min(EPS)
        degenerate = mass <= MASS_EPS
        fallback = fallback or bool(degenerate.any())
        pooled.append(torch.where(degenerate, features.mean(dim=(2, 3)), weighted))
    return pooled[0], pooled[1], fallback


def ccam_loss(fg: torch.Tensor, bg: torch.Tensor) -> torch.Tensor:
    """Mean over ordered pairs i != j of (1 - cos(fg_i, fg_j)) + (1 - cos(bg_i, bg_j)) + relu(cos(fg_i, bg_j))."""
    b = fg.shape[0]
    if b < 2:
        raise ShapeError('the fg/bg contrastive loss needs ≥2 samples')
    fg_n = F.normalize(fg, dim=1, eps=EPS)
    bg_n = F.normalize(bg, dim=1, eps=EPS)
    terms = (1 - fg_n @ fg_n.T) + (1 - bg_n @ bg_n.T) + F.relu(fg_n @ bg_n.T)
    off_diagonal = ~torch.eye(b, dtype=torch.bool, device=fg.device)
    return terms[off_diagonal].mean()


@dataclass
class CCAMStep:
    maps: torch.Tensor
    loss: torch.Tensor
    fallback: bool


def ccam_train_step(features: torch.Tensor, head: ClassAgnosticHead, image_size: tuple[int, int],
                    optimizer: torch.optim.Optimizer | None = None) -> CCAMStep:
    """One fg/bg contrastive step; with an optimizer the parameters behind `features` and `head` are updated."""
    if features.shape[0] < 2:
        raise ShapeError('the fg/bg contrastive loss needs ≥2 samples')
    activation = head(features)
    fg, bg, fallback = pool_foreground_background(features, activation)
    loss = ccam_loss(fg, bg)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        loss = loss.detach()
    maps = F.interpolate(activation.detach(), size=tuple(image_size), mode='bilinear', align_corners=False)
    return CCAMStep(maps=maps.clamp(0, 1), loss=loss, fallback=fallback)


class ClassAgnosticModel(nn.Module):
    """Visual encoder plus activation head; `flipped` marks a map learned with fg and bg swapped."""

    def __init__(self, encoder_cfg: EncoderConfig, channels: int):
        super().__init__()
        self.image_size = tuple(encoder_cfg.image_size)
        self.encoder = VisualEncoder(encoder_cfg)
        self.head = ClassAgnosticHead(encoder_cfg.dim, channels)
        self.register_buffer('flipped', torch.tensor(False))

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)[-1]

    def raw_maps(self, images: torch.Tensor) -> torch.Tensor:
        activation = self.head(self.features(images))
        return F.interpolate(activation, size=self.image_size, mode='bilinear', align_corners=False).clamp(0, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        maps = self.raw_maps(images)
        return 1 - maps if bool(self.flipped) else maps


def ccam_encoder_config(cfg: RunConfig) -> EncoderConfig:
    return cfg.encoder.model_copy(update={'stages': cfg.pseudomask.encoder_stages or cfg.encoder.stages})


def ccam_config_hash(cfg: RunConfig) -> str:
    return config_hash(ccam_encoder_config(cfg), {'channels': cfg.pseudomask.channels})


def pseudo_mask_digest(cfg: RunConfig, samples: Sequence) -> str:
    """Fingerprint of everything that shapes the exported masks: model, phase settings, seed and training images."""
    images = hashlib.sha256()
    for s in samples:
        images.update(s.id.encode())
        images.update(s.image.contiguous().numpy().tobytes())
    return config_hash(ccam_encoder_config(cfg), cfg.pseudomask, {'seed': cfg.seed, 'images': images.hexdigest()})


def stored_pseudo_mask_digest(out_dir: Path) -> str | None:
    path = Path(out_dir) / 'digest.json'
    if not path.exists() or not (Path(out_dir) / 'manifest.jsonl').exists():
        return None
    return json.loads(path.read_text()).get('digest')


def build_ccam_model(cfg: RunConfig) -> ClassAgnosticModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return ClassAgnosticModel(ccam_encoder_config(cfg), cfg.pseudomask.channels)


def train_ccam(model: ClassAgnosticModel, images: torch.Tensor, cfg: PseudoMaskConfig, seed: int,
               optimizer: torch.optim.Optimizer | None = None, start_epoch: int = 0) -> torch.optim.Optimizer:
    n = images.shape[0]
    if n < 2:
        raise DataError('the class-agnostic map needs at least 2 training images')
    optimizer = optimizer or torch.optim.Adam(model.parameters(), lr=cfg.lr)
    device = next(model.parameters()).device
    model.train()
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = torch.randperm(n, generator=torch.Generator().manual_seed(seed + epoch))
        losses, fallbacks = [], 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            step = ccam_train_step(model.features(images[idx].to(device)), model.head, model.image_size, optimizer)
            losses.append(float(step.loss))
            fallbacks += step.fallback
        logger.info(f'Class-agnostic epoch {epoch + 1}/{start_epoch + cfg.epochs}: '
                    f'loss={sum(losses) / max(len(losses), 1):.4f} fallbacks={fallbacks}')
    model.eval()
    return optimizer


@torch.no_grad()
def orient(model: ClassAgnosticModel, images: torch.Tensor, batch_size: int) -> bool:
    """Invert the map when it covers more than half of the training pixels on average."""
    model.eval()
    device = next(model.parameters()).device
    total = sum(float(model.raw_maps(images[i:i + batch_size].to(device)).mean(dim=1).sum())
                for i in range(0, images.shape[0], batch_size))
    mean = total / (images.shape[0] * images.shape[-2] * images.shape[-1])
    model.flipped.fill_(mean > 0.5)
    logger.info(f'Class-agnostic mean activation {mean:.3f}; flipped={bool(model.flipped)}')
    return bool(model.flipped)


def build_saliency_provider(cfg: RunConfig, model: ClassAgnosticModel, images: torch.Tensor) -> SaliencyProvider:
    kind = cfg.pseudomask.saliency_provider
    if kind == 'file':
        return FileSaliency(cfg.pseudomask.saliency_dir)
    if kind == 'detector':
        device = next(model.parameters()).device
        with torch.no_grad():
            maps = torch.cat([model(images[i:i + 64].to(device)).cpu() for i in range(0, images.shape[0], 64)])
        targets = torch.stack([derive_saliency(ClassAgnosticMap(m)).values for m in maps])
        detector = train_saliency_detector(images, targets, cfg.pseudomask.detector_epochs, cfg.pseudomask.lr,
                                           cfg.pseudomask.batch_size, cfg.seed)
        return DetectorSaliency(detector)
    return ActivationSaliency()


@torch.no_grad()
def export_pseudo_masks(samples: Sequence, model: ClassAgnosticModel, out_dir: Path,
                        provider: SaliencyProvider | None = None, invert_label: bool = False,
                        batch_size: int = 64) -> list[dict]:
    """Write one 1-bit PNG per sample and `manifest.jsonl`; existing files are overwritten."""
    out_dir = Path(out_dir)
    provider = provider or ActivationSaliency()
    try:
        (out_dir / 'masks').mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f'cannot write pseudo masks to {out_dir}: {e}', path=str(out_dir)) from e
    device = next(model.parameters()).device
    model.eval()
    manifest = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        maps = model(torch.stack([s.image for s in batch]).to(device)).cpu()
        for sample, a in zip(batch, maps):
            a = ClassAgnosticMap(a)
            mask = refine_pseudo_mask(provider(a, sample.id, sample.image), a, invert_label)
            rel = Path('masks') / f'{sanitize_id(sample.id)}.png'
            save_binary_png(mask.numpy(), out_dir / rel)
            manifest.append({'id': sample.id, 'path': str(rel), 'fg_pixel_fraction': float(mask.float().mean())})
    write_jsonl(out_dir / 'manifest.jsonl', manifest)
    logger.info(f'Exported {len(manifest)} pseudo masks to {out_dir}')
    return manifest


def load_pseudo_masks(out_dir: Path) -> dict[str, torch.Tensor]:
    out_dir = Path(out_dir)
    return {
        record['id']: torch.from_numpy(load_binary_png(out_dir / record['path']))
        for record in read_jsonl(out_dir / 'manifest.jsonl')
    }


def generate_pseudo_masks(cfg: RunConfig, samples: Sequence, out_dir: Path, resume: bool = False) -> list[dict]:
    """Train (or keep training) the class-agnostic model, then export pseudo masks for `samples`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / 'ccam.pt'
    (out_dir / 'digest.json').unlink(missing_ok=True)
    digest = ccam_config_hash(cfg)
    model = build_ccam_model(cfg).to(get_device())
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.pseudomask.lr)
    start_epoch = 0
    if resume and ckpt.exists():
        payload = load_checkpoint(ckpt, digest, {'model': model})
        optimizer.load_state_dict(payload['optimizer'])
        start_epoch = payload['epoch']
        logger.info(f'Resume class-agnostic model from {ckpt} at epoch {start_epoch}')

    images = torch.stack([s.image for s in samples]) if samples else torch.empty(0)
    if len(samples):
        train_ccam(model, images, cfg.pseudomask, cfg.seed, optimizer, start_epoch)
        flipped = orient(model, images, cfg.pseudomask.batch_size)
        (out_dir / 'orientation.json').write_text(json.dumps({'flipped': flipped}))
        save_checkpoint(ckpt, digest, {'model': model}, optimizer=optimizer.state_dict(),
                        epoch=start_epoch + cfg.pseudomask.epochs)
    provider = build_saliency_provider(cfg, model, images) if len(samples) else None
    manifest = export_pseudo_masks(samples, model, out_dir, provider, cfg.pseudomask.invert_saliency_label,
                                   cfg.pseudomask.batch_size)
    (out_dir / 'digest.json').write_text(json.dumps({'digest': pseudo_mask_digest(cfg, samples)}))
    return manifest
