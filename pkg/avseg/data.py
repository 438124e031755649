"""Synthetic audio-visual pairs and the per-video directory layout.

Layout (one directory per video, frames and masks share file names):

    root/{split}/{video_id}/frames/0000.png
    root/{split}/{video_id}/masks/0000.png     optional in train
    root/{split}/{video_id}/audio.wav
    root/metadata.csv                          split,video_id,frame,id,class_id
    root/synth_spec.json                       generator provenance
"""
import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from .audio import Waveform, compute_spectrogram, read_wav, write_wav
from .conf import AudioConfig, ClassSpec, SynthSpec
from .errors import ConfigError, DataError
from .util import load_binary_png, load_rgb_png, save_binary_png, save_rgb_png

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
MIN_IMAGE_SIZE = 16
TONE_PEAK = 0.5


class SamplePair:
    """One frame with its audio. The mask is only reachable through `gt_mask`."""

    def __init__(self, video_id: str, frame: int, image: torch.Tensor, waveform: Waveform,
                 class_id: Optional[int] = None, gt_mask: Optional[torch.Tensor] = None):
        self.video_id = video_id
        self.frame = frame
        self.id = f'{video_id}_{frame}'
        self.image = image
        self.waveform = waveform
        self.class_id = class_id
        self._gt_mask = gt_mask

    @property
    def gt_mask(self) -> torch.Tensor:
        if self._gt_mask is None:
            raise DataError(f'sample {self.id} has no ground-truth mask', sample_id=self.id)
        return self._gt_mask

    @property
    def has_gt_mask(self) -> bool:
        return self._gt_mask is not None

    def __repr__(self):
        return f'SamplePair({self.id!r}, class_id={self.class_id})'


@dataclass
class DatasetSplits:
    train: list[SamplePair] = field(default_factory=list)
    val: list[SamplePair] = field(default_factory=list)
    test: list[SamplePair] = field(default_factory=list)
    mixture: list[SamplePair] = field(default_factory=list)

    def __getitem__(self, name: str) -> list[SamplePair]:
        if name not in (*SPLITS, 'mixture'):
            raise DataError(f'unknown split {name!r}')
        return getattr(self, name)

    def items(self):
        return [(name, self[name]) for name in (*SPLITS, 'mixture')]

    def __len__(self):
        return sum(len(samples) for _, samples in self.items())


def _shape_polygon(kind: str, x0: float, y0: float, size: float) -> list[tuple[float, float]]:
    x1, y1 = x0 + size, y0 + size
    cx, cy = x0 + size / 2, y0 + size / 2
    if kind == 'triangle':
        return [(cx, y0), (x1, y1), (x0, y1)]
    if kind == 'diamond':
        return [(cx, y0), (x1, cy), (cx, y1), (x0, cy)]
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def draw_footprint(kind: str, image_size: int, x0: float, y0: float, size: float) -> np.ndarray:
    """Binary H x W footprint of one shape inside the square [x0, x0 + size) x [y0, y0 + size)."""
    canvas = Image.new('L', (image_size, image_size), 0)
    draw = ImageDraw.Draw(canvas)
    x1, y1 = x0 + size - 1, y0 + size - 1
    third = size / 3
    if kind == 'circle':
        draw.ellipse([x0, y0, x1, y1], fill=1)
    elif kind == 'ring':
        draw.ellipse([x0, y0, x1, y1], fill=1)
        draw.ellipse([x0 + third, y0 + third, x1 - third, y1 - third], fill=0)
    elif kind == 'cross':
        draw.rectangle([x0 + third, y0, x1 - third, y1], fill=1)
        draw.rectangle([x0, y0 + third, x1, y1 - third], fill=1)
    elif kind == 'hbar':
        draw.rectangle([x0, y0 + third, x1, y1 - third], fill=1)
    elif kind == 'vbar':
        draw.rectangle([x0 + third, y0, x1 - third, y1], fill=1)
    elif kind == 'square':
        draw.rectangle([x0, y0, x1, y1], fill=1)
    else:
        draw.polygon(_shape_polygon(kind, x0, y0, size - 1), fill=1)
    return np.asarray(canvas, dtype=np.uint8)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-saturation gray texture, float in [0, 255]."""
    base = rng.uniform(90, 160)
    coarse = rng.normal(0, 18, (8, 8)).astype(np.float32)
    texture = np.asarray(Image.fromarray(coarse).resize((size, size), Image.Resampling.BILINEAR))
    tint = rng.uniform(-8, 8, 3)
    return np.clip(base + texture[..., None] + tint, 0, 255)


def _place(rng: np.random.Generator, image_size: int) -> tuple[float, float, float]:
    size = rng.uniform(0.2, 0.5) * image_size
    x0 = rng.uniform(0, image_size - size)
    y0 = rng.uniform(0, image_size - size)
    return x0, y0, size


def _paint(canvas: np.ndarray, footprint: np.ndarray, color: tuple[int, int, int], rng: np.random.Generator):
    jitter = rng.uniform(-15, 15, 3)
    canvas[footprint.astype(bool)] = np.clip(np.asarray(color) + jitter, 0, 255)


def class_tone(cls: ClassSpec, sample_rate: int, num_samples: int) -> np.ndarray:
    t = np.arange(num_samples) / sample_rate
    tone = sum(amp * np.sin(2 * np.pi * (k + 1) * cls.fundamental_hz * t) for k, amp in enumerate(cls.harmonics))
    return TONE_PEAK * tone / sum(abs(a) for a in cls.harmonics)


def _to_image(canvas: np.ndarray) -> torch.Tensor:
    quantized = np.rint(canvas).astype(np.uint8)
    return torch.from_numpy(quantized.transpose(2, 0, 1).astype(np.float32) / 255.0)


def render_sample(spec: SynthSpec, classes: list[ClassSpec], sounding: Sequence[int], video_id: str,
                  rng: np.random.Generator) -> SamplePair:
    """Background, optional silent distractor, then each sounding shape; the mask is their union."""
    size = spec.image_size
    num_samples = round(spec.duration_s * spec.sample_rate)
    canvas = _background(rng, size)

    if spec.distractors and len(classes) > 1:
        silent = int(rng.choice([k for k in range(len(classes)) if k not in sounding]))
        _paint(canvas, draw_footprint(classes[silent].shape, size, *_place(rng, size)), classes[silent].color, rng)

    mask = np.zeros((size, size), dtype=np.uint8)
    audio = np.zeros(num_samples)
    for k in sounding:
        footprint = draw_footprint(classes[k].shape, size, *_place(rng, size))
        _paint(canvas, footprint, classes[k].color, rng)
        mask |= footprint
        audio += class_tone(classes[k], spec.sample_rate, num_samples)
    if spec.noise_level > 0:
        audio += spec.noise_level * rng.standard_normal(num_samples)

    return SamplePair(
        video_id=video_id,
        frame=0,
        image=_to_image(canvas),
        waveform=Waveform(audio.astype(np.float32), spec.sample_rate),
        class_id=int(sounding[0]),
        gt_mask=torch.from_numpy(mask),
    )


def generate_dataset(spec: SynthSpec) -> DatasetSplits:
    if spec.image_size < MIN_IMAGE_SIZE:
        raise ConfigError(f'image_size {spec.image_size} is below the minimum shape canvas {MIN_IMAGE_SIZE}')
    classes = spec.class_specs()

    samples = [
        render_sample(spec, classes, [k], f'{cls.name}_{i:04d}', np.random.default_rng([spec.seed, k, i]))
        for k, cls in enumerate(classes)
        for i in range(spec.samples_per_class)
    ]
    order = np.random.default_rng(spec.seed).permutation(len(samples))
    n_train = round(spec.split[0] * len(samples))
    n_val = round(spec.split[1] * len(samples))
    splits = DatasetSplits(
        train=[samples[i] for i in order[:n_train]],
        val=[samples[i] for i in order[n_train:n_train + n_val]],
        test=[samples[i] for i in order[n_train + n_val:]],
    )

    for i in range(spec.n_mixture_samples):
        rng = np.random.default_rng([spec.seed, len(classes), i])
        pair = [int(k) for k in rng.choice(len(classes), size=2, replace=False)]
        splits.mixture.append(render_sample(spec, classes, pair, f'mix_{i:04d}', rng))

    logger.info(f'Generated {len(splits.train)}/{len(splits.val)}/{len(splits.test)} samples '
                f'({len(classes)} classes, {len(splits.mixture)} mixtures)')
    return splits


def write_layout(splits: DatasetSplits, root: Path, spec: Optional[SynthSpec] = None):
    root = Path(root)
    rows = []
    for name, samples in splits.items():
        for sample in samples:
            video = root / name / sample.video_id
            frame = f'{sample.frame:04d}.png'
            save_rgb_png(sample.image, video / 'frames' / frame)
            write_wav(sample.waveform, video / 'audio.wav')
            if sample.has_gt_mask:
                save_binary_png(sample.gt_mask.numpy(), video / 'masks' / frame)
            rows.append({'split': name, 'video_id': sample.video_id, 'frame': sample.frame,
                         'id': sample.id, 'class_id': '' if sample.class_id is None else sample.class_id})
    with open(root / 'metadata.csv', 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=['split', 'video_id', 'frame', 'id', 'class_id'])
        writer.writeheader()
        writer.writerows(rows)
    if spec is not None:
        (root / 'synth_spec.json').write_text(json.dumps(spec.model_dump(mode='json'), indent=2, sort_keys=True))
    logger.info(f'Wrote {len(rows)} samples to {root}')


def _read_class_ids(root: Path) -> dict[str, int]:
    path = root / 'metadata.csv'
    if not path.exists():
        return {}
    with open(path, newline='') as f:
        return {row['id']: int(row['class_id']) for row in csv.DictReader(f) if row.get('class_id')}


def _resize(image: torch.Tensor, mask: Optional[np.ndarray], size: Optional[tuple[int, int]]):
    if size is None or tuple(image.shape[-2:]) == tuple(size):
        return image, mask
    image = torch.nn.functional.interpolate(image[None], size=tuple(size), mode='bilinear',
                                            align_corners=False)[0].clamp(0, 1)
    if mask is not None:
        mask = np.asarray(Image.fromarray(mask * 255).resize((size[1], size[0]), Image.Resampling.NEAREST)) > 127
        mask = mask.astype(np.uint8)
    return image, mask


def _load_video(video: Path, split: str, class_ids: dict[str, int], sample_rate: Optional[int],
                image_size: Optional[tuple[int, int]]) -> list[SamplePair]:
    frames = sorted((video / 'frames').glob('*.png'))
    if not frames:
        raise DataError(f'{video / "frames"}: no frame PNGs', path=str(video / 'frames'))
    audio_path = video / 'audio.wav'
    if not audio_path.exists():
        raise DataError(f'{audio_path}: missing audio', path=str(audio_path))
    waveform = read_wav(audio_path, sample_rate)
    # frame k pairs with the k-th of len(frames) equal audio segments
    chunks = np.array_split(waveform.samples, len(frames))

    samples = []
    for k, frame_path in enumerate(frames):
        image = load_rgb_png(frame_path)
        mask_path = video / 'masks' / frame_path.name
        mask = None
        if mask_path.exists():
            mask = load_binary_png(mask_path)
            if mask.shape != tuple(image.shape[-2:]):
                raise DataError(f'{mask_path}: mask {mask.shape} does not match frame {tuple(image.shape[-2:])}',
                                path=str(mask_path))
        elif split != 'train':
            raise DataError(f'{mask_path}: {split} frames need ground-truth masks', path=str(mask_path))
        image, mask = _resize(image, mask, image_size)
        frame = int(frame_path.stem) if frame_path.stem.isdigit() else k
        sample_id = f'{video.name}_{frame}'
        samples.append(SamplePair(
            video_id=video.name,
            frame=frame,
            image=image,
            waveform=waveform if len(frames) == 1 else Waveform(chunks[k], waveform.sample_rate),
            class_id=class_ids.get(sample_id),
            gt_mask=None if mask is None else torch.from_numpy(mask),
        ))
    return samples


def load_avsbench_layout(root: Path, sample_rate: Optional[int] = None, image_size: Optional[tuple[int, int]] = None,
                         workers: int = 1) -> DatasetSplits:
    root = Path(root)
    splits = DatasetSplits()
    if not root.is_dir():
        raise DataError(f'{root}: not a directory', path=str(root))
    if not any((root / name).is_dir() for name in (*SPLITS, 'mixture')):
        logger.warning(f'No split directories under {root}; returning empty splits')
        return splits

    class_ids = _read_class_ids(root)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for name in (*SPLITS, 'mixture'):
            split_dir = root / name
            if not split_dir.is_dir():
                continue
            videos = sorted(p for p in split_dir.iterdir() if p.is_dir())
            loaded = pool.map(lambda v: _load_video(v, name, class_ids, sample_rate, image_size), videos)
            splits[name].extend(sample for video in loaded for sample in video)
    logger.info(f'Loaded {len(splits.train)}/{len(splits.val)}/{len(splits.test)} samples from {root}')
    return splits


class AVDataset(Dataset):
    """Image, spectrogram and optional mask target per sample.

    Targets come from the caller (pseudo masks or ground truth); the dataset itself never reads `gt_mask`.
    """

    def __init__(self, samples: Sequence[SamplePair], audio: AudioConfig,
                 targets: Optional[dict[str, torch.Tensor]] = None):
        self.samples = list(samples)
        self.spectrograms = [compute_spectrogram(s.waveform, audio).values for s in self.samples]
        self.targets = targets
        if targets is not None:
            missing = [s.id for s in self.samples if s.id not in targets]
            if missing:
                raise DataError(f'{len(missing)} samples have no mask target, e.g. {missing[0]}', sample_id=missing[0])

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index: int) -> dict:
        sample = self.samples[index]
        item = {'id': sample.id, 'image': sample.image, 'spectrogram': self.spectrograms[index]}
        if self.targets is not None:
            item['target'] = self.targets[sample.id].float()
        return item
