"""Waveform to log-magnitude spectrogram.

Spectrograms are stored frequency-major (F x T). A frame spans ``n_fft``
samples with a Hann window of ``window_length`` samples centred in it; no
centre padding is applied, so a clip of N samples yields
``1 + (N - n_fft) // hop_length`` frames before the time axis is fitted to
``time_steps``.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
import soundfile as sf
import torch
import torch.nn.functional as F

from .conf import AudioConfig
from .errors import AudioError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 22050

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1 or samples.size < 1 or not np.all(np.isfinite(samples)):
            raise AudioError('invalid waveform')
        if self.sample_rate <= 0:
            raise AudioError('invalid waveform', sample_rate=self.sample_rate)
        object.__setattr__(self, 'samples', samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f'spectrogram must be F x T, got shape {tuple(self.values.shape)}')
        if not torch.isfinite(self.values).all():
            raise AudioError('spectrogram has non-finite entries')

    @property
    def freq_bins(self) -> int:
        return self.values.shape[0]

    @property
    def time_steps(self) -> int:
        return self.values.shape[1]


def resample(w: Waveform, sample_rate: int) -> Waveform:
    if w.sample_rate == sample_rate:
        return w
    n_out = max(1, round(w.samples.size * sample_rate / w.sample_rate))
    t_in = np.arange(w.samples.size) / w.sample_rate
    t_out = np.arange(n_out) / sample_rate
    return Waveform(np.interp(t_out, t_in, w.samples).astype(np.float32), sample_rate)


def compute_spectrogram(w: Waveform, cfg: AudioConfig) -> Spectrogram:
    w = resample(w, cfg.sample_rate)
    if w.samples.size < cfg.n_fft:
        raise AudioError('audio too short', samples=int(w.samples.size), frame=cfg.n_fft)

    x = torch.from_numpy(w.samples.astype(np.float64))
    stft = torch.stft(
        x,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop_length,
        win_length=cfg.window_length,
        window=torch.hann_window(cfg.window_length, dtype=torch.float64),
        center=False,
        return_complex=True,
    )
    values = torch.log1p(stft.abs()).to(torch.float32)
    return pad_or_crop(Spectrogram(values), cfg.time_steps)


def pad_or_crop(s: Spectrogram, target_t: int) -> Spectrogram:
    """Centred crop, or edge-repeat padding split evenly with the extra column on the right."""
    if target_t < 1:
        raise ShapeError(f'target time steps must be >= 1, got {target_t}')
    t = s.time_steps
    if t == target_t:
        return s
    if t > target_t:
        start = (t - target_t) // 2
        return Spectrogram(s.values[:, start:start + target_t].clone())
    left = (target_t - t) // 2
    padded = F.pad(s.values[None], (left, target_t - t - left), mode='replicate')
    return Spectrogram(padded[0])


def read_wav(path: Path | BinaryIO, sample_rate: int | None = None) -> Waveform:
    """Mono mixdown of a PCM16 or float WAV, linearly resampled to `sample_rate` when given."""
    try:
        data, rate = sf.read(path if hasattr(path, 'read') else str(path), dtype='float32', always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as e:
        raise AudioError(f'cannot read {path}: {e}', path=str(path)) from e
    w = Waveform(data.mean(axis=1), rate)
    if sample_rate is not None and sample_rate != rate:
        logger.debug(f'Resample {path} from {rate} Hz to {sample_rate} Hz')
        w = resample(w, sample_rate)
    return w


def write_wav(w: Waveform, path: Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), w.samples, w.sample_rate, subtype='FLOAT')
