import hashlib
import io
import json
import random
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch
from PIL import Image

from .conf import settings
from .errors import ConfigError, DataError


def sanitize_id(sample_id: str) -> str:
    return sample_id.replace(' ', '_').replace('/', '-').replace('\\', '-')


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def get_device() -> torch.device:
    """The torch device named by `AVSEG_DEVICE`."""
    try:
        device = torch.device(settings.device)
    except RuntimeError as e:
        raise ConfigError(f'invalid device {settings.device!r}: {e}', key='device') from e
    if device.type == 'cuda' and not torch.cuda.is_available():
        raise ConfigError(f'device {settings.device!r} requested but CUDA is not available', key='device')
    return device


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def append_jsonl(path: Path, record: dict):
    with open(path, 'a') as f:
        f.write(json.dumps(record, sort_keys=True) + '\n')


def write_jsonl(path: Path, records: Iterable[dict]):
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + '\n')


def read_jsonl(path: Path) -> Iterator[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f'missing log {path}')
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f'{path}:{lineno}: corrupted line: {e.msg}', path=str(path), line=lineno) from e


def _binary_image(mask: np.ndarray) -> Image.Image:
    return Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).convert('1')


def save_binary_png(mask: np.ndarray, path: Path):
    """1-bit PNG; reads back as 0/255."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _binary_image(mask).save(path)


def binary_png_bytes(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    _binary_image(mask).save(buf, format='PNG')
    return buf.getvalue()


def save_gray_png(values: np.ndarray, path: Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_binary_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert('L')) > 127).astype(np.uint8)


def load_gray_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert('L'), dtype=np.float32) / 255.0


def _rgb_image(image: torch.Tensor) -> Image.Image:
    arr = np.rint(image.detach().cpu().numpy().transpose(1, 2, 0) * 255).clip(0, 255).astype(np.uint8)
    return Image.fromarray(arr)


def save_rgb_png(image: torch.Tensor, path: Path):
    """`image` is 3xHxW in [0, 1]."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _rgb_image(image).save(path)


def load_rgb_png(path: Path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert('RGB'), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def save_overlay_png(image: torch.Tensor, mask: np.ndarray, path: Path, color: tuple[int, int, int] = (255, 0, 0),
                     alpha: float = 0.5):
    """Frame with mask pixels blended toward `color`; unmasked pixels keep the frame's values."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    base = _rgb_image(image)
    tinted = Image.blend(base, Image.new('RGB', base.size, color), alpha)
    Image.composite(tinted, base, _binary_image(mask).convert('L')).save(path)
