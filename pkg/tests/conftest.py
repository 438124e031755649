import pytest
import torch

from avseg.conf import load_run_config
from avseg.data import generate_dataset

TINY = [
    'data.n_classes=2',
    'data.samples_per_class=6',
    'epochs=1',
    'batch_size=4',
    'pseudomask.epochs=1',
    'pseudomask.batch_size=4',
    'pseudomask.detector_epochs=1',
    'encoder.dim=8',
    'encoder.stem_width=4',
    'encoder.visual_widths=[4,4,4,4]',
    'encoder.audio_widths=[4,4]',
    'decoder.fpn_width=4',
]


@pytest.fixture
def tiny_cfg(tmp_path):
    return load_run_config(profile='toy', overrides=[*TINY, f'output_dir="{tmp_path / "run"}"'])


@pytest.fixture
def tiny_splits(tiny_cfg):
    return generate_dataset(tiny_cfg.data)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)
