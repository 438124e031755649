import shutil

import numpy as np
import pytest
import torch

from avseg.audio import compute_spectrogram
from avseg.conf import AudioConfig, SynthSpec
from avseg.data import AVDataset, generate_dataset, load_avsbench_layout, write_layout
from avseg.errors import ConfigError, DataError
from avseg.util import save_binary_png, sha256_file

TOY_AUDIO = AudioConfig(sample_rate=8000, duration_s=1.6, n_fft=126, time_steps=64)


def test_split_sizes():
    splits = generate_dataset(SynthSpec(n_classes=4, samples_per_class=50))
    assert (len(splits.train), len(splits.val), len(splits.test)) == (140, 30, 30)
    ids = [s.id for _, samples in splits.items() for s in samples]
    assert len(ids) == len(set(ids))


def test_generation_is_deterministic():
    spec = SynthSpec(n_classes=3, samples_per_class=4, seed=7)
    a, b = generate_dataset(spec), generate_dataset(spec)
    for (_, left), (_, right) in zip(a.items(), b.items()):
        assert [s.id for s in left] == [s.id for s in right]
        for x, y in zip(left, right):
            assert torch.equal(x.image, y.image)
            assert torch.equal(x.gt_mask, y.gt_mask)
            np.testing.assert_array_equal(x.waveform.samples, y.waveform.samples)
    other = generate_dataset(spec.model_copy(update={'seed': 8}))
    assert not torch.equal(a.train[0].image, other.train[0].image)


def test_samples_are_well_formed():
    spec = SynthSpec(n_classes=8, samples_per_class=5, distractors=True)
    splits = generate_dataset(spec)
    for _, samples in splits.items():
        for s in samples:
            assert s.image.shape == (3, 64, 64)
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert 0 <= s.class_id < 8
            fraction = float(s.gt_mask.float().mean())
            assert 0 < fraction < 0.5
            assert s.waveform.samples.dtype == np.float32


def test_noise_free_tone_peaks_at_class_bin():
    spec = SynthSpec(n_classes=4, samples_per_class=2, noise_level=0.0)
    bins = {0: 5, 1: 8, 2: 11, 3: 14}
    for s in generate_dataset(spec).train:
        spectrum = compute_spectrogram(s.waveform, TOY_AUDIO).values.mean(dim=1)
        assert int(spectrum.argmax()) == bins[s.class_id]


def test_mixture_split():
    splits = generate_dataset(SynthSpec(n_classes=3, samples_per_class=2, n_mixture_samples=4))
    assert len(splits.mixture) == 4
    assert all(s.id.startswith('mix_') for s in splits.mixture)
    train_ids = {s.id for s in splits.train}
    assert train_ids.isdisjoint(s.id for s in splits.mixture)


def test_image_too_small():
    with pytest.raises(ConfigError):
        generate_dataset(SynthSpec(image_size=8))


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(split=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        SynthSpec(n_classes=9)


def test_layout_round_trip(tmp_path):
    spec = SynthSpec(n_classes=2, samples_per_class=5, n_mixture_samples=2)
    splits = generate_dataset(spec)
    write_layout(splits, tmp_path / 'a', spec)
    assert (tmp_path / 'a' / 'synth_spec.json').exists()

    loaded = load_avsbench_layout(tmp_path / 'a', workers=2)
    for (name, original), (_, back) in zip(splits.items(), loaded.items()):
        assert sorted(s.id for s in original) == [s.id for s in back], name
        by_id = {s.id: s for s in original}
        for s in back:
            o = by_id[s.id]
            assert torch.equal(s.image, o.image)
            assert torch.equal(s.gt_mask.to(torch.uint8), o.gt_mask)
            np.testing.assert_array_equal(s.waveform.samples, o.waveform.samples)
            assert s.class_id == o.class_id

    write_layout(loaded, tmp_path / 'b')
    for path in (tmp_path / 'a').rglob('*.png'):
        assert sha256_file(path) == sha256_file(tmp_path / 'b' / path.relative_to(tmp_path / 'a'))


def test_layout_errors(tmp_path, caplog):
    assert len(load_avsbench_layout(tmp_path)) == 0
    assert 'No split directories' in caplog.text

    splits = generate_dataset(SynthSpec(n_classes=2, samples_per_class=5))
    write_layout(splits, tmp_path / 'data')
    train_video = tmp_path / 'data' / 'train' / splits.train[0].video_id
    shutil.rmtree(train_video / 'masks')
    loaded = load_avsbench_layout(tmp_path / 'data')
    assert not next(s for s in loaded.train if s.video_id == splits.train[0].video_id).has_gt_mask

    test_video = tmp_path / 'data' / 'test' / splits.test[0].video_id
    save_binary_png(np.zeros((32, 32)), test_video / 'masks' / '0000.png')
    with pytest.raises(DataError, match='does not match frame'):
        load_avsbench_layout(tmp_path / 'data')

    shutil.rmtree(test_video / 'masks')
    with pytest.raises(DataError, match='need ground-truth masks'):
        load_avsbench_layout(tmp_path / 'data')

    (test_video / 'audio.wav').unlink()
    with pytest.raises(DataError, match='missing audio'):
        load_avsbench_layout(tmp_path / 'data')


def test_dataset_items(tiny_cfg, tiny_splits):
    samples = tiny_splits.train[:2]
    plain = AVDataset(samples, tiny_cfg.audio)
    item = plain[0]
    assert set(item) == {'id', 'image', 'spectrogram'}
    assert item['spectrogram'].shape == (64, 64)

    targets = {s.id: torch.ones(64, 64, dtype=torch.uint8) for s in samples}
    assert AVDataset(samples, tiny_cfg.audio, targets)[1]['target'].dtype == torch.float32
    with pytest.raises(DataError, match='no mask target'):
        AVDataset(samples, tiny_cfg.audio, {})
