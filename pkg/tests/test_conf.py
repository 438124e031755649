import json

import pytest
import torch

from avseg.conf import (PROFILES, RunConfig, Settings, apply_overrides, load_run_config, model_config_hash,
                        parse_override)
from avseg.errors import AVSegError, ConfigError, TrainingError


def test_defaults_are_full_scale():
    cfg = RunConfig()
    assert (cfg.optimizer.lr, cfg.optimizer.beta1, cfg.optimizer.beta2) == (1e-4, 0.9, 0.999)
    assert (cfg.batch_size, cfg.epochs, cfg.encoder.stages) == (64, 20, 4)
    assert cfg.loss.temperature == 0.07
    assert (cfg.metrics.beta_sq, cfg.metrics.threshold) == (0.3, 0.5)
    assert cfg.audio.freq_bins == 257


def test_profiles_validate():
    for name in PROFILES:
        load_run_config(profile=name)
    toy = load_run_config(profile='toy')
    assert toy.encoder.image_size == (64, 64)
    assert (toy.audio.freq_bins, toy.audio.time_steps) == (64, 64)
    with pytest.raises(ConfigError, match='unknown profile'):
        load_run_config(profile='huge')


def test_overrides():
    assert parse_override('a.b=3') == ('a.b', 3)
    assert parse_override('mode=weak') == ('mode', 'weak')
    assert parse_override('x=[1,2]') == ('x', [1, 2])
    with pytest.raises(ConfigError):
        parse_override('novalue')

    cfg = load_run_config(profile='toy', overrides=['encoder.stages=2', 'loss.temperature=0.1'])
    assert cfg.encoder.stages == 2 and cfg.loss.temperature == 0.1
    with pytest.raises(ConfigError):
        load_run_config(profile='toy', overrides=['mode.x=1'])
    with pytest.raises(ConfigError):
        load_run_config(profile='toy', overrides=['mode=unsupervised'])


def test_config_file(tmp_path):
    path = tmp_path / 'c.json'
    path.write_text(json.dumps({'seed': 5, 'encoder': {'dim': 16}}))
    cfg = load_run_config(path, profile='toy')
    assert cfg.seed == 5 and cfg.encoder.dim == 16 and cfg.encoder.backbone == 'toy'
    path.write_text('{')
    with pytest.raises(ConfigError, match='cannot read config file'):
        load_run_config(path)


def test_sub_config_invariants():
    for override in ('pseudomask.batch_size=1', 'metrics.threshold=1.0', 'optimizer.lr=0',
                     'pseudomask.saliency_provider="file"', 'audio.hop_ms=0'):
        with pytest.raises(ConfigError):
            load_run_config(profile='toy', overrides=[override])


def test_model_hash_tracks_shape_not_schedule():
    cfg = load_run_config(profile='toy')
    assert model_config_hash(cfg) == model_config_hash(apply_overrides(cfg, {'epochs': 3, 'seed': 4}))
    assert model_config_hash(cfg) != model_config_hash(apply_overrides(cfg, {'encoder.dim': 16}))


def test_settings_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv('AVSEG_OUTPUT_ROOT', str(tmp_path))
    monkeypatch.setenv('AVSEG_LOG_LEVEL', 'DEBUG')
    settings = Settings()
    assert settings.output_root == tmp_path
    assert settings.log_level == 'DEBUG'


def test_error_json():
    e = ConfigError('bad', key='x')
    assert e.to_json() == {'code': 'config_error', 'message': 'bad', 'key': 'x'}
    t = TrainingError('nan', batch_ids=['a'])
    assert isinstance(t, AVSegError)
    assert t.to_json()['batch_ids'] == ['a']


def test_device_setting(monkeypatch):
    from avseg import conf
    from avseg.util import get_device

    monkeypatch.setattr(conf.settings, 'device', 'cpu')
    assert get_device() == torch.device('cpu')
    monkeypatch.setattr(conf.settings, 'device', 'toaster')
    with pytest.raises(ConfigError, match='invalid device'):
        get_device()
    if not torch.cuda.is_available():
        monkeypatch.setattr(conf.settings, 'device', 'cuda')
        with pytest.raises(ConfigError, match='CUDA is not available'):
            get_device()


def test_training_reads_the_device_setting(monkeypatch, tiny_cfg, tiny_splits):
    from avseg import conf
    from avseg.pipeline import train

    monkeypatch.setattr(conf.settings, 'device', 'toaster')
    with pytest.raises(ConfigError, match='invalid device'):
        train(tiny_cfg, tiny_splits)


def test_data_and_encoder_image_sizes_agree():
    assert RunConfig().data.image_size == 224
    with pytest.raises(ConfigError, match='does not match encoder.image_size'):
        load_run_config(profile='toy', overrides=['data.image_size=32'])
    with pytest.raises(ConfigError, match='does not match encoder.image_size'):
        load_run_config(profile='toy', overrides=['encoder.image_size=[96,96]'])
    cfg = load_run_config(profile='toy', overrides=['data.image_size=96', 'encoder.image_size=[96,96]'])
    assert cfg.encoder.image_size == (96, 96)
