import json

import pytest

from avseg.cli import main
from tests.conftest import TINY


@pytest.fixture
def tiny_args():
    return [arg for item in TINY for arg in ('--set', item)]


def test_gen_data_train_eval_plot(tmp_path, capsys, tiny_args):
    data = tmp_path / 'data'
    run = tmp_path / 'run'

    assert main(['gen-data', '--out', str(data), *tiny_args]) == 0
    counts = json.loads(capsys.readouterr().out)
    assert counts == {'train': 8, 'val': 2, 'test': 2, 'mixture': 0}
    assert (data / 'metadata.csv').exists()

    assert main(['train', '--data', str(data), '--run', str(run), *tiny_args]) == 0
    assert (run / 'checkpoint.pt').exists()
    capsys.readouterr()

    assert main(['eval', '--data', str(data), '--run', str(run), '--save-masks']) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['n_pairs'] == 2
    assert (run / 'metrics.json').exists()
    assert any((run / 'masks' / 'binary').iterdir())

    assert main(['plot', '--run', str(run)]) == 0
    assert (run / 'losses.png').exists()


def test_pseudomask_command(tmp_path, capsys, tiny_args):
    assert main(['pseudomask', '--out', str(tmp_path), *tiny_args]) == 0
    assert json.loads(capsys.readouterr().out)['masks'] == 8
    assert (tmp_path / 'manifest.jsonl').exists()


def test_config_file_and_overrides(tmp_path, capsys, tiny_args):
    config = tmp_path / 'config.json'
    config.write_text(json.dumps({'data': {'samples_per_class': 10}}))
    assert main(['gen-data', '--out', str(tmp_path / 'd'), '--config', str(config), *tiny_args[:2]]) == 0
    assert sum(json.loads(capsys.readouterr().out).values()) == 20


def test_errors_are_json_with_exit_codes(tmp_path, capsys, tiny_args):
    assert main(['train', '--run', str(tmp_path), '--set', 'epochs=0']) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['code'] == 'config_error'

    assert main(['train', '--set', 'epochs']) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['code'] == 'config_error'

    assert main(['plot', '--run', str(tmp_path / 'missing')]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['code'] == 'data_error'

    assert main(['eval', '--run', str(tmp_path / 'none'), *tiny_args]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['code'] == 'checkpoint_error'


def test_unexpected_errors_exit_1(monkeypatch, capsys):
    import avseg.cli

    def boom(args):
        raise RuntimeError('boom')

    monkeypatch.setattr(avseg.cli, 'run', boom)
    assert main(['plot', '--run', 'x']) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1]) == {'code': 'internal_error', 'message': 'boom'}


def test_output_root_from_environment(tmp_path, monkeypatch, tiny_args):
    from avseg import conf

    monkeypatch.setattr(conf.settings, 'output_root', tmp_path)
    assert main(['train', *tiny_args, '--set', 'mode="pmr_only"', '--set', 'seed=3']) == 0
    assert (tmp_path / 'pmr_only-s3' / 'checkpoint.pt').exists()


@pytest.mark.parametrize('argv, fragment', [
    (['sweep', '--axis', 'depth'], 'invalid choice'),
    (['sweep', '--axis', 'mode', '--values', '[1,'], '--values'),
    (['bogus'], 'invalid choice'),
    (['plot'], 'required'),
    (['train', '--profile', 'huge'], 'invalid choice'),
])
def test_usage_errors_are_json(capsys, argv, fragment):
    assert main(argv) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['code'] == 'config_error'
    assert fragment in error['message']


def test_eval_pseudo_masks(tmp_path, capsys, tiny_args):
    masks = tmp_path / 'masks'
    assert main(['pseudomask', '--out', str(masks), *tiny_args]) == 0
    capsys.readouterr()

    assert main(['eval', '--source', 'pseudomask', '--pseudo-masks', str(masks), '--save-masks', *tiny_args]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['n_pairs'] == 8
    assert 0 <= report['miou'] <= 1
    assert (masks / 'eval' / 'metrics.json').exists()
    assert len(list((masks / 'eval' / 'masks' / 'overlay').glob('*.png'))) == 8

    assert main(['eval', '--source', 'pseudomask', '--split', 'test', '--pseudo-masks', str(masks), *tiny_args]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['code'] == 'data_error'

    assert main(['eval', '--source', 'pseudomask', *tiny_args]) == 2
    assert 'needs --pseudo-masks' in json.loads(capsys.readouterr().err.strip().splitlines()[-1])['message']
