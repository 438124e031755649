import csv
import json

import pytest
import torch

from avseg import data as data_module
from avseg import pipeline
from avseg.conf import apply_overrides, load_run_config
from avseg.data import DatasetSplits, generate_dataset
from avseg.errors import ConfigError, DataError, TrainingError
from avseg.metrics import f_score, iou
from avseg.pipeline import evaluate, evaluate_predictor, prediction_source, sweep, train
from avseg.plot import plot_losses
from avseg.pseudomask import load_pseudo_masks
from avseg.util import read_jsonl, sha256_file


def first_epoch_loss(run_dir):
    return next(r for r in read_jsonl(run_dir / 'epochs.jsonl') if r['epoch'] == 1)['total']


def test_epochs_must_be_positive():
    with pytest.raises(ConfigError):
        load_run_config(profile='toy', overrides=['epochs=0'])
    with pytest.raises(ConfigError):
        load_run_config(profile='toy', overrides=['batch_size=1'])
    load_run_config(profile='toy', overrides=['batch_size=1', 'mode=pmr_only'])


def test_train_writes_run_artifacts(tiny_cfg, tiny_splits):
    result = train(tiny_cfg, tiny_splits)
    run_dir = tiny_cfg.output_dir
    assert result.checkpoint == run_dir / 'checkpoint.pt'
    for name in ('config.json', 'losses.jsonl', 'epochs.jsonl', 'pseudomask/manifest.jsonl'):
        assert (run_dir / name).exists(), name
    steps = list(read_jsonl(run_dir / 'losses.jsonl'))
    assert len(steps) == 2
    assert all(r['l_avf'] > 0 and r['l_pmr'] > 0 for r in steps)
    assert {'miou', 'fscore'} <= set(result.epochs[-1])


def test_same_seed_same_loss(tmp_path, tiny_cfg, tiny_splits):
    runs = []
    for name in ('a', 'b'):
        cfg = apply_overrides(tiny_cfg, {'output_dir': str(tmp_path / name)})
        train(cfg, tiny_splits)
        runs.append(first_epoch_loss(tmp_path / name))
    assert abs(runs[0] - runs[1]) < 1e-6


def test_resume_matches_uninterrupted(tmp_path, tiny_cfg, tiny_splits):
    two = apply_overrides(tiny_cfg, {'epochs': 2, 'output_dir': str(tmp_path / 'full')})
    train(two, tiny_splits)

    split_dir = tmp_path / 'split'
    train(apply_overrides(two, {'epochs': 1, 'output_dir': str(split_dir)}), tiny_splits)
    train(apply_overrides(two, {'output_dir': str(split_dir)}), tiny_splits, resume=True)

    full = list(read_jsonl(tmp_path / 'full' / 'epochs.jsonl'))
    resumed = list(read_jsonl(split_dir / 'epochs.jsonl'))
    assert [r['epoch'] for r in resumed] == [1, 2]
    assert abs(full[-1]['total'] - resumed[-1]['total']) < 1e-5


def test_weak_mode_never_reads_train_masks(monkeypatch, tiny_cfg, tiny_splits):
    train_ids = {s.id for s in tiny_splits.train}
    reads = []
    original = data_module.SamplePair.gt_mask

    def counting(self):
        if self.id in train_ids:
            reads.append(self.id)
        return original.fget(self)

    monkeypatch.setattr(data_module.SamplePair, 'gt_mask', property(counting))
    train(tiny_cfg, tiny_splits)
    assert reads == []

    supervised = apply_overrides(tiny_cfg, {'mode': 'supervised'})
    train(supervised, tiny_splits)
    assert set(reads) == train_ids


def test_weak_mode_trains_without_any_train_masks(tiny_cfg, tiny_splits):
    stripped = DatasetSplits(
        train=[data_module.SamplePair(s.video_id, s.frame, s.image, s.waveform, s.class_id) for s in tiny_splits.train],
        val=tiny_splits.val,
    )
    train(tiny_cfg, stripped)
    with pytest.raises(DataError):
        train(apply_overrides(tiny_cfg, {'mode': 'supervised'}), stripped)


@pytest.mark.parametrize('mode', ['avf_only', 'pmr_only'])
def test_ablation_modes_disable_terms(tiny_cfg, tiny_splits, mode):
    cfg = apply_overrides(tiny_cfg, {'mode': mode})
    train(cfg, tiny_splits)
    steps = list(read_jsonl(cfg.output_dir / 'losses.jsonl'))
    if mode == 'avf_only':
        assert all(r['l_pmr'] == 0 and r['l_avf'] > 0 for r in steps)
    else:
        assert all(r['l_avf'] == 0 and r['l_pmr'] > 0 for r in steps)


def test_baseline_skips_optimization(tiny_cfg, tiny_splits):
    cfg = apply_overrides(tiny_cfg, {'mode': 'baseline'})
    result = train(cfg, tiny_splits)
    assert result.epochs == []
    assert not (cfg.output_dir / 'losses.jsonl').exists()
    report = evaluate(result.checkpoint, tiny_splits.test, cfg)
    assert 0 <= report.miou <= 1


def test_prediction_source():
    cfg = load_run_config(profile='toy')
    assert prediction_source(cfg) == 'decoder'
    assert prediction_source(cfg, heatmap=True) == 'heatmap'
    assert prediction_source(apply_overrides(cfg, {'mode': 'avf_only'})) == 'heatmap'


def test_oracle_and_constant_predictors(tmp_path, tiny_cfg, tiny_splits):
    samples = tiny_splits.test
    oracle = evaluate_predictor(lambda ss: torch.stack([s.gt_mask.float() for s in ss]), samples, tiny_cfg)
    assert oracle.miou == 1.0 and oracle.fscore == 1.0

    constant = evaluate_predictor(lambda ss: torch.full((len(ss), 64, 64), 0.5), samples, tiny_cfg,
                                  out_dir=tmp_path, save_masks=True)
    ones = torch.ones(64, 64)
    assert constant.miou == pytest.approx(sum(iou(ones, s.gt_mask) for s in samples) / len(samples), abs=1e-12)
    assert constant.fscore == pytest.approx(sum(f_score(ones, s.gt_mask) for s in samples) / len(samples), abs=1e-12)
    assert json.loads((tmp_path / 'metrics.json').read_text())['n_pairs'] == len(samples)
    assert len(list((tmp_path / 'masks' / 'binary').glob('*.png'))) == len(samples)


def test_evaluate_errors(tiny_cfg, tiny_splits):
    predict = lambda ss: torch.zeros(len(ss), 64, 64)
    with pytest.raises(DataError, match='empty split'):
        evaluate_predictor(predict, [], tiny_cfg)
    s = tiny_splits.test[0]
    unlabeled = data_module.SamplePair(s.video_id, s.frame, s.image, s.waveform)
    with pytest.raises(DataError, match='lack ground-truth'):
        evaluate_predictor(predict, [unlabeled], tiny_cfg)


def test_nan_loss_aborts_with_dump(monkeypatch, tiny_cfg, tiny_splits):
    real = pipeline.loss_total

    def poisoned(*args, **kwargs):
        report = real(*args, **kwargs)
        report.total = report.total * float('nan')
        return report

    monkeypatch.setattr(pipeline, 'loss_total', poisoned)
    with pytest.raises(TrainingError) as info:
        train(tiny_cfg, tiny_splits)
    dump = json.loads((tiny_cfg.output_dir / 'nan_dump.json').read_text())
    assert dump['batch_ids'] == info.value.batch_ids
    assert set(dump['batch_ids']) <= {s.id for s in tiny_splits.train}


def test_plot_losses(tmp_path, tiny_cfg, tiny_splits):
    train(tiny_cfg, tiny_splits)
    run_dir = tiny_cfg.output_dir
    paths = plot_losses(run_dir)
    assert all(p.exists() and p.stat().st_size > 0 for p in paths)
    digest = sha256_file(run_dir / 'loss_curve.csv')
    plot_losses(run_dir)
    assert sha256_file(run_dir / 'loss_curve.csv') == digest
    with open(run_dir / 'loss_curve.csv') as f:
        assert len(list(csv.DictReader(f))) == 1

    with open(run_dir / 'losses.jsonl', 'a') as f:
        f.write('{broken\n')
    with pytest.raises(DataError, match=':3:'):
        plot_losses(run_dir)
    with pytest.raises(DataError, match='missing log'):
        plot_losses(tmp_path / 'nowhere')


def test_sweep_rows_and_plots(tmp_path, tiny_cfg, tiny_splits):
    rows = sweep(tiny_cfg, tiny_splits, 'fusion_stages', values=[1, 2, 5], out_dir=tmp_path)
    assert [r['status'] for r in rows] == ['ok', 'ok', 'skipped']
    with open(tmp_path / 'sweep.csv') as f:
        assert len(list(csv.DictReader(f))) == 3
    for term in ('miou', 'fscore'):
        assert (tmp_path / f'sweep_{term}.png').stat().st_size > 0
    # both runs share one pseudo-mask directory because the class-agnostic model does not depend on fusion stages
    assert len(list(tmp_path.glob('pseudomask-*'))) == 1
    with pytest.raises(ConfigError):
        sweep(tiny_cfg, tiny_splits, 'depth')


@pytest.mark.slow
def test_toy_learnability(tmp_path):
    cfg = load_run_config(profile='toy', overrides=[f'output_dir="{tmp_path}"'])
    splits = generate_dataset(cfg.data)
    untrained = train(apply_overrides(cfg, {'mode': 'baseline', 'output_dir': str(tmp_path / 'chance')}), splits)
    chance = evaluate(untrained.checkpoint, splits.test, apply_overrides(cfg, {'mode': 'baseline'}))
    result = train(cfg, splits)
    report = evaluate(result.checkpoint, splits.test, cfg)
    assert report.miou >= 0.5
    assert report.miou > chance.miou


@pytest.mark.slow
def test_ablation_trend(tmp_path):
    cfg = load_run_config(profile='toy')
    splits = generate_dataset(cfg.data)
    rows = {r['value']: r['miou'] for r in sweep(cfg, splits, 'mode', seeds=[0, 1, 2], out_dir=tmp_path)}
    assert rows['weak'] >= rows['pmr_only'] >= rows['baseline']
    assert rows['weak'] >= rows['avf_only'] >= rows['baseline']


@pytest.mark.slow
def test_fusion_stage_trend(tmp_path):
    cfg = load_run_config(profile='toy')
    splits = generate_dataset(cfg.data)
    rows = {r['value']: r['miou'] for r in sweep(cfg, splits, 'fusion_stages', values=[1, 4], seeds=[0, 1, 2],
                                                 out_dir=tmp_path)}
    assert rows[4] >= rows[1]


def test_pseudo_masks_regenerate_when_their_inputs_change(monkeypatch, tiny_cfg, tiny_splits):
    calls = []
    real = pipeline.generate_pseudo_masks

    def counting(*args, **kwargs):
        calls.append(args[0].pseudomask.invert_saliency_label)
        return real(*args, **kwargs)

    monkeypatch.setattr(pipeline, 'generate_pseudo_masks', counting)
    manifest = tiny_cfg.output_dir / 'pseudomask' / 'manifest.jsonl'

    train(tiny_cfg, tiny_splits)
    before = [r['fg_pixel_fraction'] for r in read_jsonl(manifest)]
    train(tiny_cfg, tiny_splits)
    assert calls == [False]

    train(apply_overrides(tiny_cfg, {'pseudomask.invert_saliency_label': True}), tiny_splits)
    assert calls == [False, True]
    after = [r['fg_pixel_fraction'] for r in read_jsonl(manifest)]
    assert after == pytest.approx([1 - f for f in before], abs=1e-6)

    other = generate_dataset(tiny_cfg.data.model_copy(update={'seed': tiny_cfg.data.seed + 1}))
    train(tiny_cfg, DatasetSplits(train=other.train, val=tiny_splits.val))
    assert len(calls) == 3


def test_explicit_pseudo_mask_dir_is_kept(tmp_path, tiny_cfg, tiny_splits):
    masks = tmp_path / 'external'
    pipeline.generate_pseudo_masks(tiny_cfg, tiny_splits.train, masks)
    (masks / 'digest.json').unlink()
    digest = sha256_file(masks / 'manifest.jsonl')
    train(tiny_cfg, tiny_splits, pseudo_dir=masks, keep_pseudo_masks=True)
    assert sha256_file(masks / 'manifest.jsonl') == digest
    assert not (masks / 'digest.json').exists()


def test_evaluate_pseudo_masks_against_ground_truth(tmp_path, tiny_cfg, tiny_splits):
    masks = tmp_path / 'masks'
    manifest = pipeline.generate_pseudo_masks(tiny_cfg, tiny_splits.train, masks)
    report = pipeline.evaluate_pseudo_masks(masks, tiny_splits.train, tiny_cfg, tmp_path / 'eval')
    stored = load_pseudo_masks(masks)
    expected = sum(iou(stored[s.id], s.gt_mask) for s in tiny_splits.train) / len(manifest)
    assert report.miou == pytest.approx(expected, abs=1e-12)
    assert (tmp_path / 'eval' / 'metrics.json').exists()
    with pytest.raises(DataError, match='no pseudo mask'):
        pipeline.evaluate_pseudo_masks(masks, tiny_splits.test, tiny_cfg)
