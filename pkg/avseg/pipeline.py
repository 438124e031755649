"""Training, evaluation and sweeps over synthetic or on-disk splits.

Run directory contents:

    config.json       resolved RunConfig
    checkpoint.pt     model + optimizer state after the last finished epoch
    losses.jsonl      one LossReport record per optimizer step
    epochs.jsonl      per-epoch loss means and validation metrics
    pseudomask/       pseudo masks (weak and pmr_only modes), tagged by digest.json
    metrics.json      written by evaluate
"""
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
from torch.utils.data import DataLoader

from .audio import compute_spectrogram
from .conf import RunConfig, apply_overrides, model_config_hash
from .data import AVDataset, DatasetSplits, SamplePair
from .encoders import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, TrainingError
from .losses import loss_total
from .metrics import MetricsReport, evaluate_pairs
from .model import AVSegModel, build_model, load_model
from .plot import loss_curve, plot_sweep, write_csv
from .pseudomask import generate_pseudo_masks, load_pseudo_masks, pseudo_mask_digest, stored_pseudo_mask_digest
from .segmentation import binarize, export_masks, export_overlays
from .util import append_jsonl, get_device, read_jsonl, seed_everything, write_jsonl

logger = logging.getLogger(__name__)

SWEEP_AXES = {
    'fusion_stages': ('encoder.stages', [1, 2, 3, 4]),
    'batch_size': ('batch_size', [8, 16, 32, 64, 128]),
    'mode': ('mode', ['baseline', 'avf_only', 'pmr_only', 'weak']),
}

Predictor = Callable[[Sequence[SamplePair]], torch.Tensor]


@dataclass
class TrainResult:
    checkpoint: Path
    epochs: list[dict] = field(default_factory=list)


def build_optimizer(cfg: RunConfig, model: AVSegModel) -> torch.optim.Optimizer:
    opt = cfg.optimizer
    cls = torch.optim.AdamW if opt.kind == 'adamw' else torch.optim.Adam
    return cls(model.parameters(), lr=opt.lr, betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay)


def mask_targets(cfg: RunConfig, samples: Sequence[SamplePair], pseudo_dir: Optional[Path]
                 ) -> Optional[dict[str, torch.Tensor]]:
    """Pseudo masks in weak and pmr_only modes, ground truth in supervised mode, nothing otherwise."""
    if cfg.uses_pseudo_masks:
        return load_pseudo_masks(pseudo_dir)
    if cfg.mode == 'supervised':
        return {s.id: s.gt_mask for s in samples}
    return None


def ensure_pseudo_masks(cfg: RunConfig, samples: Sequence[SamplePair], pseudo_dir: Path, keep_existing: bool = False
                        ) -> Path:
    """Reuse the masks in `pseudo_dir` only when they were made from this config and these training images.

    With `keep_existing` any exported manifest is used as is; a mismatch is only logged.
    """
    pseudo_dir = Path(pseudo_dir)
    stored = stored_pseudo_mask_digest(pseudo_dir)
    if keep_existing and (pseudo_dir / 'manifest.jsonl').exists():
        if stored != pseudo_mask_digest(cfg, samples):
            logger.warning(f'Pseudo masks in {pseudo_dir} were not made from this config; using them anyway')
        return pseudo_dir
    if stored != pseudo_mask_digest(cfg, samples):
        reason = 'none found' if stored is None else 'config or training images changed'
        logger.info(f'Generate pseudo masks in {pseudo_dir} ({reason})')
        generate_pseudo_masks(cfg, samples, pseudo_dir)
    return pseudo_dir


def _restore_logs(run_dir: Path, epoch: int):
    for name in ('losses.jsonl', 'epochs.jsonl'):
        path = run_dir / name
        kept = [r for r in read_jsonl(path) if r['epoch'] <= epoch] if path.exists() else []
        write_jsonl(path, kept)


def _dump_nan(run_dir: Path, epoch: int, step: int, ids: Sequence[str], record: dict):
    dump = {'epoch': epoch, 'step': step, 'batch_ids': list(ids), 'losses': record}
    (run_dir / 'nan_dump.json').write_text(json.dumps(dump, indent=2, default=str))


def train(cfg: RunConfig, splits: DatasetSplits, run_dir: Optional[Path] = None, resume: bool = False,
          pseudo_dir: Optional[Path] = None, keep_pseudo_masks: bool = False) -> TrainResult:
    run_dir = Path(run_dir or cfg.run_dir())
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / 'config.json').write_text(cfg.model_dump_json(indent=2))
    if not splits.train:
        raise DataError('the train split is empty')

    seed_everything(cfg.seed)
    device = get_device()
    model = build_model(cfg).to(device)
    optimizer = build_optimizer(cfg, model)
    ckpt = run_dir / 'checkpoint.pt'
    digest = model_config_hash(cfg)

    if cfg.mode == 'baseline':
        logger.info('Baseline mode: no optimization, saving the initial model')
        save_checkpoint(ckpt, digest, {'model': model}, optimizer=optimizer.state_dict(), epoch=0, mode=cfg.mode)
        return TrainResult(checkpoint=ckpt)

    pseudo_dir = Path(pseudo_dir or run_dir / 'pseudomask')
    if cfg.uses_pseudo_masks:
        ensure_pseudo_masks(cfg, splits.train, pseudo_dir, keep_pseudo_masks)
    dataset = AVDataset(splits.train, cfg.audio, mask_targets(cfg, splits.train, pseudo_dir))

    start_epoch = 0
    if resume and ckpt.exists():
        payload = load_checkpoint(ckpt, digest, {'model': model})
        optimizer.load_state_dict(payload['optimizer'])
        start_epoch = payload['epoch']
        logger.info(f'Resume {run_dir} from epoch {start_epoch}')
    _restore_logs(run_dir, start_epoch)
    history = list(read_jsonl(run_dir / 'epochs.jsonl'))

    regenerate = cfg.pseudomask.regenerate_every
    step = sum(1 for _ in read_jsonl(run_dir / 'losses.jsonl'))
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.uses_pseudo_masks and regenerate and epoch and epoch % regenerate == 0:
            logger.info(f'Regenerate pseudo masks before epoch {epoch + 1}')
            generate_pseudo_masks(cfg, splits.train, pseudo_dir, resume=True)
            dataset.targets = load_pseudo_masks(pseudo_dir)

        loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, num_workers=cfg.loader_workers,
                            generator=torch.Generator().manual_seed(cfg.seed + epoch))
        model.train()
        records = []
        for batch in loader:
            if cfg.uses_avf and len(batch['id']) < 2:
                logger.debug(f'Skip singleton batch {batch["id"]}')
                continue
            out = model(batch['image'].to(device), batch['spectrogram'].to(device))
            target = batch['target'].to(device) if cfg.uses_mask_loss else None
            report = loss_total(
                out.embeddings(cfg.loss.temperature, cfg.loss.similarity_features) if cfg.uses_avf else None,
                out.mask if cfg.uses_mask_loss else None,
                target,
                cfg.loss,
            )
            step += 1
            record = report.to_record(epoch=epoch + 1, step=step)
            if not report.is_finite():
                _dump_nan(run_dir, epoch + 1, step, batch['id'], record)
                raise TrainingError(f'non-finite loss at epoch {epoch + 1} step {step}', batch_ids=list(batch['id']))
            optimizer.zero_grad()
            report.total.backward()
            optimizer.step()
            append_jsonl(run_dir / 'losses.jsonl', record)
            records.append(record)

        summary = loss_curve(records)[0] if records else {'epoch': epoch + 1}
        if cfg.eval_every_epoch and splits.val:
            val = evaluate_predictor(model_predictor(model, cfg), splits.val, cfg)
            summary.update(miou=val.miou, fscore=val.fscore)
        append_jsonl(run_dir / 'epochs.jsonl', summary)
        history.append(summary)
        save_checkpoint(ckpt, digest, {'model': model}, optimizer=optimizer.state_dict(), epoch=epoch + 1,
                        mode=cfg.mode)
        logger.info(f'Train epoch {epoch + 1}/{cfg.epochs}: total={summary.get("total", float("nan")):.4f}'
                    + (f' val_miou={summary["miou"]:.4f}' if 'miou' in summary else ''))
    return TrainResult(checkpoint=ckpt, epochs=history)


def prediction_source(cfg: RunConfig, heatmap: bool = False) -> str:
    """The decoder is only trained when the mask loss is on."""
    return 'heatmap' if heatmap or not cfg.uses_mask_loss else 'decoder'


def model_predictor(model: AVSegModel, cfg: RunConfig, heatmap: bool = False, batch_size: int = 64) -> Predictor:
    source = prediction_source(cfg, heatmap)

    @torch.no_grad()
    def predict(samples: Sequence[SamplePair]) -> torch.Tensor:
        was_training = model.training
        device = next(model.parameters()).device
        model.eval()
        masks = []
        for start in range(0, len(samples), batch_size):
            batch = samples[start:start + batch_size]
            images = torch.stack([s.image for s in batch])
            specs = torch.stack([compute_spectrogram(s.waveform, cfg.audio).values for s in batch])
            out = model(images.to(device), specs.to(device))
            masks.append((out.heatmap(cfg.encoder.image_size) if source == 'heatmap' else out.mask).cpu())
        model.train(was_training)
        return torch.cat(masks)

    return predict


def evaluate_predictor(predict: Predictor, samples: Sequence[SamplePair], cfg: RunConfig,
                       out_dir: Optional[Path] = None, save_masks: bool = False) -> MetricsReport:
    if not samples:
        raise DataError('cannot evaluate an empty split')
    missing = [s.id for s in samples if not s.has_gt_mask]
    if missing:
        raise DataError(f'{len(missing)} samples lack ground-truth masks, e.g. {missing[0]}', sample_id=missing[0])
    soft = predict(samples)
    pred = binarize(soft, cfg.metrics.threshold)
    report = evaluate_pairs(
        [(s.id, p, s.gt_mask) for s, p in zip(samples, pred)],
        beta_sq=cfg.metrics.beta_sq,
        threshold=cfg.metrics.threshold,
        workers=cfg.metrics.workers,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / 'metrics.json').write_text(report.model_dump_json(indent=2))
        if save_masks:
            ids = [s.id for s in samples]
            export_masks(soft, ids, out_dir / 'masks', cfg.metrics.threshold)
            export_overlays(torch.stack([s.image for s in samples]), pred, ids, out_dir / 'masks' / 'overlay')
    return report


def evaluate(checkpoint: Path, samples: Sequence[SamplePair], cfg: RunConfig, out_dir: Optional[Path] = None,
             save_masks: bool = False, heatmap: bool = False) -> MetricsReport:
    model = load_model(cfg, checkpoint, get_device())
    report = evaluate_predictor(model_predictor(model, cfg, heatmap), samples, cfg, out_dir, save_masks)
    logger.info(f'Evaluate {checkpoint} on {report.n_pairs} samples '
                f'({prediction_source(cfg, heatmap)}): miou={report.miou:.4f} fscore={report.fscore:.4f}')
    return report


def evaluate_pseudo_masks(pseudo_dir: Path, samples: Sequence[SamplePair], cfg: RunConfig,
                          out_dir: Optional[Path] = None, save_masks: bool = False) -> MetricsReport:
    """Score exported pseudo masks against ground truth, the way a trained model is scored."""
    masks = load_pseudo_masks(pseudo_dir)

    def predict(batch: Sequence[SamplePair]) -> torch.Tensor:
        missing = [s.id for s in batch if s.id not in masks]
        if missing:
            raise DataError(f'{len(missing)} samples have no pseudo mask in {pseudo_dir}, e.g. {missing[0]}',
                            sample_id=missing[0])
        return torch.stack([masks[s.id].float() for s in batch])

    report = evaluate_predictor(predict, samples, cfg, out_dir, save_masks)
    logger.info(f'Evaluate pseudo masks in {pseudo_dir} on {report.n_pairs} samples: '
                f'miou={report.miou:.4f} fscore={report.fscore:.4f}')
    return report


def sweep(cfg: RunConfig, splits: DatasetSplits, axis: str, values: Optional[Sequence] = None,
          seeds: Sequence[int] = (0,), out_dir: Optional[Path] = None) -> list[dict]:
    """Train and test one run per (axis value, seed); rows report the median over seeds."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f'unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}')
    key, defaults = SWEEP_AXES[axis]
    values = list(values) if values is not None else defaults
    out_dir = Path(out_dir or cfg.run_dir().parent / f'sweep-{axis}')
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for value in values:
        runs = []
        for seed in seeds:
            try:
                run_cfg = apply_overrides(cfg, {key: value, 'seed': seed,
                                                'output_dir': str(out_dir / f'{axis}={value}-s{seed}')})
            except ConfigError as e:
                logger.warning(f'Skip {axis}={value}: {e.message.splitlines()[0]}')
                break
            pseudo_dir = out_dir / f'pseudomask-{pseudo_mask_digest(run_cfg, splits.train)[:12]}'
            result = train(run_cfg, splits, run_cfg.output_dir, pseudo_dir=pseudo_dir)
            runs.append(evaluate(result.checkpoint, splits.test, run_cfg, run_cfg.output_dir))
        if len(runs) < len(seeds):
            rows.append({'axis': axis, 'value': value, 'status': 'skipped', 'seeds': len(seeds)})
            continue
        rows.append({
            'axis': axis,
            'value': value,
            'status': 'ok',
            'seeds': len(seeds),
            'miou': statistics.median(r.miou for r in runs),
            'fscore': statistics.median(r.fscore for r in runs),
            'miou_runs': json.dumps([r.miou for r in runs]),
        })
        logger.info(f'Sweep {axis}={value}: median miou={rows[-1]["miou"]:.4f}')

    write_csv(rows, out_dir / 'sweep.csv', ('axis', 'value', 'status', 'seeds', 'miou', 'fscore', 'miou_runs'))
    plot_sweep(rows, axis, out_dir)
    return rows
