"""Loss, metric and sweep figures from the JSON-lines run logs."""
import csv
import logging
from collections import defaultdict
from pathlib import Path
from statistics import fmean
from typing import Sequence

import matplotlib as mpl
mpl.use('Agg')

import matplotlib.pyplot as plt

from .errors import DataError
from .util import read_jsonl

logger = logging.getLogger(__name__)

LOSS_TERMS = ('l_a2v', 'l_v2a', 'l_avf', 'l_pmr', 'total')
METRIC_TERMS = ('miou', 'fscore')


def savefig(fig, path: Path, dpi: int = 120) -> Path:
    fig.savefig(path, dpi=dpi, bbox_inches='tight')
    plt.close(fig)
    logger.debug(f'Figure saved to {path}')
    return path


def loss_curve(records: Sequence[dict]) -> list[dict]:
    """Per-epoch means of every loss term, in epoch order."""
    by_epoch = defaultdict(list)
    for record in records:
        by_epoch[record['epoch']].append(record)
    return [
        {'epoch': epoch, **{term: fmean(r[term] for r in rows) for term in LOSS_TERMS}}
        for epoch, rows in sorted(by_epoch.items())
    ]


def write_csv(rows: Sequence[dict], path: Path, fieldnames: Sequence[str]):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction='ignore')
        writer.writeheader()
        writer.writerows(rows)


def plot_losses(run_dir: Path) -> list[Path]:
    run_dir = Path(run_dir)
    records = list(read_jsonl(run_dir / 'losses.jsonl'))
    if not records:
        raise DataError(f'{run_dir / "losses.jsonl"}: no loss records', path=str(run_dir / 'losses.jsonl'))
    curve = loss_curve(records)
    epochs_path = run_dir / 'epochs.jsonl'
    epochs = {r['epoch']: r for r in read_jsonl(epochs_path)} if epochs_path.exists() else {}
    for row in curve:
        row.update({term: epochs[row['epoch']][term] for term in METRIC_TERMS
                    if term in epochs.get(row['epoch'], {})})
    write_csv(curve, run_dir / 'loss_curve.csv', ('epoch', *LOSS_TERMS, *METRIC_TERMS))

    x = [row['epoch'] for row in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    for term in LOSS_TERMS:
        ax.plot(x, [row[term] for row in curve], marker='o', label=term)
    ax.set_xlabel('epoch')
    ax.set_ylabel('loss')
    ax.legend()
    outputs = [savefig(fig, run_dir / 'losses.png')]

    metric_rows = [row for row in curve if 'miou' in row]
    if metric_rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        for term in METRIC_TERMS:
            ax.plot([row['epoch'] for row in metric_rows], [row[term] for row in metric_rows], marker='o', label=term)
        ax.set_xlabel('epoch')
        ax.set_ylim(0, 1)
        ax.legend()
        outputs.append(savefig(fig, run_dir / 'metrics.png'))
    logger.info(f'Plotted {len(curve)} epochs from {run_dir}')
    return outputs


def plot_sweep(rows: Sequence[dict], axis: str, out_dir: Path) -> list[Path]:
    """One line plot per metric over the axis values that ran."""
    done = [row for row in rows if row['status'] == 'ok']
    outputs = []
    for term in METRIC_TERMS:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([str(row['value']) for row in done], [row[term] for row in done], marker='o')
        ax.set_xlabel(axis)
        ax.set_ylabel(term)
        ax.set_ylim(0, 1)
        outputs.append(savefig(fig, Path(out_dir) / f'sweep_{term}.png'))
    return outputs
