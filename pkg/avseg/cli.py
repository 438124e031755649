import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .conf import PROFILES, RunConfig, load_run_config, settings
from .data import DatasetSplits, generate_dataset, load_avsbench_layout, write_layout
from .errors import AVSegError, ConfigError
from .metrics import MetricsReport
from .pipeline import SWEEP_AXES, evaluate, evaluate_pseudo_masks, sweep, train
from .plot import plot_losses
from .pseudomask import generate_pseudo_masks

logger = logging.getLogger('avseg')


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors raise ConfigError instead of exiting, so they leave through the JSON error path."""

    def error(self, message: str):
        raise ConfigError(f'{self.prog}: {message}')


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='JSON run configuration')
    common.add_argument('--profile', choices=sorted(PROFILES), default='toy')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='dotted override, value parsed as JSON when possible')
    common.add_argument('--data', type=Path, help='dataset root; synthetic data from the config when omitted')

    parser = ArgumentParser(prog='avseg', description='Weakly-supervised audio-visual segmentation')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help='write a synthetic dataset')
    p.add_argument('--out', type=Path, required=True)

    p = sub.add_parser('pseudomask', parents=[common], help='train the class-agnostic map and export pseudo masks')
    p.add_argument('--out', type=Path, required=True)
    p.add_argument('--resume', action='store_true')

    p = sub.add_parser('train', parents=[common])
    p.add_argument('--run', type=Path, help='run directory (default: $AVSEG_OUTPUT_ROOT/<mode>-s<seed>)')
    p.add_argument('--pseudo-masks', type=Path, help='exported pseudo masks to train on; generated here when absent')
    p.add_argument('--resume', action='store_true')

    p = sub.add_parser('eval', parents=[common])
    p.add_argument('--run', type=Path, help='run directory; required unless --pseudo-masks is given')
    p.add_argument('--source', default='model', choices=['model', 'pseudomask'],
                   help='score the trained model or the exported pseudo masks')
    p.add_argument('--pseudo-masks', type=Path, help='pseudo-mask directory (default: <run>/pseudomask)')
    p.add_argument('--split', choices=['train', 'val', 'test', 'mixture'],
                   help='default: test for the model, train for pseudo masks')
    p.add_argument('--save-masks', action='store_true')
    p.add_argument('--heatmap', action='store_true', help='score the audio-visual heatmap instead of the decoder')

    p = sub.add_parser('sweep', parents=[common])
    p.add_argument('--axis', required=True, choices=sorted(SWEEP_AXES))
    p.add_argument('--values', type=json.loads, help='JSON list of axis values')
    p.add_argument('--seeds', type=int, default=1)
    p.add_argument('--out', type=Path)

    p = sub.add_parser('plot')
    p.add_argument('--run', type=Path, required=True)

    p = sub.add_parser('serve')
    p.add_argument('--host', default='127.0.0.1')
    p.add_argument('--port', type=int, default=8000)
    return parser


def resolve_config(args: argparse.Namespace, run_dir: Optional[Path] = None) -> RunConfig:
    """An existing run's config.json stands in for --config."""
    path = args.config
    if path is None and run_dir is not None and (run_dir / 'config.json').exists():
        path = run_dir / 'config.json'
    return load_run_config(path, args.profile, args.overrides)


def load_splits(args: argparse.Namespace, cfg: RunConfig) -> DatasetSplits:
    if args.data is None:
        return generate_dataset(cfg.data)
    if not args.data.exists():
        raise ConfigError(f'dataset root {args.data} does not exist')
    return load_avsbench_layout(args.data, image_size=cfg.encoder.image_size, workers=max(cfg.loader_workers, 1))


def run_eval(args: argparse.Namespace, cfg: RunConfig, splits: DatasetSplits) -> MetricsReport:
    if args.source == 'pseudomask':
        if args.pseudo_masks is None and args.run is None:
            raise ConfigError('eval --source pseudomask needs --pseudo-masks or --run')
        pseudo_dir = args.pseudo_masks or args.run / 'pseudomask'
        return evaluate_pseudo_masks(pseudo_dir, splits[args.split or 'train'], cfg, pseudo_dir / 'eval',
                                     save_masks=args.save_masks)
    if args.run is None:
        raise ConfigError('eval needs --run')
    return evaluate(args.run / 'checkpoint.pt', splits[args.split or 'test'], cfg, args.run,
                    save_masks=args.save_masks, heatmap=args.heatmap)


def run(args: argparse.Namespace) -> dict:
    if args.command == 'plot':
        return {'plots': [str(p) for p in plot_losses(args.run)]}
    if args.command == 'serve':
        import uvicorn

        from .route import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return {}

    run_dir = getattr(args, 'run', None)
    cfg = resolve_config(args, run_dir)

    if args.command == 'gen-data':
        splits = generate_dataset(cfg.data)
        args.out.mkdir(parents=True, exist_ok=True)
        write_layout(splits, args.out, cfg.data)
        return {name: len(samples) for name, samples in splits.items()}

    splits = load_splits(args, cfg)
    if args.command == 'pseudomask':
        manifest = generate_pseudo_masks(cfg, splits.train, args.out, resume=args.resume)
        return {'masks': len(manifest), 'out': str(args.out)}
    if args.command == 'train':
        result = train(cfg, splits, run_dir, resume=args.resume, pseudo_dir=args.pseudo_masks,
                       keep_pseudo_masks=args.pseudo_masks is not None)
        return {'checkpoint': str(result.checkpoint), 'epochs': result.epochs[-1:]}
    if args.command == 'eval':
        return run_eval(args, cfg, splits).model_dump(exclude={'per_sample'})
    if args.command == 'sweep':
        rows = sweep(cfg, splits, args.axis, args.values, seeds=range(cfg.seed, cfg.seed + args.seeds),
                     out_dir=args.out)
        return {'rows': rows}
    raise ConfigError(f'unknown command {args.command}')


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=settings.log_level.upper(), format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        result = run(build_parser().parse_args(argv))
    except AVSegError as e:
        print(json.dumps(e.to_json(), default=str), file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception('avseg failed')
        print(json.dumps({'code': 'internal_error', 'message': str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == '__main__':
    sys.exit(main())
