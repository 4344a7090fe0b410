"""
cli.py - Command-line surface: gen-data, train, infer, match, align, eval
Each subcommand reads an optional JSON config (configs/) and applies flag overrides
"""
import sys
import json
import argparse
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

# Setup paths
sys.path.insert(0, str(Path(__file__).parent))

from globals import MATCH_RADIUS_PX, MATCH_TAU, RANSAC_THRESHOLD, LOGS_DIR
from geometry_core import Pointmap, relative_transform
from sample_io import GenerateConfig, generate_dataset, read_png, read_prediction, read_sample
from matching import reciprocal_nn_match, match_recall_at_px, pose_from_matches
from multiview_align import (
    AlignmentOptions, model_pair_fn, build_view_graph, global_alignment, fuse_pointcloud, export_ply,
    write_alignment_report
)
from train import TrainConfig, train
from infer import infer, load_model
from evaluate import DEPTH_ALIGNMENTS, evaluate_dataset, write_report

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so main() owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class InferConfig:
    checkpoint: str = ''
    image1: str = ''
    image2: str = ''
    out: str = 'prediction'


@dataclass
class MatchConfig:
    pred: str = ''
    gt: str = None
    radius_px: float = MATCH_RADIUS_PX
    tau: float = MATCH_TAU
    ransac: bool = False
    ransac_threshold: float = RANSAC_THRESHOLD
    out: str = str(LOGS_DIR / 'match_report.json')


@dataclass
class AlignConfig:
    checkpoint: str = ''
    images: list = field(default_factory=list)
    strategy: str = 'exhaustive'
    center: int = 0
    voxel_size: float = None
    tau: float = MATCH_TAU
    options: AlignmentOptions = field(default_factory=AlignmentOptions)
    out: str = 'alignment'


@dataclass
class EvalConfig:
    pred: str = ''
    gt: str = ''
    alignment: str = 'median-scale'
    radius_px: float = MATCH_RADIUS_PX
    out: str = str(LOGS_DIR / 'eval_report.json')


def load_config(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path) as f:
        try:
            config = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"Config file {path} is not valid JSON: {e}")
    if not isinstance(config, dict):
        raise ValueError(f"Config file {path} must hold a JSON object")
    return config


def parse_override(text):
    """'a.b=value' -> (['a', 'b'], value); value parsed as JSON, else kept as a string."""
    if '=' not in text:
        raise UsageError(f"--set expects dotted.key=value, got '{text}'")
    key, raw = text.split('=', 1)
    if not key:
        raise UsageError(f"--set expects dotted.key=value, got '{text}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split('.'), value


def set_dotted(config, keys, value):
    node = config
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"Cannot override '{'.'.join(keys)}': '{key}' is not a section")
    node[keys[-1]] = value


def resolve_config(args, shorthands):
    """Config file, then `--set` overrides, then dedicated flags (which win)."""
    config = load_config(args.config)
    for text in args.set or []:
        set_dotted(config, *parse_override(text))
    for flag, dotted in shorthands.items():
        value = getattr(args, flag)
        if value is not None:
            set_dotted(config, dotted.split('.'), value)
    return config


def build_dataclass(cls, config, name):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(config) - known)
    if unknown:
        raise ValueError(f"Unknown {name} config keys: {', '.join(unknown)}")
    return cls(**config)


def cmd_gen_data(args):
    cfg = build_dataclass(GenerateConfig, resolve_config(args, {
        'seed': 'seed', 'n': 'n', 'out': 'out', 'resolution': 'resolution',
        'n_primitives': 'n_primitives', 'min_overlap': 'min_overlap',
    }), 'gen-data')
    cfg.validate()
    generate_dataset(cfg.out, cfg.seed, cfg.n, cfg.resolution, cfg.n_primitives, cfg.min_overlap)


def cmd_train(args):
    config = resolve_config(args, {
        'steps': 'steps', 'seed': 'seed', 'dataset': 'dataset', 'out': 'output_checkpoint', 'log': 'log_path',
    })
    cfg = TrainConfig.from_dict(config)
    _, log = train(cfg)
    if log:
        print(f"Final total loss: {log[-1]['total']:.6f}")


def cmd_infer(args):
    cfg = build_dataclass(InferConfig, resolve_config(args, {
        'checkpoint': 'checkpoint', 'image1': 'image1', 'image2': 'image2', 'out': 'out',
    }), 'infer')
    for name in ('checkpoint', 'image1', 'image2'):
        if not getattr(cfg, name):
            raise ValueError(f"infer needs '{name}'")
    infer(cfg.checkpoint, cfg.image1, cfg.image2, cfg.out)


def cmd_match(args):
    cfg = build_dataclass(MatchConfig, resolve_config(args, {
        'pred': 'pred', 'gt': 'gt', 'radius': 'radius_px', 'out': 'out',
    }), 'match')
    if not cfg.pred:
        raise ValueError("match needs 'pred'")
    views, _ = read_prediction(cfg.pred)
    gt = read_sample(cfg.gt) if cfg.gt else None
    masks = [v.depth.mask for v in gt.views] if gt else [None, None]
    result = reciprocal_nn_match(views[0]['descriptor'], views[1]['descriptor'], masks[0], masks[1], cfg.tau)

    report = {'pred': cfg.pred, 'n_matches': len(result),
              'mean_score': float(np.mean(result.scores)) if len(result) else 0.0}
    if gt is not None:
        if len(gt.matches):
            width0, width1 = gt.views[0].intrinsics.width, gt.views[1].intrinsics.width
            report[f'recall@{cfg.radius_px:g}px'] = match_recall_at_px(result, gt.matches, cfg.radius_px,
                                                                     width0, width1)
        pm1 = Pointmap(views[0]['pointmap'], views[0]['frame'], masks[0])
        pm2 = Pointmap(views[1]['pointmap'], views[1]['frame'], masks[1])
        try:
            estimate = pose_from_matches(pm1, pm2, result, relative_transform(gt.views[0].pose, gt.views[1].pose),
                                         ransac=cfg.ransac, ransac_threshold=cfg.ransac_threshold)
            report['rotation_error_deg'] = estimate.rotation_error_deg
            report['translation_error_deg'] = estimate.translation_error_deg
        except ValueError as e:
            print(f"WARNING: no pose estimate ({e})")

    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(result.matches, dtype='<u4').tofile(out.with_suffix('.bin'))
    with open(out, 'w') as f:
        json.dump(report, f, indent=2)
    print(json.dumps(report, indent=2))
    print(f"✓ Match report saved to {out}")


def cmd_align(args):
    config = resolve_config(args, {
        'checkpoint': 'checkpoint', 'images': 'images', 'strategy': 'strategy', 'center': 'center',
        'voxel': 'voxel_size', 'out': 'out',
    })
    config['options'] = build_dataclass(AlignmentOptions, config.get('options', {}), 'align options')
    cfg = build_dataclass(AlignConfig, config, 'align')
    if not cfg.checkpoint:
        raise ValueError("align needs 'checkpoint'")
    model, _ = load_model(cfg.checkpoint)
    images = [read_png(path, f'image {path}') for path in cfg.images]
    graph = build_view_graph(images, model_pair_fn(model, cfg.tau), cfg.strategy, cfg.center)
    result = global_alignment(graph, cfg.options)
    points, colors = fuse_pointcloud(graph, result, cfg.voxel_size)

    out = Path(cfg.out)
    write_alignment_report(result, out / 'alignment.json')
    export_ply(points, colors, out / 'fused.ply')
    print(f"✓ Aligned {len(images)} views over {len(graph.edges)} edges "
          f"(residual {result.residual:.3e}, converged: {result.converged})")
    print(f"✓ Wrote {len(points)} points to {out / 'fused.ply'}")


def cmd_eval(args):
    cfg = build_dataclass(EvalConfig, resolve_config(args, {
        'pred': 'pred', 'gt': 'gt', 'alignment': 'alignment', 'radius': 'radius_px', 'out': 'out',
    }), 'eval')
    if not cfg.pred or not cfg.gt:
        raise ValueError("eval needs both 'pred' and 'gt'")
    report = evaluate_dataset(cfg.pred, cfg.gt, cfg.alignment, cfg.radius_px)
    print(report.format_table())
    write_report(report, cfg.out)
    print(f"✓ Metric report saved to {cfg.out}")


def build_parser():
    parser = CliParser(prog='geometry', description='Two-view dense geometry: data, training, inference, '
                                                    'matching, multi-view alignment and evaluation')
    sub = parser.add_subparsers(dest='command', parser_class=CliParser)

    def command(name, handler, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument('--config', help='JSON config file (see configs/)')
        p.add_argument('--set', action='append', metavar='KEY=VALUE',
                       help='Override a config key by dotted path; value parsed as JSON')
        p.set_defaults(handler=handler)
        return p

    p = command('gen-data', cmd_gen_data, 'Generate synthetic view-pair samples')
    p.add_argument('--seed', type=int)
    p.add_argument('--n', type=int)
    p.add_argument('--out')
    p.add_argument('--resolution', type=int)
    p.add_argument('--n-primitives', dest='n_primitives', type=int)
    p.add_argument('--min-overlap', dest='min_overlap', type=float)

    p = command('train', cmd_train, 'Run one training stage (stage1, stage2 or heads-only)')
    p.add_argument('--steps', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--dataset')
    p.add_argument('--out', help='Output checkpoint path')
    p.add_argument('--log', help='Training log path (JSON; loss curve PNG written next to it)')

    p = command('infer', cmd_infer, 'Predict pointmaps, normals, depth and descriptors for an image pair')
    p.add_argument('--checkpoint')
    p.add_argument('--image1')
    p.add_argument('--image2')
    p.add_argument('--out')

    p = command('match', cmd_match, 'Reciprocal nearest-neighbor matching on a prediction directory')
    p.add_argument('--pred')
    p.add_argument('--gt', help='GT sample directory (recall and pose error)')
    p.add_argument('--radius', type=float)
    p.add_argument('--out')

    p = command('align', cmd_align, 'Globally align N views into one fused point cloud')
    p.add_argument('--checkpoint')
    p.add_argument('--images', nargs='+')
    p.add_argument('--strategy', choices=('exhaustive', 'star'))
    p.add_argument('--center', type=int)
    p.add_argument('--voxel', type=float)
    p.add_argument('--out')

    p = command('eval', cmd_eval, 'Normal, depth, matching and pose metrics of predictions against samples')
    p.add_argument('--pred')
    p.add_argument('--gt')
    p.add_argument('--alignment', choices=DEPTH_ALIGNMENTS)
    p.add_argument('--radius', type=float)
    p.add_argument('--out')
    return parser


def main(argv=None):
    """Run the CLI; returns 0 on success, 1 on usage errors, 2 on runtime errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"{parser.format_usage()}{parser.prog}: error: a subcommand is required")
        args.handler(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_OK
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
