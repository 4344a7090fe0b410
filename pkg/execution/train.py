# train.py
# Two-stage training with a coarse-to-fine resolution schedule and heads-only fine-tuning

import json
import math
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import numpy as np
import torch
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from globals import (
    BATCH_SIZE, LEARNING_RATE, WEIGHT_DECAY, WARMUP_FRACTION, COARSE_RESOLUTION, HEAD_NAMES, STAGE_HEADS,
    STAGE_PREREQUISITE, LOGS_DIR, DEFAULT_PRIMITIVES, DEFAULT_MIN_OVERLAP
)
from geometry_core import transform_pointmap, transform_normals
from synth_scenes import make_view_pair_sample
from sample_io import list_sample_dirs, read_meta, read_sample
from backbone_model import ModelConfig, init_params, build_model, load_checkpoint, save_checkpoint, snapshot
from losses import (
    StageWeights, MatchLossConfig, loss_pts_local, loss_pts_global, loss_pts_normal, loss_normal_direct,
    loss_match_infonce, loss_depth_normalized, stage1_objective, stage2_objective
)

STAGES = ('stage1', 'stage2', 'heads-only')
HEAD_COMPONENTS = {'pointmap': ('loc', 'glb'), 'normal': ('normal',), 'matching': ('match',), 'depth': ('depth',)}
STAGE_COMPONENTS = {'stage1': ('loc', 'glb', 'pts_n', 'match'), 'stage2': ('loc', 'glb', 'pts_n', 'normal')}
NORMAL_COMPONENTS = ('pts_n', 'normal')


@dataclass
class TrainConfig:
    """Training run; the JSON config files mirror these fields (nested blocks for weights, match, model)."""
    stage: str = 'stage1'
    dataset: str = ''
    batch_size: int = BATCH_SIZE
    steps: int = 500
    lr: float = LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    warmup_fraction: float = WARMUP_FRACTION
    seed: int = 0
    resolution_schedule: list = field(default_factory=lambda: [[0, COARSE_RESOLUTION]])
    weights: StageWeights = field(default_factory=StageWeights)
    match: MatchLossConfig = field(default_factory=MatchLossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainable_heads: list = field(default_factory=list)
    init_checkpoint: str = None
    output_checkpoint: str = None
    log_path: str = None
    tier_gating: bool = False
    log_every: int = 10

    @classmethod
    def from_dict(cls, config):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(config) - known)
        if unknown:
            raise ValueError(f"Unknown train config keys: {', '.join(unknown)}")
        values = dict(config)
        values['weights'] = StageWeights(**values.get('weights', {}))
        values['match'] = MatchLossConfig(**values.get('match', {}))
        values['model'] = ModelConfig(**values.get('model', {}))
        return cls(**values)

    def to_dict(self):
        return asdict(self)

    def validate(self, patch_size=None):
        """Raise one ValueError listing every violated invariant."""
        patch_size = patch_size or self.model.patch_size
        problems = []
        if self.stage not in STAGES:
            problems.append(f"stage must be one of {STAGES}, got '{self.stage}'")
        if not self.dataset:
            problems.append("dataset path is required")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if not 0 <= self.warmup_fraction < 1:
            problems.append("warmup_fraction must lie in [0, 1)")
        if not self.resolution_schedule:
            problems.append("resolution_schedule must not be empty")
        else:
            thresholds = [entry[0] for entry in self.resolution_schedule]
            if thresholds[0] != 0 or thresholds != sorted(thresholds) or len(set(thresholds)) != len(thresholds):
                problems.append("resolution_schedule thresholds must start at 0 and strictly increase")
            for entry in self.resolution_schedule:
                if entry[1] % patch_size != 0:
                    problems.append(f"resolution {entry[1]} is not a multiple of patch_size {patch_size}")
        if self.stage in STAGE_PREREQUISITE and not self.init_checkpoint:
            problems.append(f"{self.stage} requires a {STAGE_PREREQUISITE[self.stage]} init_checkpoint")
        if self.stage == 'heads-only':
            if not self.trainable_heads:
                problems.append("heads-only training needs trainable_heads")
            bad = [h for h in self.trainable_heads if h not in HEAD_NAMES]
            if bad:
                problems.append(f"unknown heads {bad} (expected names from {HEAD_NAMES})")
        if problems:
            raise ValueError("Invalid train config: " + "; ".join(problems))


def resolution_at(step, schedule):
    """(resolution, tier filter or None) of the last schedule entry whose threshold is <= step."""
    current = schedule[0]
    for entry in schedule:
        if entry[0] <= step:
            current = entry
    return int(current[1]), (current[2] if len(current) > 2 else None)


def warmup_cosine(steps, warmup_fraction):
    warmup = max(1, int(round(warmup_fraction * steps)))

    def factor(step):
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))
    return factor


def sample_targets(sample):
    """GT tensors for one sample: local and cross pointmaps, normals, masks, depth, matches."""
    v0, v1 = sample.views
    cross = [transform_pointmap(v0.pointmap, v0.pose, v1.pose), transform_pointmap(v1.pointmap, v1.pose, v0.pose)]
    cross_normals = [transform_normals(v0.normals, v0.pose, v1.pose), transform_normals(v1.normals, v1.pose, v0.pose)]

    def f32(array):
        return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))

    return {
        'images': [f32(v.image) for v in sample.views],
        'local': [f32(v.pointmap.points) for v in sample.views],
        'cross': [f32(c.points) for c in cross],
        'masks': [torch.from_numpy(v.depth.mask.copy()) for v in sample.views],
        'normals': [f32(v.normals.normals) for v in sample.views],
        'cross_normals': [f32(n.normals) for n in cross_normals],
        'depth': [f32(v.depth.depth) for v in sample.views],
        'matches': torch.from_numpy(sample.matches.astype(np.int64)),
        'tier': sample.tier,
    }


class TrainingSet:
    """Sample directories; samples are re-rendered from their seed at resolutions other than the stored one."""

    def __init__(self, root):
        self.dirs = list_sample_dirs(root)
        if not self.dirs:
            raise ValueError(f"No samples found in {root}")
        self.meta = [read_meta(d) for d in self.dirs]
        self._cache = {}

    def __len__(self):
        return len(self.dirs)

    def tier(self, index):
        return self.meta[index].get('tier', 'A')

    def targets(self, index, resolution):
        key = (index, resolution)
        if key not in self._cache:
            meta = self.meta[index]
            if tuple(meta['resolution']) == (resolution, resolution):
                sample = read_sample(self.dirs[index])
            else:
                generator = meta.get('generator', {})
                sample = make_view_pair_sample(meta['seed'], resolution,
                                               generator.get('n_primitives', DEFAULT_PRIMITIVES),
                                               generator.get('min_overlap', DEFAULT_MIN_OVERLAP))
            self._cache[key] = sample_targets(sample)
        return self._cache[key]


def component_names(stage, trainable_heads=()):
    if stage == 'heads-only':
        return tuple(c for head in trainable_heads for c in HEAD_COMPONENTS[head])
    return STAGE_COMPONENTS[stage]


def sample_components(names, outputs, b, tgt, match_cfg, generator, gate_normals=False):
    """Loss components of batch element b; 'match' is None when the sample has no correspondences."""
    out1, out2 = outputs
    pred_local = [out1.local[b], out2.local[b]]
    pred_cross = [out1.cross[b], out2.cross[b]]
    masks = tgt['masks']
    components = {}
    for name in names:
        if name in NORMAL_COMPONENTS and gate_normals:
            components[name] = torch.zeros(())
        elif name == 'loc':
            components[name] = loss_pts_local(pred_local, tgt['local'], masks, pred_cross, tgt['cross'])
        elif name == 'glb':
            components[name] = loss_pts_global(pred_cross, tgt['cross'], masks, pred_local, tgt['local'])
        elif name == 'pts_n':
            components[name] = loss_pts_normal(pred_local, pred_cross, tgt['normals'], tgt['cross_normals'], masks)
        elif name == 'normal':
            components[name] = loss_normal_direct([out1.normals[b], out2.normals[b]], tgt['normals'], masks)
        elif name == 'depth':
            components[name] = loss_depth_normalized([out1.depth[b], out2.depth[b]], tgt['depth'], masks)
        elif name == 'match':
            components[name] = (None if len(tgt['matches']) == 0 else
                                loss_match_infonce(out1.descriptors[b], out2.descriptors[b], tgt['matches'],
                                                   match_cfg, generator))
    return components


def batch_components(names, per_sample):
    """Mean of each component over the samples that define it."""
    reduced = {}
    for name in names:
        values = [c[name] for c in per_sample if c[name] is not None]
        reduced[name] = torch.stack(values).mean() if values else torch.zeros(())
    return reduced


def objective(stage, components, weights):
    if stage == 'stage1':
        return stage1_objective(components, weights)
    if stage == 'stage2':
        return stage2_objective(components, weights)
    return sum(components.values())


def set_trainable(model, stage, trainable_heads=()):
    """Freeze everything, then unfreeze the parameters this stage optimizes."""
    for p in model.parameters():
        p.requires_grad_(False)
    if stage == 'heads-only':
        params = model.head_parameters(trainable_heads)
    else:
        params = model.backbone_parameters() + model.head_parameters(STAGE_HEADS[stage])
    for p in params:
        p.requires_grad_(True)
    return params


def _initial_checkpoint(cfg):
    if not cfg.init_checkpoint:
        return init_params(cfg.model, cfg.seed)
    ckpt = load_checkpoint(cfg.init_checkpoint)
    required = STAGE_PREREQUISITE.get(cfg.stage)
    if required and ckpt.stage != required:
        raise ValueError(f"{cfg.stage} requires a {required} checkpoint, got stage '{ckpt.stage}'")
    if cfg.stage == 'stage1' and ckpt.stage not in ('init', 'stage1'):
        raise ValueError(f"stage1 cannot start from a '{ckpt.stage}' checkpoint")
    return ckpt


def plot_losses(log, path):
    """Total and per-component loss curves against the step."""
    steps = [entry['step'] for entry in log]
    plt.figure(figsize=(12, 6))
    plt.plot(steps, [entry['total'] for entry in log], linewidth=2, color='#2E86AB', label='total')
    for name in log[0]['components']:
        plt.plot(steps, [entry['components'][name] for entry in log], linewidth=1, alpha=0.8, label=name)
    plt.yscale('log')
    plt.title(f"Training loss - {log[0]['stage']} ({len(log)} steps)", fontsize=14)
    plt.xlabel('Step', fontsize=12)
    plt.ylabel('Loss', fontsize=12)
    plt.grid(True, alpha=0.3)
    plt.legend()
    plt.tight_layout()
    plt.savefig(path, dpi=150, bbox_inches='tight')
    plt.close()


def write_log(log, log_path):
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, 'w') as f:
        json.dump(log, f, indent=2)
    if log:
        plot_losses(log, log_path.with_suffix('.png'))


def train(cfg):
    """
    Run one training stage.

    stage1 optimizes L_loc + η1·L_glb + η2·L_pts_n + η3·L_match over the
    backbone, pointmap head and matching head. stage2 starts from a stage1
    checkpoint and optimizes L_loc + λ1·L_glb + λ2·L_pts_n + λ3·L_n over the
    backbone, pointmap head and normal head. heads-only starts from a stage2
    checkpoint and trains only the selected heads on their own losses.

    Args:
        cfg: TrainConfig

    Returns:
        Tuple (Checkpoint, per-step log list)
    """
    cfg.validate()
    dataset = TrainingSet(cfg.dataset)
    init = _initial_checkpoint(cfg)
    cfg.validate(init.config.patch_size)

    torch.manual_seed(cfg.seed)
    model = build_model(init)
    model.train()
    params = set_trainable(model, cfg.stage, cfg.trainable_heads)
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, warmup_cosine(cfg.steps, cfg.warmup_fraction))
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    names = component_names(cfg.stage, cfg.trainable_heads)
    log_path = Path(cfg.log_path) if cfg.log_path else LOGS_DIR / f'train_log_{cfg.stage}.json'
    last_path = Path(cfg.output_checkpoint) if cfg.output_checkpoint else log_path.with_suffix('.last.ckpt')

    print("\n" + "=" * 60)
    print(f"TRAINING {cfg.stage.upper()}: {cfg.steps} steps, batch {cfg.batch_size}, {len(dataset)} samples")
    print(f"Components: {', '.join(names)}")
    print("=" * 60)

    log = []
    for step in range(cfg.steps):
        resolution, tier = resolution_at(step, cfg.resolution_schedule)
        eligible = [i for i in range(len(dataset)) if tier is None or dataset.tier(i) == tier]
        if not eligible:
            raise RuntimeError(f"No tier-{tier} samples for step {step}")
        batch = rng.choice(eligible, size=min(cfg.batch_size, len(eligible)), replace=False)
        targets = [dataset.targets(int(i), resolution) for i in batch]

        images1 = torch.stack([t['images'][0] for t in targets])
        images2 = torch.stack([t['images'][1] for t in targets])
        outputs = model.forward_pair(images1, images2)
        per_sample = [sample_components(names, outputs, b, t, cfg.match, generator,
                                        cfg.tier_gating and t['tier'] != 'A')
                      for b, t in enumerate(targets)]
        components = batch_components(names, per_sample)

        bad = [name for name, value in components.items() if not torch.isfinite(value)]
        if bad:
            save_checkpoint(snapshot(model, cfg.stage, step), last_path)
            write_log(log, log_path)
            raise RuntimeError(f"Non-finite loss component '{bad[0]}' at step {step}; "
                               f"last checkpoint retained at {last_path}")
        total = objective(cfg.stage, components, cfg.weights)

        optimizer.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            optimizer.step()

        entry = {
            'step': step,
            'stage': cfg.stage,
            'resolution': resolution,
            'lr': optimizer.param_groups[0]['lr'],
            'total': float(total.detach()),
            'components': {name: float(value.detach()) for name, value in components.items()},
        }
        log.append(entry)
        scheduler.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            parts = "  ".join(f"{k}={v:.4f}" for k, v in entry['components'].items())
            print(f"step {step:5d}  res {resolution:4d}  lr {entry['lr']:.2e}  total {entry['total']:.4f}  {parts}")

    final = snapshot(model, cfg.stage, cfg.steps, optimizer.state_dict())
    if cfg.output_checkpoint:
        save_checkpoint(final, cfg.output_checkpoint)
        print(f"✓ Checkpoint saved to {cfg.output_checkpoint}")
    write_log(log, log_path)
    print(f"✓ Training log saved to {log_path}")
    return final, log
