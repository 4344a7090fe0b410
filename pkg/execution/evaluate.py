# evaluate.py
# Normal, depth, matching and pose metrics over samples and prediction directories

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from globals import (
    NORMAL_THRESHOLDS_DEG, DEPTH_DELTA_BASE, MATCH_RADIUS_PX, POSE_AUC_THRESHOLDS_DEG, NUM_WORKERS
)
from geometry_core import DepthMap, NormalMap, Pointmap, relative_transform
from matching import MatchResult, reciprocal_nn_match, match_recall_at_px, pose_from_matches, pose_auc
from sample_io import read_meta, read_sample, read_prediction, list_sample_dirs

DEPTH_ALIGNMENTS = ('none', 'median-scale')


def normal_angular_errors(pred, gt):
    """
    Per-pixel angle in degrees over pixels valid in both maps.

    Evaluated as atan2(‖a × b‖, ⟨a, b⟩) on float64-renormalized vectors, equal
    to arccos(clamp(⟨a, b⟩)) but exact for identical normals.
    """
    shared = pred.mask & gt.mask
    if not shared.any():
        raise ValueError("No shared valid pixels between predicted and GT normals")
    a = pred.normals[shared].astype(np.float64)
    b = gt.normals[shared].astype(np.float64)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    return np.degrees(np.arctan2(cross, np.einsum('nc,nc->n', a, b)))


def summarize_normal_errors(errors, thresholds=NORMAL_THRESHOLDS_DEG):
    report = {'mean': float(np.mean(errors)), 'median': float(np.median(errors)), 'n_pixels': int(errors.size)}
    for theta in thresholds:
        report[f'delta_{theta:g}'] = float(100.0 * np.mean(errors < theta))
    return report


def eval_normals(pred, gt, thresholds=NORMAL_THRESHOLDS_DEG):
    """
    Angular error statistics of predicted normals.

    Args:
        pred, gt: NormalMap (pixels invalid in either are excluded)

    Returns:
        Dict with mean, median (degrees), delta_<θ> (percent below θ), n_pixels
    """
    return summarize_normal_errors(normal_angular_errors(pred, gt), thresholds)


def eval_depth(pred, gt, alignment='median-scale'):
    """
    REL, RMSE and δ1..δ3 of a depth prediction.

    Args:
        pred, gt: DepthMap
        alignment: 'none' or 'median-scale' (pred multiplied by median(gt / pred))

    Returns:
        Dict with rel, rmse, delta_1..delta_3 (percent), scale, n_pixels
    """
    if alignment not in DEPTH_ALIGNMENTS:
        raise ValueError(f"Unknown depth alignment '{alignment}' (expected one of {DEPTH_ALIGNMENTS})")
    shared = pred.mask & gt.mask
    if not shared.any():
        raise ValueError("No shared valid pixels between predicted and GT depth")
    d_gt = gt.depth[shared].astype(np.float64)
    d_pred = pred.depth[shared].astype(np.float64)
    if (d_gt <= 0).any():
        raise ValueError("GT depth must be positive on valid pixels")
    if (d_pred <= 0).any():
        raise ValueError("Predicted depth must be positive on valid pixels")

    scale = 1.0
    if alignment == 'median-scale':
        scale = float(np.median(d_gt / d_pred))
        d_pred = d_pred * scale

    ratio = np.maximum(d_pred / d_gt, d_gt / d_pred)
    report = {
        'alignment': alignment,
        'scale': scale,
        'rel': float(np.mean(np.abs(d_pred - d_gt) / d_gt)),
        'rmse': float(np.sqrt(np.mean((d_pred - d_gt) ** 2))),
        'n_pixels': int(shared.sum()),
    }
    for i in (1, 2, 3):
        report[f'delta_{i}'] = float(100.0 * np.mean(ratio < DEPTH_DELTA_BASE ** i))
    return report


@dataclass
class MetricReport:
    normals: dict = field(default_factory=dict)
    depth: dict = field(default_factory=dict)
    matching: dict = field(default_factory=dict)
    pose: dict = field(default_factory=dict)
    n_samples: int = 0

    def to_dict(self):
        return asdict(self)

    def format_table(self):
        """Fixed-width text table, one metric per row."""
        lines = ["=" * 60, f"{'METRIC':<36}{'VALUE':>24}", "-" * 60]
        for section in ('normals', 'depth', 'matching', 'pose'):
            for key, value in getattr(self, section).items():
                text = f"{value:.4f}" if isinstance(value, float) else str(value)
                lines.append(f"{section + '.' + key:<36}{text:>24}")
        lines.append(f"{'samples':<36}{self.n_samples:>24}")
        lines.append("=" * 60)
        return "\n".join(lines)


def _prediction_views(directory):
    """Per-view (NormalMap, DepthMap, Pointmap, descriptors or None, matches or None) of a pred dir."""
    if read_meta(directory).get('kind', 'sample') == 'sample':
        sample = read_sample(directory)
        views = [(v.normals, v.depth, v.pointmap, None) for v in sample.views]
        return views, sample.matches
    predicted, _ = read_prediction(directory)
    views = []
    for view in predicted:
        normals = view['normal']
        norms = np.linalg.norm(normals, axis=-1)
        normal_map = NormalMap(np.where((norms > 0)[..., None], normals / np.maximum(norms, 1e-12)[..., None], 0.0),
                               view['frame'], norms > 0)
        depth_map = DepthMap(np.where(view['depth'] > 0, view['depth'], 0.0), view['depth'] > 0)
        pointmap = Pointmap(view['pointmap'], view['frame'])
        views.append((normal_map, depth_map, pointmap, view['descriptor']))
    return views, None


def evaluate_sample(pred_dir, gt_dir, alignment='median-scale', radius_px=MATCH_RADIUS_PX):
    """Raw per-sample metric ingredients (pixel errors, depth metrics, recall, pose error)."""
    gt = read_sample(gt_dir)
    views, pred_matches = _prediction_views(pred_dir)
    result = {'normal_errors': [], 'depth': [], 'recall': None, 'pose_error': None}
    for (normals, depth, _, _), gt_view in zip(views, gt.views):
        result['normal_errors'].append(normal_angular_errors(normals, gt_view.normals))
        result['depth'].append(eval_depth(depth, gt_view.depth, alignment))

    if pred_matches is None:
        desc1, desc2 = views[0][3], views[1][3]
        matches = reciprocal_nn_match(desc1, desc2, gt.views[0].depth.mask, gt.views[1].depth.mask)
    else:
        matches = MatchResult(pred_matches, np.ones(len(pred_matches)))
    width0, width1 = gt.views[0].intrinsics.width, gt.views[1].intrinsics.width
    if len(gt.matches):
        result['recall'] = match_recall_at_px(matches, gt.matches, radius_px, width0, width1)

    pm1 = Pointmap(views[0][2].points, views[0][2].frame, views[0][2].mask & gt.views[0].depth.mask)
    pm2 = Pointmap(views[1][2].points, views[1][2].frame, views[1][2].mask & gt.views[1].depth.mask)
    gt_relative = relative_transform(gt.views[0].pose, gt.views[1].pose)
    try:
        estimate = pose_from_matches(pm1, pm2, matches, gt_relative)
        result['pose_error'] = estimate.pose_error_deg
    except ValueError as e:
        print(f"WARNING: {Path(pred_dir).name}: no pose ({e})")
        result['pose_error'] = 180.0
    return result


def evaluate_dataset(pred_root, gt_root, alignment='median-scale', radius_px=MATCH_RADIUS_PX,
                     auc_thresholds=POSE_AUC_THRESHOLDS_DEG):
    """
    Metric report over every sample directory present under both roots.

    Normal statistics pool pixels over all samples; depth metrics are averaged
    per image; recall is averaged per sample; pose AUC integrates per-sample
    max(rotation, translation-direction) errors.
    """
    gt_dirs = {d.name: d for d in list_sample_dirs(gt_root)}
    pred_dirs = {d.name: d for d in list_sample_dirs(pred_root)}
    names = sorted(set(gt_dirs) & set(pred_dirs))
    if not names:
        raise ValueError(f"No sample directories shared by {pred_root} and {gt_root}")

    def run(name):
        return evaluate_sample(pred_dirs[name], gt_dirs[name], alignment, radius_px)

    if NUM_WORKERS > 1:
        with ThreadPoolExecutor(max_workers=NUM_WORKERS) as pool:
            results = list(pool.map(run, names))
    else:
        results = [run(name) for name in names]

    errors = np.concatenate([e for r in results for e in r['normal_errors']])
    depth_rows = [d for r in results for d in r['depth']]
    depth = {'alignment': alignment}
    for key in ('rel', 'rmse', 'delta_1', 'delta_2', 'delta_3'):
        depth[key] = float(np.mean([row[key] for row in depth_rows]))

    recalls = [r['recall'] for r in results if r['recall'] is not None]
    matching = {f'recall@{radius_px:g}px': float(np.mean(recalls)) if recalls else 0.0,
                'n_samples_with_gt_matches': len(recalls)}
    pose_errors = [r['pose_error'] for r in results]
    pose = {f'auc@{theta:g}': value for theta, value in zip(auc_thresholds, pose_auc(pose_errors, auc_thresholds))}
    pose['median_error_deg'] = float(np.median(pose_errors))

    return MetricReport(summarize_normal_errors(errors), depth, matching, pose, len(names))


def write_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(report.to_dict(), f, indent=2)
