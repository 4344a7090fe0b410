# losses.py
# Differentiable training objectives: scale-normalized pointmap regression, normal consistency,
# descriptor infoNCE and the two stage objectives

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from globals import STAGE1_WEIGHTS, STAGE2_WEIGHTS, MATCH_TAU, MATCH_SIGN, MAX_CORRESPONDENCES

SIGN_CONVENTIONS = ('similarity-positive', 'negated')
STAGE1_COMPONENTS = ('loc', 'glb', 'pts_n', 'match')
STAGE2_COMPONENTS = ('loc', 'glb', 'pts_n', 'normal')


@dataclass(frozen=True)
class StageWeights:
    eta1: float = STAGE1_WEIGHTS[0]
    eta2: float = STAGE1_WEIGHTS[1]
    eta3: float = STAGE1_WEIGHTS[2]
    lambda1: float = STAGE2_WEIGHTS[0]
    lambda2: float = STAGE2_WEIGHTS[1]
    lambda3: float = STAGE2_WEIGHTS[2]

    def __post_init__(self):
        negative = [k for k, v in self.__dict__.items() if v < 0]
        if negative:
            raise ValueError(f"Stage weights must be non-negative: {', '.join(negative)}")


@dataclass(frozen=True)
class MatchLossConfig:
    tau: float = MATCH_TAU
    sign_convention: str = MATCH_SIGN
    max_correspondences: int = MAX_CORRESPONDENCES

    def __post_init__(self):
        problems = []
        if not self.tau > 0:
            problems.append(f"tau must be > 0, got {self.tau}")
        if self.sign_convention not in SIGN_CONVENTIONS:
            problems.append(f"sign_convention must be one of {SIGN_CONVENTIONS}, got '{self.sign_convention}'")
        if self.max_correspondences < 1:
            problems.append(f"max_correspondences must be >= 1, got {self.max_correspondences}")
        if problems:
            raise ValueError("Invalid match loss config: " + "; ".join(problems))


def safe_norm(x):
    """Euclidean norm over the last axis with a zero (not NaN) gradient at the origin."""
    sq = (x * x).sum(dim=-1)
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _masked(points, mask):
    return torch.where(mask[..., None], points, torch.zeros_like(points))


def norm_factor_t(points, masks):
    """
    z = mean ‖p‖ over the valid pixels of every given map (all in one frame)

    Args:
        points: List of (H, W, 3) tensors
        masks: List of (H, W) bool tensors

    Returns:
        Scalar tensor
    """
    total = sum(safe_norm(_masked(p, m)).sum() for p, m in zip(points, masks))
    count = sum(int(m.sum()) for m in masks)
    if count == 0:
        raise ValueError("No valid pixels for the normalization factor")
    z = total / count
    if not z.detach() > 0:
        raise ValueError("Normalization factor is zero (all valid points at the origin)")
    return z


def _mean_distance(pred, gt, mask):
    count = int(mask.sum())
    if count == 0:
        raise ValueError("Empty valid set")
    return safe_norm(_masked(pred - gt, mask)).sum() / count


def _frame_factors(own, own_mask, companion, companion_mask):
    if companion is None:
        return norm_factor_t([own], [own_mask])
    return norm_factor_t([own, companion], [own_mask, companion_mask])


def loss_pts_local(pred_local, gt_local, masks, pred_cross=None, gt_cross=None):
    """
    Scale-normalized local pointmap regression, summed over both views.

    For view v the prediction is divided by z_v and the target by z̄_v, where
    the factors average point norms over every map expressed in frame v: the
    local map of v and, when given, the other view's cross map.

    Args:
        pred_local, gt_local: Pairs of (H, W, 3) tensors in their own frames
        masks: Pair of (H, W) bool GT validity masks
        pred_cross, gt_cross: Optional pairs of cross pointmaps (view v in frame 1-v)

    Returns:
        Scalar tensor
    """
    total = 0.0
    for v in range(2):
        t = 1 - v
        z = _frame_factors(pred_local[v], masks[v], None if pred_cross is None else pred_cross[t], masks[t])
        z_gt = _frame_factors(gt_local[v], masks[v], None if gt_cross is None else gt_cross[t], masks[t])
        total = total + _mean_distance(pred_local[v] / z, gt_local[v] / z_gt, masks[v])
    return total


def loss_pts_global(pred_cross, gt_cross, masks, pred_local=None, gt_local=None):
    """Same form as loss_pts_local for view v expressed in frame t = 1 - v, factors taken in frame t."""
    total = 0.0
    for v in range(2):
        t = 1 - v
        z = _frame_factors(pred_cross[v], masks[v], None if pred_local is None else pred_local[t], masks[t])
        z_gt = _frame_factors(gt_cross[v], masks[v], None if gt_local is None else gt_local[t], masks[t])
        total = total + _mean_distance(pred_cross[v] / z, gt_cross[v] / z_gt, masks[v])
    return total


def _axis_tangent(points, mask, dim):
    n = points.shape[dim]
    zeros_p = torch.zeros_like(points.narrow(dim, 0, 1))
    zeros_m = torch.zeros_like(mask.narrow(dim, 0, 1))
    fwd = torch.cat([points.narrow(dim, 1, n - 1), zeros_p], dim=dim)
    bwd = torch.cat([zeros_p, points.narrow(dim, 0, n - 1)], dim=dim)
    fwd_ok = torch.cat([mask.narrow(dim, 1, n - 1), zeros_m], dim=dim)
    bwd_ok = torch.cat([zeros_m, mask.narrow(dim, 0, n - 1)], dim=dim)
    central = fwd_ok & bwd_ok
    zero = torch.zeros_like(points)
    tangent = torch.where(central[..., None], fwd - bwd,
                          torch.where(fwd_ok[..., None], fwd - points,
                                      torch.where(bwd_ok[..., None], points - bwd, zero)))
    return tangent, mask & (fwd_ok | bwd_ok)


def pointmap_normals(points, mask, orientation='camera'):
    """
    Differentiable finite-difference normals of an (H, W, 3) pointmap.

    orientation='camera' flips each normal toward the frame origin (local maps);
    orientation='grid' uses -(t_u × t_v), which follows the rigid motion of a
    local map into another frame (cross maps).

    Returns:
        (normals (H, W, 3), valid mask (H, W))
    """
    if orientation not in ('camera', 'grid'):
        raise ValueError(f"Unknown orientation '{orientation}'")
    if points.shape[0] < 2 or points.shape[1] < 2:
        raise ValueError(f"Pointmap {tuple(points.shape[:2])} too small for finite differences")
    p = _masked(points, mask)
    t_u, ok_u = _axis_tangent(p, mask, dim=1)
    t_v, ok_v = _axis_tangent(p, mask, dim=0)
    n = torch.cross(t_u, t_v, dim=-1)
    length = safe_norm(n)
    with torch.no_grad():
        scale = safe_norm(t_u) * safe_norm(t_v)
        valid = ok_u & ok_v & (length > 1e-12 * scale) & (length > 0)
    n = n / torch.where(valid, length, torch.ones_like(length))[..., None]
    if orientation == 'camera':
        with torch.no_grad():
            flip = (n * -p).sum(dim=-1) < 0
        n = torch.where(flip[..., None], -n, n)
    else:
        n = -n
    return _masked(n, valid), valid


def _l1_normals(pred, gt, mask):
    count = int(mask.sum())
    if count == 0:
        raise ValueError("No jointly valid pixels for the normal loss")
    return _masked(pred - gt, mask).abs().sum() / count


def loss_pts_normal(pred_local, pred_cross, gt_normals_local, gt_normals_cross, masks):
    """
    Normal consistency of predicted pointmaps: normals derived from the local and
    cross maps against GT normals in the own and other frame (L1, mean over
    jointly valid pixels), summed over both views.
    """
    total = 0.0
    for v in range(2):
        n_local, ok_local = pointmap_normals(pred_local[v], masks[v], 'camera')
        n_cross, ok_cross = pointmap_normals(pred_cross[v], masks[v], 'grid')
        total = total + _l1_normals(n_local, gt_normals_local[v], ok_local & masks[v])
        total = total + _l1_normals(n_cross, gt_normals_cross[v], ok_cross & masks[v])
    return total


def loss_normal_direct(pred, gt, masks):
    """Direct normal-head supervision: L1 mean over valid pixels, summed over both views."""
    return sum(_l1_normals(pred[v], gt[v], masks[v]) for v in range(2))


def loss_depth_normalized(pred, gt, masks):
    """Depth-head loss: L1 between depths divided by their own valid-pixel means."""
    total = 0.0
    for v in range(2):
        count = int(masks[v].sum())
        if count == 0:
            raise ValueError("Empty valid set")
        zero = torch.zeros_like(pred[v])
        p = torch.where(masks[v], pred[v], zero)
        g = torch.where(masks[v], gt[v], torch.zeros_like(gt[v]))
        total = total + (p / (p.sum() / count) - g / (g.sum() / count)).abs().sum() / count
    return total


def loss_match_infonce(desc1, desc2, matches, cfg=MatchLossConfig(), generator=None):
    """
    Two-sided infoNCE over sampled correspondences with in-batch candidate pools.

    Args:
        desc1, desc2: (H, W, D) or (N, D) unit descriptor tensors
        matches: (M, 2) flat pixel indices (view 1, view 2)
        cfg: MatchLossConfig
        generator: torch.Generator for subsampling above the cap

    Returns:
        Scalar tensor, the summed row and column cross-entropy divided by the
        number of sampled matches
    """
    matches = torch.as_tensor(matches).long().reshape(-1, 2)
    if len(matches) == 0:
        raise ValueError("No correspondences for the matching loss")
    if len(matches) > cfg.max_correspondences:
        keep = torch.randperm(len(matches), generator=generator)[:cfg.max_correspondences]
        matches = matches[torch.sort(keep).values]

    d1 = desc1.reshape(-1, desc1.shape[-1])[matches[:, 0]]
    d2 = desc2.reshape(-1, desc2.shape[-1])[matches[:, 1]]
    with torch.no_grad():
        worst = max((safe_norm(d1) - 1).abs().max().item(), (safe_norm(d2) - 1).abs().max().item())
    if worst > 1e-4:
        raise ValueError(f"Descriptors must be unit norm (max deviation {worst:.2e})")

    sign = 1.0 if cfg.sign_convention == 'similarity-positive' else -1.0
    logits = sign * cfg.tau * (d1 @ d2.T)
    target = torch.arange(len(matches))
    loss = F.cross_entropy(logits, target, reduction='sum') + F.cross_entropy(logits.T, target, reduction='sum')
    return loss / len(matches)


def _check_components(components, names):
    missing = [n for n in names if n not in components]
    if missing:
        raise ValueError(f"Missing loss components: {', '.join(missing)}")
    for name in names:
        value = components[name]
        finite = torch.isfinite(value).all() if torch.is_tensor(value) else torch.isfinite(torch.tensor(float(value)))
        if not finite:
            raise ValueError(f"Non-finite loss component '{name}'")


def stage1_objective(components, w=StageWeights()):
    """L_loc + η1·L_glb + η2·L_pts_n + η3·L_match"""
    _check_components(components, STAGE1_COMPONENTS)
    return (components['loc'] + w.eta1 * components['glb'] + w.eta2 * components['pts_n']
            + w.eta3 * components['match'])


def stage2_objective(components, w=StageWeights()):
    """L_loc + λ1·L_glb + λ2·L_pts_n + λ3·L_n"""
    _check_components(components, STAGE2_COMPONENTS)
    return (components['loc'] + w.lambda1 * components['glb'] + w.lambda2 * components['pts_n']
            + w.lambda3 * components['normal'])
