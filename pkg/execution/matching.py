# matching.py
# Descriptor matching, match recall, pose from matched pointmaps and pose AUC

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from globals import MATCH_TAU, MATCH_SIGN, NUM_WORKERS, RANSAC_ITERATIONS, RANSAC_THRESHOLD
from geometry_core import relative_pose_procrustes, rotation_angle_deg

NN_CHUNK = 2048


@dataclass
class MatchResult:
    matches: np.ndarray  # (M, 2) flat pixel indices (view 1, view 2)
    scores: np.ndarray  # (M,) similarity of each match

    def __post_init__(self):
        self.matches = np.asarray(self.matches, dtype=np.int64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.scores) != len(self.matches):
            raise ValueError(f"{len(self.matches)} matches but {len(self.scores)} scores")
        if not np.isfinite(self.scores).all():
            raise ValueError("Match scores must be finite")

    def __len__(self):
        return len(self.matches)


def _flat(desc):
    desc = np.asarray(desc)
    return desc.reshape(-1, desc.shape[-1])


def similarity(desc1, desc2, i, j, tau=MATCH_TAU, sign_convention=MATCH_SIGN):
    """s(i, j) = exp(±τ·⟨D1_i, D2_j⟩), positive sign unless the printed-negative convention is selected."""
    sign = 1.0 if sign_convention == 'similarity-positive' else -1.0
    dot = float(np.dot(_flat(desc1)[i].astype(np.float64), _flat(desc2)[j].astype(np.float64)))
    return float(np.exp(sign * tau * dot))


def _argmax_rows(queries, keys):
    """Index of the first maximal key for each query (lowest index wins ties)."""
    chunks = [queries[s:s + NN_CHUNK] for s in range(0, len(queries), NN_CHUNK)]

    def best(chunk):
        return np.argmax(chunk @ keys.T, axis=1)

    if NUM_WORKERS > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=NUM_WORKERS) as pool:
            parts = list(pool.map(best, chunks))
    else:
        parts = [best(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def reciprocal_nn_match(desc1, desc2, mask1=None, mask2=None, tau=MATCH_TAU):
    """
    Mutual nearest neighbours by descriptor dot product.

    Args:
        desc1, desc2: (H, W, D) or (N, D) descriptor arrays
        mask1, mask2: Optional validity masks; invalid pixels never match
        tau: Temperature used for the reported similarity scores

    Returns:
        MatchResult, injective in both columns
    """
    d1 = _flat(desc1).astype(np.float64)
    d2 = _flat(desc2).astype(np.float64)
    valid1 = np.flatnonzero(np.ones(len(d1), bool) if mask1 is None else np.asarray(mask1).ravel())
    valid2 = np.flatnonzero(np.ones(len(d2), bool) if mask2 is None else np.asarray(mask2).ravel())
    if len(valid1) == 0 or len(valid2) == 0:
        return MatchResult(np.zeros((0, 2), np.int64), np.zeros(0))

    q, k = d1[valid1], d2[valid2]
    nn12 = _argmax_rows(q, k)
    nn21 = _argmax_rows(k, q)
    mutual = nn21[nn12] == np.arange(len(valid1))
    i = valid1[mutual]
    j = valid2[nn12[mutual]]
    dots = np.einsum('nd,nd->n', d1[i], d2[j])
    return MatchResult(np.stack([i, j], axis=1), np.exp(tau * dots))


def match_recall_at_px(pred, gt, radius_px, width, width2=None):
    """
    Fraction of GT matches (i, j) whose view-1 pixel i is matched by `pred` to
    some j' within `radius_px` of j.

    Args:
        pred: MatchResult
        gt: (M, 2) GT flat pixel indices
        radius_px: Tolerance in pixels (inclusive)
        width: Image width of view 1 (and of view 2 unless width2 is given)
    """
    gt = np.asarray(gt, dtype=np.int64).reshape(-1, 2)
    if len(gt) == 0:
        raise ValueError("Ground-truth correspondence set is empty")
    width2 = width if width2 is None else width2
    if len(pred) == 0:
        return 0.0
    lookup = dict(zip(pred.matches[:, 0].tolist(), pred.matches[:, 1].tolist()))
    predicted = np.array([lookup.get(i, -1) for i in gt[:, 0].tolist()])
    found = predicted >= 0
    du = (predicted % width2) - (gt[:, 1] % width2)
    dv = (predicted // width2) - (gt[:, 1] // width2)
    hit = found & (np.hypot(du, dv) <= radius_px)
    return float(hit.mean())


def ransac_procrustes(src, dst, iterations=RANSAC_ITERATIONS, threshold=RANSAC_THRESHOLD, seed=0):
    """
    Similarity fit robust to outlier matches: 3-point hypotheses, inlier count
    by distance below `threshold` (destination units), refit on the best set.

    Returns:
        Tuple (SimilarityTransform, inlier mask)
    """
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(iterations):
        pick = rng.choice(len(src), size=3, replace=False)
        try:
            hypothesis = relative_pose_procrustes(src[pick], dst[pick])
        except ValueError:
            continue
        inliers = np.linalg.norm(hypothesis.apply(src) - dst, axis=1) < threshold
        if best is None or inliers.sum() > best.sum():
            best = inliers
    if best is None or best.sum() < 3:
        raise ValueError("RANSAC found no non-degenerate hypothesis with >= 3 inliers")
    return relative_pose_procrustes(src[best], dst[best]), best


@dataclass
class PoseEstimate:
    transform: object  # SimilarityTransform, frame-1 coordinates -> frame-2 coordinates
    n_matches: int
    rotation_error_deg: float = None
    translation_error_deg: float = None
    inliers: np.ndarray = field(default=None, repr=False)

    @property
    def pose_error_deg(self):
        """max(rotation, translation-direction) error, the quantity pose AUC integrates."""
        if self.rotation_error_deg is None:
            return None
        return max(self.rotation_error_deg, self.translation_error_deg)


def translation_direction_error_deg(t_est, t_gt):
    n_est, n_gt = np.linalg.norm(t_est), np.linalg.norm(t_gt)
    if n_gt < 1e-12:
        return 0.0 if n_est < 1e-12 else 90.0
    if n_est < 1e-12:
        return 90.0
    cos = np.clip(np.dot(t_est, t_gt) / (n_est * n_gt), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def pose_from_matches(pm1, pm2, matches, gt_relative=None, ransac=False, ransac_threshold=RANSAC_THRESHOLD,
                      seed=0):
    """
    Relative pose from matched 3D points of two local pointmaps.

    Args:
        pm1, pm2: Local Pointmaps of view 1 and view 2
        matches: MatchResult or (M, 2) flat indices
        gt_relative: Optional (R, t) taking view-1 camera coordinates to view-2
        ransac: Wrap the fit in RANSAC (noisy predicted pointmaps)

    Returns:
        PoseEstimate with angular errors when gt_relative is given
    """
    pairs = matches.matches if isinstance(matches, MatchResult) else np.asarray(matches, np.int64).reshape(-1, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    both = pm1.mask.ravel()[i] & pm2.mask.ravel()[j]
    src = pm1.points.reshape(-1, 3)[i[both]].astype(np.float64)
    dst = pm2.points.reshape(-1, 3)[j[both]].astype(np.float64)
    if len(src) < 3:
        raise ValueError(f"Pose needs at least 3 matches valid in both pointmaps, got {len(src)}")

    inliers = None
    if ransac:
        transform, inliers = ransac_procrustes(src, dst, threshold=ransac_threshold, seed=seed)
    else:
        transform = relative_pose_procrustes(src, dst)

    estimate = PoseEstimate(transform, len(src), inliers=inliers)
    if gt_relative is not None:
        R_gt, t_gt = gt_relative
        estimate.rotation_error_deg = rotation_angle_deg(transform.rotation @ np.asarray(R_gt).T)
        estimate.translation_error_deg = translation_direction_error_deg(transform.translation, np.asarray(t_gt))
    return estimate


def pose_auc(errors, thresholds):
    """
    Pose AUC per threshold θ: mean over samples of max(0, 1 - err/θ), the
    normalized area under the error-recall curve up to θ.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("Pose AUC needs at least one error")
    if (errors < 0).any() or not np.isfinite(errors).all():
        raise ValueError("Pose errors must be finite and non-negative")
    return [float(np.maximum(0.0, 1.0 - errors / theta).mean()) for theta in thresholds]
