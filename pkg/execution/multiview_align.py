# multiview_align.py
# View graph over pairwise predictions, global sim(3) alignment, fused point cloud and PLY export

import json
from abc import ABC, abstractmethod
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import torch

from globals import (
    HUBER_DELTA, ALIGN_MAX_ITERATIONS, ALIGN_TOLERANCE, ALIGN_STEP_SIZE, NUM_WORKERS, MATCH_TAU
)
from geometry_core import SimilarityTransform, relative_pose_procrustes, rotation_angle_deg
from matching import MatchResult, reciprocal_nn_match
from infer import predict_pair

STEP_GROWTH = 1.2
STEP_SHRINK = 0.5
MIN_STEP = 1e-16


@dataclass
class Edge:
    matches: MatchResult
    outputs: tuple = None  # per-view prediction dicts of this pair


@dataclass
class ViewGraph:
    """
    nodes: view ids; pointmaps/colors/masks: per-view local geometry used by
    the alignment; edges: (v, w) with v < w -> Edge whose matches index view v
    pixels in column 0 and view w pixels in column 1.
    """
    nodes: list
    pointmaps: dict
    colors: dict
    masks: dict
    edges: dict = field(default_factory=dict)

    def __post_init__(self):
        for (v, w) in self.edges:
            if v == w:
                raise ValueError(f"Self-edge on view {v}")
            if v not in self.nodes or w not in self.nodes:
                raise ValueError(f"Edge ({v}, {w}) references an unknown view")

    def neighbors(self, view):
        return sorted({w for (a, w) in self.edges if a == view} | {a for (a, w) in self.edges if w == view})

    def is_connected(self):
        if not self.nodes:
            return False
        seen = {self.nodes[0]}
        queue = deque([self.nodes[0]])
        while queue:
            for nxt in self.neighbors(queue.popleft()):
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return len(seen) == len(self.nodes)


def select_edges(n_views, strategy='exhaustive', center=0):
    if strategy == 'exhaustive':
        return list(combinations(range(n_views), 2))
    if strategy == 'star':
        if not 0 <= center < n_views:
            raise ValueError(f"Star center {center} outside 0..{n_views - 1}")
        return [tuple(sorted((center, w))) for w in range(n_views) if w != center]
    raise ValueError(f"Unknown edge strategy '{strategy}' (expected 'exhaustive' or 'star')")


def model_pair_fn(model, tau=MATCH_TAU):
    """Pairwise inference + reciprocal matching with a loaded network."""
    def run(image_a, image_b, mask_a=None, mask_b=None):
        out_a, out_b = predict_pair(model, image_a, image_b)
        return (out_a, out_b), reciprocal_nn_match(out_a['descriptor'], out_b['descriptor'], mask_a, mask_b, tau)
    return run


def build_view_graph(images, pair_fn, strategy='exhaustive', center=0, masks=None, min_matches=3):
    """
    Run pairwise inference and matching over the selected edges.

    Args:
        images: List of (H, W, 3) float images
        pair_fn: Callable (image_a, image_b, mask_a, mask_b) -> ((out_a, out_b), MatchResult);
                 see model_pair_fn
        strategy: 'exhaustive' (all pairs) or 'star' (all pairs containing `center`)
        masks: Optional per-view validity masks
        min_matches: Edges with fewer matches are dropped

    Returns:
        Connected ViewGraph; each view's pointmap is its local prediction from the
        first edge (in edge order) that contains it
    """
    if len(images) < 2:
        raise ValueError(f"Multi-view alignment needs at least 2 views, got {len(images)}")
    masks = masks or [np.ones(np.asarray(img).shape[:2], bool) for img in images]
    pairs = select_edges(len(images), strategy, center)

    def run(edge):
        v, w = edge
        return pair_fn(images[v], images[w], masks[v], masks[w])

    if NUM_WORKERS > 1:
        with ThreadPoolExecutor(max_workers=NUM_WORKERS) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(edge) for edge in pairs]

    nodes = list(range(len(images)))
    graph = ViewGraph(nodes, {}, {}, {})
    for (v, w), (outputs, result) in zip(pairs, results):
        for view, out in ((v, outputs[0]), (w, outputs[1])):
            if view not in graph.pointmaps:
                graph.pointmaps[view] = np.asarray(out['pointmap'], dtype=np.float64)
                graph.colors[view] = np.asarray(images[view])
                graph.masks[view] = np.asarray(masks[view], bool)
        if len(result) < min_matches:
            print(f"WARNING: edge ({v}, {w}) has {len(result)} matches, dropped")
            continue
        graph.edges[(v, w)] = Edge(result, outputs)

    if not graph.is_connected():
        raise RuntimeError(f"View graph is disconnected after dropping weak edges "
                           f"({len(graph.edges)} of {len(pairs)} edges kept)")
    return graph


@dataclass
class AlignmentOptions:
    huber_delta: float = HUBER_DELTA
    max_iterations: int = ALIGN_MAX_ITERATIONS
    tolerance: float = ALIGN_TOLERANCE
    step_size: float = ALIGN_STEP_SIZE
    init: str = 'procrustes'  # or 'identity'

    def __post_init__(self):
        problems = []
        if not self.huber_delta > 0:
            problems.append("huber_delta must be > 0")
        if self.max_iterations < 0:
            problems.append("max_iterations must be >= 0")
        if not self.tolerance > 0:
            problems.append("tolerance must be > 0")
        if not self.step_size > 0:
            problems.append("step_size must be > 0")
        if self.init not in ('procrustes', 'identity'):
            problems.append(f"init must be 'procrustes' or 'identity', got '{self.init}'")
        if problems:
            raise ValueError("Invalid alignment options: " + "; ".join(problems))


@dataclass
class AlignmentResult:
    transforms: dict  # view id -> SimilarityTransform into the reference frame
    residual: float  # RMS matched-point distance after alignment
    iterations: int
    converged: bool
    reference: int = 0
    history: list = field(default_factory=list)  # accepted objective values

    def to_dict(self):
        return {
            'reference': self.reference,
            'residual': self.residual,
            'iterations': self.iterations,
            'converged': self.converged,
            'transforms': {str(v): t.to_dict() for v, t in sorted(self.transforms.items())},
            'history': self.history,
        }


def _edge_points(graph, edge):
    v, w = edge
    matches = graph.edges[edge].matches.matches
    i, j = matches[:, 0], matches[:, 1]
    ok = graph.masks[v].ravel()[i] & graph.masks[w].ravel()[j]
    return (graph.pointmaps[v].reshape(-1, 3)[i[ok]].astype(np.float64),
            graph.pointmaps[w].reshape(-1, 3)[j[ok]].astype(np.float64))


def spanning_tree_init(graph, reference):
    """Chain closed-form fits outward from the reference along a BFS tree."""
    transforms = {reference: SimilarityTransform.identity()}
    queue = deque([reference])
    while queue:
        known = queue.popleft()
        for other in graph.neighbors(known):
            if other in transforms:
                continue
            edge = (min(known, other), max(known, other))
            pts_v, pts_w = _edge_points(graph, edge)
            pts_known, pts_other = (pts_v, pts_w) if edge[0] == known else (pts_w, pts_v)
            fit = relative_pose_procrustes(pts_other, transforms[known].apply(pts_known))
            transforms[other] = SimilarityTransform(fit.scale, fit.rotation, fit.translation)
            queue.append(other)
    return transforms


def _skew(w):
    zero = torch.zeros((), dtype=w.dtype)
    return torch.stack([torch.stack([zero, -w[2], w[1]]),
                        torch.stack([w[2], zero, -w[0]]),
                        torch.stack([-w[1], w[0], zero])])


def _apply_increment(params, points, pivot):
    """exp(log_s) · Exp(ω) · (x - c) + c + τ about the view's pivot c, on points already mapped by the init"""
    log_s, omega, tau = params[0], params[1:4], params[4:7]
    R = torch.linalg.matrix_exp(_skew(omega))
    return torch.exp(log_s) * ((points - pivot) @ R.T) + pivot + tau


def huber_on_squared(sq, delta):
    """Huber of the distance r = sqrt(sq), without a sqrt in the quadratic zone."""
    inside = sq <= delta * delta
    r = torch.sqrt(torch.where(inside, torch.full_like(sq, delta * delta), sq))
    return torch.where(inside, 0.5 * sq, delta * (r - 0.5 * delta))


class AlignmentSolver(ABC):
    @abstractmethod
    def solve(self, objective, n_params, opts):
        """Minimize objective(params) over a flat float64 parameter tensor; return (params, history, iters, converged)."""


class GradientDescentSolver(AlignmentSolver):
    """Gradient descent with step acceptance: a step is kept only when the objective decreases."""

    def solve(self, objective, n_params, opts):
        params = torch.zeros(n_params, dtype=torch.float64)
        current = objective(params).item()
        history = [current]
        step = opts.step_size
        converged = current <= 1e-30
        iterations = 0
        while not converged and iterations < opts.max_iterations:
            iterations += 1
            x = params.clone().requires_grad_(True)
            value = objective(x)
            grad, = torch.autograd.grad(value, x)
            while step >= MIN_STEP:
                candidate = (params - step * grad).detach()
                trial = objective(candidate).item()
                if trial < current:
                    break
                step *= STEP_SHRINK
            if step < MIN_STEP:
                converged = True  # no descent left at machine precision
                break
            change = (current - trial) / max(abs(current), 1e-300)
            params, current = candidate, trial
            history.append(current)
            step *= STEP_GROWTH
            converged = change < opts.tolerance or current <= 1e-30
        return params, history, iterations, converged


def global_alignment(graph, opts=None, solver=None):
    """
    Per-view sim(3) alignment of local pointmaps through matched pixels.

    Minimizes Σ_edges (1/n_e) Σ_matches huber(‖T_v(P_v(i)) - T_w(P_w(j))‖)
    with T_ref = identity (reference = lowest view id), starting from a
    spanning-tree closed-form fit and refined by gradient descent on per-view
    (log-scale, axis-angle, translation) increments.

    Returns:
        AlignmentResult; converged=False is reported with a warning, not raised
    """
    opts = opts or AlignmentOptions()
    solver = solver or GradientDescentSolver()
    if not graph.is_connected():
        raise RuntimeError("View graph is disconnected; cannot align")
    for edge, data in graph.edges.items():
        if len(data.matches) < 3:
            raise ValueError(f"Edge {edge} has {len(data.matches)} matches; alignment needs at least 3")

    reference = min(graph.nodes)
    if opts.init == 'procrustes':
        init = spanning_tree_init(graph, reference)
    else:
        init = {v: SimilarityTransform.identity() for v in graph.nodes}

    free = [v for v in graph.nodes if v != reference]
    slot = {v: k for k, v in enumerate(free)}
    mapped = []
    for edge in sorted(graph.edges):
        pts_v, pts_w = _edge_points(graph, edge)
        if len(pts_v) < 3:
            raise ValueError(f"Edge {edge} has fewer than 3 matches valid in both views")
        mapped.append((edge, init[edge[0]].apply(pts_v), init[edge[1]].apply(pts_w)))

    # Solved in centered unit-RMS coordinates; huber(σ·r; δ) = σ²·huber(r; δ/σ), so the minimizer is unchanged
    stacked = np.concatenate([np.concatenate([a, b]) for _, a, b in mapped])
    center = stacked.mean(axis=0)
    spread = float(np.sqrt(((stacked - center) ** 2).sum(axis=1).mean())) or 1.0
    delta = opts.huber_delta / spread
    terms = [(edge, torch.from_numpy((a - center) / spread), torch.from_numpy((b - center) / spread))
             for edge, a, b in mapped]

    view_points = {v: [] for v in free}
    for (v, w), base_v, base_w in terms:
        for view, base in ((v, base_v), (w, base_w)):
            if view != reference:
                view_points[view].append(base)
    pivots = {v: torch.cat(view_points[v]).mean(dim=0) for v in free}

    def transformed(params, view, base):
        if view == reference:
            return base
        k = slot[view]
        return _apply_increment(params[7 * k:7 * k + 7], base, pivots[view])

    def objective(params):
        total = torch.zeros((), dtype=torch.float64)
        for (v, w), base_v, base_w in terms:
            diff = transformed(params, v, base_v) - transformed(params, w, base_w)
            total = total + huber_on_squared((diff * diff).sum(dim=1), delta).mean()
        return total

    params, history, iterations, converged = solver.solve(objective, 7 * len(free), opts)
    history = [value * spread * spread for value in history]

    transforms = {reference: SimilarityTransform.identity()}
    for v in free:
        p = params[7 * slot[v]:7 * slot[v] + 7].detach()
        s = float(torch.exp(p[0]))
        R = torch.linalg.matrix_exp(_skew(p[1:4])).numpy()
        pivot, tau = pivots[v].numpy(), p[4:7].numpy()
        # Back to scene units: y = sR x + (c + τ - sRc) in normalized coordinates
        t = spread * (pivot + tau - s * (R @ pivot)) + center - s * (R @ center)
        transforms[v] = SimilarityTransform(s, R, t).compose(init[v])

    sq, count = 0.0, 0
    for edge in graph.edges:
        pts_v, pts_w = _edge_points(graph, edge)
        diff = transforms[edge[0]].apply(pts_v) - transforms[edge[1]].apply(pts_w)
        sq += float((diff ** 2).sum())
        count += len(diff)
    residual = float(np.sqrt(sq / max(count, 1)))

    if not converged:
        print(f"WARNING: global alignment did not converge in {opts.max_iterations} iterations "
              f"(residual {residual:.3e})")
    return AlignmentResult(transforms, residual, iterations, converged, reference, history)


def color_to_byte_scale(image):
    """Float images are taken as [0, 1] and scaled to [0, 255]; integer images are already bytes."""
    image = np.asarray(image)
    if np.issubdtype(image.dtype, np.floating):
        return image.astype(np.float64) * 255.0
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float64)
    raise ValueError(f"Unsupported color dtype {image.dtype}")


def fuse_pointcloud(graph, alignment, voxel_size=None):
    """
    All valid per-view points mapped into the reference frame, with their pixel colors.

    Args:
        voxel_size: Optional edge length; points in one voxel are averaged

    Returns:
        Tuple (points (N, 3) float64, colors (N, 3) uint8)
    """
    points, colors = [], []
    for view in graph.nodes:
        mask = graph.masks[view]
        pts = graph.pointmaps[view][mask].astype(np.float64)
        points.append(alignment.transforms[view].apply(pts))
        colors.append(color_to_byte_scale(graph.colors[view])[mask])
    points = np.concatenate(points) if points else np.zeros((0, 3))
    colors = np.concatenate(colors) if colors else np.zeros((0, 3))

    if voxel_size is not None and len(points):
        if not voxel_size > 0:
            raise ValueError(f"voxel_size must be > 0, got {voxel_size}")
        keys = np.floor(points / voxel_size).astype(np.int64)
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        summed = np.zeros((len(counts), 3))
        np.add.at(summed, inverse, points)
        summed_colors = np.zeros((len(counts), 3))
        np.add.at(summed_colors, inverse, colors)
        points = summed / counts[:, None]
        colors = summed_colors / counts[:, None]

    return points, np.clip(np.rint(colors), 0, 255).astype(np.uint8)


def export_ply(points, colors, path):
    """Binary little-endian PLY with float32 x, y, z and uchar red, green, blue per vertex."""
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError("export_ply needs a non-empty (N, 3) point array")
    colors = np.zeros((len(points), 3), np.uint8) if colors is None else np.asarray(colors, np.uint8)
    vertices = np.empty(len(points), dtype=[('x', '<f4'), ('y', '<f4'), ('z', '<f4'),
                                           ('red', 'u1'), ('green', 'u1'), ('blue', 'u1')])
    vertices['x'], vertices['y'], vertices['z'] = points[:, 0], points[:, 1], points[:, 2]
    vertices['red'], vertices['green'], vertices['blue'] = colors[:, 0], colors[:, 1], colors[:, 2]
    header = ("ply\n"
              "format binary_little_endian 1.0\n"
              f"element vertex {len(points)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              "end_header\n")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(header.encode('ascii'))
        f.write(vertices.tobytes())


def write_alignment_report(result, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(result.to_dict(), f, indent=2)


def rotation_error_deg(a, b):
    return rotation_angle_deg(a.rotation @ b.rotation.T)
