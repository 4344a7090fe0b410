# synth_scenes.py
# Procedural scenes, a pinhole raycaster with exact ground truth, and view-pair samples

from dataclasses import dataclass, field

import numpy as np

from globals import (
    WORKING_VOLUME, TARGET_RADIUS, CAMERA_DISTANCE, CAMERA_ELEVATION_DEG, PAIR_AZIMUTH_DEG,
    OVERLAP_RESOLUTION, CAMERA_RETRY_CAP, DEFAULT_PRIMITIVES, DEFAULT_MIN_OVERLAP,
    LIGHT_DIRECTION, AMBIENT, MIN_ALBEDO_CONTRAST, CORRESPONDENCE_PX, CORRESPONDENCE_DEPTH_REL,
    FOCAL_FACTOR, VIEW_FRAMES
)
from geometry_core import (
    CameraIntrinsics, RigidPose, DepthMap, NormalMap, Pointmap,
    unproject_depth_to_pointmap, rotation_about_axis
)

PRIMITIVE_KINDS = ('plane', 'sphere', 'box')
TEXTURE_KINDS = ('checker', 'value-noise')
RAY_EPS = 1e-9


@dataclass(frozen=True)
class ScenePrimitive:
    """
    A textured primitive posed in the world.

    Local geometry: plane = rectangle in z=0 with half extents (hx, hy);
    sphere = radius (r,); box = half extents (hx, hy, hz).
    """
    kind: str
    pose: RigidPose
    size: tuple
    texture: str
    texture_scale: float
    albedo: tuple
    tint: tuple = (1.0, 1.0, 1.0)
    noise_seed: int = 0

    def __post_init__(self):
        problems = []
        expected = {'plane': 2, 'sphere': 1, 'box': 3}
        if self.kind not in expected:
            problems.append(f"unknown primitive kind '{self.kind}'")
        elif len(self.size) != expected[self.kind]:
            problems.append(f"{self.kind} needs {expected[self.kind]} size parameters, got {len(self.size)}")
        if any(s <= 0 for s in self.size):
            problems.append(f"size parameters must be > 0, got {self.size}")
        if self.texture not in TEXTURE_KINDS:
            problems.append(f"unknown texture '{self.texture}'")
        if not self.texture_scale > 0:
            problems.append("texture_scale must be > 0")
        if len(self.albedo) != 2 or any(not 0.0 <= a <= 1.0 for a in self.albedo):
            problems.append(f"albedo levels must be two values in [0, 1], got {self.albedo}")
        elif abs(self.albedo[0] - self.albedo[1]) < MIN_ALBEDO_CONTRAST:
            problems.append(f"albedo contrast below {MIN_ALBEDO_CONTRAST} (uniform textures are not allowed)")
        if problems:
            raise ValueError("Invalid scene primitive: " + "; ".join(problems))


@dataclass
class RenderedView:
    image: np.ndarray  # H×W×3 float32, multiples of 1/255
    depth: DepthMap
    normals: NormalMap
    pointmap: Pointmap
    intrinsics: CameraIntrinsics
    pose: RigidPose


@dataclass
class ViewPairSample:
    views: list  # two RenderedView
    matches: np.ndarray  # (M, 2) uint32 flat pixel indices (view 0, view 1)
    seed: int
    tier: str = 'A'
    generator: dict = field(default_factory=dict)

    @property
    def resolution(self):
        return self.views[0].depth.shape


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def generate_scene(seed, n_primitives=DEFAULT_PRIMITIVES):
    """
    Deterministic random scene inside the working volume.

    The first primitive is centered inside the target ball around the origin,
    which is where every sampled camera looks.

    Args:
        seed: Integer seed
        n_primitives: Number of primitives (>= 1)

    Returns:
        List of ScenePrimitive
    """
    if n_primitives < 1:
        raise ValueError(f"n_primitives must be >= 1, got {n_primitives}")
    rng = np.random.default_rng(seed)
    scene = []
    for index in range(n_primitives):
        kind = PRIMITIVE_KINDS[rng.integers(len(PRIMITIVE_KINDS))]
        if index == 0:
            direction = rng.normal(size=3)
            center = direction / np.linalg.norm(direction) * rng.uniform(0.0, TARGET_RADIUS)
            extent = rng.uniform(0.5, 0.9)
        else:
            center = rng.uniform(-WORKING_VOLUME, WORKING_VOLUME, size=3)
            extent = rng.uniform(0.2, 0.6)

        if kind == 'plane':
            size = (extent * rng.uniform(1.0, 2.0), extent * rng.uniform(1.0, 2.0))
        elif kind == 'sphere':
            size = (extent,)
        else:
            size = tuple(extent * rng.uniform(0.5, 1.0, size=3))

        low = rng.uniform(0.0, 0.4)
        high = rng.uniform(low + MIN_ALBEDO_CONTRAST + 0.05, 1.0)
        scene.append(ScenePrimitive(
            kind=kind,
            pose=RigidPose(_random_rotation(rng), center),
            size=tuple(float(s) for s in size),
            texture=TEXTURE_KINDS[rng.integers(len(TEXTURE_KINDS))],
            texture_scale=float(rng.uniform(0.1, 0.3)),
            albedo=(float(low), float(high)),
            tint=tuple(float(c) for c in rng.uniform(0.4, 1.0, size=3)),
            noise_seed=int(rng.integers(2 ** 31 - 1)),
        ))
    return scene


def look_at_pose(eye, target, frame, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose with x right, y down, z toward the target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return RigidPose(np.stack([right, down, forward], axis=1), eye, frame)


def camera_intrinsics(resolution):
    height, width = _resolution(resolution)
    return CameraIntrinsics.centered(width, height, FOCAL_FACTOR * width)


def _resolution(resolution):
    if np.isscalar(resolution):
        return int(resolution), int(resolution)
    height, width = resolution
    return int(height), int(width)


def _intersect(primitive, origin, dirs):
    """Ray parameters and local hit points for one primitive; t = inf where missed."""
    R, c = primitive.pose.rotation, primitive.pose.translation
    o = R.T @ (origin - c)
    d = dirs @ R  # rows are R^T d
    n_rays = len(dirs)
    t = np.full(n_rays, np.inf)

    if primitive.kind == 'sphere':
        r = primitive.size[0]
        a = (d * d).sum(axis=1)
        b = 2.0 * d @ o
        cc = o @ o - r * r
        disc = b * b - 4 * a * cc
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t_near = (-b - root) / (2 * a)
        t_far = (-b + root) / (2 * a)
        cand = np.where(t_near > RAY_EPS, t_near, t_far)
        t = np.where(hit & (cand > RAY_EPS), cand, np.inf)
    elif primitive.kind == 'plane':
        hx, hy = primitive.size
        dz = d[:, 2]
        safe = np.abs(dz) > 1e-12
        cand = np.where(safe, -o[2] / np.where(safe, dz, 1.0), np.inf)
        p = o + cand[:, None] * d
        inside = safe & (cand > RAY_EPS) & (np.abs(p[:, 0]) <= hx) & (np.abs(p[:, 1]) <= hy)
        t = np.where(inside, cand, np.inf)
    else:
        half = np.asarray(primitive.size)
        with np.errstate(divide='ignore', invalid='ignore'):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        t_min = np.minimum(t1, t2).max(axis=1)
        t_max = np.maximum(t1, t2).min(axis=1)
        cand = np.where(t_min > RAY_EPS, t_min, t_max)
        t = np.where((t_min <= t_max) & (cand > RAY_EPS), cand, np.inf)

    local = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, local


def _local_normal(primitive, local):
    if primitive.kind == 'sphere':
        return local / np.linalg.norm(local, axis=1, keepdims=True)
    if primitive.kind == 'plane':
        return np.tile(np.array([0.0, 0.0, 1.0]), (len(local), 1))
    half = np.asarray(primitive.size)
    ratio = np.abs(local) / half
    axis = ratio.argmax(axis=1)
    n = np.zeros_like(local)
    n[np.arange(len(local)), axis] = np.sign(local[np.arange(len(local)), axis])
    return n


def _value_noise(points, seed):
    """Trilinear value noise on the integer lattice, values in [0, 1]."""
    base = np.floor(points).astype(np.int64)
    frac = points - base
    smooth = frac * frac * (3 - 2 * frac)

    def lattice(ix, iy, iz):
        h = (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791) ^ (seed * 2654435761)
        h = h & 0xFFFFFFFF
        h = (h * 1103515245 + 12345) & 0xFFFFFFFF
        h = (h ^ (h >> 16)) & 0xFFFF
        return h / 65535.0

    total = np.zeros(len(points))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((smooth[:, 0] if dx else 1 - smooth[:, 0])
                     * (smooth[:, 1] if dy else 1 - smooth[:, 1])
                     * (smooth[:, 2] if dz else 1 - smooth[:, 2]))
                total += w * lattice(base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz)
    return total


def _albedo(primitive, local):
    scaled = local / primitive.texture_scale
    low, high = primitive.albedo
    if primitive.texture == 'checker':
        parity = np.floor(scaled).astype(np.int64).sum(axis=1) % 2
        return np.where(parity == 0, low, high)
    return low + (high - low) * _value_noise(scaled, primitive.noise_seed)


def render_view(scene, K, pose, resolution=None):
    """
    Raycast one view: nearest hit per pixel gives depth, normal and shaded albedo.

    Rays are d = R · ((u-cx)/fx, (v-cy)/fy, 1) so the hit parameter equals the
    camera-frame depth. The pointmap is unproject(depth, K) so the two agree exactly.

    Args:
        scene: List of ScenePrimitive
        K: CameraIntrinsics
        pose: Camera-to-world RigidPose (its frame names the view)
        resolution: Optional (H, W) check against K

    Returns:
        RenderedView; background pixels are invalid in every map
    """
    if resolution is not None and _resolution(resolution) != (K.height, K.width):
        raise ValueError(f"Resolution {resolution} does not match intrinsics {(K.height, K.width)}")
    height, width = K.height, K.width
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing='ij')
    cam_dirs = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    world_dirs = cam_dirs @ pose.rotation.T
    origin = pose.translation

    n_rays = len(cam_dirs)
    best_t = np.full(n_rays, np.inf)
    best_id = np.full(n_rays, -1)
    best_local = np.zeros((n_rays, 3))
    for index, primitive in enumerate(scene):
        t, local = _intersect(primitive, origin, world_dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, index, best_id)
        best_local = np.where(closer[:, None], local, best_local)

    valid = np.isfinite(best_t)
    normals_world = np.zeros((n_rays, 3))
    albedo = np.zeros(n_rays)
    tint = np.zeros((n_rays, 3))
    for index, primitive in enumerate(scene):
        sel = best_id == index
        if not sel.any():
            continue
        normals_world[sel] = _local_normal(primitive, best_local[sel]) @ primitive.pose.rotation.T
        albedo[sel] = _albedo(primitive, best_local[sel])
        tint[sel] = primitive.tint

    normals_cam = normals_world @ pose.rotation
    points_cam = cam_dirs * np.where(valid, best_t, 0.0)[:, None]
    flip = (normals_cam * -points_cam).sum(axis=1) < 0
    normals_cam = np.where(flip[:, None], -normals_cam, normals_cam)
    normals_world = np.where(flip[:, None], -normals_world, normals_world)
    normals_cam /= np.maximum(np.linalg.norm(normals_cam, axis=1, keepdims=True), 1e-12)

    light = -np.asarray(LIGHT_DIRECTION, dtype=np.float64)
    light /= np.linalg.norm(light)
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normals_world @ light, 0.0, None)
    color = np.where(valid[:, None], tint * (albedo * shade)[:, None], 0.0)
    image = (np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0))

    mask = valid.reshape(height, width)
    depth = DepthMap(np.where(valid, best_t, 0.0).reshape(height, width).astype(np.float32), mask)
    normals = NormalMap(np.where(valid[:, None], normals_cam, 0.0).reshape(height, width, 3).astype(np.float32),
                        pose.frame, mask)
    pointmap = unproject_depth_to_pointmap(depth, K, pose.frame)
    return RenderedView(image.reshape(height, width, 3), depth, normals, pointmap, K, pose)


def _project(points_cam, K):
    z = points_cam[:, 2]
    safe = np.where(z > 0, z, 1.0)
    return K.fx * points_cam[:, 0] / safe + K.cx, K.fy * points_cam[:, 1] / safe + K.cy, z


def _reproject(view_src, view_dst):
    """Valid source pixels, their projection into the destination camera and its depth there."""
    src_idx = np.flatnonzero(view_src.depth.mask.ravel())
    points = view_src.pointmap.points.reshape(-1, 3)[src_idx]
    world = view_src.pose.apply(points)
    cam = (world - view_dst.pose.translation) @ view_dst.pose.rotation
    u, v, z = _project(cam, view_dst.intrinsics)
    return src_idx, u, v, z


def _visible(view_src, view_dst):
    """Source pixels whose point is in front of, inside, and unoccluded in the destination view."""
    src_idx, u, v, z = _reproject(view_src, view_dst)
    K = view_dst.intrinsics
    iu, iv = np.rint(u).astype(np.int64), np.rint(v).astype(np.int64)
    inside = (z > 0) & (iu >= 0) & (iu < K.width) & (iv >= 0) & (iv < K.height)
    iu_c, iv_c = np.clip(iu, 0, K.width - 1), np.clip(iv, 0, K.height - 1)
    dst_valid = view_dst.depth.mask[iv_c, iu_c]
    dst_depth = view_dst.depth.depth[iv_c, iu_c].astype(np.float64)
    consistent = np.abs(dst_depth - z) <= CORRESPONDENCE_DEPTH_REL * np.maximum(z, 1e-12)
    ok = inside & dst_valid & consistent
    return src_idx, u, v, iu_c, iv_c, ok


def measure_overlap(scene, cameras, resolution=OVERLAP_RESOLUTION):
    """Fraction of view-0 valid pixels visible (in frustum, unoccluded) in view 1."""
    K = camera_intrinsics(resolution)
    first = render_view(scene, K, cameras[0])
    second = render_view(scene, K, cameras[1])
    if not first.depth.mask.any():
        return 0.0
    _, _, _, _, _, ok = _visible(first, second)
    return float(ok.sum() / first.depth.mask.sum())


def sample_camera_pair(scene, seed, min_overlap=DEFAULT_MIN_OVERLAP, resolution=OVERLAP_RESOLUTION,
                       retry_cap=CAMERA_RETRY_CAP):
    """
    Rejection-sample two cameras looking at the scene center with enough overlap.

    Args:
        scene: List of ScenePrimitive
        seed: Integer seed
        min_overlap: Required fraction of view-0 pixels visible in view 1, in (0, 1]
        resolution: Resolution the overlap is measured at
        retry_cap: Maximum attempts

    Returns:
        Tuple ((K0, pose0), (K1, pose1)) with intrinsics at the overlap resolution
    """
    if not 0 < min_overlap <= 1:
        raise ValueError(f"min_overlap must lie in (0, 1], got {min_overlap}")
    rng = np.random.default_rng(seed)
    K = camera_intrinsics(resolution)
    for _ in range(retry_cap):
        distance = rng.uniform(*CAMERA_DISTANCE)
        elevation = np.radians(rng.uniform(*CAMERA_ELEVATION_DEG))
        azimuth = rng.uniform(0.0, 2 * np.pi)
        delta = np.radians(rng.uniform(*PAIR_AZIMUTH_DEG)) * rng.choice([-1.0, 1.0])
        elevation2 = np.clip(elevation + np.radians(rng.uniform(-10.0, 10.0)),
                             *np.radians(CAMERA_ELEVATION_DEG))
        distance2 = distance * rng.uniform(0.85, 1.15)
        target = rng.uniform(-0.2, 0.2, size=3)

        poses = []
        for frame, (dist, elev, azim) in zip(VIEW_FRAMES, ((distance, elevation, azimuth),
                                                          (distance2, elevation2, azimuth + delta))):
            eye = dist * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
            poses.append(look_at_pose(eye, target, frame))

        if measure_overlap(scene, poses, resolution) >= min_overlap:
            return (K, poses[0]), (K, poses[1])
    raise RuntimeError(f"No camera pair with overlap >= {min_overlap} after {retry_cap} attempts")


def ground_truth_correspondences(view_a, view_b):
    """
    Mutually consistent pixel matches between two rendered views.

    A valid view-a pixel i matches the nearest view-b pixel j when its point
    projects inside view b, the depth there agrees within 1%, and j's own point
    reprojects back into view a within 0.5 px of i (and rounds to i).

    Returns:
        (M, 2) uint32 array of flat pixel indices, injective in both columns
    """
    src_idx, u, v, iu, iv, ok = _visible(view_a, view_b)
    ok &= (np.abs(u - iu) <= CORRESPONDENCE_PX) & (np.abs(v - iv) <= CORRESPONDENCE_PX)
    width_b = view_b.intrinsics.width
    dst_idx = iv * width_b + iu

    back = np.zeros(len(src_idx), dtype=bool)
    if ok.any():
        cand_src, cand_dst = src_idx[ok], dst_idx[ok]
        dst_points = view_b.pointmap.points.reshape(-1, 3)[cand_dst]
        world = view_b.pose.apply(dst_points)
        cam = (world - view_a.pose.translation) @ view_a.pose.rotation
        bu, bv, bz = _project(cam, view_a.intrinsics)
        width_a = view_a.intrinsics.width
        su, sv = cand_src % width_a, cand_src // width_a
        mutual = ((bz > 0) & (np.abs(bu - su) <= CORRESPONDENCE_PX) & (np.abs(bv - sv) <= CORRESPONDENCE_PX)
                  & (np.rint(bu) == su) & (np.rint(bv) == sv))
        back[np.flatnonzero(ok)[mutual]] = True

    pairs = np.stack([src_idx[back], dst_idx[back]], axis=1).astype(np.uint32)
    # keep the first view-a pixel claiming each view-b pixel
    _, first = np.unique(pairs[:, 1], return_index=True)
    return pairs[np.sort(first)]


def make_view_pair_sample(seed, resolution, n_primitives=DEFAULT_PRIMITIVES, min_overlap=DEFAULT_MIN_OVERLAP,
                          max_scene_attempts=10):
    """
    Full training sample for one seed. The scene and cameras do not depend on
    the resolution, so the same seed renders the same pair at any size.
    """
    last_error = None
    for attempt in range(max_scene_attempts):
        scene_seed = np.random.SeedSequence([seed, attempt]).generate_state(1)[0]
        scene = generate_scene(int(scene_seed), n_primitives)
        try:
            (_, pose0), (_, pose1) = sample_camera_pair(scene, int(scene_seed) + 1, min_overlap)
        except RuntimeError as e:
            last_error = e
            continue
        K = camera_intrinsics(resolution)
        views = [render_view(scene, K, pose0), render_view(scene, K, pose1)]
        return ViewPairSample(
            views=views,
            matches=ground_truth_correspondences(views[0], views[1]),
            seed=int(seed),
            generator={'n_primitives': int(n_primitives), 'min_overlap': float(min_overlap),
                       'scene_attempt': attempt},
        )
    raise RuntimeError(f"Seed {seed}: no usable scene after {max_scene_attempts} attempts ({last_error})")


def render_scene_views(scene, poses, resolution):
    """Render several posed cameras of one scene (multi-view experiments)."""
    K = camera_intrinsics(resolution)
    return [render_view(scene, K, pose) for pose in poses]


def orbit_poses(n_views, distance=4.0, elevation_deg=30.0, spread_deg=40.0, target=(0.0, 0.0, 0.0)):
    """Cameras on an arc around the target, spaced evenly over `spread_deg` of azimuth."""
    poses = []
    elevation = np.radians(elevation_deg)
    for index, azim in enumerate(np.radians(np.linspace(0.0, spread_deg, n_views))):
        eye = distance * np.array([np.cos(elevation) * np.cos(azim), np.cos(elevation) * np.sin(azim),
                                   np.sin(elevation)])
        poses.append(look_at_pose(eye, target, f'view{index}'))
    return poses


def pose_between(pose, frame, angle_deg, axis=(0.0, 0.0, 1.0)):
    """Copy of `pose` rotated about the world origin, renamed to `frame`."""
    R = rotation_about_axis(axis, np.radians(angle_deg))
    return RigidPose(R @ pose.rotation, R @ pose.translation, frame)
