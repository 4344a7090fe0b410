# geometry_core.py
# Pinhole cameras, rigid/similarity transforms, pointmaps, depth and normals

from dataclasses import dataclass, field

import numpy as np

from globals import MIN_INTRINSICS_PIXELS, MIN_DEPTH_SPREAD, WORLD_FRAME


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels. Pixel (u, v) is column u, row v."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        problems = []
        if not self.fx > 0:
            problems.append(f"fx must be > 0, got {self.fx}")
        if not self.fy > 0:
            problems.append(f"fy must be > 0, got {self.fy}")
        if not 0 <= self.cx < self.width:
            problems.append(f"cx must lie in [0, {self.width}), got {self.cx}")
        if not 0 <= self.cy < self.height:
            problems.append(f"cy must lie in [0, {self.height}), got {self.cy}")
        if problems:
            raise ValueError("Invalid camera intrinsics: " + "; ".join(problems))

    @classmethod
    def centered(cls, width, height, focal):
        return cls(float(focal), float(focal), width / 2.0, height / 2.0, int(width), int(height))

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
                'width': self.width, 'height': self.height}


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world rotation and translation of the camera named by `frame`."""
    rotation: np.ndarray
    translation: np.ndarray
    frame: str = WORLD_FRAME

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"Rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("Rotation is not orthonormal (R^T R != I within 1e-6)")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError(f"Rotation determinant must be +1, got {np.linalg.det(R):.6f}")
        object.__setattr__(self, 'rotation', R)
        object.__setattr__(self, 'translation', t)

    @classmethod
    def identity(cls, frame=WORLD_FRAME):
        return cls(np.eye(3), np.zeros(3), frame)

    @classmethod
    def from_matrix(cls, matrix, frame=WORLD_FRAME):
        matrix = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(matrix[:3, :3], matrix[:3, 3], frame)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points):
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * R x + t; `residual` is the RMS fit error when produced by a solver."""
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residual: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if not self.scale > 0:
            raise ValueError(f"Similarity scale must be > 0, got {self.scale}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("Similarity rotation must be orthonormal with det +1")
        object.__setattr__(self, 'scale', float(self.scale))
        object.__setattr__(self, 'rotation', R)
        object.__setattr__(self, 'translation', np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points):
        return self.scale * (points @ self.rotation.T) + self.translation

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        R_inv = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, R_inv, -(R_inv @ self.translation) / self.scale)

    def compose(self, other):
        """self ∘ other (apply `other` first)."""
        return SimilarityTransform(self.scale * other.scale,
                                   self.rotation @ other.rotation,
                                   self.scale * (self.rotation @ other.translation) + self.translation)

    def to_dict(self):
        return {'scale': self.scale, 'rotation': self.rotation.tolist(),
                'translation': self.translation.tolist(), 'residual': self.residual}


def _check_mask(mask, shape, owner):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"{owner} mask shape {mask.shape} does not match map shape {shape}")
    return mask


@dataclass
class Pointmap:
    """H×W×3 points expressed in camera frame `frame`, with a validity mask."""
    points: np.ndarray
    frame: str
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 3 or self.points.shape[-1] != 3:
            raise ValueError(f"Pointmap must be H×W×3, got {self.points.shape}")
        if self.mask is None:
            self.mask = np.isfinite(self.points).all(axis=-1)
        self.mask = _check_mask(self.mask, self.points.shape[:2], 'Pointmap')
        if not np.isfinite(self.points[self.mask]).all():
            raise ValueError("Pointmap has non-finite entries on valid pixels")

    @property
    def shape(self):
        return self.points.shape[:2]

    def valid_points(self):
        return self.points[self.mask]

    def scaled(self, s):
        return Pointmap(self.points * s, self.frame, self.mask.copy())


@dataclass
class DepthMap:
    depth: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.depth = np.asarray(self.depth)
        if self.depth.ndim != 2:
            raise ValueError(f"Depth map must be H×W, got {self.depth.shape}")
        if self.mask is None:
            self.mask = np.isfinite(self.depth) & (self.depth > 0)
        self.mask = _check_mask(self.mask, self.depth.shape, 'DepthMap')
        valid = self.depth[self.mask]
        if not (np.isfinite(valid).all() and (valid > 0).all()):
            raise ValueError("Depth map has non-positive or non-finite entries on valid pixels")

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class NormalMap:
    """H×W×3 unit normals in view space, oriented toward the camera of `frame`."""
    normals: np.ndarray
    frame: str
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.normals = np.asarray(self.normals)
        if self.normals.ndim != 3 or self.normals.shape[-1] != 3:
            raise ValueError(f"Normal map must be H×W×3, got {self.normals.shape}")
        if self.mask is None:
            self.mask = np.isfinite(self.normals).all(axis=-1)
        self.mask = _check_mask(self.mask, self.normals.shape[:2], 'NormalMap')
        norms = np.linalg.norm(self.normals[self.mask], axis=-1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError("Normal map has non-unit normals on valid pixels")

    @property
    def shape(self):
        return self.normals.shape[:2]


def pixel_grid(height, width):
    """Integer pixel coordinates (u, v) as two H×W float arrays."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing='ij')
    return u, v


def unproject_depth_to_pointmap(depth, K, frame='view0'):
    """
    Back-project a depth map: p(u,v) = ((u-cx)·d/fx, (v-cy)·d/fy, d)

    Args:
        depth: DepthMap
        K: CameraIntrinsics at the depth map's resolution
        frame: Frame identifier of the resulting local pointmap

    Returns:
        Pointmap in the local camera frame, mask copied from the depth map
    """
    if depth.shape != (K.height, K.width):
        raise ValueError(f"Depth resolution {depth.shape} does not match intrinsics {(K.height, K.width)}")
    if not (K.fx > 0 and K.fy > 0):
        raise ValueError("Focal lengths must be positive")
    u, v = pixel_grid(K.height, K.width)
    d = np.where(depth.mask, depth.depth, 0.0).astype(np.float64)
    points = np.stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d], axis=-1)
    return Pointmap(points, frame, depth.mask.copy())


def pointmap_to_depth(pm, local_frame):
    """Depth is the z channel of a pointmap in its own camera frame; pixels with z <= 0 become invalid."""
    if pm.frame == WORLD_FRAME:
        raise ValueError("Cannot read depth from a world-frame pointmap")
    if pm.frame != local_frame:
        raise ValueError(f"Pointmap is expressed in frame '{pm.frame}', not the local frame '{local_frame}'")
    z = pm.points[..., 2]
    mask = pm.mask & (z > 0)
    return DepthMap(np.where(mask, z, 0.0), mask)


def relative_transform(src_pose, dst_pose):
    """Rotation and translation taking src-camera coordinates to dst-camera coordinates."""
    R = dst_pose.rotation.T @ src_pose.rotation
    t = dst_pose.rotation.T @ (src_pose.translation - dst_pose.translation)
    return R, t


def transform_pointmap(pm, src_pose, dst_pose):
    """
    Re-express a pointmap in another camera frame: p -> dst_pose⁻¹ ∘ src_pose (p)

    Args:
        pm: Pointmap expressed in src_pose.frame
        src_pose: Camera-to-world pose of the pointmap's frame
        dst_pose: Camera-to-world pose of the target frame

    Returns:
        Pointmap in dst_pose.frame with the same mask
    """
    if pm.frame != src_pose.frame:
        raise ValueError(f"Pointmap frame '{pm.frame}' does not match source pose frame '{src_pose.frame}'")
    R, t = relative_transform(src_pose, dst_pose)
    moved = pm.points @ R.T + t
    points = np.where(pm.mask[..., None], moved, pm.points)
    return Pointmap(points, dst_pose.frame, pm.mask.copy())


def transform_normals(nm, src_pose, dst_pose):
    """Normals rotate with the frame change; translation does not apply."""
    if nm.frame != src_pose.frame:
        raise ValueError(f"Normal map frame '{nm.frame}' does not match source pose frame '{src_pose.frame}'")
    R, _ = relative_transform(src_pose, dst_pose)
    normals = np.where(nm.mask[..., None], nm.normals @ R.T, nm.normals)
    return NormalMap(normals, dst_pose.frame, nm.mask.copy())


def _axis_tangent(points, mask, axis):
    """Central difference along `axis` with forward/backward fallback at gaps and borders."""
    n = points.shape[axis]
    fwd = np.zeros_like(points)
    bwd = np.zeros_like(points)
    fwd_ok = np.zeros(mask.shape, dtype=bool)
    bwd_ok = np.zeros(mask.shape, dtype=bool)

    head = [slice(None)] * 2
    tail = [slice(None)] * 2
    head[axis] = slice(0, n - 1)
    tail[axis] = slice(1, n)
    head, tail = tuple(head), tuple(tail)

    # fwd[i] = p[i+1], bwd[i] = p[i-1]
    fwd[head] = points[tail]
    fwd_ok[head] = mask[tail]
    bwd[tail] = points[head]
    bwd_ok[tail] = mask[head]

    central = fwd_ok & bwd_ok
    tangent = np.where(central[..., None], fwd - bwd,
                       np.where(fwd_ok[..., None], fwd - points,
                                np.where(bwd_ok[..., None], points - bwd, 0.0)))
    return tangent, mask & (fwd_ok | bwd_ok)


def normals_from_pointmap(pm):
    """
    Finite-difference normals: n = normalize(t_u × t_v), flipped so ⟨n, -p⟩ >= 0

    Tangents use central differences with forward/backward fallback. Pixels
    without a valid neighbor along either image axis, or whose tangents are
    parallel, are masked invalid.

    Args:
        pm: Pointmap (normals are expressed in pm.frame)

    Returns:
        NormalMap oriented toward the origin of pm.frame
    """
    if not pm.mask.any():
        raise ValueError("Cannot derive normals from an entirely invalid pointmap")
    points = np.where(pm.mask[..., None], pm.points, 0.0).astype(np.float64)
    t_u, ok_u = _axis_tangent(points, pm.mask, axis=1)
    t_v, ok_v = _axis_tangent(points, pm.mask, axis=0)

    n = np.cross(t_u, t_v)
    length = np.linalg.norm(n, axis=-1)
    scale = np.linalg.norm(t_u, axis=-1) * np.linalg.norm(t_v, axis=-1)
    mask = ok_u & ok_v & (length > 1e-12 * scale) & (length > 0)

    n = n / np.where(mask, length, 1.0)[..., None]
    facing = np.einsum('hwc,hwc->hw', n, -points)
    n = np.where((facing < 0)[..., None], -n, n)
    n = np.where(mask[..., None], n, 0.0)
    return NormalMap(n, pm.frame, mask)


def norm_factor(pm1, pm2):
    """
    Scale normalizer z = mean ‖p‖ over the valid pixels of both pointmaps

    Args:
        pm1, pm2: Pointmaps expressed in the same frame

    Returns:
        Positive float
    """
    if pm1.frame != pm2.frame:
        raise ValueError(f"Pointmaps are in different frames ('{pm1.frame}' vs '{pm2.frame}')")
    dists = np.concatenate([np.linalg.norm(pm1.valid_points(), axis=-1),
                            np.linalg.norm(pm2.valid_points(), axis=-1)])
    if dists.size == 0:
        raise ValueError("No valid pixels in either pointmap")
    z = float(dists.mean())
    if z <= 0:
        raise ValueError("Normalization factor is zero (all valid points at the origin)")
    return z


def recover_intrinsics_from_pointmap(pm, fix_principal_point=True, local_frame=None):
    """
    Least-squares pinhole fit of fx, fy (and optionally cx, cy) to a local pointmap

    Per axis: u = fx · x/z + cx is linear in (fx, cx); with the principal point
    fixed to the image center only fx is solved.

    Args:
        pm: Local-frame Pointmap
        fix_principal_point: Pin (cx, cy) to (W/2, H/2)

    Returns:
        CameraIntrinsics at the pointmap's resolution
    """
    if local_frame is not None and pm.frame != local_frame:
        raise ValueError(f"Pointmap is expressed in frame '{pm.frame}', not '{local_frame}'")
    height, width = pm.shape
    u, v = pixel_grid(height, width)
    z = pm.points[..., 2]
    valid = pm.mask & (z > 0)
    if valid.sum() < MIN_INTRINSICS_PIXELS:
        raise ValueError(f"Need at least {MIN_INTRINSICS_PIXELS} valid pixels with z > 0, got {int(valid.sum())}")
    depths = z[valid]
    if np.ptp(depths) <= MIN_DEPTH_SPREAD * float(np.abs(depths).max()):
        raise ValueError("Degenerate intrinsics fit: all valid pixels lie on one fronto-parallel plane")

    a = pm.points[..., 0][valid] / z[valid]
    b = pm.points[..., 1][valid] / z[valid]
    us, vs = u[valid], v[valid]

    def fit_axis(ray, pixel, center):
        if fix_principal_point:
            denom = float(ray @ ray)
            if denom <= 1e-18 * ray.size or np.ptp(ray) <= 1e-12:
                raise ValueError("Rank-deficient intrinsics fit: normalized coordinates do not vary")
            return float(ray @ (pixel - center) / denom), center
        A = np.stack([ray, np.ones_like(ray)], axis=1)
        if np.linalg.matrix_rank(A, tol=1e-9 * max(1.0, np.abs(A).max())) < 2:
            raise ValueError("Rank-deficient intrinsics fit: normalized coordinates do not vary")
        (f, c), *_ = np.linalg.lstsq(A, pixel, rcond=None)
        return float(f), float(c)

    fx, cx = fit_axis(a, us, width / 2.0)
    fy, cy = fit_axis(b, vs, height / 2.0)
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


def relative_pose_procrustes(src_points, dst_points, with_scale=True):
    """
    Closed-form Kabsch-Umeyama fit of dst ≈ s·R·src + t

    Args:
        src_points: Array of shape (n, 3)
        dst_points: Array of shape (n, 3)
        with_scale: Solve for s (otherwise s = 1)

    Returns:
        SimilarityTransform with the RMS residual
    """
    X = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(dst_points, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape:
        raise ValueError(f"Point lists differ in length: {len(X)} vs {len(Y)}")
    if len(X) < 3:
        raise ValueError(f"Procrustes needs at least 3 correspondences, got {len(X)}")

    mu_x, mu_y = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mu_x, Y - mu_y
    spread = np.linalg.svd(Xc, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise ValueError("Degenerate (collinear) point configuration")

    H = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt

    scale = 1.0
    if with_scale:
        var_x = (Xc ** 2).sum() / len(X)
        scale = float(np.trace(np.diag(D) @ S) / var_x)
    t = mu_y - scale * R @ mu_x

    residual = float(np.sqrt(((scale * X @ R.T + t - Y) ** 2).sum(axis=1).mean()))
    return SimilarityTransform(scale, R, t, residual)


def rotation_angle_deg(R):
    """Geodesic angle of a rotation matrix in degrees."""
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def rotation_about_axis(axis, angle_rad):
    """Rodrigues' formula."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * K @ K
