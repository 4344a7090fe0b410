# sample_io.py
# Versioned on-disk format for view-pair samples and model predictions

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from globals import (
    SAMPLE_SCHEMA_VERSION, PREDICTION_SCHEMA_VERSION, NUM_WORKERS, DEFAULT_PRIMITIVES, DEFAULT_MIN_OVERLAP,
    COARSE_RESOLUTION
)
from geometry_core import CameraIntrinsics, RigidPose, DepthMap, NormalMap, unproject_depth_to_pointmap
from synth_scenes import RenderedView, ViewPairSample, make_view_pair_sample

# Per-view float payloads of a prediction directory and their channel counts
PREDICTION_FIELDS = {
    'pointmap': 3,
    'cross_pointmap': 3,
    'normal': 3,
    'depth': 1,
    'depth_head': 1,
    'pointmap_normal': 6,
    'descriptor': None,  # descriptor_dim, from meta.json
}


def write_float_array(path, array):
    np.ascontiguousarray(array, dtype='<f4').tofile(path)


def read_float_array(path, shape, field):
    """Read a little-endian float32 payload and check its size against `shape`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing {field} file: {path}")
    data = np.fromfile(path, dtype='<f4')
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"Corrupt {field} file {path.name}: expected {expected} float32 values, found {data.size}")
    return data.reshape(shape).astype(np.float32)


def to_uint8(image):
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    """Write an H×W×3 float image in [0, 1] as 8-bit RGB, or an H×W image as 8-bit grayscale."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[-1] != 3:
        raise ValueError(f"PNG images need 3 channels, got shape {image.shape}")
    pixels = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format='PNG')  # uint8 H×W -> L, H×W×3 -> RGB


def read_png(path, field):
    """Read an 8-bit PNG (RGB, RGBA or grayscale) as H×W×3 float32 with values k/255."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing {field} file: {path}")
    try:
        with Image.open(path) as png:
            pixels = np.asarray(png.convert('RGB'), dtype=np.uint8)
    except Exception as e:
        raise ValueError(f"Corrupt {field} file {path.name}: {e}")
    return pixels.astype(np.float32) / np.float32(255.0)


def write_mask(path, mask):
    write_png(path, np.where(mask, 255, 0).astype(np.uint8))


def read_mask(path, field, shape):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing {field} file: {path}")
    with Image.open(path) as png:
        if png.mode != 'L':
            raise ValueError(f"{field} file {path.name} must be 8-bit grayscale, got mode {png.mode}")
        mask = np.asarray(png) > 127
    if mask.shape != tuple(shape):
        raise ValueError(f"{field} has shape {mask.shape}, expected {tuple(shape)}")
    return mask


def _read_meta(directory, kind, version):
    meta_path = Path(directory) / 'meta.json'
    if not meta_path.exists():
        raise FileNotFoundError(f"Missing meta file: {meta_path}")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"Corrupt meta file {meta_path}: {e}")
    if meta.get('kind', kind) != kind:
        raise ValueError(f"{directory} holds a '{meta.get('kind')}' directory, expected '{kind}'")
    if meta.get('schema_version') != version:
        raise ValueError(f"Unsupported schema_version {meta.get('schema_version')} in {meta_path} "
                         f"(supported: {version})")
    return meta


def write_sample(sample, directory):
    """
    Write a ViewPairSample in the versioned sample layout.

    Layout: meta.json, image_{v}.png, mask_{v}.png, depth_{v}.bin (H·W float32),
    normal_{v}.bin (H·W·3 float32), matches.bin (uint32 pairs idx0, idx1)
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    height, width = sample.resolution
    meta = {
        'kind': 'sample',
        'schema_version': SAMPLE_SCHEMA_VERSION,
        'resolution': [int(height), int(width)],
        'seed': int(sample.seed),
        'tier': sample.tier,
        'generator': sample.generator,
        'n_matches': int(len(sample.matches)),
        'views': [],
    }
    for v, view in enumerate(sample.views):
        meta['views'].append({
            'frame': view.pose.frame,
            'intrinsics': view.intrinsics.to_dict(),
            'pose': view.pose.matrix().tolist(),
        })
        write_png(directory / f'image_{v}.png', view.image)
        write_mask(directory / f'mask_{v}.png', view.depth.mask)
        write_float_array(directory / f'depth_{v}.bin', view.depth.depth)
        write_float_array(directory / f'normal_{v}.bin', view.normals.normals)
    np.ascontiguousarray(sample.matches, dtype='<u4').tofile(directory / 'matches.bin')
    with open(directory / 'meta.json', 'w') as f:
        json.dump(meta, f, indent=2)


def read_sample(directory):
    """Read a sample directory back into a ViewPairSample (pointmaps are re-derived from depth)."""
    directory = Path(directory)
    meta = _read_meta(directory, 'sample', SAMPLE_SCHEMA_VERSION)
    height, width = meta['resolution']
    views = []
    for v, info in enumerate(meta['views']):
        K = CameraIntrinsics(**info['intrinsics'])
        pose = RigidPose.from_matrix(info['pose'], info['frame'])
        image = read_png(directory / f'image_{v}.png', f'image_{v}')
        if image.shape[:2] != (height, width):
            raise ValueError(f"image_{v} has shape {image.shape[:2]}, expected {(height, width)}")
        mask = read_mask(directory / f'mask_{v}.png', f'mask_{v}', (height, width))
        depth = DepthMap(read_float_array(directory / f'depth_{v}.bin', (height, width), 'depth'), mask)
        normals = NormalMap(read_float_array(directory / f'normal_{v}.bin', (height, width, 3), 'normal'),
                            info['frame'], mask.copy())
        views.append(RenderedView(image, depth, normals, unproject_depth_to_pointmap(depth, K, info['frame']),
                                  K, pose))

    matches_path = directory / 'matches.bin'
    if not matches_path.exists():
        raise FileNotFoundError(f"Missing matches file: {matches_path}")
    raw = np.fromfile(matches_path, dtype='<u4')
    if raw.size != 2 * meta['n_matches']:
        raise ValueError(f"Corrupt matches file: expected {2 * meta['n_matches']} uint32 values, found {raw.size}")
    matches = raw.reshape(-1, 2).astype(np.uint32)
    if matches.size and (matches.max(axis=0) >= height * width).any():
        raise ValueError("Corrupt matches file: pixel index out of range")

    return ViewPairSample(views, matches, meta['seed'], meta.get('tier', 'A'), meta.get('generator', {}))


def read_meta(directory):
    """meta.json of a sample or prediction directory, without loading payloads."""
    with open(Path(directory) / 'meta.json') as f:
        return json.load(f)


def list_sample_dirs(root):
    """Sorted subdirectories of `root` holding a meta.json."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {root}")
    return sorted(p for p in root.iterdir() if (p / 'meta.json').exists())


def write_prediction(views, directory, extra_meta=None):
    """
    Write per-view prediction arrays.

    Args:
        views: List of dicts with float arrays keyed by PREDICTION_FIELDS names
               plus 'frame', 'cross_frame' strings
        directory: Output directory
        extra_meta: Additional meta.json entries (checkpoint stage, source images)
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        'kind': 'prediction',
        'schema_version': PREDICTION_SCHEMA_VERSION,
        'descriptor_dim': int(views[0]['descriptor'].shape[-1]),
        'views': [],
    }
    meta.update(extra_meta or {})
    for v, view in enumerate(views):
        height, width = view['depth'].shape[:2]
        meta['views'].append({'resolution': [int(height), int(width)],
                              'frame': view['frame'], 'cross_frame': view['cross_frame']})
        for name in PREDICTION_FIELDS:
            write_float_array(directory / f'{name}_{v}.bin', view[name])
        write_png(directory / f'normal_vis_{v}.png', (view['normal'] + 1.0) / 2.0)
        write_png(directory / f'depth_vis_{v}.png', _minmax(view['depth']))
    with open(directory / 'meta.json', 'w') as f:
        json.dump(meta, f, indent=2)


def read_prediction(directory):
    """Inverse of write_prediction; returns (list of per-view dicts, meta)."""
    directory = Path(directory)
    meta = _read_meta(directory, 'prediction', PREDICTION_SCHEMA_VERSION)
    views = []
    for v, info in enumerate(meta['views']):
        height, width = info['resolution']
        view = {'frame': info['frame'], 'cross_frame': info['cross_frame']}
        for name, channels in PREDICTION_FIELDS.items():
            channels = meta['descriptor_dim'] if channels is None else channels
            shape = (height, width) if channels == 1 else (height, width, channels)
            view[name] = read_float_array(directory / f'{name}_{v}.bin', shape, name)
        views.append(view)
    return views, meta


@dataclass
class GenerateConfig:
    out: str = 'data'
    seed: int = 0
    n: int = 10
    resolution: int = COARSE_RESOLUTION
    n_primitives: int = DEFAULT_PRIMITIVES
    min_overlap: float = DEFAULT_MIN_OVERLAP

    def validate(self):
        problems = []
        if self.n < 1:
            problems.append(f"n must be >= 1, got {self.n}")
        if self.resolution < 1:
            problems.append(f"resolution must be >= 1, got {self.resolution}")
        if self.n_primitives < 1:
            problems.append(f"n_primitives must be >= 1, got {self.n_primitives}")
        if not 0 <= self.min_overlap <= 1:
            problems.append(f"min_overlap must lie in [0, 1], got {self.min_overlap}")
        if problems:
            raise ValueError("Invalid generate config: " + "; ".join(problems))


def generate_dataset(out_dir, seed, n, resolution, n_primitives=DEFAULT_PRIMITIVES,
                     min_overlap=DEFAULT_MIN_OVERLAP):
    """
    Generate and write `n` samples with seeds seed..seed+n-1 as sample_<seed> directories.

    Generation runs on GEO_NUM_WORKERS threads; every sample depends only on its seed.
    """
    if n < 1:
        raise ValueError(f"Number of samples must be >= 1, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def build(sample_seed):
        directory = out_dir / f'sample_{sample_seed:06d}'
        write_sample(make_view_pair_sample(sample_seed, resolution, n_primitives, min_overlap), directory)
        return directory

    seeds = list(range(seed, seed + n))
    if NUM_WORKERS > 1:
        with ThreadPoolExecutor(max_workers=NUM_WORKERS) as pool:
            dirs = list(pool.map(build, seeds))
    else:
        dirs = [build(s) for s in seeds]
    print(f"✓ Generated {len(dirs)} samples at {resolution}x{resolution} in {out_dir}")
    return dirs


def _minmax(values):
    low, high = float(values.min()), float(values.max())
    if high - low <= 0:
        return np.zeros_like(values)
    return (values - low) / (high - low)
