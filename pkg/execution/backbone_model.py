# backbone_model.py
# Shared-weight encoder/decoder dense transformer with pointmap, normal, matching and depth heads

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from globals import (
    PATCH_SIZE, EMBED_DIM, DECODER_DIM, N_ENC_BLOCKS, N_DEC_BLOCKS, N_HEADS, DESCRIPTOR_DIM,
    MLP_RATIO, INIT_STD, ROPE_BASE_FREQUENCY, COARSE_RESOLUTION, CHECKPOINT_SCHEMA_VERSION,
    HEAD_NAMES, VIEW_FRAMES, NUM_WORKERS
)
from rope_encoding import RopeConfig, apply_axial_rope_2d

torch.set_num_threads(NUM_WORKERS)

STAGE_TAGS = ('init', 'stage1', 'stage2', 'heads-only')
HEAD_CHANNELS = {'pointmap': 6, 'normal': 3, 'depth': 1}


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = PATCH_SIZE
    embed_dim: int = EMBED_DIM
    decoder_dim: int = DECODER_DIM
    n_enc_blocks: int = N_ENC_BLOCKS
    n_dec_blocks: int = N_DEC_BLOCKS
    n_heads: int = N_HEADS
    descriptor_dim: int = DESCRIPTOR_DIM
    mlp_ratio: int = MLP_RATIO
    rope_base: float = ROPE_BASE_FREQUENCY
    rope_interpolate: bool = True
    train_resolution: int = COARSE_RESOLUTION

    def __post_init__(self):
        problems = []
        for name in ('patch_size', 'embed_dim', 'decoder_dim', 'n_heads', 'descriptor_dim', 'mlp_ratio',
                     'train_resolution'):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ('n_enc_blocks', 'n_dec_blocks'):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.n_heads >= 1:
            for name in ('embed_dim', 'decoder_dim'):
                dim = getattr(self, name)
                if dim % self.n_heads != 0:
                    problems.append(f"{name} ({dim}) must be divisible by n_heads ({self.n_heads})")
                elif (dim // self.n_heads) % 4 != 0:
                    problems.append(f"{name} / n_heads ({dim // self.n_heads}) must be a multiple of 4 for axial RoPE")
        if self.patch_size >= 1 and self.train_resolution % self.patch_size != 0:
            problems.append(f"patch_size ({self.patch_size}) must divide train_resolution ({self.train_resolution})")
        if problems:
            raise ValueError("Invalid model config: " + "; ".join(problems))

    @property
    def train_grid(self):
        side = self.train_resolution // self.patch_size
        return (side, side)

    def rope(self, dim):
        return RopeConfig(dim // self.n_heads, self.rope_base, self.train_grid, self.rope_interpolate)


def count_parameters(cfg):
    """
    Closed-form parameter count.

    Encoder block (E, h = mlp_ratio·E): 4E² + 2Eh + 9E + h
    Decoder block (D, g = mlp_ratio·D): 8D² + 2Dg + 17D + g
    Stem and norms: 3·ps²·E + E (patch embed), 2E, E·D + D (decoder embed), 2D
    Each head with C channels: ps²·C·(D + 1), C = 6, 3, descriptor_dim, 1

    Returns:
        Dict with 'encoder', 'decoder', 'heads', 'total'
    """
    E, D, ps = cfg.embed_dim, cfg.decoder_dim, cfg.patch_size
    h, g = cfg.mlp_ratio * E, cfg.mlp_ratio * D
    enc_block = 4 * E * E + 2 * E * h + 9 * E + h
    dec_block = 8 * D * D + 2 * D * g + 17 * D + g
    encoder = 3 * ps * ps * E + E + cfg.n_enc_blocks * enc_block + 2 * E
    decoder = E * D + D + cfg.n_dec_blocks * dec_block + 2 * D
    heads = sum(ps * ps * c * (D + 1) for c in (6, 3, cfg.descriptor_dim, 1))
    return {'encoder': encoder, 'decoder': decoder, 'heads': heads, 'total': encoder + decoder + heads}


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (B, rows·cols, C)
    grid: tuple

    def __post_init__(self):
        if self.tokens.shape[1] != self.grid[0] * self.grid[1]:
            raise ValueError(f"Token count {self.tokens.shape[1]} does not match grid {self.grid}")


@dataclass
class HeadOutputs:
    """Per-view network outputs, channel-last at input resolution."""
    local: torch.Tensor  # (B, H, W, 3) pointmap in own frame
    cross: torch.Tensor  # (B, H, W, 3) pointmap in the other view's frame
    normals: torch.Tensor  # (B, H, W, 3) unit
    depth: torch.Tensor  # (B, H, W) dedicated depth head, positive
    descriptors: torch.Tensor  # (B, H, W, descriptor_dim) unit
    frame: str = VIEW_FRAMES[0]
    cross_frame: str = VIEW_FRAMES[1]

    def intrinsic_invariant(self):
        """Pointmap coupled with normals per pixel: (B, H, W, 6)."""
        return torch.cat([self.local, self.normals], dim=-1)

    def crop(self, height, width):
        return HeadOutputs(self.local[:, :height, :width], self.cross[:, :height, :width],
                           self.normals[:, :height, :width], self.depth[:, :height, :width],
                           self.descriptors[:, :height, :width], self.frame, self.cross_frame)

    def to_numpy(self, index=0):
        """One batch element as float32 arrays keyed like the prediction file format."""
        def arr(t):
            return t[index].detach().cpu().numpy().astype(np.float32)
        return {
            'pointmap': arr(self.local),
            'cross_pointmap': arr(self.cross),
            'normal': arr(self.normals),
            'depth': arr(self.local[..., 2]),
            'depth_head': arr(self.depth),
            'pointmap_normal': arr(self.intrinsic_invariant()),
            'descriptor': arr(self.descriptors),
            'frame': self.frame,
            'cross_frame': self.cross_frame,
        }


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    """Multi-head self-attention with axial RoPE on queries and keys."""

    def __init__(self, dim, num_heads, rope):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.rope = rope
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, grid):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        q = apply_axial_rope_2d(q, grid, self.rope)
        k = apply_axial_rope_2d(k, grid, self.rope)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, N, C))


class CrossAttention(nn.Module):
    """Queries from one view, keys/values from the other; token counts may differ."""

    def __init__(self, dim, num_heads, rope):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.rope = rope
        self.projq = nn.Linear(dim, dim)
        self.projk = nn.Linear(dim, dim)
        self.projv = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, y, grid_x, grid_y):
        B, Nx, C = x.shape
        Ny = y.shape[1]
        heads = self.num_heads
        q = self.projq(x).reshape(B, Nx, heads, C // heads).transpose(1, 2)
        k = self.projk(y).reshape(B, Ny, heads, C // heads).transpose(1, 2)
        v = self.projv(y).reshape(B, Ny, heads, C // heads).transpose(1, 2)
        q = apply_axial_rope_2d(q, grid_x, self.rope)
        k = apply_axial_rope_2d(k, grid_y, self.rope)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, Nx, C))


class EncoderBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio, rope):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rope)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, x, grid):
        x = x + self.attn(self.norm1(x), grid)
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """Self-attention, cross-attention to the other view, MLP; all pre-norm with residuals."""

    def __init__(self, dim, num_heads, mlp_ratio, rope):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rope)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_y = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, num_heads, rope)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, x, y, grid_x, grid_y):
        x = x + self.attn(self.norm1(x), grid_x)
        x = x + self.cross_attn(self.norm2(x), self.norm_y(y), grid_x, grid_y)
        return x + self.mlp(self.norm3(x))


class LinearHead(nn.Module):
    """Per-token linear projection to ps²·C values, pixel-shuffled to full resolution."""

    def __init__(self, dim, patch_size, channels):
        super().__init__()
        self.patch_size = patch_size
        self.channels = channels
        self.proj = nn.Linear(dim, patch_size * patch_size * channels)

    def forward(self, grid):
        B = grid.tokens.shape[0]
        rows, cols = grid.grid
        x = self.proj(grid.tokens).transpose(1, 2).reshape(B, -1, rows, cols)
        x = F.pixel_shuffle(x, self.patch_size)  # (B, C, rows·ps, cols·ps)
        return x.permute(0, 2, 3, 1)


def canonical_rays(height, width, dtype=torch.float32):
    """Pointmap prior ((u - W/2)/f, (v - H/2)/f, 1) with f = max(H, W)."""
    focal = float(max(height, width))
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing='ij')
    return torch.stack([(u - width / 2) / focal, (v - height / 2) / focal, torch.ones_like(u)], dim=-1)


class GeometryTransformer(nn.Module):
    """
    Two-view dense geometry network: one encoder and one decoder block list
    shared by both views; the decoder is applied symmetrically so swapping the
    inputs swaps the outputs.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        ps = cfg.patch_size
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, kernel_size=ps, stride=ps)
        self.enc_blocks = nn.ModuleList([EncoderBlock(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio, cfg.rope(cfg.embed_dim))
                                         for _ in range(cfg.n_enc_blocks)])
        self.enc_norm = nn.LayerNorm(cfg.embed_dim)
        self.decoder_embed = nn.Linear(cfg.embed_dim, cfg.decoder_dim)
        self.dec_blocks = nn.ModuleList([DecoderBlock(cfg.decoder_dim, cfg.n_heads, cfg.mlp_ratio,
                                                      cfg.rope(cfg.decoder_dim))
                                         for _ in range(cfg.n_dec_blocks)])
        self.dec_norm = nn.LayerNorm(cfg.decoder_dim)
        self.heads = nn.ModuleDict({
            'pointmap': LinearHead(cfg.decoder_dim, ps, HEAD_CHANNELS['pointmap']),
            'normal': LinearHead(cfg.decoder_dim, ps, HEAD_CHANNELS['normal']),
            'matching': LinearHead(cfg.decoder_dim, ps, cfg.descriptor_dim),
            'depth': LinearHead(cfg.decoder_dim, ps, HEAD_CHANNELS['depth']),
        })
        self.apply(self._init_weights)
        nn.init.zeros_(self.heads['pointmap'].proj.weight)
        nn.init.zeros_(self.heads['pointmap'].proj.bias)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, std=INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def patchify(self, images):
        """(B, H, W, 3) images in [0, 1] -> TokenGrid of (H/ps)·(W/ps) tokens."""
        if images.ndim == 3:
            images = images[None]
        B, H, W, C = images.shape
        ps = self.cfg.patch_size
        if C != 3:
            raise ValueError(f"Expected 3 image channels, got {C}")
        if H % ps or W % ps:
            raise ValueError(f"Image size {H}x{W} is not a multiple of the patch size {ps}; pad first")
        x = self.patch_embed((images.permute(0, 3, 1, 2) - 0.5) / 0.5)
        return TokenGrid(x.flatten(2).transpose(1, 2), (H // ps, W // ps))

    def encode(self, grid):
        if grid.tokens.shape[-1] != self.cfg.embed_dim:
            raise ValueError(f"Encoder expects {self.cfg.embed_dim} channels, got {grid.tokens.shape[-1]}")
        x = grid.tokens
        for blk in self.enc_blocks:
            x = blk(x, grid.grid)
        return TokenGrid(x, grid.grid)

    def decode_pair(self, feat1, feat2):
        for feat in (feat1, feat2):
            if feat.tokens.shape[-1] != self.cfg.embed_dim:
                raise ValueError(f"Decoder expects {self.cfg.embed_dim} channels, got {feat.tokens.shape[-1]}")
        x1 = self.decoder_embed(self.enc_norm(feat1.tokens))
        x2 = self.decoder_embed(self.enc_norm(feat2.tokens))
        for blk in self.dec_blocks:
            x1, x2 = blk(x1, x2, feat1.grid, feat2.grid), blk(x2, x1, feat2.grid, feat1.grid)
        return TokenGrid(self.dec_norm(x1), feat1.grid), TokenGrid(self.dec_norm(x2), feat2.grid)

    def head_pointmap(self, grid):
        """(B, H, W, 6): local xyz then cross xyz offsets."""
        return self.heads['pointmap'](grid)

    def head_normal(self, grid):
        return F.normalize(self.heads['normal'](grid), dim=-1)

    def head_matching(self, grid):
        return F.normalize(self.heads['matching'](grid), dim=-1)

    def head_depth(self, grid):
        return torch.exp(self.heads['depth'](grid)[..., 0].clamp(-30.0, 30.0))

    def _heads(self, grid, frame, cross_frame):
        rows, cols = grid.grid
        ps = self.cfg.patch_size
        prior = canonical_rays(rows * ps, cols * ps, grid.tokens.dtype).to(grid.tokens.device)
        pts = self.head_pointmap(grid)
        return HeadOutputs(pts[..., :3] + prior, pts[..., 3:] + prior, self.head_normal(grid),
                           self.head_depth(grid), self.head_matching(grid), frame, cross_frame)

    def forward_pair(self, images1, images2):
        """
        Full two-view pass: patchify, shared encoder, shared symmetric decoder, heads.

        Args:
            images1, images2: (B, H, W, 3) tensors in [0, 1]; sizes multiples of patch_size

        Returns:
            Tuple (HeadOutputs for view 1, HeadOutputs for view 2)
        """
        feat1 = self.encode(self.patchify(images1))
        feat2 = self.encode(self.patchify(images2))
        dec1, dec2 = self.decode_pair(feat1, feat2)
        return (self._heads(dec1, VIEW_FRAMES[0], VIEW_FRAMES[1]),
                self._heads(dec2, VIEW_FRAMES[1], VIEW_FRAMES[0]))

    forward = forward_pair

    def backbone_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith('heads.')]

    def head_parameters(self, names):
        for name in names:
            if name not in HEAD_NAMES:
                raise ValueError(f"Unknown head '{name}' (expected one of {HEAD_NAMES})")
        return [p for name in names for p in self.heads[name].parameters()]


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict  # parameter name -> float32 tensor
    stage: str = 'init'
    step: int = 0
    optimizer: dict = field(default=None)

    def __post_init__(self):
        if self.stage not in STAGE_TAGS:
            raise ValueError(f"Unknown stage tag '{self.stage}' (expected one of {STAGE_TAGS})")


def init_params(cfg, seed):
    """Fresh, seed-determined parameters for `cfg`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GeometryTransformer(cfg)
    return Checkpoint(cfg, {k: v.detach().clone() for k, v in model.state_dict().items()}, 'init')


def build_model(ckpt):
    model = GeometryTransformer(ckpt.config)
    model.load_state_dict(ckpt.tensors, strict=True)
    return model


def snapshot(model, stage, step=0, optimizer=None):
    return Checkpoint(model.cfg, {k: v.detach().clone() for k, v in model.state_dict().items()}, stage, step,
                      optimizer)


def _expected_shapes(cfg):
    with torch.random.fork_rng(devices=[]):
        model = GeometryTransformer(cfg)
    return {k: tuple(v.shape) for k, v in model.state_dict().items()}


def save_checkpoint(ckpt, path):
    """
    Write a checkpoint: uint64 header length, JSON header, raw little-endian float32 payloads.

    The header holds schema_version, the model config, stage tag, step and a
    tensor directory (name -> dtype, shape, offset, nbytes). Optimizer moment
    tensors are stored under 'optimizer.state.<param>.<key>' names.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payloads = []
    directory = {}
    offset = 0

    def add(name, tensor):
        nonlocal offset
        data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype='<f4').tobytes()
        directory[name] = {'dtype': 'float32', 'shape': list(tensor.shape), 'offset': offset, 'nbytes': len(data)}
        payloads.append(data)
        offset += len(data)

    for name, tensor in ckpt.tensors.items():
        add(name, tensor)

    optimizer_header = None
    if ckpt.optimizer is not None:
        optimizer_header = {'param_groups': ckpt.optimizer['param_groups'], 'state_keys': {}}
        for idx, state in ckpt.optimizer['state'].items():
            optimizer_header['state_keys'][str(idx)] = sorted(state)
            for key in sorted(state):
                add(f'optimizer.state.{idx}.{key}', torch.as_tensor(state[key], dtype=torch.float32))

    header = json.dumps({
        'schema_version': CHECKPOINT_SCHEMA_VERSION,
        'config': asdict(ckpt.config),
        'stage': ckpt.stage,
        'step': int(ckpt.step),
        'tensors': directory,
        'optimizer': optimizer_header,
    }).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(np.array([len(header)], dtype='<u8').tobytes())
        f.write(header)
        for data in payloads:
            f.write(data)


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint, validating every tensor against the config."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ValueError(f"Checkpoint {path} is truncated (no header)")
    header_len = int(np.frombuffer(raw[:8], dtype='<u8')[0])
    try:
        header = json.loads(raw[8:8 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"Checkpoint {path} has a corrupt header: {e}")
    if header.get('schema_version') != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"Unsupported checkpoint schema_version {header.get('schema_version')} "
                         f"(supported: {CHECKPOINT_SCHEMA_VERSION})")

    cfg = ModelConfig(**header['config'])
    body = raw[8 + header_len:]
    directory = header['tensors']

    def read(name):
        entry = directory[name]
        start, nbytes = entry['offset'], entry['nbytes']
        if start + nbytes > len(body):
            raise ValueError(f"Checkpoint payload for tensor '{name}' is truncated")
        values = np.frombuffer(body[start:start + nbytes], dtype='<f4')
        if values.size != int(np.prod(entry['shape'])):
            raise ValueError(f"Tensor '{name}' payload size does not match its shape {entry['shape']}")
        return torch.from_numpy(values.reshape(entry['shape']).astype(np.float32))

    tensors = {}
    for name, shape in _expected_shapes(cfg).items():
        if name not in directory:
            raise ValueError(f"Checkpoint is missing tensor '{name}'")
        if tuple(directory[name]['shape']) != shape:
            raise ValueError(f"Tensor '{name}' has shape {tuple(directory[name]['shape'])}, config expects {shape}")
        tensors[name] = read(name)
    unexpected = [n for n in directory if n not in tensors and not n.startswith('optimizer.')]
    if unexpected:
        raise ValueError(f"Checkpoint has unexpected tensor '{unexpected[0]}'")

    optimizer = None
    if header.get('optimizer'):
        state = {}
        for idx, keys in header['optimizer']['state_keys'].items():
            state[int(idx)] = {key: read(f'optimizer.state.{idx}.{key}') for key in keys}
        optimizer = {'state': state, 'param_groups': header['optimizer']['param_groups']}

    return Checkpoint(cfg, tensors, header['stage'], header.get('step', 0), optimizer)
