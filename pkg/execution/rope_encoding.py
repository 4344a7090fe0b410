# rope_encoding.py
# Axial 2D rotary position encoding with position interpolation for large grids

from dataclasses import dataclass
from functools import lru_cache

import torch

from globals import ROPE_BASE_FREQUENCY


@dataclass(frozen=True)
class RopeConfig:
    """
    head_dim: per-head channels (half per image axis, rotated in pairs)
    train_grid: (rows, cols) patch grid the encoding was trained at
    interpolate: compress positions into the trained range on larger grids
    """
    head_dim: int
    base_frequency: float = ROPE_BASE_FREQUENCY
    train_grid: tuple = (4, 4)
    interpolate: bool = True

    def __post_init__(self):
        problems = []
        if self.head_dim <= 0 or self.head_dim % 4 != 0:
            problems.append(f"head_dim must be a positive multiple of 4, got {self.head_dim}")
        if not self.base_frequency > 0:
            problems.append(f"base_frequency must be > 0, got {self.base_frequency}")
        if len(self.train_grid) != 2 or any(int(g) < 1 for g in self.train_grid):
            problems.append(f"train_grid components must be >= 1, got {self.train_grid}")
        if problems:
            raise ValueError("Invalid RoPE config: " + "; ".join(problems))
        object.__setattr__(self, 'train_grid', (int(self.train_grid[0]), int(self.train_grid[1])))


def rope_angles_1d(positions, dim, base=ROPE_BASE_FREQUENCY):
    """
    Rotation angles: angle(p, k) = p · base^(-2k/dim), k in [0, dim/2)

    Args:
        positions: 1D sequence or tensor of (possibly fractional) positions
        dim: Even channel count rotated by these angles
        base: Base frequency

    Returns:
        float64 tensor of shape (len(positions), dim/2)
    """
    if dim % 2 != 0:
        raise ValueError(f"RoPE dimension must be even, got {dim}")
    positions = torch.as_tensor(positions, dtype=torch.float64)
    inv_freq = 1.0 / (base ** (torch.arange(0, dim, 2, dtype=torch.float64) / dim))
    return positions[:, None] * inv_freq[None, :]


def interpolated_positions(indices, train_len, infer_len, interpolate=True):
    """Position interpolation m -> m·L/L', applied only when L' > L."""
    indices = torch.as_tensor(indices, dtype=torch.float64)
    if not interpolate or infer_len <= train_len:
        return indices
    return (indices * train_len) / infer_len


def axial_positions(grid, cfg):
    """Effective (row, col) position of every token of a row-major grid."""
    rows, cols = grid
    row_pos = interpolated_positions(torch.arange(rows), cfg.train_grid[0], rows, cfg.interpolate)
    col_pos = interpolated_positions(torch.arange(cols), cfg.train_grid[1], cols, cfg.interpolate)
    return row_pos.repeat_interleave(cols), col_pos.repeat(rows)


@lru_cache(maxsize=64)
def _cos_sin(grid, cfg):
    row_pos, col_pos = axial_positions(grid, cfg)
    half = cfg.head_dim // 2
    angles = torch.cat([rope_angles_1d(row_pos, half, cfg.base_frequency),
                        rope_angles_1d(col_pos, half, cfg.base_frequency)], dim=-1)
    return torch.cos(angles), torch.sin(angles)


def rotate_pairs(x, cos, sin):
    """Rotate consecutive channel pairs (x[2k], x[2k+1]) by the given angles."""
    x_even = x[..., ::2]
    x_odd = x[..., 1::2]
    rotated = torch.stack([x_even * cos - x_odd * sin, x_even * sin + x_odd * cos], dim=-1)
    return rotated.flatten(-2)


def apply_axial_rope_2d(tokens, grid, cfg):
    """
    Rotate the first half of each head's channels by row position and the
    second half by column position.

    Args:
        tokens: Tensor (..., rows·cols, head_dim) in row-major token order
        grid: (rows, cols)
        cfg: RopeConfig

    Returns:
        Tensor of the same shape and dtype
    """
    rows, cols = int(grid[0]), int(grid[1])
    if tokens.shape[-1] != cfg.head_dim:
        raise ValueError(f"Token channels {tokens.shape[-1]} do not match head_dim {cfg.head_dim}")
    if tokens.shape[-2] != rows * cols:
        raise ValueError(f"Token count {tokens.shape[-2]} does not match grid {rows}x{cols}")
    cos, sin = _cos_sin((rows, cols), cfg)
    cos = cos.to(device=tokens.device, dtype=tokens.dtype)
    sin = sin.to(device=tokens.device, dtype=tokens.dtype)
    return rotate_pairs(tokens, cos, sin)
