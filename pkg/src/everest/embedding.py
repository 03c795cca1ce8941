"""Tube patch embedding and fixed positional tables.

A tube merges each pair of adjacent frames with one linear map: the clip
(2*tau, C, H, W) becomes a (tau, J, d) token grid where J = (H/s)*(W/s).
Each token sees exactly one 2 x s x s x C voxel block, flattened in
(frame, channel, row, col) order; ``extract_tubes`` materializes those
blocks so the embedding itself is a plain matrix product, which is also the
differentiable path the model uses.

Positional embeddings are fixed sinusoids, separable in time and flattened
space (first half of the channels encodes the pair index, second half the
spatial index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class TubeEmbedConfig:
    patch_size: int
    embed_dim: int
    temporal_kernel: int = 2  # fixed pairing of adjacent frames

    def tokens_per_pair(self, height, width):
        self.validate(height, width)
        return (height // self.patch_size) * (width // self.patch_size)

    def validate(self, height, width):
        s = self.patch_size
        if height % s or width % s:
            raise ValueError(f"frame {height}x{width} not divisible by patch size {s}")
        if self.temporal_kernel != 2:
            raise ValueError("temporal kernel is fixed at 2 frames")

    def block_dim(self, channels):
        return 2 * self.patch_size * self.patch_size * channels


@dataclass
class TokenGrid:
    """(tau, J, d) token values plus the provenance needed to map indices back.

    Flat index j corresponds to patch (row, col) = (j // (W/s), j % (W/s)).
    """

    tokens: np.ndarray
    patch_size: int
    height: int
    width: int

    @property
    def tau(self):
        return self.tokens.shape[0]

    @property
    def tokens_per_pair(self):
        return self.tokens.shape[1]

    @property
    def grid_shape(self):
        return self.height // self.patch_size, self.width // self.patch_size

    def patch_of(self, flat_index):
        cols = self.width // self.patch_size
        return flat_index // cols, flat_index % cols


def extract_tubes(frames, patch_size):
    """Rearrange normalized frames (2*tau, C, H, W) into (tau*J, 2*s*s*C) blocks.

    Row i*J + j holds the voxel block of pair i, patch j, flattened in
    (frame, channel, row, col) order.
    """
    t, c, h, w = frames.shape
    if t % 2:
        raise ValueError(f"clip must have an even frame count, got {t}")
    s = patch_size
    if h % s or w % s:
        raise ValueError(f"frame {h}x{w} not divisible by patch size {s}")
    gh, gw = h // s, w // s
    x = frames.reshape(t // 2, 2, c, gh, s, gw, s)
    # -> (tau, gh, gw, 2, c, s, s), then flatten patches and blocks
    x = x.transpose(0, 3, 5, 1, 2, 4, 6)
    return np.ascontiguousarray(x).reshape(t // 2 * gh * gw, 2 * s * s * c)


def tube_embed(frames, weights, bias, cfg):
    """Embed a normalized clip into a TokenGrid (value path, no gradients).

    weights: (d, 2*s*s*C), bias: (d,). Each token is the linear map of its
    voxel block.
    """
    t, c, h, w = frames.shape
    cfg.validate(h, w)
    blocks = extract_tubes(frames, cfg.patch_size)
    tokens = blocks @ weights.T + bias
    tau = t // 2
    j = cfg.tokens_per_pair(h, w)
    return TokenGrid(tokens.reshape(tau, j, weights.shape[0]), cfg.patch_size, h, w)


def tube_embed_graph(blocks, weights, bias):
    """Differentiable twin of tube_embed on pre-extracted blocks.

    blocks: constant (n, 2*s*s*C) array; weights/bias: Tensors. Returns an
    (n, d) Tensor recorded on the active graph.
    """
    x = T.Tensor(blocks)
    return T.matmul(x, T.transpose(weights)) + bias


def _sinusoid(n_pos, dim, dtype=np.float32):
    """Standard sin/cos table, (n_pos, dim)."""
    if dim % 2:
        raise ValueError("sinusoid dim must be even")
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.empty((n_pos, dim), dtype=dtype)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def positional(tau, tokens_per_pair, dim, dtype=np.float32):
    """Fixed positional table (tau * J, d): time sinusoid || space sinusoid."""
    if dim % 4:
        raise ValueError("positional dim must be divisible by 4")
    half = dim // 2
    pt = _sinusoid(tau, half, dtype)
    ps = _sinusoid(tokens_per_pair, half, dtype)
    table = np.empty((tau * tokens_per_pair, dim), dtype=dtype)
    table[:, :half] = np.repeat(pt, tokens_per_pair, axis=0)
    table[:, half:] = np.tile(ps, (tau, 1))
    return table


def add_positional(tokens, pe, subset=None):
    """Add positional rows; with a subset, row k receives pe[subset[k]].

    Works on plain arrays and on Tensors (ops recorded when a graph is
    active). Each surviving token always gets the embedding of its original
    (pair, patch) slot, so the result is invariant to how the subset is
    enumerated.
    """
    if subset is not None:
        subset = np.asarray(subset, dtype=np.intp)
        if subset.size and (subset.min() < 0 or subset.max() >= pe.shape[0]):
            raise IndexError("positional subset index out of range")
    rows = pe if subset is None else pe[subset]
    if isinstance(tokens, T.Tensor):
        if rows.shape[0] != tokens.data.shape[0]:
            raise ValueError("positional subset size mismatch")
        return tokens + T.Tensor(rows.astype(tokens.data.dtype, copy=False))
    if rows.shape[0] != tokens.shape[0]:
        raise ValueError("positional subset size mismatch")
    return tokens + rows
