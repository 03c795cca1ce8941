"""On-the-fly information-intensive frame selection.

Instead of loading the training clip at uniform time intervals, expand the
window to ceil(alpha * tau) candidate frame pairs, score each pair by how
many redundancy-robust tokens land in it, then draw tau pairs without
replacement with probability proportional to the (remaining) counts. The
clip is reassembled in temporal order, so alpha = 1 reduces exactly to the
uniform baseline no matter the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rero
from .video import VideoClip, sample_uniform


@dataclass
class CandidateClip:
    """Evenly spaced candidate frames: 2*P frames forming P adjacent pairs."""

    clip: VideoClip
    frame_indices: np.ndarray
    alpha: float
    fell_back: bool = False

    @property
    def pair_count(self):
        return self.clip.t_frames // 2


def expand_candidates(source, tau, alpha, stride=1, start=0):
    """Take 2*ceil(alpha*tau) evenly spaced frames (spacing = stride).

    alpha = 1 degenerates to uniform sampling. A source too short for the
    expanded window falls back to alpha = 1 and flags it, so callers can
    count the degradations; a source too short even for that raises.
    """
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    pair_count = math.ceil(alpha * tau)
    needed = 2 * pair_count
    fell_back = False
    if start + stride * (needed - 1) >= source.t_frames:
        pair_count = tau
        needed = 2 * tau
        alpha = 1.0
        fell_back = True
    clip = sample_uniform(source, needed, stride, start)
    indices = start + stride * np.arange(needed)
    return CandidateClip(clip, indices, float(alpha), fell_back)


def count_rero_per_pair(mask, pair_count):
    """Tokens kept per candidate pair: c[i] = |ReRo tokens in pair i|.

    The mask must come from selecting over the candidate grid itself, so the
    counts sum to K.
    """
    if mask.grid.shape[0] != pair_count:
        raise ValueError(
            f"mask has {mask.grid.shape[0]} pairs, candidate clip has {pair_count}"
        )
    return mask.per_pair_counts()


def sample_pairs(counts, tau, seed, smooth_eps=1.0):
    """Sequential weighted sampling without replacement of tau pair indices.

    Each draw picks index i with probability weight_i / sum(remaining
    weights), removes it, and repeats; the result is sorted ascending so the
    reassembled clip is a valid sub-video. ``smooth_eps`` (default 1 token)
    is added to every count so all-zero or sparse clips stay sampleable;
    pass 0 to sample the raw counts exactly.
    """
    counts = np.asarray(counts, dtype=np.float64)
    p = counts.size
    if tau > p:
        raise ValueError(f"cannot draw {tau} pairs from {p} candidates")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    weights = counts + smooth_eps
    if (weights > 0).sum() < tau:
        raise ValueError("fewer positive-weight candidates than draws; enable smoothing")
    rng = np.random.default_rng(seed)
    remaining = weights.copy()
    picked = np.empty(tau, dtype=np.int64)
    for k in range(tau):
        total = remaining.sum()
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(remaining), r, side="right"))
        idx = min(idx, p - 1)  # guard the r == total float edge
        picked[k] = idx
        remaining[idx] = 0.0
    picked.sort()
    return picked


def build_clip(candidates, selection):
    """Concatenate the selected pairs, temporal order preserved."""
    selection = np.asarray(selection, dtype=np.int64)
    if selection.size and (selection.min() < 0 or selection.max() >= candidates.pair_count):
        raise IndexError("pair selection out of range")
    frame_idx = np.stack([2 * selection, 2 * selection + 1], axis=1).reshape(-1)
    src = candidates.clip
    return VideoClip(src.pixels[frame_idx].copy(), src.norm_mean, src.norm_std)


def select_frames(source, tau, alpha, stride, rho_pre, token_grid_fn, seed, smooth_eps=1.0, metric=rero.MetricKind.L2):
    """Full pipeline: expand -> embed -> importance -> count -> sample -> build.

    ``token_grid_fn(clip)`` embeds a candidate clip into a TokenGrid with the
    caller's current weights. Returns (clip, info dict).
    """
    cand = expand_candidates(source, tau, alpha, stride)
    grid = token_grid_fn(cand.clip)
    imp = rero.importance_map(grid, metric)
    mask = rero.select_rero(imp, rho_pre)
    counts = count_rero_per_pair(mask, cand.pair_count)
    selected = sample_pairs(counts, tau, seed, smooth_eps=smooth_eps)
    clip = build_clip(cand, selected)
    info = {
        "candidate_indices": cand.frame_indices.tolist(),
        "counts": counts.tolist(),
        "selected_pairs": selected.tolist(),
        "alpha": cand.alpha,
        "fell_back": cand.fell_back,
    }
    return clip, info
