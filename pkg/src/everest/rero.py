"""Redundancy-robust token selection.

Importance of a token is its distance to the token at the same spatial slot
in the previous pair: tokens whose content barely changed carry redundant
information and score near zero; tokens over real scene change score high.
Selection is a single global top-K over the whole (tau, J) grid, so the
per-pair keep count floats freely ("dynamic masking rate"). A second,
purely random subsample of the kept tokens forms the encoder-visible set;
the two stage fractions multiply to the conventional 10% visible budget.

All sizes round half-up, ties break by ascending flat index, and every
random draw is a pure function of its seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

RATIO_PRODUCT = 0.1
RATIO_TOL = 1e-9


class RatioConstraintError(ValueError):
    """rho_pre * rho_post deviates from the pre-training budget of 0.1."""


class MetricKind(str, Enum):
    L2 = "l2"
    L1 = "l1"
    NEG_COSINE = "neg_cosine"
    NEG_LINEAR_CKA = "neg_linear_cka"


def round_half_up(x):
    """Nearest integer, .5 rounding up; the reading of the bracket size [x]."""
    return int(math.floor(x + 0.5))


def distance(a, b, metric=MetricKind.L2):
    """Distance between two equal-length vectors under the chosen metric.

    Zero-norm convention: neg_cosine returns 0 when either vector has norm
    below 1e-12 (neutral rather than NaN on all-zero embeddings). The CKA
    variant degenerates for single vectors, so it is reduced to the negative
    squared cosine of the mean-centered vectors.
    """
    metric = MetricKind(metric)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"distance needs equal-length vectors, got {a.shape} vs {b.shape}")
    if metric is MetricKind.L2:
        return float(np.linalg.norm(a - b))
    if metric is MetricKind.L1:
        return float(np.abs(a - b).sum())
    if metric is MetricKind.NEG_COSINE:
        return float(-_cosine(a, b))
    return float(-_cosine(a - a.mean(), b - b.mean()) ** 2)


def _cosine(a, b):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return np.clip(a @ b / (na * nb), -1.0, 1.0)


def importance_map(grid, metric=MetricKind.L2):
    """Per-token importance, shape (tau, J).

    Row i >= 1 scores each token against the same slot one pair earlier;
    row 0 is forward-filled with row 1's scores so the first pair competes
    in the global top-K instead of being always-in or always-out.
    """
    metric = MetricKind(metric)
    k = grid.tokens if hasattr(grid, "tokens") else np.asarray(grid)
    tau = k.shape[0]
    if tau < 2:
        raise ValueError("importance needs at least two pairs (tau >= 2)")
    cur = k[1:].astype(np.float64, copy=False)
    prev = k[:-1].astype(np.float64, copy=False)
    if metric is MetricKind.L2:
        body = np.sqrt(((cur - prev) ** 2).sum(axis=2))
    elif metric is MetricKind.L1:
        body = np.abs(cur - prev).sum(axis=2)
    elif metric is MetricKind.NEG_COSINE:
        body = -_cosine_rows(cur, prev)
    else:
        body = -_cosine_rows(cur - cur.mean(axis=2, keepdims=True), prev - prev.mean(axis=2, keepdims=True)) ** 2
    out = np.empty(k.shape[:2], dtype=np.float64)
    out[1:] = body
    out[0] = body[0]
    return out


def _cosine_rows(a, b):
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    dot = (a * b).sum(axis=2)
    denom = na * nb
    out = np.zeros_like(dot)
    ok = (na >= 1e-12) & (nb >= 1e-12)
    out[ok] = np.clip(dot[ok] / denom[ok], -1.0, 1.0)
    return out


@dataclass
class ReRoMask:
    """Global top-K selection over an importance map.

    ``selected`` is ordered by the selection criterion (descending importance
    by default, ascending when the reverse ablation is requested), ties by
    ascending flat index. ``grid`` is the same set as a (tau, J) boolean.
    """

    grid: np.ndarray
    selected: np.ndarray
    rho_pre: float
    order: str = "descending"

    @property
    def count(self):
        return int(self.selected.size)

    def per_pair_counts(self):
        return self.grid.sum(axis=1).astype(np.int64)


@dataclass
class VisibleSet:
    """Random without-replacement subsample of a ReRo mask (encoder input)."""

    indices: np.ndarray  # ascending flat indices, subset of the mask
    rho_post: float

    @property
    def count(self):
        return int(self.indices.size)


def select_rero(importance, rho_pre, order="descending"):
    """Keep the round_half_up(tau*J*rho_pre) most important tokens globally.

    ``order='ascending'`` keeps the least important instead (the reversed
    ablation). Ties break by ascending flat index either way, so selection
    on a constant map is exactly the first K flat indices.
    """
    if not 0.0 < rho_pre <= 1.0:
        raise ValueError(f"rho_pre must be in (0, 1], got {rho_pre}")
    if order not in ("descending", "ascending"):
        raise ValueError(f"order must be descending|ascending, got {order!r}")
    imp = np.asarray(importance, dtype=np.float64)
    tau, j = imp.shape
    total = tau * j
    k = round_half_up(total * rho_pre)
    if k == 0:
        raise ValueError(f"rho_pre={rho_pre} keeps zero of {total} tokens")
    flat = imp.reshape(-1)
    key = -flat if order == "descending" else flat
    chosen = np.argsort(key, kind="stable")[:k]  # stable => ascending index on ties
    grid = np.zeros(total, dtype=bool)
    grid[chosen] = True
    return ReRoMask(grid.reshape(tau, j), chosen.astype(np.int64), float(rho_pre), order)


def subsample_visible(mask, rho_post, seed, allow_ratio_override=False):
    """Uniform without-replacement subsample of the ReRo set, size K*rho_post.

    Validates the pre-training budget rho_pre * rho_post == 0.1 unless
    explicitly overridden. Deterministic per seed.
    """
    if not 0.0 < rho_post <= 1.0:
        raise ValueError(f"rho_post must be in (0, 1], got {rho_post}")
    product = mask.rho_pre * rho_post
    if not allow_ratio_override and abs(product - RATIO_PRODUCT) > RATIO_TOL:
        raise RatioConstraintError(
            f"rho_pre*rho_post = {mask.rho_pre}*{rho_post} = {product:.6g} != {RATIO_PRODUCT}"
            " (pass allow_ratio_override to bypass)"
        )
    n = round_half_up(mask.count * rho_post)
    rng = np.random.default_rng(seed)
    picked = rng.choice(mask.selected, size=n, replace=False)
    return VisibleSet(np.sort(picked).astype(np.int64), float(rho_post))


def baseline_mask(kind, tokens_per_pair, tau, rho, seed):
    """The conventional masking policies the selection replaces.

    'random' draws round(J*rho) slots per pair independently; 'tube' draws
    one spatial pattern of round(J*rho) patches and repeats it across pairs.
    Returns a (tau, J) boolean grid of kept tokens.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    per_pair = round_half_up(tokens_per_pair * rho)
    rng = np.random.default_rng(seed)
    grid = np.zeros((tau, tokens_per_pair), dtype=bool)
    if kind == "random":
        for i in range(tau):
            grid[i, rng.choice(tokens_per_pair, size=per_pair, replace=False)] = True
    elif kind == "tube":
        cols = rng.choice(tokens_per_pair, size=per_pair, replace=False)
        grid[:, cols] = True
    else:
        raise ValueError(f"unknown baseline mask kind {kind!r}")
    return grid


def export_heatmap(importance, grid_shape, patch_size, out_dir, mask=None):
    """Write one grayscale PGM per pair at pixel resolution.

    Each pair's importance row is min-max normalized to [0, 255] (a constant
    row maps to 0) at patch resolution, then upscaled patch_size x by nearest
    neighbor. With a mask, a second image per pair zeroes the non-selected
    patches. Returns the list of written paths.
    """
    imp = np.asarray(importance, dtype=np.float64)
    tau, j = imp.shape
    gh, gw = grid_shape
    if gh * gw != j:
        raise ValueError(f"grid shape {grid_shape} incompatible with J={j}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(tau):
        row = imp[i]
        lo, hi = row.min(), row.max()
        if hi > lo:
            levels = np.rint((row - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            levels = np.zeros(j, dtype=np.uint8)
        img = levels.reshape(gh, gw).repeat(patch_size, 0).repeat(patch_size, 1)
        path = out_dir / f"pair_{i:03d}.pgm"
        _write_pgm(img, path)
        written.append(path)
        if mask is not None:
            masked = np.where(mask.grid[i].reshape(gh, gw), levels.reshape(gh, gw), 0)
            masked = masked.astype(np.uint8).repeat(patch_size, 0).repeat(patch_size, 1)
            mpath = out_dir / f"pair_{i:03d}_masked.pgm"
            _write_pgm(masked, mpath)
            written.append(mpath)
    return written


def _write_pgm(img, path):
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def dump_mask_json(mask, visible, path):
    """Machine-readable index dump for a selection run."""
    payload = {
        "rho_pre": mask.rho_pre,
        "rho_post": None if visible is None else visible.rho_post,
        "selected": [int(i) for i in mask.selected],
        "visible": None if visible is None else [int(i) for i in visible.indices],
    }
    Path(path).write_text(json.dumps(payload, indent=1))
    return payload
