"""Desk-scale masked video autoencoder.

The encoder is a pre-norm ViT over ONLY the visible tokens; the decoder runs
over the selected (ReRo) tokens only, never the full grid: visible slots
carry projected encoder latents, the rest a learned mask token, every slot
its original-position embedding. That sequence-length contract (encoder
|visible|, decoder |selected|) is where the whole efficiency claim lives,
so it is asserted here rather than left to convention.

Weight layout is a flat name -> Tensor dict so the optimizer, checkpoints
and gradient checks can treat parameters uniformly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embedding import positional


@dataclass(frozen=True)
class ToyArch:
    enc_depth: int = 4
    enc_dim: int = 96
    enc_heads: int = 4
    dec_depth: int = 2
    dec_dim: int = 48
    dec_heads: int = 4
    mlp_ratio: int = 4


@dataclass(frozen=True)
class Geometry:
    tau: int = 8
    patch_size: int = 4
    height: int = 32
    width: int = 32
    channels: int = 3

    @property
    def tokens_per_pair(self):
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def total_tokens(self):
        return self.tau * self.tokens_per_pair

    @property
    def block_dim(self):
        return 2 * self.patch_size * self.patch_size * self.channels

    @property
    def frames(self):
        return 2 * self.tau


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with tails beyond 2 std resampled."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class ModelParams:
    """All learnable weights plus the fixed positional tables."""

    def __init__(self, arch, geom, params, num_classes=None):
        self.arch = arch
        self.geom = geom
        self.params = params
        self.num_classes = num_classes
        self.pe_enc = positional(geom.tau, geom.tokens_per_pair, arch.enc_dim)
        self.pe_dec = positional(geom.tau, geom.tokens_per_pair, arch.dec_dim)

    @classmethod
    def init(cls, arch, geom, seed, num_classes=None, dtype=np.float32):
        rng = np.random.default_rng(seed)
        p = {}

        def leaf(name, arr):
            p[name] = T.Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

        fan_in = geom.block_dim
        bound = 1.0 / np.sqrt(fan_in)
        leaf("embed.w", rng.uniform(-bound, bound, size=(arch.enc_dim, fan_in)))
        leaf("embed.b", np.zeros(arch.enc_dim))

        def block(prefix, dim, mlp):
            leaf(f"{prefix}.ln1.g", np.ones(dim))
            leaf(f"{prefix}.ln1.b", np.zeros(dim))
            for nm in ("wq", "wk", "wv", "wo"):
                leaf(f"{prefix}.attn.{nm}", trunc_normal(rng, (dim, dim)))
            # no key bias: softmax over keys is invariant to a constant
            # score shift, so a key bias is a null parameter
            for nm in ("bq", "bv", "bo"):
                leaf(f"{prefix}.attn.{nm}", np.zeros(dim))
            leaf(f"{prefix}.ln2.g", np.ones(dim))
            leaf(f"{prefix}.ln2.b", np.zeros(dim))
            leaf(f"{prefix}.mlp.w1", trunc_normal(rng, (mlp * dim, dim)))
            leaf(f"{prefix}.mlp.b1", np.zeros(mlp * dim))
            leaf(f"{prefix}.mlp.w2", trunc_normal(rng, (dim, mlp * dim)))
            leaf(f"{prefix}.mlp.b2", np.zeros(dim))

        for i in range(arch.enc_depth):
            block(f"enc.{i}", arch.enc_dim, arch.mlp_ratio)

        leaf("dec.ln_in.g", np.ones(arch.enc_dim))
        leaf("dec.ln_in.b", np.zeros(arch.enc_dim))
        leaf("dec.proj.w", trunc_normal(rng, (arch.dec_dim, arch.enc_dim)))
        leaf("dec.proj.b", np.zeros(arch.dec_dim))
        leaf("dec.mask_token", trunc_normal(rng, (arch.dec_dim,)))
        for i in range(arch.dec_depth):
            block(f"dec.{i}", arch.dec_dim, arch.mlp_ratio)
        leaf("dec.ln_f.g", np.ones(arch.dec_dim))
        leaf("dec.ln_f.b", np.zeros(arch.dec_dim))
        leaf("pixel.w", trunc_normal(rng, (geom.block_dim, arch.dec_dim)))
        leaf("pixel.b", np.zeros(geom.block_dim))

        if num_classes is not None:
            leaf("head.ln.g", np.ones(arch.enc_dim))
            leaf("head.ln.b", np.zeros(arch.enc_dim))
            leaf("head.w", trunc_normal(rng, (num_classes, arch.enc_dim)))
            leaf("head.b", np.zeros(num_classes))

        return cls(arch, geom, p, num_classes)

    def add_head(self, num_classes, seed):
        """Attach a classification head (fine-tuning)."""
        rng = np.random.default_rng(seed)
        dt = self.params["embed.w"].dtype
        self.params["head.ln.g"] = T.Tensor(np.ones(self.arch.enc_dim, dtype=dt), requires_grad=True)
        self.params["head.ln.b"] = T.Tensor(np.zeros(self.arch.enc_dim, dtype=dt), requires_grad=True)
        self.params["head.w"] = T.Tensor(
            trunc_normal(rng, (num_classes, self.arch.enc_dim)).astype(dt), requires_grad=True
        )
        self.params["head.b"] = T.Tensor(np.zeros(num_classes, dtype=dt), requires_grad=True)
        self.num_classes = num_classes

    def param_count(self):
        return sum(t.size for t in self.params.values())

    def astype(self, dtype):
        """A converted deep copy (float64 for gradient checking)."""
        p = {k: T.Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return ModelParams(self.arch, self.geom, p, self.num_classes)

    def copy(self):
        return self.astype(self.params["embed.w"].dtype)

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None


def linear(x, w, b=None):
    """x (..., din) @ w(dout, din).T (+ b)."""
    if x.data.ndim == 2:
        y = T.matmul(x, T.transpose(w))
        return y if b is None else y + b
    lead = x.data.shape[:-1]
    flat = T.reshape(x, (-1, x.data.shape[-1]))
    y = T.matmul(flat, T.transpose(w))
    if b is not None:
        y = y + b
    return T.reshape(y, lead + (w.data.shape[0],))


def block_forward(x, p, prefix, heads):
    """Pre-norm transformer block: norm-attn-residual, norm-mlp-residual."""
    h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q = linear(h, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"])
    k = linear(h, p[f"{prefix}.attn.wk"])
    v = linear(h, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"])
    a = T.attention(q, k, v, heads)
    x = x + linear(a, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])
    h = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m = linear(T.gelu(linear(h, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])),
               p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    return x + m


def encode(x, mp):
    """Encoder over the visible tokens only; depth 0 is the identity."""
    if x.data.ndim < 2 or x.data.shape[-2] < 1:
        raise ValueError("encoder needs at least one visible token")
    for i in range(mp.arch.enc_depth):
        x = block_forward(x, mp.params, f"enc.{i}", mp.arch.enc_heads)
    return x


def decode(latents, masks, visibles, mp):
    """Predict pixel blocks for every selected token of every clip.

    latents: (B, n_vis, enc_dim) Tensor aligned with ``visibles``;
    masks/visibles: per-clip ReRoMask / VisibleSet with identical counts
    across the batch. The decoder sequence covers exactly the selected
    slots (ascending flat order): projected latents at visible slots, the
    learned mask token elsewhere, plus each slot's positional embedding.
    Returns (B, K, block_dim).
    """
    p = mp.params
    bsz, n_vis, _ = latents.data.shape
    if len(masks) != bsz or len(visibles) != bsz:
        raise ValueError("need one mask and one visible set per batch element")
    k = masks[0].count
    n_mask = k - n_vis

    perm = np.empty(bsz * k, dtype=np.intp)
    pe_rows = np.empty((bsz * k, mp.arch.dec_dim), dtype=latents.data.dtype)
    for b, (mask, vis) in enumerate(zip(masks, visibles)):
        if mask.count != k or vis.count != n_vis:
            raise ValueError("selection counts must match across the batch")
        slots = np.sort(mask.selected)
        vis_slots = vis.indices  # ascending by construction
        if not np.isin(vis_slots, slots).all():
            raise ValueError("visible set is not a subset of the selection")
        is_vis = np.isin(slots, vis_slots)
        row = np.empty(k, dtype=np.intp)
        row[is_vis] = b * n_vis + np.arange(n_vis)
        row[~is_vis] = bsz * n_vis + b * n_mask + np.arange(n_mask)
        perm[b * k : (b + 1) * k] = row
        pe_rows[b * k : (b + 1) * k] = mp.pe_dec[slots]

    x = T.layer_norm(latents, p["dec.ln_in.g"], p["dec.ln_in.b"])
    x = linear(x, p["dec.proj.w"], p["dec.proj.b"])
    flat = T.reshape(x, (bsz * n_vis, mp.arch.dec_dim))
    if n_mask:
        mask_rows = T.row_repeat(p["dec.mask_token"], bsz * n_mask)
        flat = T.concat_rows(flat, mask_rows)
    seq = T.gather_rows(flat, perm) + T.Tensor(pe_rows)
    seq = T.reshape(seq, (bsz, k, mp.arch.dec_dim))
    for i in range(mp.arch.dec_depth):
        seq = block_forward(seq, p, f"dec.{i}", mp.arch.dec_heads)
    seq = T.layer_norm(seq, p["dec.ln_f.g"], p["dec.ln_f.b"])
    return linear(seq, p["pixel.w"], p["pixel.b"])


def normalize_blocks(blocks, eps=1e-6):
    """Per-token target normalization: subtract block mean, divide block std."""
    mean = blocks.mean(axis=-1, keepdims=True)
    std = np.sqrt(blocks.var(axis=-1, keepdims=True) + eps)
    return (blocks - mean) / std


def rero_loss(pred, targets, count_mask=None, p=2):
    """Mean over counted tokens of the per-token mean pixel error.

    pred: (B, K, block_dim) Tensor; targets: same-shape constant array;
    count_mask: (B, K) 0/1 weights choosing which tokens count (all by
    default; the masked_only scope zeroes the visible ones). p = 2 squares
    the residual, p = 1 takes its absolute value.
    """
    if pred.data.shape != targets.shape:
        raise ValueError(f"pred {pred.data.shape} vs targets {targets.shape}")
    if p not in (1, 2):
        raise ValueError("loss norm p must be 1 or 2")
    diff = pred + T.Tensor(-targets.astype(pred.dtype, copy=False))
    err = T.mul(diff, diff) if p == 2 else T.abs_(diff)
    per_token = T.mean_(err, axis=-1)
    if count_mask is None:
        return T.mean_(per_token)
    count = float(count_mask.sum())
    if count == 0:
        raise ValueError("loss scope selects zero tokens")
    weighted = T.mul(per_token, T.Tensor(count_mask.astype(pred.dtype, copy=False)))
    return T.sum_(weighted) * (1.0 / count)


def classify(tokens, mp):
    """Encode selected tokens, mean-pool, norm, project to class logits."""
    if mp.num_classes is None:
        raise ValueError("model has no classification head")
    if tokens.data.ndim != 3:
        raise ValueError("classify expects (B, n, d) tokens")
    x = encode(tokens, mp)
    pooled = T.mean_(x, axis=1)
    h = T.layer_norm(pooled, mp.params["head.ln.g"], mp.params["head.ln.b"])
    return linear(h, mp.params["head.w"], mp.params["head.b"])


# ---------------------------------------------------------------------------
# checkpoint container ("EVCK")

CKPT_MAGIC = b"EVCK"
CKPT_VERSION = 1


def save_checkpoint(mp, path, config_digest=b""):
    """Named parameter blobs with a 32-bit payload; bit-exact round trip."""
    if isinstance(config_digest, str):
        config_digest = config_digest.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(config_digest)))
        fh.write(config_digest)
        fh.write(struct.pack("<I", len(mp.params)))
        for name, t in mp.params.items():
            data = np.ascontiguousarray(t.data, dtype=np.float32)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Returns (arrays dict, config digest, version)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    off = 4
    version, dlen = struct.unpack_from("<II", raw, off)
    off += 8
    digest = raw[off : off + dlen]
    off += dlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    if off != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return arrays, digest, version


def params_from_arrays(arch, geom, arrays, dtype=np.float32):
    """Rebuild ModelParams from checkpoint blobs, shapes validated lazily."""
    p = {k: T.Tensor(v.astype(dtype, copy=False), requires_grad=True) for k, v in arrays.items()}
    num_classes = p["head.w"].data.shape[0] if "head.w" in p else None
    return ModelParams(arch, geom, p, num_classes)
