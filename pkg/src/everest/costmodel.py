"""Analytic FLOPs and activation-memory accounting at ViT-S/B/L scale.

The point of this model is to verify the claimed relative efficiency of
selected-token training without running anything at scale: the encoder
always sees the ~10% visible tokens under either policy, so the savings
live in the decoder, whose sequence shrinks from the full grid to the
selected fraction.

Conventions (printed in every report for auditability):
* multiply-accumulates count as 2 FLOPs; ``gflops_mac`` divides back out,
  which is the convention the published per-clip numbers follow;
* layer norms, softmax, biases, activations and residual adds are excluded
  (leading-order accounting);
* the memory model covers stored forward activations only - parameters,
  optimizer state and framework overheads are out of model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .rero import round_half_up

EXCLUSIONS = (
    "layer norms",
    "softmax and attention scaling",
    "bias adds and residual adds",
    "activation functions",
    "positional embeddings",
    "parameter/optimizer memory (reported separately by the trainer)",
    "framework and allocator overheads",
)


@dataclass(frozen=True)
class ArchSpec:
    """Encoder/decoder dims at the published input geometry (16 x 224^2, s=16)."""

    name: str
    enc_depth: int
    enc_dim: int
    enc_heads: int
    dec_depth: int = 4
    dec_dim: int = 0  # 0 -> half the encoder width
    mlp_ratio: int = 4
    frames: int = 16
    image_size: int = 224
    patch_size: int = 16

    def __post_init__(self):
        if self.dec_dim == 0:
            object.__setattr__(self, "dec_dim", self.enc_dim // 2)

    @property
    def dec_heads(self):
        return max(1, self.dec_dim // 64)

    @property
    def tau(self):
        return self.frames // 2

    @property
    def tokens_per_pair(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def total_tokens(self):
        return self.tau * self.tokens_per_pair

    @property
    def block_dim(self):
        return 2 * self.patch_size * self.patch_size * 3


ARCHES = {
    "vit-s": ArchSpec("vit-s", enc_depth=12, enc_dim=384, enc_heads=6),
    "vit-b": ArchSpec("vit-b", enc_depth=12, enc_dim=768, enc_heads=12),
    "vit-l": ArchSpec("vit-l", enc_depth=24, enc_dim=1024, enc_heads=16),
}


def get_arch(name):
    key = name.lower().replace("_", "-")
    if key not in ARCHES:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(ARCHES)}")
    return ARCHES[key]


def block_flops(tokens, dim, heads, mlp_ratio=4):
    """FLOPs of one transformer block, multiply-accumulates counted as 2.

    qkv projections 2*3nd^2, attention scores + weighted sum 2*2n^2 d,
    output projection 2nd^2, MLP 2*2r nd^2. Head count does not change the
    total (d splits across heads); it is accepted for interface symmetry.
    """
    if tokens < 1 or dim < 1:
        raise ValueError("tokens and dim must be >= 1")
    del heads
    n, d, r = float(tokens), float(dim), float(mlp_ratio)
    qkv = 2 * 3 * n * d * d
    attn = 2 * 2 * n * n * d
    proj = 2 * n * d * d
    mlp = 2 * 2 * r * n * d * d
    return qkv + attn + proj + mlp


def tube_embed_flops(arch):
    """Embedding the FULL grid (selection needs every token's embedding)."""
    return 2.0 * arch.total_tokens * arch.block_dim * arch.enc_dim


def encoder_flops(arch, tokens):
    return arch.enc_depth * block_flops(tokens, arch.enc_dim, arch.enc_heads, arch.mlp_ratio)


def decoder_flops(arch, tokens):
    proj = 2.0 * tokens * arch.enc_dim * arch.dec_dim
    blocks = arch.dec_depth * block_flops(tokens, arch.dec_dim, arch.dec_heads, arch.mlp_ratio)
    pixel_head = 2.0 * tokens * arch.dec_dim * arch.block_dim
    return proj + blocks + pixel_head


def mva_flops(arch, visible_frac, decoder_frac):
    """Pre-training FLOPs per clip: encoder at the visible fraction, decoder
    at the reconstructed fraction (1.0 reconstructs the whole grid)."""
    if not 0 < visible_frac <= 1 or not 0 < decoder_frac <= 1:
        raise ValueError("fractions must be in (0, 1]")
    n_vis = round_half_up(visible_frac * arch.total_tokens)
    n_dec = round_half_up(decoder_frac * arch.total_tokens)
    return tube_embed_flops(arch) + encoder_flops(arch, n_vis) + decoder_flops(arch, n_dec)


def finetune_flops(arch, token_frac, num_classes=400):
    """Fine-tuning forward FLOPs per clip: encoder over the kept fraction."""
    if not 0 < token_frac <= 1:
        raise ValueError("token_frac must be in (0, 1]")
    n = round_half_up(token_frac * arch.total_tokens)
    head = 2.0 * n * arch.enc_dim * num_classes
    return tube_embed_flops(arch) + encoder_flops(arch, n) + head


# stored-activation inventory per block, in units of scalars:
# 8 retained (n, d) sequences (input, norm, q, k, v, attn out, norm, mlp out)
# + heads * n^2 attention probabilities + mlp_ratio * n * d hidden.
_SEQS_PER_BLOCK = 8


def _block_activations(tokens, dim, heads, mlp_ratio):
    n, d = float(tokens), float(dim)
    return _SEQS_PER_BLOCK * n * d + heads * n * n + mlp_ratio * n * d


def activation_memory(arch, batch, visible_frac, decoder_frac, bytes_per_scalar=4):
    """Bytes of forward activations retained for backward, linear in batch."""
    if batch < 1 or bytes_per_scalar < 1:
        raise ValueError("batch and bytes_per_scalar must be positive")
    n_vis = round_half_up(visible_frac * arch.total_tokens)
    n_dec = round_half_up(decoder_frac * arch.total_tokens)
    scalars = arch.total_tokens * arch.enc_dim  # embedded grid
    scalars += arch.enc_depth * _block_activations(n_vis, arch.enc_dim, arch.enc_heads, arch.mlp_ratio)
    scalars += n_dec * arch.dec_dim  # projected decoder input
    scalars += arch.dec_depth * _block_activations(n_dec, arch.dec_dim, arch.dec_heads, arch.mlp_ratio)
    scalars += 2.0 * n_dec * arch.block_dim  # pixel predictions + targets
    return float(batch) * bytes_per_scalar * scalars


@dataclass
class CostReport:
    """Per-clip cost of one training configuration, plus reduction vs a baseline."""

    arch: str
    visible_frac: float
    decoder_frac: float
    ft_token_frac: float
    batch: int
    flops_pretrain: float
    flops_finetune: float
    activation_bytes: float
    reduction_pct: dict = field(default_factory=dict)
    exclusions: tuple = EXCLUSIONS

    @property
    def gflops_mac_pretrain(self):
        """Pre-training cost with multiply-accumulates counted once."""
        return self.flops_pretrain / 2e9

    @property
    def gflops_mac_finetune(self):
        return self.flops_finetune / 2e9


def build_report(arch, visible_frac, decoder_frac, ft_token_frac, batch=256, num_classes=400):
    arch = get_arch(arch) if isinstance(arch, str) else arch
    return CostReport(
        arch=arch.name,
        visible_frac=visible_frac,
        decoder_frac=decoder_frac,
        ft_token_frac=ft_token_frac,
        batch=batch,
        flops_pretrain=mva_flops(arch, visible_frac, decoder_frac),
        flops_finetune=finetune_flops(arch, ft_token_frac, num_classes),
        activation_bytes=activation_memory(arch, batch, visible_frac, decoder_frac),
    )


def compare(arch, visible_frac=0.1, rho_pre=0.3, ft_token_frac=0.6, batch=256, num_classes=400):
    """Selected-token config vs the reconstruct-everything baseline.

    Both share the visible fraction (identical encoder cost); the baseline
    decodes the full grid and fine-tunes on every token. Returns
    (ours, baseline) with ``ours.reduction_pct`` filled in.
    """
    base = build_report(arch, visible_frac, 1.0, 1.0, batch, num_classes)
    ours = build_report(arch, visible_frac, rho_pre, ft_token_frac, batch, num_classes)
    ours.reduction_pct = {
        "pretrain": 100.0 * (1.0 - ours.flops_pretrain / base.flops_pretrain),
        "finetune": 100.0 * (1.0 - ours.flops_finetune / base.flops_finetune),
        "memory": 100.0 * (1.0 - ours.activation_bytes / base.activation_bytes),
    }
    return ours, base
