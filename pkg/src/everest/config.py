"""Run configuration: defaults, file loading, overrides, validation.

Configs are flat JSON. Precedence is defaults < file < command-line
overrides. Validation collects EVERY violated constraint and reports them
together, machine-readably, rather than failing on the first.

Epoch-based hyperparameters from large-scale recipes are expressed directly
in steps here; the resolved config echoed into each run directory is the
record of what actually ran.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .model import Geometry, ToyArch
from .rero import RATIO_PRODUCT, RATIO_TOL, MetricKind


class ConfigError(ValueError):
    """Invalid run configuration; ``violations`` lists every broken constraint."""

    def __init__(self, violations):
        self.violations = violations
        super().__init__("; ".join(v["constraint"] for v in violations))

    def to_json(self):
        return json.dumps({"error": "invalid config", "violations": self.violations}, indent=1)


@dataclass
class RunConfig:
    # phase
    phase: str = "pretrain"
    seed: int = 0
    # geometry
    tau: int = 8
    patch_size: int = 4
    height: int = 32
    width: int = 32
    channels: int = 3
    # selection
    rho_pre: float = 0.3
    rho_post: float = 1.0 / 3.0
    metric: str = "l2"
    order: str = "descending"
    allow_ratio_override: bool = False
    # frame selection
    alpha: float = 1.5
    stride: int = 1
    smooth_eps: float = 1.0
    # architecture
    enc_depth: int = 4
    enc_dim: int = 96
    enc_heads: int = 4
    dec_depth: int = 2
    dec_dim: int = 48
    dec_heads: int = 4
    mlp_ratio: int = 4
    # optimization
    base_lr: float = 3e-2
    beta1: float = 0.9
    beta2: float | None = None  # resolved per phase: 0.95 pretrain, 0.999 finetune
    weight_decay: float = 0.05
    warmup_steps: int = 20
    total_steps: int = 200
    batch_size: int = 8
    loss_norm: int = 2
    loss_scope: str = "all_rero"
    normalize_targets: bool = True
    # fine-tuning
    rho_pre_ft: float = 0.6
    epochs: int = 3
    # data
    train_manifest: str | None = None
    eval_manifest: str | None = None
    norm_mean: tuple = (0.45, 0.45, 0.45)
    norm_std: tuple = (0.225, 0.225, 0.225)
    # runtime
    out_dir: str = "runs/out"
    threads: int | None = None

    # -- derived views ------------------------------------------------------

    def geometry(self):
        return Geometry(self.tau, self.patch_size, self.height, self.width, self.channels)

    def arch(self):
        return ToyArch(
            self.enc_depth, self.enc_dim, self.enc_heads,
            self.dec_depth, self.dec_dim, self.dec_heads, self.mlp_ratio,
        )

    @property
    def beta2_resolved(self):
        if self.beta2 is not None:
            return self.beta2
        return 0.95 if self.phase == "pretrain" else 0.999

    @property
    def effective_lr(self):
        """Linear scaling rule: base_lr * batch_size / 256."""
        return self.base_lr * self.batch_size / 256.0

    def threads_resolved(self):
        if self.threads is not None:
            return max(1, self.threads)
        env = os.environ.get("EVEREST_THREADS")
        if env:
            return max(1, int(env))
        return os.cpu_count() or 1

    # -- validation ---------------------------------------------------------

    def validate(self):
        """Raise ConfigError listing every violated constraint."""
        bad = []

        def check(ok, field, constraint):
            if not ok:
                bad.append({"field": field, "value": getattr(self, field, None), "constraint": constraint})

        check(self.phase in ("pretrain", "finetune"), "phase", "phase must be pretrain|finetune")
        check(self.tau >= 2, "tau", "tau must be >= 2 (importance needs two pairs)")
        check(self.height % self.patch_size == 0, "height", "height must be divisible by patch_size")
        check(self.width % self.patch_size == 0, "width", "width must be divisible by patch_size")
        check(0 < self.rho_pre <= 1, "rho_pre", "rho_pre must be in (0, 1]")
        check(0 < self.rho_post <= 1, "rho_post", "rho_post must be in (0, 1]")
        check(0 < self.rho_pre_ft <= 1, "rho_pre_ft", "rho_pre_ft must be in (0, 1]")
        if self.phase == "pretrain" and not self.allow_ratio_override:
            product = self.rho_pre * self.rho_post
            check(
                abs(product - RATIO_PRODUCT) <= RATIO_TOL,
                "rho_post",
                f"rho_pre*rho_post must equal {RATIO_PRODUCT} in pretrain "
                f"(got {product:.6g}); set allow_ratio_override to bypass",
            )
        try:
            MetricKind(self.metric)
        except ValueError:
            check(False, "metric", f"metric must be one of {[m.value for m in MetricKind]}")
        check(self.order in ("descending", "ascending"), "order", "order must be descending|ascending")
        check(self.alpha >= 1.0, "alpha", "alpha must be >= 1")
        check(self.stride >= 1, "stride", "stride must be >= 1")
        check(self.enc_dim % self.enc_heads == 0, "enc_dim", "enc_dim must be divisible by enc_heads")
        check(self.dec_dim % self.dec_heads == 0, "dec_dim", "dec_dim must be divisible by dec_heads")
        check(self.enc_dim % 4 == 0, "enc_dim", "enc_dim must be divisible by 4 (positional table)")
        check(self.dec_dim % 4 == 0, "dec_dim", "dec_dim must be divisible by 4 (positional table)")
        check(self.warmup_steps <= self.total_steps, "warmup_steps", "warmup_steps must be <= total_steps")
        check(self.warmup_steps >= 0, "warmup_steps", "warmup_steps must be >= 0")
        check(self.total_steps >= 1, "total_steps", "total_steps must be >= 1")
        check(self.batch_size >= 1, "batch_size", "batch_size must be >= 1")
        check(self.loss_norm in (1, 2), "loss_norm", "loss_norm must be 1 or 2")
        check(self.loss_scope in ("all_rero", "masked_only"), "loss_scope", "loss_scope must be all_rero|masked_only")
        check(self.epochs >= 1, "epochs", "epochs must be >= 1")
        check(len(tuple(self.norm_mean)) in (1, self.channels), "norm_mean", "norm_mean must have 1 or C entries")
        check(all(s > 0 for s in tuple(self.norm_std)), "norm_std", "norm_std entries must be positive")
        if bad:
            raise ConfigError(bad)
        return self

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["norm_mean"] = list(self.norm_mean)
        d["norm_std"] = list(self.norm_std)
        d["beta2"] = self.beta2_resolved
        d["effective_lr"] = self.effective_lr
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, value):
    if name not in _FIELDS:
        raise ConfigError([{"field": name, "value": value, "constraint": f"unknown config key {name!r}"}])
    if not isinstance(value, str):
        return value
    ftype = _FIELDS[name].type
    if name in ("norm_mean", "norm_std"):
        return tuple(float(v) for v in value.split(","))
    if "int" in ftype and "| None" in ftype:
        return None if value.lower() == "none" else int(value)
    if ftype == "int":
        return int(value)
    if ftype == "float" or "float" in ftype:
        return None if value.lower() == "none" else float(value)
    if ftype == "bool":
        return value.lower() in ("1", "true", "yes", "on")
    return value


def load_config(path=None, overrides=()):
    """defaults <- JSON file <- key=value overrides, then full validation."""
    data = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([{"field": None, "value": str(path), "constraint": f"config parse error: {exc}"}])
        if not isinstance(raw, dict):
            raise ConfigError([{"field": None, "value": str(path), "constraint": "config file must hold a JSON object"}])
        data.update(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([{"field": None, "value": item, "constraint": "overrides take the form key=value"}])
        key, value = item.split("=", 1)
        data[key.strip()] = value.strip()
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(key, value)
    for key in ("norm_mean", "norm_std"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    cfg = RunConfig(**kwargs)
    return cfg.validate()


def write_resolved(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(cfg.to_json())
    return out / "resolved_config.json"
