"""Unified command-line entry point.

Subcommands: gen, mask, frames, pretrain, finetune, flops, gradcheck.
Exit codes: 0 success, 1 validation/check failure (machine-readable JSON on
stderr), 2 runtime error. Every run directory receives the resolved
configuration it ran with, so no result depends on unrecorded state.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backend, config, costmodel, frameselect, rero, train, video
from .embedding import TubeEmbedConfig, tube_embed
from .model import load_checkpoint, params_from_arrays, save_checkpoint


def _write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def _record_args(out_dir, args, extra=None):
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    if extra:
        payload.update(extra)
    _write_json(Path(out_dir) / "resolved_config.json", payload)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "square":
        vy, vx = (int(v) for v in args.velocity.split(","))
        clip, mask = video.gen_moving_square(
            args.height, args.width, args.frames, args.square_size,
            (vy, vx), noise_amp=args.noise, seed=args.seed,
        )
        video.save_clip(clip, out / "clip.evc1")
        np.save(out / "motion_mask.npy", mask)
        _record_args(out, args)
        print(f"wrote {out / 'clip.evc1'} and motion_mask.npy")
    else:
        video.gen_motion_class_dataset(
            args.n_clips, out, seed=args.seed, frames=args.frames,
            height=args.height, width=args.width, noise_amp=args.noise,
            threads=args.threads,
        )
        _record_args(out, args)
        print(f"wrote {args.n_clips} clips + manifest.json under {out}")
    return 0


# ---------------------------------------------------------------------------
# mask


def _embedding_weights(args, block_dim):
    if args.ckpt:
        arrays, _, _ = load_checkpoint(args.ckpt)
        return arrays["embed.w"], arrays["embed.b"]
    rng = np.random.default_rng(args.seed)
    bound = 1.0 / np.sqrt(block_dim)
    w = rng.uniform(-bound, bound, size=(args.embed_dim, block_dim)).astype(np.float32)
    return w, np.zeros(args.embed_dim, dtype=np.float32)


def cmd_mask(args):
    clip = video.load_clip(args.clip)
    out = Path(args.out)
    ecfg = TubeEmbedConfig(args.patch_size, args.embed_dim)
    frames = video.normalize(clip, (0.45,) * 3, (0.225,) * 3)
    w, b = _embedding_weights(args, ecfg.block_dim(clip.channels))
    grid = tube_embed(frames, w, b, ecfg)
    imp = rero.importance_map(grid, args.metric)
    mask = rero.select_rero(imp, args.rho_pre)
    visible = None
    if args.rho_post is not None:
        visible = rero.subsample_visible(
            mask, args.rho_post, seed=args.seed,
            allow_ratio_override=args.allow_ratio_override,
        )
    files = rero.export_heatmap(imp, grid.grid_shape, args.patch_size, out, mask=mask)
    rero.dump_mask_json(mask, visible, out / "mask.json")
    _record_args(out, args)
    print(f"wrote {len(files)} heatmaps + mask.json under {out}")
    return 0


# ---------------------------------------------------------------------------
# frames


def cmd_frames(args):
    clip = video.load_clip(args.clip)
    ecfg = TubeEmbedConfig(args.patch_size, args.embed_dim)
    w, b = _embedding_weights(args, ecfg.block_dim(clip.channels))

    def grid_fn(candidate):
        return tube_embed(video.normalize(candidate, (0.45,) * 3, (0.225,) * 3), w, b, ecfg)

    _, info = frameselect.select_frames(
        clip, args.tau, args.alpha, args.stride, args.rho_pre, grid_fn,
        seed=args.seed, smooth_eps=0.0 if args.no_smooth else 1.0, metric=args.metric,
    )
    info["config"] = {k: v for k, v in vars(args).items() if k != "func"}
    _write_json(args.out, info)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# pretrain / finetune


def _load_cfg(args, phase):
    overrides = list(args.set or [])
    if args.out:
        overrides.append(f"out_dir={args.out}")
    overrides.append(f"phase={phase}")
    return config.load_config(args.config, overrides)


def cmd_pretrain(args):
    cfg = _load_cfg(args, "pretrain")
    if not cfg.train_manifest:
        raise config.ConfigError(
            [{"field": "train_manifest", "value": None, "constraint": "pretrain requires train_manifest"}]
        )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write_resolved(cfg, out)
    manifest = video.load_manifest(cfg.train_manifest, stride=cfg.stride, clip_len=2 * cfg.tau)
    mp, trace, counters = train.pretrain(manifest, cfg)
    save_checkpoint(mp, out / "model.evck", cfg.digest())
    train.write_trace(trace, out / "trace.csv")
    _write_json(out / "metrics.json", {
        "final_loss": trace[-1].loss,
        "first_loss": trace[0].loss,
        "steps": len(trace),
        "param_count": mp.param_count(),
        "backend": backend.backend_name(),
        **counters,
    })
    print(f"pretrain done: {len(trace)} steps, final loss {trace[-1].loss:.5f} -> {out}")
    return 0


def cmd_finetune(args):
    cfg = _load_cfg(args, "finetune")
    if args.order:
        cfg.order = args.order
    if args.rho_pre is not None:
        cfg.rho_pre_ft = args.rho_pre
    cfg.validate()
    if not cfg.train_manifest or not cfg.eval_manifest:
        raise config.ConfigError(
            [{"field": "train_manifest", "value": None,
              "constraint": "finetune requires train_manifest and eval_manifest"}]
        )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write_resolved(cfg, out)
    arrays, _, _ = load_checkpoint(args.ckpt)
    mp = params_from_arrays(cfg.arch(), cfg.geometry(), arrays)
    train_m = video.load_manifest(cfg.train_manifest, stride=cfg.stride, clip_len=2 * cfg.tau)
    eval_m = video.load_manifest(cfg.eval_manifest, stride=cfg.stride, clip_len=2 * cfg.tau)
    result = train.finetune(train_m, eval_m, mp, cfg)
    save_checkpoint(result.params, out / "model_ft.evck", cfg.digest())
    train.write_trace(result.trace, out / "trace.csv")
    _write_json(out / "metrics.json", {
        "accuracy": result.accuracy,
        "order": cfg.order,
        "rho_pre_ft": cfg.rho_pre_ft,
        "backend": backend.backend_name(),
    })
    print(f"finetune done: accuracy {result.accuracy:.4f} ({cfg.order}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# flops


def cmd_flops(args):
    arch_names = sorted(costmodel.ARCHES) if args.arch == "all" else [args.arch]
    rows = []
    for name in arch_names:
        ours, base = costmodel.compare(
            name, visible_frac=args.visible, rho_pre=args.rho_pre,
            ft_token_frac=args.ft_frac, batch=args.batch,
        )
        rows.append((ours, base))
    if args.format == "csv":
        print("arch,phase,flops,reduction_pct,activation_bytes")
        for ours, _ in rows:
            print(f"{ours.arch},pretrain,{ours.flops_pretrain:.6g},"
                  f"{ours.reduction_pct['pretrain']:.2f},{ours.activation_bytes:.6g}")
            print(f"{ours.arch},finetune,{ours.flops_finetune:.6g},"
                  f"{ours.reduction_pct['finetune']:.2f},{ours.activation_bytes:.6g}")
    else:
        hdr = (f"{'arch':>6} {'phase':>9} {'GFLOPs(mac)':>12} {'baseline':>10} "
               f"{'reduction':>10} {'act.GB':>8}")
        print(hdr)
        for ours, base in rows:
            gb = ours.activation_bytes / 2**30
            print(f"{ours.arch:>6} {'pretrain':>9} {ours.gflops_mac_pretrain:12.1f} "
                  f"{base.gflops_mac_pretrain:10.1f} {ours.reduction_pct['pretrain']:9.1f}% {gb:8.1f}")
            print(f"{ours.arch:>6} {'finetune':>9} {ours.gflops_mac_finetune:12.1f} "
                  f"{base.gflops_mac_finetune:10.1f} {ours.reduction_pct['finetune']:9.1f}% {gb:8.1f}")
        print(f"excluded from the count: {', '.join(costmodel.EXCLUSIONS)}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    from .gradcheck import DEFAULT_TOL, primitive_checks

    failures = []
    for seed in range(args.seeds):
        for name, err in primitive_checks(seed).items():
            status = "ok" if err < DEFAULT_TOL else "FAIL"
            if err >= DEFAULT_TOL:
                failures.append((seed, name, err))
            if args.verbose or err >= DEFAULT_TOL:
                print(f"seed {seed} primitive {name:<18} max rel err {err:.3e} {status}")
    for seed in range(args.seeds):
        errs = train.pipeline_grad_check(seed)
        worst = max(errs, key=errs.get)
        if args.verbose:
            print(f"seed {seed} pipeline worst {worst} {errs[worst]:.3e}")
        for name, err in errs.items():
            if err >= DEFAULT_TOL:
                failures.append((seed, f"pipeline/{name}", err))
                print(f"seed {seed} pipeline {name:<18} max rel err {err:.3e} FAIL")
    if failures:
        print(f"gradcheck FAILED ({len(failures)} checks over tolerance {DEFAULT_TOL})")
        return 1
    print(f"gradcheck passed ({args.seeds} seeds, tolerance {DEFAULT_TOL})")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="everest", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic clips or a labeled dataset")
    g.add_argument("--kind", choices=("square", "dataset"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--square-size", type=int, default=6)
    g.add_argument("--velocity", default="0,1", help="dy,dx pixels/frame (square kind)")
    g.add_argument("--noise", type=float, default=0.0, help="gaussian pixel noise std (u8 units)")
    g.add_argument("--n-clips", type=int, default=64)
    g.add_argument("--threads", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    m = sub.add_parser("mask", help="selection heatmaps + index dump for one clip")
    m.add_argument("--clip", required=True)
    m.add_argument("--rho-pre", type=float, default=0.3)
    m.add_argument("--rho-post", type=float, default=None)
    m.add_argument("--metric", default="l2")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--patch-size", type=int, default=4)
    m.add_argument("--embed-dim", type=int, default=96)
    m.add_argument("--ckpt", default=None, help="take embedding weights from a checkpoint")
    m.add_argument("--allow-ratio-override", action="store_true")
    m.set_defaults(func=cmd_mask)

    f = sub.add_parser("frames", help="information-intensive frame selection for one clip")
    f.add_argument("--clip", required=True)
    f.add_argument("--tau", type=int, default=8)
    f.add_argument("--alpha", type=float, default=1.5)
    f.add_argument("--stride", type=int, default=1)
    f.add_argument("--rho-pre", type=float, default=0.3)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.add_argument("--patch-size", type=int, default=4)
    f.add_argument("--embed-dim", type=int, default=96)
    f.add_argument("--metric", default="l2")
    f.add_argument("--no-smooth", action="store_true", help="sample the raw counts exactly")
    f.add_argument("--ckpt", default=None)
    f.set_defaults(func=cmd_frames)

    pt = sub.add_parser("pretrain", help="masked-autoencoder pre-training")
    pt.add_argument("--config", default=None)
    pt.add_argument("--out", default=None)
    pt.add_argument("--set", action="append", metavar="KEY=VALUE")
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="selected-token fine-tuning")
    ft.add_argument("--ckpt", required=True)
    ft.add_argument("--order", choices=("descending", "ascending"), default=None)
    ft.add_argument("--rho-pre", type=float, default=None)
    ft.add_argument("--config", default=None)
    ft.add_argument("--out", default=None)
    ft.add_argument("--set", action="append", metavar="KEY=VALUE")
    ft.set_defaults(func=cmd_finetune)

    fl = sub.add_parser("flops", help="analytic cost model vs the full-decoder baseline")
    fl.add_argument("--arch", default="all", choices=("all", *sorted(costmodel.ARCHES)))
    fl.add_argument("--visible", type=float, default=0.1)
    fl.add_argument("--rho-pre", type=float, default=0.3)
    fl.add_argument("--ft-frac", type=float, default=0.6)
    fl.add_argument("--batch", type=int, default=256)
    fl.add_argument("--format", choices=("table", "csv"), default="table")
    fl.set_defaults(func=cmd_flops)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of every primitive and the full loss")
    gc.add_argument("--seeds", type=int, default=5)
    gc.add_argument("--verbose", action="store_true")
    gc.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse: remap usage errors to validation exit code
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except config.ConfigError as exc:
        print(exc.to_json(), file=sys.stderr)
        return 1
    except (video.FormatError, rero.RatioConstraintError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
