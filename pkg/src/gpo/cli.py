"""Command-line surface: register, eval, synth, gradcheck and sweep.

Exit codes: 0 success, 1 runtime/numerical failure, 2 usage or parse error.
`GPO_THREADS` caps the compute thread pool; results are identical for any
thread count.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
import time

import numpy as np

from . import __version__
from .config import UsageError, config_hash, parse_config_file, \
    parse_set_overrides, resolve, resolved_lines, to_pipeline_config, \
    to_synth_config
from .coarse import read_transform
from .errors import GpoError
from .field import read_field
from .loss import GradcheckConfig, gradcheck
from .metrics import auc, read_landmarks, tre, write_report
from .optim import run_pipeline
from .synth import make_pair, write_pair_bundle


def _load_layers(args, command_defaults=None) -> dict:
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else None
    overrides = parse_set_overrides(getattr(args, "set", None))
    return resolve(file_values, overrides, command_defaults)


def _write_run_metadata(path, cfg: dict, extra: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"gpo.version = {__version__}\n")
        for line in resolved_lines(cfg):
            fh.write(line + "\n")
        for key in sorted(extra):
            fh.write(f"{key} = {extra[key]}\n")


def cmd_register(args) -> int:
    cfg = _load_layers(args)
    cfg["run.mode"] = args.mode
    if args.mode == "dcn" and not args.matches:
        raise UsageError("dcn mode requires --matches")
    pipeline_cfg = to_pipeline_config(cfg)

    metadata = [f"gpo.version = {__version__}",
                f"run.fixed = {args.fixed}",
                f"run.moving = {args.moving}",
                f"run.matches = {args.matches or ''}"]
    metadata += resolved_lines(cfg)

    t0 = time.perf_counter()
    result = run_pipeline(args.fixed, args.moving, args.matches,
                          mode=args.mode, cfg=pipeline_cfg,
                          out_dir=args.out, metadata_lines=metadata)
    wall = time.perf_counter() - t0

    final = result.loss_trace[-1]
    mean_u = float(np.hypot(result.final_field[..., 0],
                            result.final_field[..., 1]).mean())
    print(f"registered in {wall:.1f}s: final loss {final.total:.6g}, "
          f"ncc {final.ncc_value:.4f}, mean |u| = {mean_u:.4f} px")
    print(f"artifacts written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    thresholds = [int(t) for t in args.thresholds.split(",") if t.strip()]
    if not thresholds or any(t < 1 for t in thresholds):
        raise UsageError("--thresholds must be positive integers")
    try:
        landmarks = read_landmarks(args.landmarks, args.scale_fixed,
                                   args.scale_moving)
        field = read_field(args.field)
        transform = read_transform(args.transform)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc

    stats = tre(landmarks, transform, field)
    curve = auc([stats], thresholds)
    write_report([stats], curve, args.out)
    print(f"TRE over {len(stats.distances)} landmarks: mean {stats.mean:.4f}, "
          f"median {stats.median:.4f}, max {stats.max:.4f} px")
    for t in sorted(curve.auc_at):
        print(f"AUC@{t} = {curve.auc_at[t]:.4f}")
    return 0


def cmd_synth(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["synth.seed"] = str(args.seed)
    if args.size is not None:
        overrides["synth.size"] = str(args.size)
    if args.deform_max is not None:
        overrides["synth.deform_max_px"] = str(args.deform_max)
    file_values = parse_config_file(args.config) if args.config else None
    cfg = resolve(file_values, {**parse_set_overrides(args.set), **overrides})
    synth_cfg = to_synth_config(cfg)

    from dataclasses import replace
    for i in range(args.count):
        pair_cfg = replace(synth_cfg, seed=synth_cfg.seed + i)
        pair = make_pair(pair_cfg)
        out = args.out if args.count == 1 else os.path.join(
            args.out, f"pair_{i:03d}")
        write_pair_bundle(out, pair, pair_cfg)
        print(f"wrote pair bundle {out} (seed {pair_cfg.seed})")
    return 0


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    worst = None
    ok = True
    for seed in range(args.seed, args.seed + args.trials):
        report = gradcheck(seed, GradcheckConfig())
        print(report.line())
        peak = max(report.max_rel_err_t, report.max_rel_err_g,
                   report.max_rel_err_beta)
        if worst is None or peak > worst[0]:
            worst = (peak, report)
        ok = ok and report.passed
    if not ok:
        print(f"worst offender: {worst[1].line()}", file=sys.stderr)
        return 1
    return 0


def _sweep_cell(cell_index, overrides, pair_dirs, base_file_values,
                set_overrides, out_dir):
    """Run one sweep cell over every pair; returns its summary row."""
    from .synth import read_pair_bundle
    from .optim import register, _preprocess
    from .coarse import GlobalTransform
    from .nodes import init_dcn, init_gcn
    from .optim import fit_coarse_transform

    command_defaults = {"preproc.resize_w": "0", "preproc.resize_h": "0"}
    merged = dict(set_overrides)
    merged.update(overrides)
    cfg = resolve(base_file_values, merged, command_defaults)
    pipeline_cfg = to_pipeline_config(cfg)
    mode = cfg["run.mode"]

    t0 = time.perf_counter()
    means = []
    cell_dir = os.path.join(out_dir, f"cell_{cell_index:03d}")
    os.makedirs(cell_dir, exist_ok=True)
    rows = []
    for pair_dir in pair_dirs:
        bundle = read_pair_bundle(pair_dir)
        fixed, _ = _preprocess(bundle["fixed"], pipeline_cfg.preproc)
        moving, _ = _preprocess(bundle["moving"], pipeline_cfg.preproc)
        h, w = fixed.shape
        if mode == "dcn":
            matches = bundle["matches"]
            transform = fit_coarse_transform(matches, pipeline_cfg.ransac,
                                             pipeline_cfg.affine_fallback)
            nodes = init_dcn(matches, transform, pipeline_cfg.n_nodes,
                             pipeline_cfg.radius_cfg,
                             pipeline_cfg.init_radius or None,
                             seed=pipeline_cfg.optim.seed)
            from .coarse import apply_global
            moving_coarse = apply_global(moving, transform, w, h)
        else:
            transform = GlobalTransform.identity()
            moving_coarse = moving
            nodes = init_gcn(w, h, pipeline_cfg.grid_n, pipeline_cfg.radius_cfg,
                             pipeline_cfg.init_radius or None)
        result = register(fixed, moving_coarse, nodes, pipeline_cfg.optim)
        stats = tre(bundle["landmarks"], transform, result.final_field)
        means.append(stats.mean)
        rows.append((os.path.basename(pair_dir), stats.mean, stats.median))
    wall = time.perf_counter() - t0

    with open(os.path.join(cell_dir, "pairs.csv"), "w", encoding="utf-8") as fh:
        fh.write("pair,mean_tre,median_tre\n")
        for name, mean_t, median_t in rows:
            fh.write(f"{name},{mean_t:.9g},{median_t:.9g}\n")
    _write_run_metadata(os.path.join(cell_dir, "run_metadata.txt"), cfg,
                        {"sweep.cell": str(cell_index)})

    median_tre = float(np.median(means))
    return (cell_index, config_hash(cfg), overrides, median_tre, wall)


def cmd_sweep(args) -> int:
    if not args.grid:
        raise UsageError("sweep needs at least one --grid KEY=V1,V2,... axis")
    axes = []
    for item in args.grid:
        if "=" not in item:
            raise UsageError(f"--grid expects KEY=V1,V2,..., got '{item}'")
        key, _, raw = item.partition("=")
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise UsageError(f"--grid axis '{key}' lists no values")
        axes.append((key.strip(), values))

    pair_dirs = sorted(
        os.path.join(args.pairs, d) for d in os.listdir(args.pairs)
        if os.path.isdir(os.path.join(args.pairs, d)))
    if not pair_dirs:
        raise UsageError(f"no pair subdirectories under '{args.pairs}'")

    file_values = parse_config_file(args.config) if args.config else None
    set_overrides = parse_set_overrides(args.set)
    cells = [dict(zip((k for k, _ in axes), combo))
             for combo in itertools.product(*(v for _, v in axes))]

    os.makedirs(args.out, exist_ok=True)
    # cells run sequentially; the per-pixel kernels inside already
    # parallelize (capped by GPO_THREADS) and cells stay trivially ordered
    results = [_sweep_cell(i, cell, pair_dirs, file_values, set_overrides,
                           args.out)
               for i, cell in enumerate(cells)]
    grid_keys = [k for k, _ in axes]
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("cell,config_hash," + ",".join(grid_keys) + ",median_tre,wall_s\n")
        for idx, chash, overrides, median_tre, wall in results:
            vals = ",".join(str(overrides[k]) for k in grid_keys)
            fh.write(f"{idx},{chash},{vals},{median_tre:.9g},{wall:.3f}\n")
            print(f"cell {idx}: {overrides} -> median TRE {median_tre:.4f} px "
                  f"({wall:.1f}s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpo",
        description="Deformable registration via optimizable Gaussian control nodes")
    parser.add_argument("--version", action="version",
                        version=f"gpo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a moving image onto a fixed one")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--matches", default=None,
                   help="match file (x_f,y_f,x_m,y_m[,confidence]); required for dcn")
    p.add_argument("--mode", choices=("dcn", "gcn"), required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")
    p.add_argument("--out", default="gpo_out")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="landmark TRE / AUC for a finished run")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--field", required=True, help="field dump from register")
    p.add_argument("--transform", required=True, help="transform.txt from register")
    p.add_argument("--thresholds", default="15,25,50")
    p.add_argument("--scale-fixed", type=float, default=1.0,
                   help="original-to-working resolution ratio of the fixed image")
    p.add_argument("--scale-moving", type=float, default=1.0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic ground-truth pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--deform-max", type=float, default=None)
    p.add_argument("--count", type=int, default=1,
                   help="number of pair bundles (seeds seed..seed+count-1)")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck",
                       help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid of config overrides over pair bundles")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2,...",
                   help="axis of config values (repeatable)")
    p.add_argument("--pairs", required=True,
                   help="directory of pair bundles (one subdirectory each)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version, 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except GpoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
