"""Command-line entry point: ``repsq {fit,eval,gradcheck,demo}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io, metrics
from .fitter import THREADS_ENV, FitConfig, FitFailure, fit_batch, fit_shape, run_gradient_check
from .synthetic import make_table

# exit codes by failure category
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_OUTPUT = 4
EXIT_FIT = 5
EXIT_CHECK = 6

log = logging.getLogger("repsq")


class UsageError(Exception):
    pass


def _fit_flags(p: argparse.ArgumentParser) -> None:
    d = FitConfig()
    g = p.add_argument_group("fit options (defaults shown; a --config file overrides them, flags override the file)")
    g.add_argument("--steps", type=int, help=f"optimization steps (default {d.total_steps})")
    g.add_argument("--seed", type=int, help=f"global seed (default {d.seed})")
    g.add_argument("--primitives", type=int, help=f"max primitives M (default {d.max_primitives})")
    g.add_argument("--semantics", type=int, help=f"max semantic parts S (default {d.max_semantics})")
    g.add_argument("--samples", type=int, help=f"surface samples per primitive I (default {d.samples_per_primitive})")
    g.add_argument("--feature-dim", type=int, help=f"feature width D (default {d.feature_dim})")
    g.add_argument("--n-points", type=int, help=f"points used for the fit (default {d.n_points})")
    g.add_argument("--lr-start", type=float, help=f"initial learning rate (default {d.lr_start})")
    g.add_argument("--lr-end", type=float, help=f"final learning rate (default {d.lr_end})")
    g.add_argument("--weight-decay", type=float, help=f"AdamW weight decay (default {d.weight_decay})")
    g.add_argument("--logit-lr-scale", type=float, help=f"lr multiplier for membership logits (default {d.logit_lr_scale})")
    g.add_argument("--backend", choices=("direct", "pointwise-mlp"), help=f"feature backend (default {d.backend})")
    g.add_argument("--existence-threshold", type=int, help=f"min points for a kept primitive (default {d.existence_threshold})")
    g.add_argument("--dtype", choices=("float32", "float64"), help=f"fit precision (default {d.dtype})")
    for k in range(1, 5):
        g.add_argument(f"--lambda{k}", type=float, help=f"loss weight lambda{k} (default {getattr(d.loss, f'lambda{k}')})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repsq", description="Fit deformable superquadric abstractions with repeatable primitives.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--threads", type=int, help=f"torch threads per fit (default ${THREADS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit one or more point clouds and export results")
    fit.add_argument("--input", "-i", nargs="+", dest="inputs", help="XYZ, PLY or OBJ point clouds")
    fit.add_argument("--out", "-o", dest="out_dir", help="output directory (default out)")
    fit.add_argument("--config", help="key = value file mirroring these flags")
    fit.add_argument("--jobs", type=int, help=f"parallel fits for several inputs (default ${THREADS_ENV} or 1)")
    fit.add_argument("--no-meshes", dest="export_meshes", action="store_const", const=False, help="skip OBJ export")
    fit.add_argument("--no-labels", dest="export_labels", action="store_const", const=False, help="skip label export")
    fit.add_argument("--no-report", dest="export_report", action="store_const", const=False, help="skip the JSON report")
    _fit_flags(fit)

    ev = sub.add_parser("eval", help="metrics between label files and/or point files")
    ev.add_argument("--pred", help="predicted labels, one integer per line")
    ev.add_argument("--gt", help="ground-truth labels")
    ev.add_argument("--points", help="points the labels refer to (for dbi)")
    ev.add_argument("--pred-points", help="predicted point set (for cd, emd)")
    ev.add_argument("--gt-points", help="reference point set (for cd, emd)")
    ev.add_argument("--metrics", default="miou,nmi", help="comma list of miou, nmi, dbi, cd, emd (default miou,nmi)")

    gc = sub.add_parser("gradcheck", help="autograd vs central differences on the toy instance")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--warm-steps", type=int, default=0, help="optimizer steps before checking")

    demo = sub.add_parser("demo", help="fit the built-in four-legged table")
    demo.add_argument("--out", "-o", dest="out_dir", help="also export results here")
    demo.add_argument("--steps", type=int, help=f"optimization steps (default {FitConfig().total_steps})")
    demo.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args) -> dict:
    keys = (
        "inputs", "out_dir", "jobs", "export_meshes", "export_labels", "export_report",
        "steps", "seed", "primitives", "semantics", "samples", "feature_dim", "n_points",
        "lr_start", "lr_end", "weight_decay", "logit_lr_scale", "backend", "existence_threshold", "dtype",
        "lambda1", "lambda2", "lambda3", "lambda4",
    )
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _stem(path: Path, used: set) -> str:
    stem, k = path.stem, 1
    while stem in used:
        k += 1
        stem = f"{path.stem}_{k}"
    used.add(stem)
    return stem


def cmd_fit(args) -> int:
    file_values = io.read_config_file(args.config) if args.config else {}
    try:
        run = io.build_run_config(file_values, _overrides(args))
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None
    if not run.inputs:
        raise UsageError("fit needs --input (or 'inputs' in the config file)")
    clouds = [io.load_point_cloud(p) for p in run.inputs]
    if len(clouds) == 1:
        results = [fit_shape(clouds[0].points, run.fit)]
    else:
        results = fit_batch([c.points for c in clouds], run.fit, keys=[str(Path(p).resolve()) for p in run.inputs], n_jobs=run.jobs)
    used, failed, summary = set(), 0, []
    for path, cloud, res in zip(run.inputs, clouds, results):
        if isinstance(res, FitFailure):
            failed += 1
            print(f"{path}: failed: {res.error}", file=sys.stderr)
            continue
        written = io.export_result(res, cloud, run.out_dir, _stem(Path(path), used), run)
        if res.status != "ok":
            failed += 1
            print(f"{path}: {res.status}: {res.diagnostic}", file=sys.stderr)
        summary.append({"input": path, "status": res.status, "kept": res.kept.tolist(), "files": written})
    print(json.dumps(summary, indent=1))
    return EXIT_FIT if failed else EXIT_OK


def cmd_eval(args) -> int:
    names = [m.strip().lower() for m in args.metrics.split(",") if m.strip()]
    unknown = set(names) - {"miou", "nmi", "dbi", "cd", "emd"}
    if unknown:
        raise UsageError(f"unknown metrics: {', '.join(sorted(unknown))}")
    out = {}
    pred = io.read_labels(args.pred) if args.pred else None
    gt = io.read_labels(args.gt) if args.gt else None
    for name in names:
        if name in ("miou", "nmi"):
            if pred is None or gt is None:
                raise UsageError(f"{name} needs --pred and --gt")
            if len(pred) != len(gt):
                raise io.CloudParseError(f"label files differ in length ({len(pred)} vs {len(gt)})")
            out[name] = getattr(metrics, name)(pred, gt)
        elif name == "dbi":
            if pred is None or not args.points:
                raise UsageError("dbi needs --pred and --points")
            pts = io.load_point_cloud(args.points).raw_points
            if len(pts) != len(pred):
                raise io.CloudParseError(f"{len(pts)} points but {len(pred)} labels")
            out[name] = metrics.dbi(pts, pred)
        else:
            if not (args.pred_points and args.gt_points):
                raise UsageError(f"{name} needs --pred-points and --gt-points")
            a = io.load_point_cloud(args.pred_points).raw_points
            b = io.load_point_cloud(args.gt_points).raw_points
            out[name] = metrics.chamfer(a, b) if name == "cd" else metrics.emd(a, b)
    print(json.dumps(out, indent=1))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradient_check(seed=args.seed, tolerance=args.tolerance, warm_steps=args.warm_steps)
    print(json.dumps(report.to_dict(), indent=1, default=float))
    return EXIT_OK if report.passed else EXIT_CHECK


def demo_summary(result, shape) -> dict:
    """Deterministic digest of a table fit (no timings)."""
    legs = [int(np.bincount(result.instance_labels[shape.instance_labels == k]).argmax()) for k in range(1, 5)]
    sem = result.semantic_of_instance
    return {
        "status": result.status,
        "kept_primitives": result.kept.tolist(),
        "point_counts": result.point_counts.tolist(),
        "semantic_of_instance": sem.tolist(),
        "leg_slots": legs,
        "leg_semantics": [int(sem[s]) for s in legs],
        "cd_rep": round(metrics.chamfer(result.sample("rep"), shape.points), 8),
        "semantic_miou": round(metrics.miou(result.semantic_labels, shape.semantic_labels), 8),
        "instance_miou": round(metrics.miou(result.instance_labels, shape.instance_labels), 8),
        "final_loss": round(result.final_loss.get("total", float("nan")), 8),
    }


def cmd_demo(args) -> int:
    shape = make_table(seed=0)
    cfg = FitConfig(seed=args.seed, **({"total_steps": args.steps} if args.steps else {}))
    result = fit_shape(shape.points, cfg)
    if args.out_dir:
        cloud = io.normalize(shape.points, "table")
        io.export_result(result, cloud, args.out_dir, "table", include_timings=False)
    print(json.dumps(demo_summary(result, shape), indent=1))
    return EXIT_OK if result.status == "ok" else EXIT_FIT


COMMANDS = {"fit": cmd_fit, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "demo": cmd_demo}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or int(os.environ.get(THREADS_ENV, "1") or 1)
    torch.set_num_threads(max(threads, 1))
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"repsq: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except io.CloudError as err:
        print(f"repsq: input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except io.ExportError as err:
        print(f"repsq: output error: {err}", file=sys.stderr)
        return EXIT_OUTPUT
    except (FileNotFoundError, IsADirectoryError) as err:
        print(f"repsq: input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as err:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"repsq: internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
