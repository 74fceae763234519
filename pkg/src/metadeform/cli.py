"""Command-line entry point: ``metadeform <command> [options]``.

Commands: gen-data, train, deform, correspond, eval, bench.  Options given
on the command line beat ``--config`` file values, which beat built-in
defaults.  The config file is flat ``key = value`` text whose keys are the
long option names of the command (dashes or underscores).

Exit codes: 0 success, 1 usage, 2 I/O or file format, 3 numeric or
contract failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .cloudio import FORMATS, atomic_write_text, load_cloud, save_cloud
from .data import generate_dataset, load_checkpoint, read_dataset, save_checkpoint, write_dataset
from .errors import ContractError, EmptyCloudError, FormatError, NumericError, ShapeError
from .geometry import PointCloud, chamfer, chamfer_mean
from .model import DESK_CONFIG
from .pipeline import (
    BenchSizes,
    InferenceConfig,
    TrainConfig,
    benchmark_decoders,
    correspond,
    deform_query,
    eval_correspondence,
    new_model,
    read_correspondences,
    train,
    write_correspondences,
    write_metrics,
)

log = logging.getLogger("metadeform")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config file ---------------------------------------------------------------


def read_config_file(path):
    """Flat ``key = value`` pairs; ``#`` starts a comment."""
    out = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser, argv, args):
    """Re-parse with config-file values installed as defaults."""
    values = read_config_file(args.config)
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"{args.config}: unknown key(s) for '{args.command}': {', '.join(unknown)}")
    defaults = {}
    for key, text in values.items():
        action = actions[key]
        if action.const is not None and action.nargs == 0:  # store_true / store_false
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{args.config}: {key} expects a boolean, got {text!r}")
            defaults[key] = lowered in ("true", "1", "yes")
        else:
            convert = int if isinstance(action, argparse._CountAction) else action.type
            try:
                value = convert(text) if convert else text
            except (TypeError, ValueError):
                raise UsageError(f"{args.config}: bad value for {key}: {text!r}") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{args.config}: {key} must be one of {sorted(action.choices)}")
            defaults[key] = value
    parser.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- argument parsing ----------------------------------------------------------


def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--seed", type=int, default=DEFAULT_SEED, help="random seed, echoed into output headers (default: %(default)s)")
    g.add_argument("--threads", type=int, default=1, help="thread budget for parallel stages (default: %(default)s)")
    g.add_argument("--precision", choices=("float32", "float64"), default=None,
                   help="floating-point precision; defaults to float32 for new models and the stored dtype otherwise")
    g.add_argument("--config", default=None, help="flat key = value file of option defaults")
    g.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    return p


def _inference_options(p):
    g = p.add_argument_group("inference")
    d = InferenceConfig()
    g.add_argument("--iters", type=int, default=d.iterations, help="latent optimisation iterations; 0 keeps the encoder embedding (default: %(default)s)")
    g.add_argument("--lr", type=float, default=d.lr, help="latent optimisation learning rate (default: %(default)s)")
    g.add_argument("--alpha-samples", type=int, default=d.alpha_samples, help="pitch grid samples over [-pi/2, pi/2) (default: %(default)s)")
    g.add_argument("--beta-samples", type=int, default=d.beta_samples, help="yaw grid samples over [-pi/4, pi/4) (default: %(default)s)")
    g.add_argument("--no-rotation-search", action="store_true", help="skip the pitch/yaw grid search")
    g.add_argument("--nn", choices=("tree", "brute"), default=d.nn, help="nearest-neighbour backend (default: %(default)s)")
    g.add_argument("--template", default=None, help="cloud file used as a replacement template (hot swap)")


def build_parser():
    common = _common()
    parser = _Parser(prog="metadeform", description="Shape correspondence by template deformation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic posed-shape dataset")
    p.add_argument("--out", required=True, help="output directory (created)")
    p.add_argument("--count", type=int, default=64, help="number of shapes (default: %(default)s)")
    p.add_argument("--points", type=int, default=DESK_CONFIG.n_template, help="points per shape (default: %(default)s)")
    p.add_argument("--format", choices=FORMATS, default="xyz", help="cloud file format (default: %(default)s)")

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    d = TrainConfig()
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--resume", default=None, help="checkpoint to continue from (model and optimizer state)")
    p.add_argument("--kind", choices=("meta", "lvc"), default="meta", help="decoder type for a new model (default: %(default)s)")
    p.add_argument("--phase1-epochs", type=int, default=d.phase1_epochs, help="epochs at the first learning rate (default: %(default)s)")
    p.add_argument("--phase1-lr", type=float, default=d.phase1_lr, help="first learning rate (default: %(default)s)")
    p.add_argument("--phase2-epochs", type=int, default=d.phase2_epochs, help="epochs at the second learning rate (default: %(default)s)")
    p.add_argument("--phase2-lr", type=float, default=d.phase2_lr, help="second learning rate (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="shapes per step (default: %(default)s)")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--loss-log", default=None, help="per-epoch loss file (default: <out>.loss.txt)")

    p = sub.add_parser("deform", parents=[common], help="deform the template into a query cloud")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--query", required=True, help="query cloud (obj, ply or xyz)")
    p.add_argument("--out", required=True, help="deformed template, written as ASCII PLY")
    p.add_argument("--report", default=None, help="Chamfer report (default: <out>.report.txt)")
    _inference_options(p)

    p = sub.add_parser("correspond", parents=[common], help="point-to-point correspondence between two clouds")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--query1", required=True, help="source cloud")
    p.add_argument("--query2", required=True, help="target cloud")
    p.add_argument("--out", required=True, help="correspondence file to write")
    p.add_argument("--gt", default=None, help="ground-truth locations in the target frame, one row per source point")
    p.add_argument("--metrics", default=None, help="metrics text report (default: <out>.metrics.txt, JSON twin alongside)")
    p.add_argument("--init-second-from-first", action="store_true",
                   help="start the second embedding from the first query's encoding")
    _inference_options(p)

    p = sub.add_parser("eval", parents=[common], help="score a correspondence file against ground truth")
    p.add_argument("--correspondences", required=True, help="file written by 'correspond'")
    p.add_argument("--gt", required=True, help="ground-truth cloud, one row per source point")
    p.add_argument("--out", required=True, help="metrics text report (JSON twin written next to it)")

    p = sub.add_parser("bench", parents=[common], help="time the meta decoder against the LVC baseline")
    b = BenchSizes()
    p.add_argument("--out", default=None, help="write the report here as well as to stdout")
    p.add_argument("--reps", type=int, default=20, help="repetitions per case (default: %(default)s)")
    p.add_argument("--batch", type=int, default=b.batch, help="shapes per training step (default: %(default)s)")
    p.add_argument("--points", type=int, default=DESK_CONFIG.n_template, help="template points (default: %(default)s)")
    p.add_argument("--decode-points", type=int, default=b.decode_points, help="points per bulk decode (default: %(default)s)")
    p.add_argument("--correspond-iters", type=int, default=b.correspond_iterations,
                   help="latent iterations in the correspondence case (default: %(default)s)")
    p.add_argument("--cases", default="train_step,decode,correspond", help="comma-separated cases (default: %(default)s)")
    return parser


# -- helpers -------------------------------------------------------------------


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _require_parent(path, what):
    parent = Path(path).absolute().parent
    if not parent.is_dir():
        raise FileNotFoundError(f"directory for {what} does not exist: {parent}")


def _sidecar(path, suffix):
    return str(path) + suffix


def _inference_config(args):
    return InferenceConfig(
        alpha_samples=args.alpha_samples,
        beta_samples=args.beta_samples,
        iterations=args.iters,
        lr=args.lr,
        search_rotation=not args.no_rotation_search,
        init_second_from_first=getattr(args, "init_second_from_first", False),
        nn=args.nn,
        threads=args.threads,
    )


def _load_model(args):
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model
    if args.precision and np.dtype(args.precision) != model.dtype:
        model = _cast_model(model, args.precision)
    return model


def _cast_model(model, dtype):
    cfg = replace(model.config, dtype=dtype)
    params = {k: v.astype(dtype) for k, v in model.params.items()}
    return type(model)(cfg, model.template_base.astype(dtype), params=params, seed=model.seed)


def _template(args, model):
    if not args.template:
        return None
    from .pipeline import hot_swap_template

    _require_file(args.template, "template")
    return hot_swap_template(model, load_cloud(args.template))


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args):
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise FileExistsError(f"output path exists and is not a directory: {out}")
    _require_parent(out, "dataset")
    pairs = generate_dataset(args.count, args.points, args.seed)
    # build in a sibling temp dir, then move files in with the index last
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.absolute().parent))
    try:
        write_dataset(pairs, tmp, args.format, seed=args.seed)
        out.mkdir(exist_ok=True)
        names = sorted(p.name for p in tmp.iterdir() if p.name != "index.txt") + ["index.txt"]
        for name in names:
            os.replace(tmp / name, out / name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"wrote {len(pairs)} shapes of {args.points} points to {out} (seed {args.seed})")
    return EXIT_OK


def cmd_train(args):
    _require_parent(args.out, "checkpoint")
    loss_log = args.loss_log or _sidecar(args.out, ".loss.txt")
    _require_parent(loss_log, "loss log")
    if args.resume:
        _require_file(args.resume, "checkpoint to resume")
    dataset = read_dataset(args.data)
    if not dataset:
        raise ContractError(f"dataset {args.data} is empty")
    cfg = TrainConfig(
        phase1_epochs=args.phase1_epochs,
        phase1_lr=args.phase1_lr,
        phase2_epochs=args.phase2_epochs,
        phase2_lr=args.phase2_lr,
        batch_size=args.batch_size,
        seed=args.seed,
        dtype=args.precision or "float32",
        max_steps=args.max_steps,
    )
    if args.resume:
        bundle = load_checkpoint(args.resume)
        model, optimizer = bundle.model, bundle.optimizer
        if args.precision and np.dtype(args.precision) != model.dtype:
            raise ContractError(f"checkpoint is {model.dtype}; cannot resume at {args.precision}")
    else:
        n = len(dataset[0].shape)
        model = new_model(args.kind, replace(DESK_CONFIG, n_template=n, dtype=cfg.dtype), args.seed)
        optimizer = None

    def report(epoch, loss):
        print(f"epoch {epoch} loss {loss:.9g}", flush=True)

    result = train(dataset, cfg, model=model, optimizer=optimizer, callback=report)
    lines = [f"# seed {args.seed} kind {model.kind} shapes {len(dataset)}", "# epoch loss"]
    lines += [f"{k} {v!r}" for k, v in enumerate(result.epoch_losses)]
    save_checkpoint(result.bundle, args.out)
    atomic_write_text(loss_log, "\n".join(lines) + "\n")
    final = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(f"saved {args.out} after {result.bundle.info['steps']} steps, final loss {final:.9g}")
    return EXIT_OK


def cmd_deform(args):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.query, "query")
    _require_parent(args.out, "output")
    report = args.report or _sidecar(args.out, ".report.txt")
    model = _load_model(args)
    query = load_cloud(args.query)
    cfg = _inference_config(args)
    deformed, emb, prepared = deform_query(model, query, cfg, template=_template(args, model))
    pts = query.points
    d = {
        "seed": args.seed,
        "config_hash": cfg.digest(),
        "iterations": cfg.iterations,
        "alpha": prepared.rotation.alpha,
        "beta": prepared.rotation.beta,
        "chamfer_initial": emb.initial_loss,
        "chamfer": emb.loss,
        "chamfer_mean": chamfer_mean(deformed, pts),
        "chamfer_original_frame": chamfer(deformed, pts),
        "template_points": len(deformed),
    }
    save_cloud(PointCloud(deformed), args.out, "ply")
    atomic_write_text(report, "".join(f"{k} {v}\n" for k, v in d.items()))
    print(f"wrote {args.out} ({len(deformed)} points), chamfer {emb.loss:.6g}")
    return EXIT_OK


def cmd_correspond(args):
    _require_file(args.checkpoint, "checkpoint")
    for path, what in ((args.query1, "query1"), (args.query2, "query2")):
        _require_file(path, what)
    if args.gt:
        _require_file(args.gt, "ground truth")
    _require_parent(args.out, "output")
    metrics_path = args.metrics or _sidecar(args.out, ".metrics.txt")
    model = _load_model(args)
    q1, q2 = load_cloud(args.query1), load_cloud(args.query2)
    cfg = _inference_config(args)
    C = correspond(model, q1, q2, cfg, template=_template(args, model))
    extra = {
        "seed": args.seed,
        "config_hash": C.info["config_hash"],
        "pairs": len(C),
        "alpha_1": C.info["rotation_1"][0],
        "beta_1": C.info["rotation_1"][1],
        "alpha_2": C.info["rotation_2"][0],
        "beta_2": C.info["rotation_2"][1],
        "chamfer_1": C.info["chamfer_1"],
        "chamfer_2": C.info["chamfer_2"],
    }
    metrics = eval_correspondence(C, load_cloud(args.gt).points) if args.gt else {}
    write_correspondences(C, args.out, cfg, seed=args.seed)
    write_metrics(metrics, metrics_path, _sidecar(os.path.splitext(metrics_path)[0], ".json"), extra)
    print(f"wrote {len(C)} pairs to {args.out}")
    if args.gt:
        print(f"mean error {metrics.mean_error:.6g}, exact matches {metrics.exact_rate:.4f}")
    return EXIT_OK


def cmd_eval(args):
    _require_file(args.correspondences, "correspondence file")
    _require_file(args.gt, "ground truth")
    _require_parent(args.out, "metrics")
    C = read_correspondences(args.correspondences)
    m = eval_correspondence(C, load_cloud(args.gt).points)
    write_metrics(m, args.out, _sidecar(os.path.splitext(args.out)[0], ".json"), {"seed": args.seed, "pairs": len(C)})
    print(f"mean error {m.mean_error:.6g}, exact matches {m.exact_rate:.4f}")
    return EXIT_OK


def cmd_bench(args):
    if args.out:
        _require_parent(args.out, "report")
    cases = tuple(c.strip() for c in args.cases.split(",") if c.strip())
    bad = set(cases) - {"train_step", "decode", "correspond"}
    if bad:
        raise UsageError(f"unknown bench case(s): {', '.join(sorted(bad))}")
    cfg = replace(DESK_CONFIG, n_template=args.points, dtype=args.precision or "float32")
    meta, lvc = new_model("meta", cfg, args.seed), new_model("lvc", cfg, args.seed)
    sizes = BenchSizes(batch=args.batch, decode_points=args.decode_points, correspond_iterations=args.correspond_iters)
    rep = benchmark_decoders(meta, lvc, sizes, repetitions=args.reps, seed=args.seed, cases=cases)
    text = f"# seed {args.seed} batch {args.batch} points {args.points}\n" + rep.format()
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "deform": cmd_deform,
    "correspond": cmd_correspond,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            command = args.command
            args = _apply_config(sub, argv[argv.index(command) + 1 :], args)
            args.command = command
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, EmptyCloudError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, NumericError, ShapeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
