"""``retina-grader`` command line: synth, split, train, eval, tune, predict.

Exit codes: 0 success, 1 usage or configuration error, 2 data or parse
error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import os
import sys

import numpy as np

from . import kernels
from .config import load_config
from .data import (
    Severity,
    SplitConfig,
    apply_exclusions,
    generate_synthetic_dataset,
    load_exclusions,
    load_manifest,
    save_splits,
    stratified_split,
)
from .errors import DataError, RetinaGraderError, UsageError
from .imageio import read_image
from .modelfile import ModelFile, load_model, save_model
from .morph import preprocess
from .train import (
    SplitArrays,
    emit_curves,
    evaluate_arrays,
    hyperparameter_search,
    load_arrays,
    run_training,
    thread_count,
    write_leaderboard,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _threads_limit():
    """Cap BLAS threads when RETINA_GRADER_THREADS is set (needs threadpoolctl)."""
    if not os.environ.get("RETINA_GRADER_THREADS", "").strip():
        return contextlib.nullcontext()
    n = thread_count()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt_rate(x):
    return "n/a" if math.isnan(x) else f"{x:.6f}"


def _print_metrics(metrics, n, out):
    print(f"samples      {n}", file=out)
    print(f"accuracy     {_fmt_rate(metrics.accuracy)}", file=out)
    print(f"sensitivity  {_fmt_rate(metrics.sensitivity)}", file=out)
    print(f"specificity  {_fmt_rate(metrics.specificity)}", file=out)
    print("confusion (rows = true grade, columns = predicted)", file=out)
    print("       " + " ".join(f"{g:>5d}" for g in range(len(metrics.confusion))), file=out)
    for g, row in enumerate(metrics.confusion):
        print(f"  {g:>3d}  " + " ".join(f"{v:>5d}" for v in row), file=out)


# ------------------------------------------------------------------ commands


def cmd_synth(args, out):
    m = generate_synthetic_dataset(args.per_grade, args.seed, args.out, args.size)
    print(f"wrote {len(m)} images and {os.path.join(args.out, 'manifest.csv')}", file=out)
    return 0


def cmd_split(args, out):
    m = load_manifest(args.manifest)
    if args.exclusions:
        m, _ = apply_exclusions(m, load_exclusions(args.exclusions))
    cfg = SplitConfig(args.ratio, args.seed, args.test_ratio)
    m = stratified_split(m, cfg)
    target = args.out or os.path.join(os.path.dirname(os.path.abspath(args.manifest)), "splits.csv")
    save_splits(m, target)
    print(f"wrote {target}", file=out)
    print("grade  train  val  test", file=out)
    for g in Severity:
        counts = [sum(1 for s in m.split_samples(k) if s.grade == g) for k in ("train", "val", "test")]
        print(f"{int(g):>5d}  {counts[0]:>5d}  {counts[1]:>3d}  {counts[2]:>4d}", file=out)
    return 0


def _load_run_data(cfg):
    m = load_manifest(cfg.manifest, splits_path=cfg.splits)
    if cfg.exclusions:
        m, _ = apply_exclusions(m, load_exclusions(cfg.exclusions))
    if cfg.splits is None:
        m = stratified_split(m, cfg.split)
    return m


def cmd_train(args, out):
    cfg = load_config(args.config)
    cfg.preflight()
    m = _load_run_data(cfg)
    arrays = SplitArrays.from_manifest(m, cfg.preproc)
    os.makedirs(cfg.output_dir, exist_ok=True)

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch:>3d}  train loss {rec.training_loss:.4f} acc {rec.training_accuracy:.4f}"
                  f"  val loss {rec.validation_loss:.4f} acc {rec.validation_accuracy:.4f}", file=out, flush=True)

    report = run_training(cfg.net, m, cfg.preproc, cfg.train, arrays=arrays, progress=progress)
    model = ModelFile(report.net_spec, cfg.preproc, report.state)
    paths = {
        "model": os.path.join(cfg.output_dir, "model.rgm"),
        "curves_csv": os.path.join(cfg.output_dir, "curves.csv"),
        "curves_svg": os.path.join(cfg.output_dir, "curves.svg"),
        "summary": os.path.join(cfg.output_dir, "summary.json"),
        "splits": os.path.join(cfg.output_dir, "splits.csv"),
    }
    save_model(paths["model"], model)
    emit_curves(report, paths["curves_csv"], paths["curves_svg"])
    save_splits(m, paths["splits"])
    summary = report.summary()
    summary["network"] = report.net_spec.to_text()
    summary["train_samples"] = len(arrays.train_y)
    summary["val_samples"] = len(arrays.val_y)
    _write_json(paths["summary"], summary)
    best = report.best_record()
    print(f"best epoch {report.best_epoch}: val loss {best.validation_loss:.6f}, "
          f"val accuracy {best.validation_accuracy:.6f}"
          + (" (stopped early)" if report.stopped_early else ""), file=out)
    for label, path in paths.items():
        print(f"{label:<11s}{path}", file=out)
    return 0


def cmd_eval(args, out):
    model = load_model(args.model)
    m = load_manifest(args.manifest, splits_path=args.splits)
    samples = list(m.assignable()) if args.split == "all" else m.split_samples(args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty in {args.manifest}")
    x, y = load_arrays(samples, model.preproc, m.root)
    loss, metrics = evaluate_arrays(model.network(), x, y)
    print(f"split        {args.split}", file=out)
    print(f"loss         {loss:.6f}", file=out)
    _print_metrics(metrics, len(y), out)
    if args.json:
        _write_json(args.json, {"split": args.split, "loss": loss, "samples": len(y), **metrics.to_dict()})
    return 0


def cmd_tune(args, out):
    cfg = load_config(args.config)
    cfg.preflight()
    m = _load_run_data(cfg)
    arrays = SplitArrays.from_manifest(m, cfg.preproc)
    os.makedirs(cfg.output_dir, exist_ok=True)
    workers = cfg.workers or thread_count()

    def progress(i, c, report):
        if not args.quiet:
            best = report.best_record()
            print(f"candidate {i}: lr {c.learning_rate!r} batch {c.batch_size} epochs {c.max_epochs} "
                  f"dropout {c.dropout_rate!r} -> val acc {best.validation_accuracy:.4f} "
                  f"loss {best.validation_loss:.4f}", file=out, flush=True)

    best, board = hyperparameter_search(cfg.search, cfg.net, arrays, cfg.train, workers, progress)
    path = os.path.join(cfg.output_dir, "leaderboard.csv")
    write_leaderboard(board, path)
    print(f"best: lr {best.learning_rate!r} batch {best.batch_size} epochs {best.max_epochs} "
          f"dropout {best.dropout_rate!r} seed {best.seed}", file=out)
    print(f"leaderboard {path}", file=out)
    return 0


def cmd_predict(args, out):
    model = load_model(args.model)
    net = model.network()
    for path in args.images:
        x = preprocess(read_image(path), model.preproc).data
        probs = net.predict_proba(x[None])[0]
        grade = Severity(int(np.argmax(probs)))
        print(path, file=out)
        for g in Severity:
            print(f"  {int(g)} {g.label:<14s} {probs[int(g)]:.6f}", file=out)
        print(f"  prediction: {int(grade)} {grade.label}", file=out)
    return 0


# -------------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="retina-grader", description="Diabetic-retinopathy severity grading toolkit.")
    p.add_argument("--backend", choices=["auto", "cython", "python"], default=None,
                   help="kernel backend (default: RETINA_GRADER_BACKEND or auto)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic fundus dataset")
    s.add_argument("--per-grade", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=128, help="square image side in pixels")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="write a stratified train/val split sidecar")
    s.add_argument("manifest")
    s.add_argument("--ratio", type=float, default=0.8, help="train fraction, strictly inside (0, 1)")
    s.add_argument("--test-ratio", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--exclusions")
    s.add_argument("--out", help="sidecar path (default: splits.csv beside the manifest)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("config")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a model on a manifest split")
    s.add_argument("model")
    s.add_argument("manifest")
    s.add_argument("--splits", help="split sidecar CSV")
    s.add_argument("--split", default="val", choices=["train", "val", "test", "all"])
    s.add_argument("--json", help="also write the metrics as JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("tune", help="hyperparameter search from a config file")
    s.add_argument("config")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("predict", help="grade one or more images")
    s.add_argument("model")
    s.add_argument("images", nargs="+")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.backend:
            kernels.use(args.backend)
        with _threads_limit():
            return args.func(args, out)
    except RetinaGraderError as exc:
        print(f"retina-grader: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"retina-grader: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
