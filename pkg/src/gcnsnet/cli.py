"""Command-line entry point: ``gcnsnet <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.
Every command stages its outputs in a temporary directory and moves them
into place only when it succeeds. The default output directory comes from
``$GCNSNET_OUT_DIR`` (falling back to ``./gcnsnet-out``).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .coarsening import coarsen
from .data import DataError, load_dataset, make_synthetic, parse_split_kind, save_dataset, split
from .graph import build_graph, graph_fingerprint, laplacians
from .metrics import evaluate
from .network import ArchError, CheckpointError, ModelSpec, file_digest, load_checkpoint, save_checkpoint
from .training import NumericalAbort, TrainConfig, build_plan, cross_validate, grid, predict_proba, train

log = logging.getLogger("gcnsnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_DIR_ENV = "GCNSNET_OUT_DIR"


class UsageError(ValueError):
    pass


class Stage:
    """Collects artifacts in a temp dir; ``commit`` moves them into ``out_dir``."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".gcnsnet-", dir=self.out_dir.parent))
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self.tmp / name

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text, encoding="utf-8")

    def commit(self) -> list[str]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        final = []
        for name in self.names:
            os.replace(self.tmp / name, self.out_dir / name)
            final.append(str(self.out_dir / name))
        shutil.rmtree(self.tmp, ignore_errors=True)
        return final

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _matrix_csv(mat: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in mat)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def _run(args, body) -> int:
    """Run ``body(stage)`` inside a staged output directory and write the manifest."""
    started = datetime.now(timezone.utc).isoformat()
    stage = Stage(Path(args.out))
    try:
        produced = body(stage) or []
        manifest = {
            "command": args.command,
            "flags": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
            "seed": getattr(args, "seed", None),
            "inputs": {p: file_digest(p) for p in _inputs(args)},
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "artifacts": [str(Path(args.out) / n) for n in stage.names + ["manifest.json"]],
            **({"extra": produced} if isinstance(produced, dict) else {}),
        }
        stage.write_text("manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str))
        stage.commit()
        return EXIT_OK
    except BaseException:
        stage.abort()
        raise


def _inputs(args) -> list[str]:
    return [getattr(args, k) for k in ("data", "checkpoint", "specs_file") if getattr(args, k, None)]


def _limit_threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    ds = make_synthetic(args.channels, args.per_class, args.classes, args.seed, args.separation)
    fmt = args.format or ("binary" if args.out.endswith(".bin") else "csv")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out, fmt)
    print(f"wrote {ds.n_samples} samples x {ds.n_channels} channels to {args.out}")
    return EXIT_OK


def _graph_for(args, ds):
    if getattr(args, "train_only_pcc", False):
        sp = split(ds, parse_split_kind(args.split), args.seed)
        return build_graph(ds, sp.train_indices)
    return build_graph(ds)


def cmd_build_graph(args) -> int:
    ds = load_dataset(args.data)

    def body(stage):
        g = _graph_for(args, ds)
        lap = laplacians(g)
        stage.write_text("pcc.csv", _matrix_csv(g.pcc))
        stage.write_text("abs_pcc.csv", _matrix_csv(g.abs_pcc))
        stage.write_text("adjacency.csv", _matrix_csv(g.adjacency))
        stage.write_text("laplacian_norm.csv", _matrix_csv(lap.normalized))
        print(f"graph: {g.n_nodes} nodes, lambda_max {lap.lambda_max:.6f}, fingerprint {graph_fingerprint(g.adjacency):016x}")
        return {"fingerprint": f"{graph_fingerprint(g.adjacency):016x}", "lambda_max": lap.lambda_max}

    return _run(args, body)


def cmd_coarsen(args) -> int:
    ds = load_dataset(args.data)

    def body(stage):
        g = _graph_for(args, ds)
        plan = coarsen(g, args.levels, args.seed)
        for lvl, (size, fakes) in enumerate(zip(plan.sizes, plan.fake_counts)):
            print(f"level {lvl}: {size} nodes ({fakes} fake)")
            stage.write_text(f"adjacency_level{lvl}.csv", _matrix_csv(plan.graphs[lvl]))
        return {"sizes": plan.sizes, "fake_counts": plan.fake_counts, "perm": plan.perm.tolist()}

    return _run(args, body)


def _spec_from_args(args, n_classes: int) -> ModelSpec:
    try:
        return ModelSpec(
            args.arch,
            tuple(_int_list(args.filters)),
            args.order,
            n_classes,
            fc_sizes=tuple(_int_list(args.fc)) if args.fc else (),
            dropout_rate=args.dropout,
        )
    except ArchError as exc:
        raise UsageError(str(exc)) from None


def _config_from_args(args) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=args.lr,
            l2_lambda=args.l2,
            batch_size=args.batch,
            epochs=args.epochs,
            dropout_rate=args.dropout,
            seed=args.seed,
            eval_every=args.eval_every,
            zscore=args.zscore,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    try:
        kind = parse_split_kind(args.split)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    config = _config_from_args(args)
    ds = load_dataset(args.data)
    spec = _spec_from_args(args, ds.n_classes)
    try:
        spec.check_graph(ds.n_channels)
    except ArchError as exc:
        raise UsageError(str(exc)) from None
    coarsen_seed = args.coarsen_seed if args.coarsen_seed is not None else args.seed

    def body(stage):
        sp = split(ds, kind, args.seed)
        graph = build_graph(ds, sp.train_indices) if args.train_only_pcc else build_graph(ds)
        plan = build_plan(graph, spec, coarsen_seed)
        with _limit_threads(args.threads):
            result = train(ds, sp, graph, plan, spec, config)
        meta = {
            "split": sp.describe(),
            "split_seed": args.seed,
            "train_only_pcc": bool(args.train_only_pcc),
            "zscore": None if result.norm is None else [result.norm[0].tolist(), result.norm[1].tolist()],
            "class_names": list(ds.class_names),
        }
        save_checkpoint(stage.path("checkpoint.gcnm"), result.params, result.spec, coarsen_seed, graph_fingerprint(graph.adjacency), meta)
        stage.write_text("report.json", result.report.to_json())
        final = result.report.final
        if final is not None:
            print(f"test GAA {final.gaa:.4f}  kappa {final.kappa:.4f}  macro F1 {final.macro_f1:.4f}")
        return {"wall_time": result.report.wall_time, "run_id": result.report.run_id}

    return _run(args, body)


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    params, spec, coarsen_seed, fingerprint, meta = load_checkpoint(args.checkpoint)
    split_text = args.split_spec or meta.get("split", "holdout:0.9")
    seed = args.seed if args.seed is not None else meta.get("split_seed", 0)
    try:
        sp = split(ds, parse_split_kind(split_text), seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if meta.get("train_only_pcc"):
        train_sp = split(ds, parse_split_kind(meta["split"]), meta["split_seed"])
        graph = build_graph(ds, train_sp.train_indices)
    else:
        graph = build_graph(ds)
    actual = graph_fingerprint(graph.adjacency)
    if actual != fingerprint:
        raise CheckpointError(f"graph fingerprint mismatch: checkpoint {fingerprint:016x}, data {actual:016x}")
    plan = build_plan(graph, spec, coarsen_seed)
    values = ds.values
    if meta.get("zscore"):
        mean, std = (np.asarray(v) for v in meta["zscore"])
        values = (values - mean) / std
    idx = sp.test_indices
    probs = predict_proba(params, spec, plan, values[idx])
    report = evaluate(probs, ds.labels[idx], ds.n_classes, ds.class_names)

    def body(stage):
        stage.write_text("eval.json", json.dumps(report.to_dict(with_roc=False), indent=2, sort_keys=True))
        if args.roc:
            for c in range(ds.n_classes):
                stage.write_text(f"roc_class{c}.csv", report.roc_csv(c))
        print(json.dumps(report.to_dict(with_roc=False), sort_keys=True))

    return _run(args, body)


def cmd_cv(args) -> int:
    config = _config_from_args(args)
    ds = load_dataset(args.data)
    spec = _spec_from_args(args, ds.n_classes)
    try:
        spec.check_graph(ds.n_channels)
    except ArchError as exc:
        raise UsageError(str(exc)) from None
    if not 2 <= args.k <= ds.n_samples:
        raise UsageError(f"--k must lie in [2, {ds.n_samples}]")

    def body(stage):
        graph = build_graph(ds)
        plan = build_plan(graph, spec, args.seed)
        with _limit_threads(args.threads):
            cv = cross_validate(ds, args.k, graph, plan, spec, config)
        stage.write_text("cv_report.json", json.dumps(cv.to_dict(), indent=2, sort_keys=True))
        for i, fold in enumerate(cv.folds):
            print(f"fold {i}: GAA {fold.final.gaa:.4f}  F1 {fold.final.macro_f1:.4f}")
        print(f"mean GAA {cv.gaa_mean:.4f} (min {cv.gaa_min:.4f}, max {cv.gaa_max:.4f})")

    return _run(args, body)


def read_specs_file(path) -> list:
    """Lines of ``<framework> <filters> <K>``; ``#`` starts a comment.

    Unparseable lines come back as ``(line, None, None)`` so the grid can
    record them as failed rows.
    """
    specs = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            specs.append((parts[0], tuple(_int_list(parts[1])), int(parts[2])))
        except (ValueError, UsageError):
            specs.append((line, None, None))
    return specs


def cmd_grid(args) -> int:
    config = _config_from_args(args)
    ds = load_dataset(args.data)
    specs = read_specs_file(args.specs_file)
    if not specs:
        raise DataError(f"{args.specs_file}: no specs")

    def body(stage):
        with _limit_threads(args.threads):
            rows = grid(ds, specs, config)
        stage.write_text("grid.json", json.dumps(rows, indent=2, sort_keys=True))
        for r in rows:
            gaa = "failed" if r["gaa"] is None else f"{r['gaa']:.4f}"
            print(f"{r['framework']}\tK={r['K']}\t{gaa}")

    return _run(args, body)


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--arch", default="(C-P)x6-S", help="framework string, e.g. '(C-P)x6-S'")
    p.add_argument("--filters", default="16,32,64,128,256,512")
    p.add_argument("--fc", default="", help="comma-separated FC layer widths for F tokens")
    p.add_argument("--order", type=int, default=2, help="Chebyshev polynomial order K")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--l2", type=float, default=1e-6)
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--zscore", action="store_true", help="z-score channels with training-split statistics")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")


def _add_common(p, seed=True):
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=os.environ.get(OUT_DIR_ENV, "gcnsnet-out"))
    if seed:
        p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcnsnet", description="Graph convolutional EEG motor-imagery classifier")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic ring-pattern dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "binary"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="dump PCC, |PCC|, adjacency and normalized Laplacian as CSV")
    _add_common(p)
    p.add_argument("--out-dir", dest="out", default=argparse.SUPPRESS)
    p.add_argument("--train-only-pcc", action="store_true")
    p.add_argument("--split", default="holdout:0.9")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("coarsen", help="print coarsening levels and dump per-level adjacency")
    _add_common(p)
    p.add_argument("--out-dir", dest="out", default=argparse.SUPPRESS)
    p.add_argument("--levels", type=int, required=True)
    p.add_argument("--train-only-pcc", action="store_true")
    p.add_argument("--split", default="holdout:0.9")
    p.set_defaults(func=cmd_coarsen)

    p = sub.add_parser("train", help="train a model and write checkpoint + report")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--split", default="holdout:0.9", help="holdout:<frac> or kfold:<k>:<fold>")
    p.add_argument("--coarsen-seed", type=int, default=None)
    p.add_argument("--train-only-pcc", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split-spec", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--roc", action="store_true", help="also dump per-class ROC CSVs")
    p.add_argument("--out", default=os.environ.get(OUT_DIR_ENV, "gcnsnet-out"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("grid", help="train a list of architectures and rank them")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--specs-file", required=True)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gcnsnet {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"gcnsnet {args.command}: numerical abort: {exc}", file=sys.stderr)
        print(json.dumps(exc.snapshot, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError, ArchError, OSError) as exc:
        print(f"gcnsnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
