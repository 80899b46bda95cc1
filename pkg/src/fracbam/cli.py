"""``fracbam`` command line: prep, train, eval, report, gradcheck.

Exit status is 0 on success, 1 on usage errors (and a failed gradient
check), 2 on problems with the data or checkpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

RESULTS_ENV = "FRACBAM_RESULTS"
DEFAULT_MODEL_NAME = "BAM-Inception"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _results_dir(value):
    return Path(value or os.environ.get(RESULTS_ENV) or "results")


def _ratios(text):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratios must be three comma-separated numbers: {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("ratios must have exactly three values")
    return vals


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8", newline="\n")


def cmd_prep(args):
    from .data import (
        DEFAULT_RATIOS, load_fixed_splits, prune_corrupted, scan_dataset, split_dataset,
    )

    manifest = scan_dataset(args.root)
    accepted, rejected = prune_corrupted(manifest, args.workers)
    fixed = load_fixed_splits(args.fixed_splits) if args.fixed_splits else None
    try:
        split = split_dataset(accepted, args.ratios or DEFAULT_RATIOS, args.seed, fixed,
                              rejected, args.channels)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out) if args.out else _results_dir(args.results) / "manifest.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    split.save(out)
    c = split.counts
    print(f"{out}: train {c['train']}, val {c['val']}, test {c['test']}, "
          f"rejected {len(rejected)}")
    return 0


def cmd_train(args):
    from .data import SplitData, SplitManifest
    from .training import TrainConfig, train

    split = SplitManifest.load(args.manifest)
    doc = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    for key in ("epochs", "seed", "width", "input_size", "batch_size", "learning_rate",
                "reduction_ratio"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    try:
        config = TrainConfig.from_dict(doc)
        model = config.build(split.channels)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    run_dir = _results_dir(args.results) / args.run_id
    ckpt = run_dir / "checkpoint"
    if ckpt.exists():
        shutil.rmtree(ckpt)
    size = (config.input_size, config.input_size)
    train_data, val_data = SplitData(split, "train", size), SplitData(split, "val", size)
    if len(train_data) == 0 or len(val_data) == 0:
        from .data import DataError
        raise DataError("manifest has an empty train or validation split")
    snapshot = config.to_dict()
    snapshot.update(model_name=args.model_name, manifest=str(args.manifest),
                    channels=split.channels)
    _write_json(run_dir / "config.json", snapshot)

    def progress(r):
        print(f"epoch {r.epoch:3d}  train_loss {r.train_loss:.4f}  train_acc {r.train_acc:.4f}  "
              f"val_loss {r.val_loss:.4f}  val_acc {r.val_acc:.4f}  lr {r.lr:.2e}", flush=True)

    result = train(model, train_data, val_data, config, ckpt, None if args.quiet else progress)
    shutil.copyfile(ckpt / "log.csv", run_dir / "log.csv")
    print(f"best epoch {result.best_epoch} (val_loss {result.best_val_loss:.4f}); "
          f"checkpoint in {ckpt}")
    return 0


def cmd_eval(args):
    from .data import DataError, SplitData, SplitManifest
    from .metrics import full_report
    from .model import load_model
    from .training import evaluate

    ckpt = Path(args.checkpoint)
    try:
        model = load_model(ckpt)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    split = SplitManifest.load(args.manifest)
    channels, h, w = model.input_shape
    if channels != split.channels:
        raise DataError(f"checkpoint expects {channels}-channel input but the manifest "
                        f"provides {split.channels} channels")
    data = SplitData(split, args.split, (h, w), cache=False)
    if len(data) == 0:
        raise DataError(f"split {args.split!r} is empty")
    counts = evaluate(model, data)
    run_dir = ckpt.parent
    model_name = args.model_name
    if model_name is None:
        cfg = run_dir / "config.json"
        model_name = (json.loads(cfg.read_text(encoding="utf-8")).get("model_name")
                      if cfg.exists() else None) or DEFAULT_MODEL_NAME
    doc = full_report(counts)
    doc.update(model_name=model_name, split=args.split, run_id=run_dir.name)
    out = Path(args.out) if args.out else run_dir / "metrics.json"
    _write_json(out, doc)
    m = doc["micro"]
    b = doc["binary"]
    print(f"{args.split}: accuracy {m['accuracy']:.4f}  precision {b['precision']:.4f}  "
          f"recall {b['recall']:.4f}  f1 {b['f1']:.4f}  ({counts.total} samples) -> {out}")
    return 0


def cmd_report(args):
    from .data import DataError
    from .report import RunRecord, emit_comparison, emit_curves

    root = _results_dir(args.results_dir)
    runs = sorted(p.parent for p in root.glob("*/metrics.json"))
    if not runs:
        raise DataError(f"no runs with metrics.json under {root}")
    records = [RunRecord.from_run_dir(r, args.average) for r in runs]
    for rec in records:
        if rec.log_path:
            emit_curves(rec.log_path, Path(rec.log_path).parent / "curves")
    text, _ = emit_comparison(records, root / "comparison.txt", root / "comparison.csv")
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    def show(r):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:28s} {r.error:.3e}  (< {r.tolerance:g})  {status}", flush=True)

    results = run_suite(include_model=not args.skip_model, seed=args.seed, progress=show)
    worst = max(r.error for r in results if r.tolerance == min(x.tolerance for x in results))
    print(f"max relative error (layers): {worst:.3e}")
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    p = _Parser(prog="fracbam", description="Fracture classification with attention-refined CNNs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prep", help="scan, prune and split an image tree into a manifest")
    s.add_argument("root")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ratios", type=_ratios, default=None,
                   help="train,val,test (default 0.8,0.115,0.085)")
    s.add_argument("--fixed-splits", help="JSON mapping of relative path to split")
    s.add_argument("--channels", type=int, choices=(1, 3), default=3)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", help="manifest path (default <results>/manifest.json)")
    s.add_argument("--results")
    s.set_defaults(fn=cmd_prep)

    s = sub.add_parser("train", help="train a model on a split manifest")
    s.add_argument("manifest")
    s.add_argument("--config", help="JSON file of TrainConfig fields")
    s.add_argument("--run-id", default="run")
    s.add_argument("--model-name", default=DEFAULT_MODEL_NAME)
    s.add_argument("--results")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--input-size", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--reduction-ratio", type=int)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on one split")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--out", help="metrics JSON path (default next to the checkpoint)")
    s.add_argument("--model-name")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("report", help="comparison table and curve series for a results dir")
    s.add_argument("results_dir", nargs="?")
    s.add_argument("--average", choices=("micro", "binary", "macro"), default="micro")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--skip-model", action="store_true")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .data import DataError
    from .tnsr import TnsrFormatError

    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"fracbam {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, TnsrFormatError, FileNotFoundError) as exc:
        print(f"fracbam {args.command}: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
