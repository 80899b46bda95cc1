"""Curve series and the model comparison table."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import MetricsReport
from .training import read_log

COLUMNS = ("Model", "TA", "TF1", "TR", "TP")


@dataclass
class RunRecord:
    run_id: str
    model_name: str
    metrics: MetricsReport
    config: dict = field(default_factory=dict)
    log_path: str | None = None

    @classmethod
    def from_run_dir(cls, run_dir, average: str = "micro") -> "RunRecord":
        run_dir = Path(run_dir)
        doc = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
        m = doc[average]
        config_path = run_dir / "config.json"
        config = json.loads(config_path.read_text(encoding="utf-8")) if config_path.exists() else {}
        log = run_dir / "log.csv"
        return cls(run_dir.name, doc.get("model_name", run_dir.name),
                   MetricsReport(m["accuracy"], m["precision"], m["recall"], m["f1"],
                                 m.get("average", average), m.get("degenerate", False)),
                   config, str(log) if log.exists() else None)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _cells(r: RunRecord) -> list:
    m = r.metrics
    return [r.model_name, _fmt(m.accuracy), _fmt(m.f1), _fmt(m.recall), _fmt(m.precision)]


def emit_comparison(records, text_path=None, csv_path=None):
    """Rows sorted by test accuracy, highest first; the first row is best.

    The text form is one space-separated line per model under a header, then
    a ``best:`` line. The CSV adds a ``best`` column (1 or 0). Returns
    ``(text, csv_text)`` and writes either one when given a path.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one run record")
    ranked = sorted(records, key=lambda r: -r.metrics.accuracy)
    lines = [" ".join(COLUMNS)] + [" ".join(_cells(r)) for r in ranked]
    lines.append(f"best: {ranked[0].model_name}")
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS + ("best",))
    for i, r in enumerate(ranked):
        w.writerow(_cells(r) + [int(i == 0)])
    table = buf.getvalue()
    for path, content in ((text_path, text), (csv_path, table)):
        if path is not None:
            Path(path).write_text(content, encoding="utf-8", newline="\n")
    return text, table


def parse_comparison_csv(text: str) -> list:
    """Read an emitted comparison CSV back into ``(model, MetricsReport)`` pairs."""
    rows = list(csv.DictReader(io.StringIO(text)))
    return [(row["Model"], MetricsReport(float(row["TA"]), float(row["TP"]),
                                         float(row["TR"]), float(row["TF1"]), "micro"))
            for row in rows]


def emit_curves(log_path, out_dir) -> tuple:
    """Write ``loss.csv`` and ``accuracy.csv`` (epoch, train, val) next to
    each other in ``out_dir``; returns both paths."""
    records = read_log(log_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, train_key, val_key in (("loss", "train_loss", "val_loss"),
                                     ("accuracy", "train_acc", "val_acc")):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "train", "val"))
        for r in records:
            w.writerow((r.epoch, repr(getattr(r, train_key)), repr(getattr(r, val_key))))
        path = out_dir / f"{name}.csv"
        path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
        paths.append(path)
    return tuple(paths)
