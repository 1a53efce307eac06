"""Writing run outputs and comparing finished runs.

A run directory holds ``metrics.csv`` (one row per client per round plus an
``agg`` row for the aggregated model on the test split), ``summary.json`` and,
for simulation runs, ``flip_log.csv``.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from fedpoison.errors import DataError
from fedpoison.orchestrator import ExperimentReport, RoundRecord
from fedpoison.poisoning import write_flip_log

METRICS_COLUMNS = ["round", "client_id", "loss", "accuracy", "f1", "epochs_run"]
METRIC_NAMES = ("loss", "accuracy", "f1")
# fields of summary.json that legitimately differ between otherwise identical runs
VOLATILE_SUMMARY_KEYS = ("wall_time_s", "mode")


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_rows(records: list[RoundRecord]):
    for rec in records:
        for m in rec.clients:
            yield [rec.round_idx, m.client_id, _fmt(m.loss), _fmt(m.accuracy), _fmt(m.f1), m.epochs_run]
        yield [rec.round_idx, "agg", _fmt(rec.test_loss), _fmt(rec.test_accuracy), _fmt(rec.test_f1), ""]


def metrics_csv(records: list[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    w.writerows(metrics_rows(records))
    return buf.getvalue()


def summary_dict(report: ExperimentReport) -> dict:
    out = {
        "name": report.config.name,
        "mode": report.mode,
        "complete": report.complete,
        "incomplete_round": report.incomplete_round,
        "rounds_completed": len(report.rounds),
        "wall_time_s": report.wall_time,
        "config": report.config.model_dump(),
    }
    if report.initial is not None:
        out["initial"] = dict(zip(METRIC_NAMES, report.initial))
    if report.rounds:
        last = report.final
        out["final"] = {
            "round": last.round_idx,
            "agg": {"loss": last.test_loss, "accuracy": last.test_accuracy, "f1": last.test_f1},
            "clients": {
                str(m.client_id): {"loss": m.loss, "accuracy": m.accuracy, "f1": m.f1, "epochs_run": m.epochs_run}
                for m in last.clients
            },
        }
    return out


def comparable_summary(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if k not in VOLATILE_SUMMARY_KEYS}


def write_outputs(report: ExperimentReport, out_dir, flip_log: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.csv", out / "summary.json"]
    paths[0].write_text(metrics_csv(report.rounds))
    paths[1].write_text(json.dumps(summary_dict(report), indent=2, sort_keys=True) + "\n")
    if flip_log:
        paths.append(out / "flip_log.csv")
        write_flip_log(report.flip_log, paths[2])
    return paths


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.csv"
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != METRICS_COLUMNS:
                raise DataError(f"{path}: unexpected columns {reader.fieldnames}")
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for i, row in enumerate(rows, start=2):
        try:
            int(row["round"])
            for k in METRIC_NAMES:
                float(row[k])
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}:{i}: malformed row {row}") from exc
    return rows


def long_format(run_dirs) -> list[tuple[str, int, str, str, str]]:
    """(run_id, round, series, metric, value) rows, values copied verbatim."""
    out = []
    seen: set[str] = set()
    for d in run_dirs:
        run_id = Path(d).name or str(d)
        if run_id in seen:
            run_id = str(d)
        seen.add(run_id)
        for row in read_metrics(d):
            cid = row["client_id"]
            series = "agg" if cid == "agg" else f"client_{cid}"
            for metric in METRIC_NAMES:
                out.append((run_id, int(row["round"]), series, metric, row[metric]))
    return out


def write_long_csv(rows, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["run_id", "round", "series", "metric", "value"])
    w.writerows(rows)


def final_round_table(rows) -> str:
    """Plain-text table of each run's last-round metrics per series."""
    last: dict[str, int] = {}
    for run_id, rnd, *_ in rows:
        last[run_id] = max(rnd, last.get(run_id, 0))
    cells: dict[tuple[str, str], dict[str, float]] = {}
    for run_id, rnd, series, metric, value in rows:
        if rnd == last[run_id]:
            cells.setdefault((run_id, series), {})[metric] = float(value)
    lines = [f"{'run_id':<24} {'round':>5} {'series':<10} {'accuracy':>9} {'loss':>9} {'f1':>9}"]
    for (run_id, series), m in cells.items():
        lines.append(
            f"{run_id:<24} {last[run_id]:>5} {series:<10} "
            f"{m.get('accuracy', float('nan')):>9.4f} {m.get('loss', float('nan')):>9.4f} {m.get('f1', float('nan')):>9.4f}"
        )
    return "\n".join(lines)
