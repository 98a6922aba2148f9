"""CSV metric artifacts and cross-run reports.

Every file has a header row and a fixed column order; floats are written at full
precision so reruns with the same inputs produce identical bytes.
"""
import logging
import os

import pandas as pd

from noiselens.models.detection_models import PRPoint
from noiselens.models.training_models import EpochReport, TaskGapRecord
from noiselens.utils.helpers import atomic_write_text

logger = logging.getLogger(__name__)

PR_CURVE_COLUMNS = ("threshold", "tp", "fp", "fn", "precision", "recall", "f1")
MAGNITUDE_COLUMNS = ("bin_lo", "bin_hi", "recall", "support")
HALLUCINATION_COLUMNS = ("index", "truths", "unmatched_on_context", "unmatched_on_fake")
BEST_EPOCH_COLUMNS = ("run", "best_epoch", "precision", "recall", "f1_star")


def _write_frame(path, frame):
    atomic_write_text(path, frame.to_csv(index=False, na_rep="nan", lineterminator="\n"))
    logger.debug(f"Wrote {len(frame)} row(s) to {path}")
    return path


def write_rows(path, columns, rows):
    """Write ``rows`` (tuples in ``columns`` order) as a CSV file."""
    return _write_frame(path, pd.DataFrame([tuple(r) for r in rows], columns=list(columns)))


def write_epoch_metrics(path, reports):
    return write_rows(path, EpochReport.CSV_HEADER, (r.csv_row() for r in reports))


def write_task_gaps(path, records):
    return write_rows(path, TaskGapRecord.CSV_HEADER, (r.csv_row() for r in records))


def write_pr_curve(path, curve):
    return write_rows(path, PR_CURVE_COLUMNS, (p.csv_row() for p in curve))


def write_recall_by_magnitude(path, bins):
    return write_rows(path, MAGNITUDE_COLUMNS, ((b.lo, b.hi, b.recall, b.support) for b in bins))


def write_hallucination(path, records):
    return write_rows(
        path, HALLUCINATION_COLUMNS, ((r.index, r.truths, r.on_context, r.on_fake) for r in records)
    )


def read_pr_curve(path):
    """Load ``pr_curve.csv`` back into PRPoint objects."""
    frame = pd.read_csv(path, float_precision="round_trip")
    return [
        PRPoint(
            threshold=float(row.threshold),
            true_positives=int(row.tp),
            false_positives=int(row.fp),
            false_negatives=int(row.fn),
            precision=float(row.precision),
            recall=float(row.recall),
            f1=float(row.f1),
        )
        for row in frame.itertuples(index=False)
    ]


def read_epoch_metrics(path):
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in EpochReport.CSV_HEADER if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} is missing column(s): {', '.join(missing)}")
    return frame


def _run_name(run_dir, used):
    name = os.path.basename(os.path.normpath(run_dir)) or "run"
    candidate, suffix = name, 2
    while candidate in used:
        candidate, suffix = f"{name}-{suffix}", suffix + 1
    used.add(candidate)
    return candidate


def build_report(run_dirs):
    """Per-epoch F1* across runs plus each run's best epoch.

    Args:
        run_dirs (list[str]): Run directories holding ``metrics.csv``.

    Returns:
        tuple: ``(f1_by_epoch, best_epochs)`` DataFrames. ``f1_by_epoch`` has an ``epoch``
        column followed by one column per run; ``best_epochs`` one row per run, the
        earliest epoch winning ties.
    """
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    used = set()
    series, best_rows = [], []
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "metrics.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"No metrics.csv in {run_dir}")
        frame = read_epoch_metrics(path)
        name = _run_name(run_dir, used)
        series.append(frame.set_index("epoch")["f1_star"].rename(name))

        scored = frame.dropna(subset=["f1_star"])
        if scored.empty:
            best_rows.append((name, None, float("nan"), float("nan"), float("nan")))
            continue
        best = scored.loc[scored["f1_star"].idxmax()]
        best_rows.append((name, int(best["epoch"]), best["precision"], best["recall"], best["f1_star"]))

    f1_by_epoch = pd.concat(series, axis=1).sort_index().reset_index()
    f1_by_epoch = f1_by_epoch.rename(columns={"index": "epoch"})
    best_epochs = pd.DataFrame(best_rows, columns=list(BEST_EPOCH_COLUMNS))
    return f1_by_epoch, best_epochs


def write_report(run_dirs, out_dir):
    """Write ``f1_by_epoch.csv`` and ``best_epochs.csv`` into ``out_dir``."""
    f1_by_epoch, best_epochs = build_report(run_dirs)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "f1_by_epoch": _write_frame(os.path.join(out_dir, "f1_by_epoch.csv"), f1_by_epoch),
        "best_epochs": _write_frame(os.path.join(out_dir, "best_epochs.csv"), best_epochs),
    }
    logger.info(f"Report over {len(run_dirs)} run(s) written to {out_dir}")
    return paths
