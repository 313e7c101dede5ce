"""Dice / Jaccard overlap scores and fold-level mean ± std reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import LABELS, ORGANS
from .errors import UsageError


@dataclass(frozen=True)
class OrganScore:
    organ: int
    dice: float
    jaccard: float
    defined: bool


def _counts(pred, gt, organ: int) -> tuple:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise UsageError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p, g = pred == organ, gt == organ
    tp = int(np.count_nonzero(p & g))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(g)) - tp


def _score_from_counts(organ, tp, fp, fn) -> OrganScore:
    if tp + fp + fn == 0:
        return OrganScore(organ, math.nan, math.nan, False)
    return OrganScore(organ, 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn), True)


def organ_score(pred, gt, organ: int) -> OrganScore:
    return _score_from_counts(organ, *_counts(pred, gt, organ))


def dice(pred, gt, organ: int) -> float:
    """``2TP / (2TP + FP + FN)``; NaN when the organ is in neither mask."""
    return organ_score(pred, gt, organ).dice


def jaccard(pred, gt, organ: int) -> float:
    """``TP / (TP + FP + FN)``; NaN when the organ is in neither mask."""
    return organ_score(pred, gt, organ).jaccard


def score_masks(preds: Sequence, gts: Sequence, organs: Sequence[int] = ORGANS) -> list:
    """Scores pooled over every pixel of every mask pair (one fold's test set)."""
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} predictions for {len(gts)} ground-truth masks")
    totals = {o: [0, 0, 0] for o in organs}
    for p, g in zip(preds, gts):
        for o in organs:
            c = _counts(p, g, o)
            for i in range(3):
                totals[o][i] += c[i]
    return [_score_from_counts(o, *totals[o]) for o in organs]


@dataclass(frozen=True)
class ReportRow:
    organ: str
    dice_mean: float
    dice_std: float
    jac_mean: float
    jac_std: float


@dataclass
class MetricsReport:
    """Percentages; std is the sample std (n-1) across folds."""

    rows: list = field(default_factory=list)  # one per organ, then "Ave"
    folds: int = 0

    @property
    def organ_rows(self) -> list:
        return [r for r in self.rows if r.organ != "Ave"]

    @property
    def average(self) -> ReportRow:
        return self.rows[-1]

    def row(self, organ: str) -> ReportRow:
        for r in self.rows:
            if r.organ == organ:
                return r
        raise KeyError(organ)


def _mean_std(values) -> tuple:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    std = float(v.std(ddof=1)) if v.size > 1 else math.nan
    return float(v.mean()), std


def aggregate_folds(per_fold_scores: Sequence[Sequence[OrganScore]]) -> MetricsReport:
    """Mean and sample std of each organ's fold-level scores, in percent.

    Undefined fold scores are skipped. The Ave row's mean is the plain mean
    of the organ means; its std is taken across the per-fold organ averages.
    """
    if not per_fold_scores:
        raise UsageError("aggregate_folds needs at least one fold")
    organs = [s.organ for s in per_fold_scores[0]]
    by_fold = []
    for fold in per_fold_scores:
        d = {s.organ: s for s in fold}
        if sorted(d) != sorted(organs):
            raise UsageError("every fold must score the same organs")
        by_fold.append(d)
    rows = []
    for o in organs:
        dm, ds = _mean_std([100 * f[o].dice if f[o].defined else math.nan for f in by_fold])
        jm, js = _mean_std([100 * f[o].jaccard if f[o].defined else math.nan for f in by_fold])
        rows.append(ReportRow(LABELS[o], dm, ds, jm, js))

    def organ_mean(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    fold_dice = [organ_mean([100 * f[o].dice for o in organs if f[o].defined]) for f in by_fold]
    fold_jac = [organ_mean([100 * f[o].jaccard for o in organs if f[o].defined]) for f in by_fold]
    rows.append(ReportRow(
        "Ave",
        organ_mean([r.dice_mean for r in rows]),
        _mean_std(fold_dice)[1],
        organ_mean([r.jac_mean for r in rows]),
        _mean_std(fold_jac)[1],
    ))
    return MetricsReport(rows, len(per_fold_scores))


# ---------------------------------------------------------------- output

CSV_HEADER = ("organ", "dice_mean", "dice_std", "jac_mean", "jac_std")


def fmt2(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.2f}"


def _json_num(x: float):
    return None if math.isnan(x) else x


def emit_table(report: MetricsReport, fmt: str = "text") -> bytes:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([r.organ, fmt2(r.dice_mean), fmt2(r.dice_std), fmt2(r.jac_mean), fmt2(r.jac_std)])
        return buf.getvalue().encode()
    if fmt == "json":
        doc = {
            "folds": report.folds,
            "std": "sample standard deviation across folds",
            "rows": [
                {"organ": r.organ, **{k: _json_num(getattr(r, k)) for k in CSV_HEADER[1:]}}
                for r in report.rows
            ],
        }
        return (json.dumps(doc, indent=2) + "\n").encode()
    if fmt == "text":
        width = max(len(r.organ) for r in report.rows)
        lines = [f"{'organ':<{width}}  {'Dice (%)':>14}  {'Jac (%)':>14}"]
        for r in report.rows:
            d = f"{fmt2(r.dice_mean)}±{fmt2(r.dice_std)}"
            j = f"{fmt2(r.jac_mean)}±{fmt2(r.jac_std)}"
            lines.append(f"{r.organ:<{width}}  {d:>14}  {j:>14}")
        lines.append(f"(mean ± sample std over {report.folds} folds)")
        return ("\n".join(lines) + "\n").encode()
    raise UsageError(f"unknown table format {fmt!r}; use csv, json or text")


def report_from_json(blob) -> MetricsReport:
    doc = json.loads(blob)

    def num(x):
        return math.nan if x is None else float(x)

    rows = [ReportRow(r["organ"], *(num(r[k]) for k in CSV_HEADER[1:])) for r in doc["rows"]]
    return MetricsReport(rows, int(doc["folds"]))


def emit_comparison(reports: Mapping[str, MetricsReport], metric: str = "dice", fmt: str = "csv") -> bytes:
    """One column per model, one row per organ plus Ave, cells ``mean±std``."""
    if metric not in ("dice", "jac"):
        raise UsageError(f"metric must be 'dice' or 'jac', got {metric!r}")
    if not reports:
        raise UsageError("no reports to compare")
    names = list(reports)
    organs = [r.organ for r in reports[names[0]].rows]

    def cell(report, organ):
        r = report.row(organ)
        return f"{fmt2(getattr(r, metric + '_mean'))}±{fmt2(getattr(r, metric + '_std'))}"

    table = [[o] + [cell(reports[n], o) for n in names] for o in organs]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["organ", *names])
        w.writerows(table)
        return buf.getvalue().encode()
    if fmt == "json":
        doc = {
            "metric": metric,
            "models": names,
            "rows": [
                {
                    "organ": o,
                    **{n: {"mean": _json_num(getattr(reports[n].row(o), metric + "_mean")),
                           "std": _json_num(getattr(reports[n].row(o), metric + "_std"))} for n in names},
                }
                for o in organs
            ],
        }
        return (json.dumps(doc, indent=2) + "\n").encode()
    if fmt == "text":
        header = ["organ", *names]
        widths = [max(len(str(row[i])) for row in [header, *table]) for i in range(len(header))]
        lines = ["  ".join(str(c).ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in [header, *table]]
        return ("\n".join(lines) + "\n").encode()
    raise UsageError(f"unknown table format {fmt!r}; use csv, json or text")
