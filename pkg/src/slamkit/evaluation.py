"""Trajectory accuracy metrics and multi-run benchmark reports.

Estimate and reference trajectories are paired by nearest timestamp
(window 0.02 s), aligned with a closed-form least-squares rigid or
similarity transform, and scored by absolute trajectory error (RMSE and
maximum deviation) plus the percentage of samples spent in the LOST
tracking state.

build_report aggregates many (dataset, preset) runs into one table per
metric — datasets as rows, presets as columns — with Average, Std Dev
(population, i.e. divide by N), Best (Average) Preset and Best (Average)
Metric footer rows recomputed from the table body.  Renderers emit
LaTeX, HTML and CSV.
"""

from __future__ import annotations

import io
import csv
import math
import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .epipolar import umeyama_alignment
from .frame import STATE_LOST
from .geometry import Sim3
from .trajectory import ASSOCIATION_MAX_DT, TrajectoryRecord, associate_timestamps

METRICS = ("rmse", "max", "percent_lost")

_METRIC_LABELS = {"rmse": "RMSE", "max": "Max", "percent_lost": "Percent Lost"}

MISSING_CELL = "—"  # em dash


class DegenerateAlignmentError(ValueError):
    """Too few or rank-deficient point pairs: the alignment is not unique."""


_PointsLike = Union[TrajectoryRecord, np.ndarray, Sequence]


def _paired_positions(estimate: _PointsLike, reference: _PointsLike,
                      max_dt: float = ASSOCIATION_MAX_DT) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(estimate, TrajectoryRecord) and isinstance(reference, TrajectoryRecord):
        pairs = associate_timestamps(estimate.timestamps, reference.timestamps, max_dt)
        if not pairs:
            return np.zeros((0, 3)), np.zeros((0, 3))
        pe = estimate.positions()
        pr = reference.positions()
        ia = [i for i, _ in pairs]
        ib = [j for _, j in pairs]
        return pe[ia], pr[ib]
    est = np.asarray(estimate, dtype=float).reshape(-1, 3)
    ref = np.asarray(reference, dtype=float).reshape(-1, 3)
    if len(est) != len(ref):
        raise ValueError("positional trajectories must pair index-wise")
    return est, ref


def align_umeyama(estimate: _PointsLike, reference: _PointsLike,
                  with_scale: bool = False) -> Tuple[Sim3, np.ndarray]:
    """Least-squares transform g minimizing sum ||g(est_i) - ref_i||^2.

    Similarity when with_scale (monocular gauge), rigid otherwise.
    Returns (g, per-pair residual norms).  Raises
    DegenerateAlignmentError for fewer than 3 pairs or a collinear
    point set, where the rotation is not determined.
    """
    est, ref = _paired_positions(estimate, reference)
    if len(est) < 3:
        raise DegenerateAlignmentError(f"need >= 3 associated pairs, have {len(est)}")
    # rotation about the common axis is free when either set is collinear
    for pts in (est, ref):
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise DegenerateAlignmentError("point set is collinear")
    g = umeyama_alignment(est, ref, with_scale=with_scale)
    residuals = np.linalg.norm(g.transform(est) - ref, axis=1)
    return g, residuals


@dataclass
class AteResult:
    """Absolute trajectory error after best alignment."""

    rmse: float
    max_error: float
    mean: float
    median: float
    errors: np.ndarray
    alignment: Sim3

    @classmethod
    def from_errors(cls, errors, alignment: Optional[Sim3] = None) -> "AteResult":
        e = np.asarray(errors, dtype=float)
        if e.size == 0:
            raise ValueError("no error samples")
        return cls(rmse=float(np.sqrt(np.mean(e ** 2))),
                   max_error=float(e.max()),
                   mean=float(e.mean()),
                   median=float(np.median(e)),
                   errors=e,
                   alignment=alignment if alignment is not None else Sim3())

    @property
    def num_pairs(self) -> int:
        return int(self.errors.size)


def compute_ate(estimate: _PointsLike, reference: _PointsLike,
                with_scale: bool = False) -> AteResult:
    g, residuals = align_umeyama(estimate, reference, with_scale=with_scale)
    return AteResult.from_errors(residuals, g)


def compute_percent_lost(record: TrajectoryRecord) -> float:
    if len(record) == 0:
        raise ValueError("empty trajectory record")
    n_lost = sum(1 for s in record.states if s == STATE_LOST)
    return 100.0 * n_lost / len(record)


@dataclass
class RunRecord:
    """Metrics of one run of one preset on one dataset."""

    dataset: str
    preset: str
    metrics: Dict[str, float]


@dataclass
class MetricTable:
    """One metric, datasets as rows, presets as columns.

    Footer rows are recomputed from the body on demand, never stored:
    averages and population std devs per preset skip missing cells.
    """

    metric: str
    datasets: List[str]
    presets: List[str]
    cells: Dict[Tuple[str, str], float] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return _METRIC_LABELS.get(self.metric, self.metric)

    def value(self, dataset: str, preset: str) -> Optional[float]:
        return self.cells.get((dataset, preset))

    def column(self, preset: str) -> List[float]:
        return [self.cells[(d, preset)] for d in self.datasets
                if (d, preset) in self.cells]

    def averages(self) -> List[Optional[float]]:
        out = []
        for p in self.presets:
            col = self.column(p)
            out.append(sum(col) / len(col) if col else None)
        return out

    def std_devs(self) -> List[Optional[float]]:
        out = []
        for p in self.presets:
            col = self.column(p)
            out.append(statistics.pstdev(col) if col else None)
        return out

    def best(self) -> Tuple[Optional[str], Optional[float]]:
        """Preset with the lowest average (all metrics: lower is better)."""
        best_p, best_v = None, math.inf
        for p, avg in zip(self.presets, self.averages()):
            if avg is not None and avg < best_v:
                best_p, best_v = p, avg
        return (best_p, best_v) if best_p is not None else (None, None)


@dataclass
class EvalReport:
    group: str
    tables: List[MetricTable]

    def table(self, metric: str) -> MetricTable:
        for t in self.tables:
            if t.metric == metric:
                return t
        raise KeyError(metric)


def build_report(runs: Sequence[RunRecord], group: str = "") -> EvalReport:
    """Aggregate runs into one table per metric present in any run."""
    if not runs:
        raise ValueError("need at least one run")
    datasets: List[str] = []
    presets: List[str] = []
    for r in runs:
        if r.dataset not in datasets:
            datasets.append(r.dataset)
        if r.preset not in presets:
            presets.append(r.preset)
    metric_names = [m for m in METRICS if any(m in r.metrics for r in runs)]
    metric_names += sorted({m for r in runs for m in r.metrics} - set(metric_names))
    tables = []
    for m in metric_names:
        t = MetricTable(metric=m, datasets=list(datasets), presets=list(presets))
        for r in runs:
            if m in r.metrics:
                t.cells[(r.dataset, r.preset)] = float(r.metrics[m])
        tables.append(t)
    return EvalReport(group=group, tables=tables)


def _fmt(v: Optional[float]) -> str:
    """Five decimals with trailing zeros trimmed; missing cell as em dash."""
    if v is None:
        return MISSING_CELL
    s = f"{v:.5f}".rstrip("0")
    return s + "0" if s.endswith(".") else s


def _table_rows(t: MetricTable) -> List[List[str]]:
    rows = [["Dataset"] + list(t.presets)]
    for d in t.datasets:
        rows.append([d] + [_fmt(t.value(d, p)) for p in t.presets])
    rows.append(["Average"] + [_fmt(a) for a in t.averages()])
    rows.append(["Std Dev"] + [_fmt(s) for s in t.std_devs()])
    best_p, best_v = t.best()
    pad = [""] * (len(t.presets) - 1)
    rows.append(["Best (Average) Preset", best_p or MISSING_CELL] + pad)
    rows.append(["Best (Average) Metric", _fmt(best_v)] + pad)
    return rows


def render_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for t in report.tables:
        title = f"{report.group}: Table {t.label}" if report.group else f"Table {t.label}"
        w.writerow([title])
        for row in _table_rows(t):
            w.writerow(row)
        w.writerow([])
    return buf.getvalue()


def render_html(report: EvalReport) -> str:
    parts = ["<html><body>"]
    for t in report.tables:
        title = f"{report.group}: Table {t.label}" if report.group else f"Table {t.label}"
        parts.append(f"<h3>{title}</h3>")
        parts.append("<table border='1'>")
        rows = _table_rows(t)
        head = "".join(f"<th>{c}</th>" for c in rows[0])
        parts.append(f"<tr>{head}</tr>")
        for row in rows[1:]:
            cells = "".join(f"<td>{c}</td>" for c in row)
            parts.append(f"<tr>{cells}</tr>")
        parts.append("</table>")
    parts.append("</body></html>")
    return "\n".join(parts)


def _tex_escape(s: str) -> str:
    return s.replace("\\", r"\textbackslash{}").replace("_", r"\_").replace("%", r"\%")


def render_latex(report: EvalReport) -> str:
    parts = []
    for t in report.tables:
        title = f"{report.group}: Table {t.label}" if report.group else f"Table {t.label}"
        cols = "l" + "r" * len(t.presets)
        parts.append("\\begin{table}[h]")
        parts.append(f"\\caption{{{_tex_escape(title)}}}")
        parts.append(f"\\begin{{tabular}}{{{cols}}}")
        parts.append("\\toprule")
        rows = _table_rows(t)
        parts.append(" & ".join(_tex_escape(c) for c in rows[0]) + " \\\\")
        parts.append("\\midrule")
        for row in rows[1:]:
            parts.append(" & ".join(_tex_escape(c) for c in row) + " \\\\")
        parts.append("\\bottomrule")
        parts.append("\\end{tabular}")
        parts.append("\\end{table}")
        parts.append("")
    return "\n".join(parts)
