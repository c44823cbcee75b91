"""TAP metrics: average Jaccard, position accuracy, occlusion accuracy.

All metrics operate at the 256x256 evaluation scale (callers resize with
``resize_for_eval``), exclude each point's query frame (the query is given,
not predicted), and treat occluded/out-of-view as a single not-visible state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import VISIBLE, DataError, TrajectorySet

THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
EVAL_RESOLUTION = (256, 256)
CHALLENGING_THRESHOLD = 0.75


class MetricsError(ValueError):
    pass


@dataclass
class _Cells:
    """Aligned (point, frame) arrays for one gt/pred pair of trajectory sets."""

    gt_visible: np.ndarray    # (N, F) bool
    pred_visible: np.ndarray  # (N, F) bool
    dist: np.ndarray          # (N, F) float, inf where either position is missing
    scored: np.ndarray        # (N, F) bool, false at query frames
    category: np.ndarray      # (N,) str


def _align(gt: TrajectorySet, pred: TrajectorySet) -> _Cells:
    if gt.num_frames != pred.num_frames:
        raise MetricsError(
            f"frame-count mismatch: gt {gt.num_frames} vs pred {pred.num_frames}"
        )
    pred_by_id = {p.id: p for p in pred.points}
    missing = [p.id for p in gt.points if p.id not in pred_by_id]
    if missing:
        raise MetricsError(f"prediction missing point ids {missing}")
    n, f = len(gt.points), gt.num_frames
    gt_vis = np.zeros((n, f), dtype=bool)
    pred_vis = np.zeros((n, f), dtype=bool)
    dist = np.full((n, f), np.inf)
    scored = np.ones((n, f), dtype=bool)
    category = np.empty(n, dtype=object)
    for i, gp in enumerate(gt.points):
        pp = pred_by_id[gp.id]
        category[i] = gp.category
        query = next((fr for fr, v in enumerate(gp.visibility) if v == VISIBLE), None)
        for fr in range(f):
            gt_vis[i, fr] = gp.visibility[fr] == VISIBLE
            pred_vis[i, fr] = pp.visibility[fr] == VISIBLE
            if gp.positions[fr] is not None and pp.positions[fr] is not None:
                gx, gy = gp.positions[fr]
                px, py = pp.positions[fr]
                dist[i, fr] = np.hypot(gx - px, gy - py)
        if query is not None:
            scored[i, query] = False
    return _Cells(gt_vis, pred_vis, dist, scored, category)


def delta_avg(gt: TrajectorySet, pred: TrajectorySet) -> tuple[dict[float, float | None], float | None]:
    """Fraction of ground-truth-visible points within each threshold, plus the mean.

    Returns (per-threshold fractions, mean); None when no visible cells exist.
    """
    cells = _align(gt, pred)
    return _delta_from_cells(cells, np.ones(len(cells.category), dtype=bool))


def _delta_from_cells(cells: _Cells, point_mask: np.ndarray):
    sel = cells.scored & cells.gt_visible & point_mask[:, None]
    denom = int(sel.sum())
    if denom == 0:
        return {t: None for t in THRESHOLDS}, None
    fractions = {}
    for t in THRESHOLDS:
        fractions[t] = float((cells.dist[sel] <= t).sum() / denom)
    return fractions, float(np.mean(list(fractions.values())))


def average_jaccard(gt: TrajectorySet, pred: TrajectorySet) -> float | None:
    cells = _align(gt, pred)
    return _aj_from_cells(cells, np.ones(len(cells.category), dtype=bool))[0]


def _aj_from_cells(cells: _Cells, point_mask: np.ndarray):
    """Mean over thresholds of TP / (TP + FP + FN).

    TP: predicted visible, gt visible, within threshold.  FP: predicted
    visible but gt not-visible or beyond threshold.  FN: gt visible but
    predicted not-visible or beyond threshold.  A visible/visible cell beyond
    the threshold counts as both FP and FN.
    """
    sel = cells.scored & point_mask[:, None]
    gt_v = cells.gt_visible[sel]
    pr_v = cells.pred_visible[sel]
    d = cells.dist[sel]
    jaccards = []
    counts = {}
    for t in THRESHOLDS:
        within = d <= t
        tp = int((gt_v & pr_v & within).sum())
        fp = int((pr_v & ~(gt_v & within)).sum())
        fn = int((gt_v & ~(pr_v & within)).sum())
        counts[t] = (tp, fp, fn)
        denom = tp + fp + fn
        jaccards.append(tp / denom if denom else None)
    valid = [j for j in jaccards if j is not None]
    aj = float(np.mean(valid)) if valid else None
    return aj, counts


def occlusion_accuracy(gt: TrajectorySet, pred: TrajectorySet) -> float | None:
    cells = _align(gt, pred)
    return _oa_from_cells(cells, np.ones(len(cells.category), dtype=bool))


def _oa_from_cells(cells: _Cells, point_mask: np.ndarray):
    sel = cells.scored & point_mask[:, None]
    n = int(sel.sum())
    if n == 0:
        return None
    agree = cells.gt_visible[sel] == cells.pred_visible[sel]
    return float(agree.sum() / n)


@dataclass
class CategoryMetrics:
    aj: float | None
    delta_avg: float | None
    oa: float | None
    per_threshold: dict[float, float | None] = field(default_factory=dict)
    jaccard_counts: dict[float, tuple[int, int, int]] = field(default_factory=dict)


@dataclass
class MetricsReport:
    video: str
    overall: CategoryMetrics
    tool: CategoryMetrics
    tissue: CategoryMetrics

    def as_dict(self) -> dict:
        def cat(c: CategoryMetrics) -> dict:
            return {
                "aj": c.aj, "delta_avg": c.delta_avg, "oa": c.oa,
                "per_threshold": {str(t): v for t, v in c.per_threshold.items()},
                "jaccard_counts": {
                    str(t): {"tp": v[0], "fp": v[1], "fn": v[2]}
                    for t, v in c.jaccard_counts.items()
                },
            }
        return {
            "video": self.video,
            "overall": cat(self.overall),
            "tool": cat(self.tool),
            "tissue": cat(self.tissue),
        }


def build_report(gt: TrajectorySet, pred: TrajectorySet) -> MetricsReport:
    """Per-category and overall metrics for one video (inputs already at eval scale)."""
    cells = _align(gt, pred)
    out = {}
    for name, mask in (
        ("overall", np.ones(len(cells.category), dtype=bool)),
        ("tool", cells.category == "tool"),
        ("tissue", cells.category == "tissue"),
    ):
        fractions, mean = _delta_from_cells(cells, mask)
        aj, counts = _aj_from_cells(cells, mask)
        oa = _oa_from_cells(cells, mask)
        out[name] = CategoryMetrics(
            aj=aj, delta_avg=mean, oa=oa, per_threshold=fractions,
            jaccard_counts=counts,
        )
    return MetricsReport(video=gt.video, overall=out["overall"],
                         tool=out["tool"], tissue=out["tissue"])


def challenging_split(baseline_reports: list[MetricsReport]) -> dict[str, bool]:
    """Flag videos whose baseline tools delta_avg is strictly below 0.75."""
    out = {}
    for r in baseline_reports:
        d = r.tool.delta_avg
        out[r.video] = d is not None and d < CHALLENGING_THRESHOLD
    return out


def _fmt(v: float | None) -> str:
    return "  n/a" if v is None else f"{100 * v:5.1f}"


def format_table(reports: list[MetricsReport], method: str = "surgmotion") -> str:
    """Aligned text table: AJ / <delta-avg / OA per category, one row per video."""
    lines = [
        f"{'video':<20} {'':8} | {'Tools':^20} | {'Tissue':^20} | {'Overall':^20}",
        f"{'':<20} {'method':<8} | {'AJ':>5} {'<d-avg':>6} {'OA':>5}   | {'AJ':>5} {'<d-avg':>6} {'OA':>5}   | {'AJ':>5} {'<d-avg':>6} {'OA':>5}",
    ]
    for r in reports:
        cols = []
        for c in (r.tool, r.tissue, r.overall):
            cols.append(f"{_fmt(c.aj)} {_fmt(c.delta_avg):>6} {_fmt(c.oa)}  ")
        lines.append(f"{r.video:<20} {method:<8} | " + " | ".join(cols))
    return "\n".join(lines)


def write_report_csv(reports: list[MetricsReport], path: str | Path, method: str = "surgmotion"):
    lines = ["video,method,category,aj,delta_avg,oa"]
    for r in reports:
        for name, c in (("tool", r.tool), ("tissue", r.tissue), ("overall", r.overall)):
            def cell(v):
                return "" if v is None else f"{v:.6f}"
            lines.append(f"{r.video},{method},{name},{cell(c.aj)},{cell(c.delta_avg)},{cell(c.oa)}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_json(reports: list[MetricsReport], path: str | Path):
    Path(path).write_text(json.dumps([r.as_dict() for r in reports], indent=1))
