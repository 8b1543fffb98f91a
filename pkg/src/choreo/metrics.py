"""Evaluation metrics, shared by training loops and the CLI.

Placement: per-frame perplexity, per-chart AUC-PR (step-wise, no
interpolation), and the two F-score aggregations (per-chart best F
averaged, and micro F at calibrated thresholds). Selection: per-step
perplexity and argmax accuracy. All logs are natural.
"""

from __future__ import annotations

import csv
import json
import logging

import numpy as np

log = logging.getLogger(__name__)

_P_EPS = 1e-7


# ---------------------------------------------------------------------------
# frame-level placement metrics

def frame_perplexity(probs: np.ndarray, labels: np.ndarray) -> float:
    """exp(mean per-frame binary cross-entropy) for one chart."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"probs shape {p.shape} != labels shape {y.shape}")
    pc = np.clip(p, _P_EPS, 1.0 - _P_EPS)
    bce = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    return float(np.exp(bce.mean()))


def frame_perplexity_charts(charts: list[tuple[np.ndarray, np.ndarray]]) -> float:
    if not charts:
        raise ValueError("no charts to evaluate")
    return float(np.mean([frame_perplexity(p, y) for p, y in charts]))


def pr_curve(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) at every distinct score threshold, descending.

    Ties share one threshold step, so the curve is identical for any
    strictly increasing transform of the scores.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"probs shape {p.shape} != labels shape {y.shape}")
    n_pos = float(y.sum())
    if n_pos == 0:
        raise ValueError("AUC-PR undefined with zero positive labels")
    order = np.argsort(-p, kind="stable")
    y_sorted = y[order]
    p_sorted = p[order]
    # indices where the threshold actually drops (last element of a tie run)
    boundary = np.nonzero(np.diff(p_sorted))[0]
    boundary = np.concatenate([boundary, [len(p_sorted) - 1]])
    tp = np.cumsum(y_sorted)[boundary]
    taken = boundary + 1.0
    recall = tp / n_pos
    precision = tp / taken
    return recall, precision


def auc_pr(probs: np.ndarray, labels: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve for one chart."""
    recall, precision = pr_curve(probs, labels)
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def auc_pr_charts(charts: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean per-chart AUC-PR; zero-positive charts are excluded with a
    warning."""
    values = []
    for i, (p, y) in enumerate(charts):
        if np.asarray(y).sum() == 0:
            log.warning("chart %d has no positive frames; excluded from AUC-PR",
                        i)
            continue
        values.append(auc_pr(p, y))
    if not values:
        raise ValueError("every chart had zero positives; AUC-PR undefined")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# F-scores over peak-picked counts

def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def fscore_curves(counts_per_chart: list[dict[float, tuple[int, int, int]]],
                  calibrated_thetas: list[float]) -> dict[str, float]:
    """Both F-score aggregations from per-chart counts-by-threshold.

    fscore_c: mean over charts of the best F1 any threshold achieves.
    fscore_m: F1 of TP/FP/FN summed across charts, each chart counted at
    its calibrated (per-difficulty) threshold.
    """
    if len(counts_per_chart) != len(calibrated_thetas):
        raise ValueError(f"{len(counts_per_chart)} charts vs "
                         f"{len(calibrated_thetas)} calibrated thresholds")
    if not counts_per_chart:
        raise ValueError("no charts to score")
    best_per_chart = [max(f1_score(*c) for c in chart.values())
                      for chart in counts_per_chart]
    totals = np.zeros(3, dtype=np.int64)
    for chart, theta in zip(counts_per_chart, calibrated_thetas):
        totals += np.asarray(chart[theta], dtype=np.int64)
    return {
        "fscore_c": float(np.mean(best_per_chart)),
        "fscore_m": f1_score(*totals),
    }


# ---------------------------------------------------------------------------
# selection metrics

def selection_metrics(charts: list[tuple[np.ndarray, np.ndarray]]) -> dict[str, float]:
    """Per-step perplexity and argmax accuracy from predictive distributions.

    Each chart supplies (dists, labels): dists is (N, V) rows of
    next-step probabilities given the ground-truth history, labels the N
    observed token indices. Per-chart values are averaged across charts.
    """
    if not charts:
        raise ValueError("no charts to evaluate")
    ppls = []
    accs = []
    for dists, labels in charts:
        d = np.asarray(dists, dtype=np.float64)
        lab = np.asarray(labels)
        if d.ndim != 2 or d.shape[0] != lab.shape[0]:
            raise ValueError(f"dists shape {d.shape} vs labels shape {lab.shape}")
        picked = np.clip(d[np.arange(len(lab)), lab], _P_EPS, None)
        ppls.append(float(np.exp(-np.log(picked).mean())))
        accs.append(float((d.argmax(axis=1) == lab).mean()))
    return {"perplexity": float(np.mean(ppls)), "accuracy": float(np.mean(accs))}


# ---------------------------------------------------------------------------
# reports

def write_report(path_prefix, records: list[dict]) -> None:
    """Write records to <prefix>.json and a CSV table to <prefix>.csv."""
    json_path = f"{path_prefix}.json"
    csv_path = f"{path_prefix}.csv"
    with open(json_path, "w") as f:
        json.dump(records, f, indent=2, sort_keys=True)
        f.write("\n")
    columns: list[str] = []
    for rec in records:
        for key in rec:
            if key not in columns:
                columns.append(key)
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(records)
