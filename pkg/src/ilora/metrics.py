"""Calibration, ranking and structure-recovery metrics for binary tasks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    prob: float
    label: int

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"probability {self.prob} outside [0, 1]")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class GraphScore:
    per_sample: np.ndarray
    mean: float
    k_sel: int
    gt_size: int
    total_pairs: int


def _arrays(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=int).reshape(-1)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in length")
    return p, y


def records_to_arrays(records: Iterable[PredictionRecord]) -> tuple[np.ndarray, np.ndarray]:
    records = list(records)
    return (np.array([r.prob for r in records], dtype=np.float64),
            np.array([r.label for r in records], dtype=int))


def ece(probs, labels, bins: int = 10) -> float:
    """Binned |accuracy - confidence| with confidence max(p, 1 - p).

    Bins are equal-width on [0, 1], right-closed, with 0 in the first bin.
    """
    if bins < 1:
        raise ValueError("need at least one bin")
    p, y = _arrays(probs, labels)
    if p.size == 0:
        raise ValueError("no records")
    pred = (p >= 0.5).astype(int)
    conf = np.maximum(p, 1.0 - p)
    correct = (pred == y).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        nb = sel.sum()
        if nb:
            total += nb / p.size * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def auroc(scores, labels) -> float:
    """Mann-Whitney probability that a positive outranks a negative (ties count 1/2)."""
    s, y = _arrays(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise area under precision-recall, tied scores forming one threshold."""
    s, y = _arrays(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("average precision needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


def roc_pr_auc(scores, labels) -> tuple[float, float]:
    return auroc(scores, labels), average_precision(scores, labels)


def f1(probs, labels, threshold: float = 0.5) -> float:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    p, y = _arrays(probs, labels)
    pred = p >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def err_at_k(predicted, gt, total_pairs: int) -> float:
    """Mean of the miss rate over reference pairs and the false-alarm rate over the rest."""
    pred = {tuple(sorted(e)) for e in predicted}
    ref = {tuple(sorted(e)) for e in gt}
    if not ref:
        raise ValueError("reference edge set is empty")
    if len(ref) >= total_pairs:
        raise ValueError("reference edge set covers every candidate pair")
    miss = len(ref - pred) / len(ref)
    false_alarm = len(pred - ref) / (total_pairs - len(ref))
    return 0.5 * (miss + false_alarm)


def err_at_k_counts(k_sel: int, overlap: int, gt_size: int, total_pairs: int) -> float:
    return 0.5 * ((gt_size - overlap) / gt_size + (k_sel - overlap) / (total_pairs - gt_size))


def graph_score(topk_per_sample, gt, total_pairs: int) -> GraphScore:
    errs = np.array([err_at_k(p, gt, total_pairs) for p in topk_per_sample])
    k_sel = len(topk_per_sample[0]) if len(topk_per_sample) else 0
    return GraphScore(errs, float(errs.mean()), k_sel, len(gt), total_pairs)


def random_baseline_err(total_pairs: int, gt_size: int, k_sel: int, trials: int,
                        rng: np.random.Generator) -> float:
    """Monte Carlo mean of Err@K for uniformly drawn K-subsets of the candidates."""
    if trials < 1:
        raise ValueError("need at least one trial")
    if gt_size < 1 or gt_size >= total_pairs:
        raise ValueError("reference size must lie in [1, total_pairs)")
    if not 1 <= k_sel <= total_pairs:
        raise ValueError("k_sel must lie in [1, total_pairs]")
    # overlap of a uniform K-subset with the reference is hypergeometric
    overlaps = rng.hypergeometric(gt_size, total_pairs - gt_size, k_sel, size=trials)
    errs = err_at_k_counts(k_sel, overlaps, gt_size, total_pairs)
    return float(np.mean(errs))


def metrics_report(probs, labels, bins: int = 10, threshold: float = 0.5) -> dict:
    p, y = _arrays(probs, labels)
    au, ap = roc_pr_auc(p, y)
    return {"ece": ece(p, y, bins), "f1_pos": f1(p, y, threshold), "auroc": au, "auprc": ap, "n": int(p.size)}


def format_table(report: dict) -> str:
    width = max(len(k) for k in report)
    lines = []
    for k, v in report.items():
        val = f"{v:.6f}" if isinstance(v, float) else str(v)
        lines.append(f"{k.ljust(width)}  {val}")
    return "\n".join(lines)
