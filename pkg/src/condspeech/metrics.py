"""Evaluation metrics and score files.

EER convention: operating points are generated by sweeping the decision
threshold over every distinct score (plus -inf/+inf sentinels), accepting a
trial when score >= threshold, with P_miss = frac(targets < t) and
P_fa = frac(nontargets >= t). P_miss - P_fa is nondecreasing along the sweep,
so the equal error rate is read off at the sign change, linearly interpolating
between the bracketing operating points. minDCF sweeps the same points.
Both depend only on the ordering of scores, so any strictly increasing
transform of the scores leaves them unchanged.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def levenshtein(a: list, b: list) -> int:
    """Edit distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, xa in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, xb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (xa != xb))
        prev = cur
    return prev[len(b)]


def cer(reference: list, hypothesis: list) -> float:
    """Edit distance normalized by reference length (can exceed 1)."""
    if len(reference) == 0:
        raise ValueError("cer: empty reference")
    return levenshtein(list(reference), list(hypothesis)) / len(reference)


def _operating_points(targets: np.ndarray, nontargets: np.ndarray):
    """(P_miss, P_fa) at each swept threshold, endpoints included."""
    thresholds = np.unique(np.concatenate([targets, nontargets]))
    nt, nn = targets.size, nontargets.size
    ts = np.sort(targets)
    ns = np.sort(nontargets)
    p_miss = [0.0]
    p_fa = [1.0]
    for th in thresholds:
        p_miss.append(np.searchsorted(ts, th, side="left") / nt)  # strictly below
        p_fa.append((nn - np.searchsorted(ns, th, side="left")) / nn)  # at or above
    p_miss.append(1.0)
    p_fa.append(0.0)
    return np.asarray(p_miss), np.asarray(p_fa)


def _check_scores(targets, nontargets):
    t = np.asarray(list(targets), dtype=np.float64)
    n = np.asarray(list(nontargets), dtype=np.float64)
    if t.size == 0 or n.size == 0:
        raise ValueError("scores for both target and nontarget trials are required")
    return t, n


def eer(targets, nontargets) -> float:
    """Equal error rate from the threshold sweep described in the module docs."""
    t, n = _check_scores(targets, nontargets)
    p_miss, p_fa = _operating_points(t, n)
    d = p_miss - p_fa
    idx = int(np.searchsorted(d > 0, True))  # first strictly positive gap
    if d[idx - 1] == 0.0:
        return float(p_miss[idx - 1])
    m0, m1 = p_miss[idx - 1], p_miss[idx]
    f0, f1 = p_fa[idx - 1], p_fa[idx]
    lam = (f0 - m0) / ((m1 - m0) - (f1 - f0))
    return float(m0 + lam * (m1 - m0))


def min_dcf(targets, nontargets, p_target: float = 0.05, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over all swept thresholds."""
    t, n = _check_scores(targets, nontargets)
    p_miss, p_fa = _operating_points(t, n)
    dcf = p_target * c_miss * p_miss + (1.0 - p_target) * c_fa * p_fa
    norm = min(p_target * c_miss, (1.0 - p_target) * c_fa)
    return float(dcf.min() / norm)


def lid_accuracy(predictions: list[int], references: list[int]) -> float:
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions vs {len(references)} references")
    if not references:
        raise ValueError("lid_accuracy: empty reference list")
    return sum(int(p == r) for p, r in zip(predictions, references)) / len(references)


# -- score files and reports -----------------------------------------------------

def write_scores(path: str | Path, labeled_scores: list[tuple[str, float]]):
    """One ``label score`` pair per line; labels are target/nontarget."""
    lines = []
    for label, score in labeled_scores:
        if label not in ("target", "nontarget"):
            raise ValueError(f"score label must be target or nontarget, got {label!r}")
        lines.append(f"{label} {score:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path: str | Path) -> tuple[list[float], list[float]]:
    targets, nontargets = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("target", "nontarget"):
            raise ValueError(f"{path}:{ln}: expected 'target|nontarget <score>', got {line!r}")
        (targets if parts[0] == "target" else nontargets).append(float(parts[1]))
    return targets, nontargets


REPORT_FIELDS = ("cer_normal", "cer_fewshot", "lid_acc", "eer", "min_dcf")


def write_report(path: str | Path, report: dict):
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
