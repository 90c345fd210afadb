"""Training losses: CTC (with exact analytic gradient) and multitask masking.

The CTC loss is a custom graph node. The forward pass runs the standard
blank-interleaved alpha recursion in log space (float64 internally); the
backward pass runs the beta recursion and converts state posteriors into the
gradient with respect to the per-frame log-posteriors, so no part of the
dynamic program needs to be unrolled into the autodiff graph.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

BLANK = 0


class InfeasibleAlignmentError(ValueError):
    """Target cannot be aligned: it needs more frames than are available."""


def _expand_target(target: list[int], vocab: int) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    for i, tok in enumerate(target):
        tok = int(tok)
        if tok == BLANK:
            raise ValueError("transcripts must not contain the blank token (index 0)")
        if not 0 < tok < vocab:
            raise ValueError(f"token {tok} outside vocabulary of size {vocab}")
        ext[2 * i + 1] = tok
    return ext


def min_frames_needed(target: list[int]) -> int:
    """Shortest alignment: one frame per token plus a blank between repeats."""
    reps = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + reps


def ctc_loss(log_post: Tensor, target: list[int]) -> Tensor:
    """Negative log-likelihood of ``target`` under CTC.

    ``log_post`` is (V, T') with blank at row 0. Raises
    InfeasibleAlignmentError when T' cannot fit the expanded target (the loss
    would be +inf); that is flagged, never silently returned.
    """
    if log_post.data.ndim != 2:
        raise ShapeError(f"ctc_loss expects (V, T'), got {log_post.shape}")
    v, t_frames = log_post.shape
    target = [int(x) for x in target]
    if t_frames < min_frames_needed(target):
        raise InfeasibleAlignmentError(
            f"{t_frames} frames cannot align a target needing {min_frames_needed(target)}"
        )
    ext = _expand_target(target, v)
    s = ext.size
    y = log_post.data.astype(np.float64)

    neg = -np.inf
    alpha = np.full((s, t_frames), neg)
    alpha[0, 0] = y[ext[0], 0]
    if s > 1:
        alpha[1, 0] = y[ext[1], 0]
    skip_ok = np.zeros(s, dtype=bool)  # may come from state s-2
    skip_ok[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    for t in range(1, t_frames):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip_ok[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[:, t] = acc + y[ext, t]

    tail = alpha[s - 1, t_frames - 1]
    if s > 1:
        tail = np.logaddexp(tail, alpha[s - 2, t_frames - 1])
    log_p = float(tail)
    loss_val = np.asarray(-log_p, dtype=log_post.dtype)

    def bw(g):
        beta = np.full((s, t_frames), neg)
        beta[s - 1, t_frames - 1] = y[ext[s - 1], t_frames - 1]
        if s > 1:
            beta[s - 2, t_frames - 1] = y[ext[s - 2], t_frames - 1]
        for t in range(t_frames - 2, -1, -1):
            nxt = beta[:, t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            can_skip_fwd = np.zeros(s, dtype=bool)
            can_skip_fwd[:-2] = skip_ok[2:]
            acc[:-2] = np.where(can_skip_fwd[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
            beta[:, t] = acc + y[ext, t]
        # posterior of passing through state s at time t; alpha and beta both
        # include the emission at t, so subtract it once
        occ = alpha + beta - y[ext, :] - log_p
        grad = np.zeros((v, t_frames), dtype=np.float64)
        for si in range(s):
            grad[ext[si]] -= np.exp(occ[si])
        ad._acc(log_post, (float(g) * grad).astype(log_post.dtype))

    return ad._node(loss_val.reshape(()), (log_post,), bw)


def ctc_greedy_decode(log_post) -> list[int]:
    """Frame argmax, collapse repeats, drop blanks. Ties pick the lowest index."""
    arr = log_post.data if isinstance(log_post, Tensor) else np.asarray(log_post)
    if arr.ndim != 2:
        raise ShapeError(f"ctc_greedy_decode expects (V, T'), got {arr.shape}")
    best = np.argmax(arr, axis=0)
    out, prev = [], -1
    for b in best:
        b = int(b)
        if b != prev and b != BLANK:
            out.append(b)
        prev = b
    return out


def multitask_loss(
    batch: list[tuple[dict[str, object], dict[str, object]]],
    weights: dict[str, float],
    loss_fns: dict[str, object],
) -> Tensor:
    """Mean over a batch of weighted task losses, masking absent labels.

    Each batch item is (outputs, labels) keyed by task name. A task with a
    missing (None) label contributes exactly zero: its loss function is never
    invoked, so no gradient can flow. A batch with no labeled task anywhere is
    an error rather than a silent zero.
    """
    if not batch:
        raise ValueError("multitask_loss got an empty batch")
    total = None
    labeled = 0
    for outputs, labels in batch:
        for task, fn in loss_fns.items():
            label = labels.get(task)
            if label is None or task not in outputs:
                continue
            term = fn(outputs[task], label) * Tensor(np.asarray(weights.get(task, 1.0), dtype=np.float32))
            total = term if total is None else total + term
            labeled += 1
    if total is None:
        raise ValueError("multitask_loss: no labeled task in the entire batch")
    _ = labeled
    return total * Tensor(np.asarray(1.0 / len(batch), dtype=np.float32))
