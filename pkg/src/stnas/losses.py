"""Frame cross-entropy and CTC losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


class CtcInfeasibleError(ValueError):
    """A label sequence cannot be aligned to its input length (infinite loss)."""


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets[batch, T]``."""
    logits = ad.as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ContractError(f"targets shape {targets.shape} != logits shape {logits.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ContractError(f"targets must lie in [0, {V})")
    logp = ad.log_softmax(logits, axis=-1)
    index = tuple(np.indices(targets.shape)) + (targets,)
    return ad.neg(ad.mean(ad.getitem(logp, index)))


def frame_accuracy(logits, targets) -> float:
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(values.argmax(axis=-1) == np.asarray(targets)))


@dataclass
class CtcBatch:
    """``log_probs[batch, T, V]`` with blank at index 0 and labels in 1..V-1."""

    log_probs: Tensor
    label_seqs: Sequence[Sequence[int]]
    input_lengths: Sequence[int] | None = None
    label_lengths: Sequence[int] | None = None

    def __post_init__(self):
        self.log_probs = ad.as_tensor(self.log_probs)
        B, T, V = self.log_probs.shape
        if len(self.label_seqs) != B:
            raise ContractError("one label sequence per batch item required")
        if self.input_lengths is None:
            self.input_lengths = [T] * B
        if self.label_lengths is None:
            self.label_lengths = [len(s) for s in self.label_seqs]
        for seq, n, tl in zip(self.label_seqs, self.label_lengths, self.input_lengths):
            if len(seq) != n:
                raise ContractError("label_lengths disagree with label_seqs")
            if not 1 <= tl <= T:
                raise ContractError(f"input length {tl} outside [1, {T}]")
            if any(not 1 <= int(c) < V for c in seq):
                raise ContractError(f"labels must lie in 1..{V - 1}")
            if n > tl:
                raise ContractError("label longer than its input")


_NEG_INF = -np.inf


def _ctc_single(lp: np.ndarray, labels: np.ndarray):
    """Log-likelihood and gradient w.r.t. ``lp[T, V]`` for one sequence."""
    T, V = lp.shape
    L = len(labels)
    repeats = int(np.sum(labels[1:] == labels[:-1])) if L > 1 else 0
    if L + repeats > T:
        raise CtcInfeasibleError(f"label of length {L} with {repeats} repeats needs more than {T} frames")
    ext = np.zeros(2 * L + 1, dtype=np.int64)
    ext[1::2] = labels
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]

    alpha = np.full((T, S), _NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    # beta excludes the emission at its own frame
    beta = np.full((T, S), _NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    log_lik = alpha[T - 1, S - 1]
    if S > 1:
        log_lik = np.logaddexp(log_lik, alpha[T - 1, S - 2])
    if not np.isfinite(log_lik):
        raise CtcInfeasibleError("no valid alignment")

    occupancy = np.exp(alpha + beta - log_lik)
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, ext[s]] += occupancy[:, s]
    return float(log_lik), -grad


def ctc_loss(batch: CtcBatch) -> Tensor:
    """Mean over the batch of the CTC negative log-likelihood.

    Computed with the log-space forward-backward recursions; the gradient is
    analytic and treats ``log_probs`` as free inputs.
    """
    lp_t = batch.log_probs
    lp = lp_t.values.astype(np.float64)
    B = lp.shape[0]
    total = 0.0
    grad = np.zeros_like(lp)
    for b in range(B):
        tl = int(batch.input_lengths[b])
        labels = np.asarray(batch.label_seqs[b], dtype=np.int64)
        ll, g = _ctc_single(lp[b, :tl], labels)
        total -= ll
        grad[b, :tl] = g
    grad = (grad / B).astype(lp_t.dtype)
    value = np.asarray(total / B, dtype=lp_t.dtype)
    return ad.make_op(value, (lp_t,), (grad,), lambda g, s: (g * s[0],))


def ctc_greedy_decode(log_probs, input_lengths=None) -> list[list[int]]:
    values = log_probs.values if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    B, T, _ = values.shape
    lengths = input_lengths if input_lengths is not None else [T] * B
    out = []
    for b in range(B):
        path = values[b, :int(lengths[b])].argmax(axis=-1)
        seq, prev = [], 0
        for c in path:
            if c != prev and c != 0:
                seq.append(int(c))
            prev = c
        out.append(seq)
    return out


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_error_rate(hyps, refs) -> float:
    errors = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return errors / max(1, sum(len(r) for r in refs))
