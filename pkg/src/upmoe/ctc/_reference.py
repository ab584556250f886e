"""Pure-Python (numpy) CTC forward-backward kernel.

Fallback for the compiled extension; same signature, same math. The DP runs
in float64 log-space over the blank-augmented label of length 2U+1.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


def _augment(label: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def forward_backward(log_probs: np.ndarray, label: np.ndarray, blank: int = 0):
    """Negative log likelihood of ``label`` and its gradient w.r.t. log_probs.

    log_probs: [T, V] log scores (log-softmax rows for a proper distribution).
    Returns (nll: float, grad: float64[T, V]) with grad = d(nll)/d(log_probs).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    label = np.asarray(label, dtype=np.int64)
    T, V = lp.shape
    ext = _augment(label, blank)
    S = len(ext)

    # transitions into state s: from s, s-1, and s-2 when s-2 is a different
    # non-blank symbol (the standard CTC skip rule)
    skip_ok = np.zeros(S, dtype=bool)
    if S > 2:
        skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    emit = lp[:, ext]  # [T, S]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        acc = np.logaddexp(prev, step)
        skip = np.full(S, NEG_INF)
        skip[2:] = prev[:-2]
        acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + emit[t]

    if S > 1:
        log_z = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_z = alpha[T - 1, 0]
    if not np.isfinite(log_z):
        return float("inf"), np.zeros_like(lp)

    # beta[t, s]: log prob of completing the label from state s after time t,
    # excluding the emission at t (so alpha + beta is the state posterior)
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_from = np.zeros(S, dtype=bool)
    if S > 2:
        skip_from[:-2] = skip_ok[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        step = np.full(S, NEG_INF)
        step[:-1] = nxt[1:]
        acc = np.logaddexp(nxt, step)
        skip = np.full(S, NEG_INF)
        skip[:-2] = nxt[2:]
        acc = np.where(skip_from, np.logaddexp(acc, skip), acc)
        beta[t] = acc

    posterior = np.exp(alpha + beta - log_z)  # [T, S]
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, ext[s]] -= posterior[:, s]
    return float(-log_z), grad
