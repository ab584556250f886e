# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC forward-backward kernel (hot loop of the training step)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


cdef inline double _logaddexp(double a, double b) noexcept nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a >= b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def forward_backward(log_probs, label, int blank=0):
    """Negative log likelihood of ``label`` and its gradient w.r.t. log_probs.

    Mirrors the pure-Python reference: float64 log-space DP over the
    blank-augmented label; returns (nll, grad[T, V]).
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] lab = np.ascontiguousarray(label, dtype=np.int64)
    cdef Py_ssize_t T = lp.shape[0]
    cdef Py_ssize_t V = lp.shape[1]
    cdef Py_ssize_t U = lab.shape[0]
    cdef Py_ssize_t S = 2 * U + 1

    cdef cnp.ndarray[cnp.int64_t, ndim=1] ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = lab

    cdef cnp.ndarray[cnp.uint8_t, ndim=1] skip_ok = np.zeros(S, dtype=np.uint8)
    cdef Py_ssize_t s, t
    for s in range(2, S):
        if ext[s] != blank and ext[s] != ext[s - 2]:
            skip_ok[s] = 1

    cdef cnp.ndarray[cnp.float64_t, ndim=2] alpha = np.full((T, S), -np.inf)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] beta = np.full((T, S), -np.inf)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.zeros((T, V))

    cdef double acc, log_z, post

    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _logaddexp(acc, alpha[t - 1, s - 1])
            if s >= 2 and skip_ok[s]:
                acc = _logaddexp(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + lp[t, ext[s]]

    if S > 1:
        log_z = _logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_z = alpha[T - 1, 0]
    if log_z == -INFINITY:
        return float("inf"), grad

    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            acc = beta[t + 1, s] + lp[t + 1, ext[s]]
            if s + 1 < S:
                acc = _logaddexp(acc, beta[t + 1, s + 1] + lp[t + 1, ext[s + 1]])
            if s + 2 < S and skip_ok[s + 2]:
                acc = _logaddexp(acc, beta[t + 1, s + 2] + lp[t + 1, ext[s + 2]])
            beta[t, s] = acc

    for t in range(T):
        for s in range(S):
            post = alpha[t, s] + beta[t, s] - log_z
            if post != -INFINITY:
                grad[t, ext[s]] -= exp(post)

    return float(-log_z), grad
