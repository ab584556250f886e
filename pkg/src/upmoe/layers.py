"""Encoder building blocks: down-sampling, attention, FFN, positions."""

from __future__ import annotations

import functools
import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class InputError(ValueError):
    """Model input violates a precondition (empty/overlong sequence)."""


@functools.lru_cache(maxsize=32)
def _position_table(max_t: int, d: int) -> np.ndarray:
    pos = np.arange(max_t, dtype=np.float64)[:, None]
    dim = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * dim / d)
    table = np.zeros((max_t, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def sinusoidal_positions(t: int, d: int, dtype=np.float32) -> np.ndarray:
    return _position_table(t, d).astype(dtype)


def downsample(features: np.ndarray, w: Tensor, b: Tensor, rate: int) -> Tensor:
    """Concatenate ``rate`` consecutive frames, then project linearly.

    ``features`` is a raw [T, d_feat] array; rows are zero-padded up to a
    multiple of ``rate`` so the output length is ceil(T / rate).
    """
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise InputError(f"downsample needs a non-empty [T, d_feat] input, got {feats.shape}")
    t, d_feat = feats.shape
    t_out = -(-t // rate)
    pad = t_out * rate - t
    if pad:
        feats = np.concatenate([feats, np.zeros((pad, d_feat), dtype=feats.dtype)])
    stacked = Tensor(feats.reshape(t_out, rate * d_feat), dtype=w.dtype)
    return ag.add(ag.matmul(stacked, w), b)


def ffn_forward(h: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise feed-forward: W2·relu(W1·h + b1) + b2."""
    return ag.add(ag.matmul(ag.relu(ag.add(ag.matmul(h, w1), b1)), w2), b2)


def attention_forward(
    h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_heads: int
) -> Tensor:
    """Multi-head bidirectional scaled dot-product self-attention."""
    t, d = h.shape
    if d % n_heads:
        raise ag.ShapeError(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads

    def split(x: Tensor) -> Tensor:  # [T, d] -> [heads, T, hd]
        return ag.transpose(ag.reshape(x, (t, n_heads, hd)), (1, 0, 2))

    q = split(ag.matmul(h, wq))
    k = split(ag.matmul(h, wk))
    v = split(ag.matmul(h, wv))
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
    ctx = ag.matmul(ag.softmax(scores, axis=-1), v)
    merged = ag.reshape(ag.transpose(ctx, (1, 0, 2)), (t, d))
    return ag.matmul(merged, wo)
