"""CTC loss, greedy decoding, and token error metrics.

The forward-backward dynamic program is the hot loop of training, so it has
two interchangeable kernels: a compiled Cython extension and a pure-Python
numpy fallback. The compiled one is selected at import when available; set
``UPMOE_CTC_BACKEND=python`` (or ``compiled``) to force a choice.
"""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

from .. import autograd
from ..autograd import Tensor
from . import _reference

BLANK_ID = 0

_KERNELS = {"python": _reference.forward_backward}
try:
    from . import _ctc_kernel

    _KERNELS["compiled"] = _ctc_kernel.forward_backward
except ImportError:
    _ctc_kernel = None

_forced = os.environ.get("UPMOE_CTC_BACKEND")
if _forced is not None and _forced not in _KERNELS:
    raise ImportError(
        f"UPMOE_CTC_BACKEND={_forced!r} unavailable; choices: {sorted(_KERNELS)}"
    )
_BACKEND = _forced or ("compiled" if "compiled" in _KERNELS else "python")


def backend_name() -> str:
    """Name of the kernel backend selected at import."""
    return _BACKEND


def get_kernel(name: str | None = None):
    """Forward-backward kernel by name (default: the selected backend)."""
    return _KERNELS[name or _BACKEND]


def available_backends() -> list[str]:
    return sorted(_KERNELS)


def min_frames(label: Sequence[int]) -> int:
    """Shortest frame count that admits a valid alignment for ``label``."""
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def ctc_loss(
    log_probs: Tensor,
    label: Sequence[int],
    blank: int = BLANK_ID,
    kernel=None,
) -> tuple[Tensor, bool]:
    """Negative log likelihood of ``label`` under per-frame ``log_probs``.

    log_probs: [T, V] tensor of log-softmax rows. Differentiable through
    log_probs. Returns (loss, feasible); when the label cannot be aligned
    in T frames the loss is +inf and feasible is False (the trainer skips
    such instances).
    """
    if log_probs.ndim != 2:
        raise autograd.ShapeError(f"ctc_loss expects [T, V] log_probs, got {log_probs.shape}")
    T, V = log_probs.shape
    label_arr = np.asarray(list(label), dtype=np.int64)
    if label_arr.size and (label_arr.min() < 1 or label_arr.max() >= V):
        raise ValueError(
            f"label symbols must lie in [1, {V}); got {sorted(set(label_arr.tolist()))}"
        )
    if min_frames(label_arr) > T:
        return Tensor(np.inf, dtype=log_probs.dtype), False

    fn = kernel or _KERNELS[_BACKEND]
    nll, grad = fn(log_probs.data, label_arr, blank)
    out = Tensor(np.asarray(nll), dtype=log_probs.dtype)

    def _backward(g: np.ndarray) -> None:
        autograd._accumulate(log_probs, float(g) * grad)

    autograd._record(out, (log_probs,), _backward)
    return out, True


def ctc_greedy_decode(log_probs: np.ndarray | Tensor, blank: int = BLANK_ID) -> list[int]:
    """Per-frame argmax, collapse adjacent repeats, drop blanks.

    Argmax ties break toward the lowest index.
    """
    arr = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = np.argmax(arr, axis=-1)
    decoded: list[int] = []
    prev = -1
    for tok in best.tolist():
        if tok != prev and tok != blank:
            decoded.append(tok)
        prev = tok
    return decoded


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> tuple[int, float]:
    """Levenshtein distance and rate = distance / max(1, len(ref))."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    dist = prev[len(ref)]
    return dist, dist / max(1, len(ref))


__all__ = [
    "BLANK_ID",
    "available_backends",
    "backend_name",
    "ctc_greedy_decode",
    "ctc_loss",
    "edit_distance",
    "get_kernel",
    "min_frames",
]
