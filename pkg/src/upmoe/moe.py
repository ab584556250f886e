"""Sparsely-gated mixture-of-experts layer.

A linear router scores every token against N expert FFNs; the k best are
evaluated and mixed with weights renormalized over the selected logits only.
That renormalization is what lets a layer whose experts are identical copies
of one FFN reproduce that FFN bit-for-bit at the start of continued training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import ffn_forward

FfnParams = tuple[Tensor, Tensor, Tensor, Tensor]  # W1, b1, W2, b2


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int
    top_k: int
    alpha: float = 0.01
    router_noise_std: float = 0.0

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(
                f"top_k must satisfy 1 <= k <= n_experts; got k={self.top_k}, "
                f"n_experts={self.n_experts}"
            )
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.router_noise_std < 0:
            raise ValueError(f"router_noise_std must be >= 0, got {self.router_noise_std}")


@dataclass
class RouterOutput:
    """Per-token routing decision for one layer.

    full_dist: softmax over all N experts, [T, N]
    indices: selected expert ids per token, [T, k], distinct within a row
    weights: softmax over the selected logits (renormalized), [T, k]
    """

    full_dist: Tensor
    indices: np.ndarray
    weights: Tensor


def route(router_w: Tensor, h: Tensor, top_k: int) -> RouterOutput:
    """Score tokens, pick top-k experts, renormalize the selected weights.

    Ties in the logits break toward the lower expert index, so a
    zero-initialized router routes deterministically.
    """
    logits = ag.matmul(h, router_w)
    full = ag.softmax(logits, axis=-1)
    values, indices = ag.topk(logits, top_k)
    weights = ag.softmax(values, axis=-1)
    return RouterOutput(full_dist=full, indices=indices, weights=weights)


def moe_forward(
    h: Tensor, experts: list[FfnParams], router_w: Tensor, top_k: int
) -> tuple[Tensor, RouterOutput]:
    """Mix the k selected experts per token: sum_n weight_n * FFN_n(token).

    Only the selected experts run, each on just the rows routed to it, so
    expert-FFN evaluations per token are exactly k.
    """
    out = route(router_w, h, top_k)
    n_tokens = h.shape[0]
    mixed = None
    for e in np.unique(out.indices):
        token_idx, slot_idx = np.nonzero(out.indices == e)
        rows = ag.take_rows(h, token_idx)
        expert_out = ffn_forward(rows, *experts[int(e)])
        w = ag.reshape(ag.take_pairs(out.weights, token_idx, slot_idx), (len(token_idx), 1))
        contrib = ag.scatter_rows(ag.mul(expert_out, w), token_idx, n_tokens)
        mixed = contrib if mixed is None else ag.add(mixed, contrib)
    return mixed, out


def balance_loss(full_dist: Tensor) -> Tensor:
    """Load-balancing penalty N * sum_i(dispatch_fraction_i * mean_prob_i).

    The dispatch fraction (arg-max share per expert) is treated as a
    constant; gradients flow through the mean routing probabilities only.
    """
    probs = full_dist.data
    n_tokens, n_experts = probs.shape
    dispatch = np.bincount(np.argmax(probs, axis=-1), minlength=n_experts)
    frac = Tensor((dispatch / n_tokens).astype(probs.dtype), dtype=probs.dtype)
    mean_prob = full_dist.mean(axis=0)
    return ag.scale(ag.mul(mean_prob, frac).sum(), float(n_experts))


@dataclass
class UsageRow:
    layer_index: int
    expert_index: int
    dispatch_fraction: float  # share of tokens whose arg-max lands here
    mean_prob: float  # average routing probability
    topk_fraction: float  # share of tokens with this expert among their top-k


@dataclass
class UsageStats:
    rows: list[UsageRow]

    def for_layer(self, layer_index: int) -> list[UsageRow]:
        return [r for r in self.rows if r.layer_index == layer_index]

    def engaged_expert_count(self, threshold: float = 0.05) -> int:
        """Experts with top-k activation share >= threshold, summed over layers."""
        return sum(1 for r in self.rows if r.topk_fraction >= threshold)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer_index", "expert_index", "F_i", "G_i", "topk_fraction"])
            for r in self.rows:
                writer.writerow(
                    [
                        r.layer_index,
                        r.expert_index,
                        repr(r.dispatch_fraction),
                        repr(r.mean_prob),
                        repr(r.topk_fraction),
                    ]
                )


@dataclass
class _LayerAccumulator:
    n_experts: int
    tokens: int = 0
    argmax_counts: np.ndarray = None
    prob_sums: np.ndarray = None
    topk_counts: np.ndarray = None

    def __post_init__(self):
        self.argmax_counts = np.zeros(self.n_experts, dtype=np.int64)
        self.prob_sums = np.zeros(self.n_experts, dtype=np.float64)
        self.topk_counts = np.zeros(self.n_experts, dtype=np.int64)


class UsageCollector:
    """Accumulates router decisions across an evaluation pass."""

    def __init__(self):
        self._layers: dict[int, _LayerAccumulator] = {}

    def add(self, layer_index: int, out: RouterOutput) -> None:
        probs = out.full_dist.data
        acc = self._layers.get(layer_index)
        if acc is None:
            acc = self._layers[layer_index] = _LayerAccumulator(probs.shape[1])
        acc.tokens += probs.shape[0]
        acc.argmax_counts += np.bincount(np.argmax(probs, axis=-1), minlength=acc.n_experts)
        acc.prob_sums += probs.sum(axis=0, dtype=np.float64)
        acc.topk_counts += np.bincount(out.indices.reshape(-1), minlength=acc.n_experts)

    def finalize(self) -> UsageStats:
        if not self._layers:
            raise ValueError("no router outputs were collected")
        rows = []
        for layer_index in sorted(self._layers):
            acc = self._layers[layer_index]
            for e in range(acc.n_experts):
                rows.append(
                    UsageRow(
                        layer_index=layer_index,
                        expert_index=e,
                        dispatch_fraction=acc.argmax_counts[e] / acc.tokens,
                        mean_prob=acc.prob_sums[e] / acc.tokens,
                        topk_fraction=acc.topk_counts[e] / acc.tokens,
                    )
                )
        return UsageStats(rows)
