"""Activated-path multiply-accumulate counts per token.

Stands in for wall-clock inference cost: an MoE layer runs only its k
selected experts plus a d*N router projection, so the proxy grows with k
but is independent of the expert count except for the router term.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig
from .moe import MoEConfig


@dataclass(frozen=True)
class FlopBreakdown:
    downsample: int
    attention: int
    ffn_path: int
    router: int
    head: int

    @property
    def total(self) -> int:
        return self.downsample + self.attention + self.ffn_path + self.router + self.head


def flop_proxy(
    config: ModelConfig,
    moe_config: MoEConfig | None = None,
    context_len: int | None = None,
) -> FlopBreakdown:
    """Per-token MACs on the activated path.

    ``context_len`` sets the attended sequence length for the score/context
    terms (defaults to config.max_len, the worst case).
    """
    d = config.d_model
    ctx = config.max_len if context_len is None else context_len
    k = moe_config.top_k if moe_config is not None else 1
    router = config.n_blocks * d * moe_config.n_experts if moe_config is not None else 0
    return FlopBreakdown(
        downsample=config.downsample_rate * config.d_feat * d,
        attention=config.n_blocks * (4 * d * d + 2 * ctx * d),
        ffn_path=config.n_blocks * k * 2 * d * config.ffn_hidden,
        router=router,
        head=d * config.vocab_size,
    )
