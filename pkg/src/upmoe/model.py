"""Encoder models: a dense baseline and its mixture-of-experts variant.

Both share the same skeleton: frame down-sampling, sinusoidal positions,
a stack of pre-norm blocks (h += Attn(LN(h)); h += FFN(LN(h))), and a
linear token-classification head whose logits feed the CTC loss. The MoE
variant swaps each block's FFN for a routed expert bank.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import layers
from .autograd import Tensor
from .layers import InputError, attention_forward, downsample, ffn_forward
from .moe import MoEConfig, RouterOutput, moe_forward


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_blocks: int
    ffn_hidden: int
    n_heads: int
    vocab_size: int  # includes the CTC blank at index 0
    downsample_rate: int
    max_len: int  # longest supported down-sampled sequence
    d_feat: int

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.downsample_rate < 1:
            raise ValueError(f"downsample_rate must be >= 1, got {self.downsample_rate}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        for name in ("d_model", "n_blocks", "ffn_hidden", "n_heads", "max_len", "d_feat"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


# desk-scale default: CPU-minutes training while keeping the 2x down-sampling
DEFAULT_CONFIG = ModelConfig(
    d_model=64,
    n_blocks=4,
    ffn_hidden=128,
    n_heads=4,
    vocab_size=12,
    downsample_rate=2,
    max_len=64,
    d_feat=8,
)


@dataclass
class Batch:
    """Padded feature/label arrays plus per-row true lengths."""

    features: Tensor  # [B, T_max, d_feat], zero padded
    feature_lengths: np.ndarray  # [B]
    labels: np.ndarray  # [B, U_max], -1 padded
    label_lengths: np.ndarray  # [B]

    def __len__(self) -> int:
        return len(self.feature_lengths)

    def features_row(self, b: int) -> np.ndarray:
        return self.features.data[b, : self.feature_lengths[b]]

    def label_row(self, b: int) -> list[int]:
        return self.labels[b, : self.label_lengths[b]].tolist()


def make_batch(items: Sequence[tuple[np.ndarray, Sequence[int]]]) -> Batch:
    """Pad a list of (features [T, d_feat], label) pairs into one Batch."""
    if not items:
        raise InputError("cannot build an empty batch")
    feat_lens = np.array([len(f) for f, _ in items], dtype=np.int64)
    label_lens = np.array([len(y) for _, y in items], dtype=np.int64)
    if feat_lens.min() == 0:
        raise InputError("batch rows must contain at least one frame")
    d_feat = items[0][0].shape[1]
    feats = np.zeros((len(items), feat_lens.max(), d_feat), dtype=np.float32)
    labels = np.full((len(items), max(1, label_lens.max())), -1, dtype=np.int64)
    for b, (f, y) in enumerate(items):
        feats[b, : len(f)] = f
        labels[b, : len(y)] = np.asarray(list(y), dtype=np.int64)
    return Batch(Tensor(feats), feat_lens, labels, label_lens)


def _init_weight(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _EncoderBase:
    kind = "base"

    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, Tensor],
        expected: dict[str, tuple[int, ...]],
    ):
        self.config = config
        self.params = params
        if list(params) != list(expected):
            raise ValueError(
                "parameter table does not enumerate the architecture: "
                f"got {len(params)} names, expected {len(expected)}"
            )
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_copy(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            self.params[name].data = arr.copy()

    # shared forward machinery -------------------------------------------

    def _block_ffn(self, i: int, h: Tensor, routing: list[RouterOutput]) -> Tensor:
        raise NotImplementedError

    def forward_row(self, features: np.ndarray) -> tuple[Tensor, list[RouterOutput]]:
        """Logits [T', vocab] for one un-padded feature row."""
        cfg = self.config
        p = self.params
        feats = np.asarray(features)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise InputError(f"expected a non-empty [T, d_feat] row, got shape {feats.shape}")
        t_out = -(-feats.shape[0] // cfg.downsample_rate)
        if t_out > cfg.max_len:
            raise InputError(
                f"sequence of {feats.shape[0]} frames down-samples to {t_out} > max_len={cfg.max_len}"
            )
        h = downsample(feats, p["downsample.W"], p["downsample.b"], cfg.downsample_rate)
        pos = layers.sinusoidal_positions(t_out, cfg.d_model, dtype=h.dtype)
        h = ag.add(h, Tensor(pos, dtype=h.dtype))
        routing: list[RouterOutput] = []
        for i in range(cfg.n_blocks):
            attn_in = ag.layernorm(h, p[f"block{i}.ln1.gain"], p[f"block{i}.ln1.bias"])
            h = ag.add(
                h,
                attention_forward(
                    attn_in,
                    p[f"block{i}.attn.Wq"],
                    p[f"block{i}.attn.Wk"],
                    p[f"block{i}.attn.Wv"],
                    p[f"block{i}.attn.Wo"],
                    cfg.n_heads,
                ),
            )
            ffn_in = ag.layernorm(h, p[f"block{i}.ln2.gain"], p[f"block{i}.ln2.bias"])
            h = ag.add(h, self._block_ffn(i, ffn_in, routing))
        return ag.add(ag.matmul(h, p["head.W"]), p["head.b"]), routing

    def forward_rows(self, batch: Batch) -> tuple[list[Tensor], list[list[RouterOutput]]]:
        """Per-row logits on true lengths (rows never see padding)."""
        logits, routing = [], []
        for b in range(len(batch)):
            lg, rt = self.forward_row(batch.features_row(b))
            logits.append(lg)
            routing.append(rt)
        return logits, routing


def encoder_forward(model: _EncoderBase, batch: Batch) -> Tensor:
    """Batch logits [B, T'_max, vocab]; short rows are zero-padded."""
    rows, _ = model.forward_rows(batch)
    t_max = max(r.shape[0] for r in rows)
    padded = [
        r if r.shape[0] == t_max else ag.scatter_rows(r, np.arange(r.shape[0]), t_max)
        for r in rows
    ]
    stacked = ag.concat(padded, axis=0)
    return ag.reshape(stacked, (len(rows), t_max, model.config.vocab_size))


class DenseModel(_EncoderBase):
    kind = "dense"

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        super().__init__(config, params, self.parameter_shapes(config))

    @classmethod
    def parameter_shapes(cls, config: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, f = config.d_model, config.ffn_hidden
        shapes: dict[str, tuple[int, ...]] = {
            "downsample.W": (config.downsample_rate * config.d_feat, d),
            "downsample.b": (d,),
        }
        for i in range(config.n_blocks):
            shapes[f"block{i}.ln1.gain"] = (d,)
            shapes[f"block{i}.ln1.bias"] = (d,)
            shapes[f"block{i}.attn.Wq"] = (d, d)
            shapes[f"block{i}.attn.Wk"] = (d, d)
            shapes[f"block{i}.attn.Wv"] = (d, d)
            shapes[f"block{i}.attn.Wo"] = (d, d)
            shapes[f"block{i}.ln2.gain"] = (d,)
            shapes[f"block{i}.ln2.bias"] = (d,)
            shapes[f"block{i}.ffn.W1"] = (d, f)
            shapes[f"block{i}.ffn.b1"] = (f,)
            shapes[f"block{i}.ffn.W2"] = (f, d)
            shapes[f"block{i}.ffn.b2"] = (d,)
        shapes["head.W"] = (d, config.vocab_size)
        shapes["head.b"] = (config.vocab_size,)
        return shapes

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "DenseModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in cls.parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[1]
            if leaf == "gain":
                arr = np.ones(shape, dtype=dtype)
            elif leaf in ("bias", "b", "b1", "b2"):
                arr = np.zeros(shape, dtype=dtype)
            else:
                arr = _init_weight(rng, shape, dtype)
            params[name] = Tensor(arr, requires_grad=True, dtype=dtype)
        return cls(config, params)

    def _block_ffn(self, i: int, h: Tensor, routing: list[RouterOutput]) -> Tensor:
        p = self.params
        return ffn_forward(
            h,
            p[f"block{i}.ffn.W1"],
            p[f"block{i}.ffn.b1"],
            p[f"block{i}.ffn.W2"],
            p[f"block{i}.ffn.b2"],
        )


class MoEModel(_EncoderBase):
    kind = "moe"

    def __init__(self, config: ModelConfig, moe_config: MoEConfig, params: dict[str, Tensor]):
        self.moe_config = moe_config
        self._n_experts = moe_config.n_experts
        super().__init__(config, params, self.parameter_shapes(config, moe_config.n_experts))

    @classmethod
    def parameter_shapes(
        cls, config: ModelConfig, n_experts: int
    ) -> dict[str, tuple[int, ...]]:
        d, f = config.d_model, config.ffn_hidden
        n = n_experts
        shapes: dict[str, tuple[int, ...]] = {
            "downsample.W": (config.downsample_rate * config.d_feat, d),
            "downsample.b": (d,),
        }
        for i in range(config.n_blocks):
            shapes[f"block{i}.ln1.gain"] = (d,)
            shapes[f"block{i}.ln1.bias"] = (d,)
            shapes[f"block{i}.attn.Wq"] = (d, d)
            shapes[f"block{i}.attn.Wk"] = (d, d)
            shapes[f"block{i}.attn.Wv"] = (d, d)
            shapes[f"block{i}.attn.Wo"] = (d, d)
            shapes[f"block{i}.ln2.gain"] = (d,)
            shapes[f"block{i}.ln2.bias"] = (d,)
            shapes[f"block{i}.moe.router.W"] = (d, n)
            for e in range(n):
                shapes[f"block{i}.moe.expert{e}.W1"] = (d, f)
                shapes[f"block{i}.moe.expert{e}.b1"] = (f,)
                shapes[f"block{i}.moe.expert{e}.W2"] = (f, d)
                shapes[f"block{i}.moe.expert{e}.b2"] = (d,)
        shapes["head.W"] = (d, config.vocab_size)
        shapes["head.b"] = (config.vocab_size,)
        return shapes

    def _expert_params(self, i: int):
        p = self.params
        return [
            (
                p[f"block{i}.moe.expert{e}.W1"],
                p[f"block{i}.moe.expert{e}.b1"],
                p[f"block{i}.moe.expert{e}.W2"],
                p[f"block{i}.moe.expert{e}.b2"],
            )
            for e in range(self._n_experts)
        ]

    def _block_ffn(self, i: int, h: Tensor, routing: list[RouterOutput]) -> Tensor:
        out, router_out = moe_forward(
            h,
            self._expert_params(i),
            self.params[f"block{i}.moe.router.W"],
            self.moe_config.top_k,
        )
        routing.append(router_out)
        return out
