"""Optimizer, schedule, loss assembly, training loop, and evaluation."""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import ctc
from .autograd import Tensor
from .data import BatchSampler, DatasetSplits, Item, iter_eval_batches
from .flops import flop_proxy
from .model import Batch
from .moe import RouterOutput, UsageCollector, UsageStats, balance_loss


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 2e-4
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    batch_size: int = 16
    max_steps: int = 1000
    eval_interval: int = 25
    early_stop_patience_steps: int = 300
    alpha: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.early_stop_patience_steps < 1:
            raise ValueError(
                f"early_stop_patience_steps must be >= 1, got {self.early_stop_patience_steps}"
            )
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_interval < 1:
            raise ValueError("batch_size/eval_interval must be >= 1 and max_steps >= 0")


class TrainingError(RuntimeError):
    """Training diverged or could not make progress."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class BatchError(ValueError):
    """Every instance in the batch was unusable."""


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= cfg.warmup_steps:
        return cfg.peak_lr
    return cfg.peak_lr * step / cfg.warmup_steps


class Adam:
    """Standard Adam with bias correction; updates the listed names only."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig, trainable: list[str]):
        self._params = params
        self._cfg = cfg
        self.trainable = list(trainable)
        self._m = {n: np.zeros_like(params[n].data) for n in self.trainable}
        self._v = {n: np.zeros_like(params[n].data) for n in self.trainable}
        self._t = 0

    def step(self, lr: float) -> None:
        self._t += 1
        b1, b2, eps = self._cfg.beta1, self._cfg.beta2, self._cfg.adam_eps
        bias1 = 1.0 - b1**self._t
        bias2 = 1.0 - b2**self._t
        for name in self.trainable:
            p = self._params[name]
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - b1) * (p.grad - m)
            v += (1.0 - b2) * (p.grad * p.grad - v)
            update = (m / bias1) / (np.sqrt(v / bias2) + eps)
            p.data -= np.asarray(lr * update, dtype=p.data.dtype)


@dataclass
class LossBreakdown:
    total: Tensor
    ctc_value: float
    balance_value: float
    n_skipped: int  # CTC-infeasible instances dropped from the batch


def collect_layer_dists(routing: list[list[RouterOutput]]) -> list[Tensor]:
    """Concatenate per-row router distributions into one [tokens, N] per layer."""
    if not routing or not routing[0]:
        return []
    n_layers = len(routing[0])
    return [
        ag.concat([row[layer].full_dist for row in routing], axis=0)
        for layer in range(n_layers)
    ]


def total_loss(
    row_logits: list[Tensor],
    batch: Batch,
    layer_dists: list[Tensor],
    alpha: float,
) -> LossBreakdown:
    """Mean feasible CTC loss plus alpha times the mean per-layer balance loss.

    The balance term exists only for models that route (dense models pass an
    empty ``layer_dists``). Raises BatchError when no instance is feasible.
    """
    losses = []
    skipped = 0
    for b, logits in enumerate(row_logits):
        loss, feasible = ctc.ctc_loss(ag.log_softmax(logits, axis=-1), batch.label_row(b))
        if feasible:
            losses.append(loss)
        else:
            skipped += 1
    if not losses:
        raise BatchError(f"all {len(row_logits)} instances in the batch are CTC-infeasible")
    l_asr = ag.scale(functools.reduce(ag.add, losses), 1.0 / len(losses))
    total = l_asr
    balance_value = 0.0
    if layer_dists:
        terms = [balance_loss(d) for d in layer_dists]
        l_b = ag.scale(functools.reduce(ag.add, terms), 1.0 / len(terms))
        balance_value = l_b.item()
        if alpha > 0:
            total = ag.add(l_asr, ag.scale(l_b, alpha))
    return LossBreakdown(
        total=total, ctc_value=l_asr.item(), balance_value=balance_value, n_skipped=skipped
    )


@dataclass
class HistoryRow:
    step: int
    lr: float
    train_loss: float
    val_loss: float
    l_asr: float
    l_b: float


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    skipped_instances: int = 0
    skipped_batches: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lr", "train_loss", "val_loss", "l_asr", "l_b"])
            for r in self.rows:
                writer.writerow(
                    [r.step, repr(r.lr), repr(r.train_loss), repr(r.val_loss), repr(r.l_asr), repr(r.l_b)]
                )


def _validation_loss(model, items: list[Item], alpha: float, batch_size: int) -> float:
    values = []
    weights = []
    with ag.no_grad():
        for batch in iter_eval_batches(items, batch_size):
            row_logits, routing = model.forward_rows(batch)
            try:
                breakdown = total_loss(row_logits, batch, collect_layer_dists(routing), alpha)
            except BatchError:
                continue
            values.append(breakdown.total.item())
            weights.append(len(batch))
    if not values:
        raise TrainingError("validation set has no CTC-feasible instances")
    return float(np.average(values, weights=weights))


def train(
    model,
    splits: DatasetSplits,
    cfg: TrainConfig,
    mask: set[str] | None = None,
) -> tuple[object, TrainHistory]:
    """Run the step loop with early stopping; return the best-validation model.

    ``mask`` restricts updates to the named parameters; everything else is
    exactly as it started, bit for bit.
    """
    history = TrainHistory()
    if cfg.max_steps == 0:
        return model, history

    names = model.parameter_names()
    trainable = [n for n in names if n in mask] if mask is not None else list(names)
    if not trainable:
        raise TrainingError("the freeze mask leaves no trainable parameters")
    frozen = set(names) - set(trainable)
    for n in frozen:
        model.params[n].requires_grad = False

    try:
        optimizer = Adam(model.params, cfg, trainable)
        sampler = BatchSampler(splits.train, cfg.batch_size, seed=cfg.seed)
        alpha = cfg.alpha if model.kind == "moe" else 0.0
        best_val = np.inf
        best_state = model.state_copy()
        last_improve_step = 0
        for step in range(cfg.max_steps):
            batch = sampler.next_batch()
            ag.reset_graph()
            row_logits, routing = model.forward_rows(batch)
            try:
                breakdown = total_loss(row_logits, batch, collect_layer_dists(routing), alpha)
            except BatchError:
                history.skipped_batches += 1
                continue
            history.skipped_instances += breakdown.n_skipped
            train_value = breakdown.total.item()
            if not np.isfinite(train_value):
                raise TrainingError(f"training loss diverged at step {step}", step=step)
            ag.backward(breakdown.total)
            optimizer.step(lr_at(step, cfg))

            done = step + 1
            if done % cfg.eval_interval == 0 or done == cfg.max_steps:
                val = _validation_loss(model, splits.valid, alpha, cfg.batch_size)
                history.rows.append(
                    HistoryRow(
                        step=done,
                        lr=lr_at(step, cfg),
                        train_loss=train_value,
                        val_loss=val,
                        l_asr=breakdown.ctc_value,
                        l_b=breakdown.balance_value,
                    )
                )
                if val < best_val:
                    best_val = val
                    best_state = model.state_copy()
                    last_improve_step = done
                elif done - last_improve_step >= cfg.early_stop_patience_steps:
                    break
        model.load_state(best_state)
    finally:
        for n in frozen:
            model.params[n].requires_grad = True
    ag.reset_graph()
    return model, history


@dataclass
class EvalReport:
    dataset_id: str
    token_error_rate: float
    mean_ctc_loss: float
    mean_balance_loss: float
    flops_per_token: int
    usage: UsageStats | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["dataset_id", "token_error_rate", "mean_ctc_loss", "mean_balance_loss", "flops_per_token"]
            )
            writer.writerow(
                [
                    self.dataset_id,
                    repr(self.token_error_rate),
                    repr(self.mean_ctc_loss),
                    repr(self.mean_balance_loss),
                    self.flops_per_token,
                ]
            )


def evaluate(model, items: list[Item], dataset_id: str) -> EvalReport:
    """Greedy-decode error rate plus mean losses over a dataset."""
    total_dist = 0
    total_ref = 0
    ctc_values = []
    collector = UsageCollector()
    with ag.no_grad():
        for feats, label in items:
            logits, routing = model.forward_row(feats)
            log_probs = ag.log_softmax(logits, axis=-1)
            hyp = ctc.ctc_greedy_decode(log_probs.data)
            dist, _ = ctc.edit_distance(hyp, label)
            total_dist += dist
            total_ref += len(label)
            loss, feasible = ctc.ctc_loss(log_probs, label)
            if feasible:
                ctc_values.append(loss.item())
            for layer, out in enumerate(routing):
                collector.add(layer, out)
    usage = None
    mean_balance = 0.0
    if model.kind == "moe":
        usage = collector.finalize()
        per_layer = []
        for layer in sorted({r.layer_index for r in usage.rows}):
            rows = usage.for_layer(layer)
            per_layer.append(
                len(rows) * sum(r.dispatch_fraction * r.mean_prob for r in rows)
            )
        mean_balance = float(np.mean(per_layer))
    moe_cfg = model.moe_config if model.kind == "moe" else None
    return EvalReport(
        dataset_id=dataset_id,
        token_error_rate=total_dist / max(1, total_ref),
        mean_ctc_loss=float(np.mean(ctc_values)) if ctc_values else float("inf"),
        mean_balance_loss=mean_balance,
        flops_per_token=flop_proxy(model.config, moe_cfg).total,
        usage=usage,
    )
