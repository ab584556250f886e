"""Synthetic two-domain sequence data.

Each domain assigns every label symbol a feature template; an utterance
repeats each symbol's template for 2-4 frames and adds Gaussian noise.
Templates are kept far apart relative to the noise so the task is learnable
in CPU minutes, and two domains with different template draws stand in for
an old/new data distribution shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Batch, make_batch

MIN_REPEAT = 2
MAX_REPEAT = 4
ONSET_GAIN = 0.5  # first frame of a symbol is scaled up, like an attack transient
RELEASE_SCALE = 0.3  # last frame decays, so symbol boundaries stay visible

Item = tuple[np.ndarray, list[int]]


@dataclass(frozen=True, eq=False)
class DomainSpec:
    domain_id: str
    templates: np.ndarray  # [vocab, d_feat]; row 0 is the (never emitted) blank
    noise_std: float
    min_label_len: int
    max_label_len: int
    repeat_prob: float = 0.25  # chance the next symbol repeats the previous one

    def __post_init__(self):
        if self.templates.ndim != 2 or self.templates.shape[0] < 2:
            raise ValueError(f"templates must be [vocab>=2, d_feat], got {self.templates.shape}")
        if not 1 <= self.min_label_len <= self.max_label_len:
            raise ValueError(
                f"bad label length bounds [{self.min_label_len}, {self.max_label_len}]"
            )
        if not 0.0 <= self.repeat_prob < 1.0:
            raise ValueError(f"repeat_prob must be in [0, 1), got {self.repeat_prob}")
        emitting = self.templates[1:]
        if len(emitting) > 1:
            diffs = emitting[:, None, :] - emitting[None, :, :]
            dists = np.sqrt((diffs**2).sum(axis=-1))
            iu = np.triu_indices(len(emitting), k=1)
            min_dist = float(dists[iu].min())
            if min_dist < 4.0 * self.noise_std:
                raise ValueError(
                    f"templates are not distinguishable: min pairwise distance "
                    f"{min_dist:.4f} < 4 * noise_std = {4 * self.noise_std:.4f}"
                )

    @property
    def vocab_size(self) -> int:
        return self.templates.shape[0]

    @property
    def d_feat(self) -> int:
        return self.templates.shape[1]


def make_domain(
    domain_id: str,
    vocab_size: int,
    d_feat: int,
    template_seed: int,
    noise_std: float,
    min_label_len: int,
    max_label_len: int,
    repeat_prob: float = 0.25,
) -> DomainSpec:
    rng = np.random.default_rng(template_seed)
    templates = rng.standard_normal((vocab_size, d_feat)).astype(np.float32)
    templates[0] = 0.0
    return DomainSpec(
        domain_id, templates, noise_std, min_label_len, max_label_len, repeat_prob
    )


def _min_frames(label: list[int]) -> int:
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _gen_items(
    spec: DomainSpec, n: int, rng: np.random.Generator, ensure_rate: int
) -> list[Item]:
    # symbols occupy whole down-sampled frames when possible, so boundary
    # cues survive frame stacking instead of straddling it at random phases
    allowed = [r for r in range(MIN_REPEAT, MAX_REPEAT + 1) if r % ensure_rate == 0]
    if not allowed:
        allowed = list(range(MIN_REPEAT, MAX_REPEAT + 1))
    items: list[Item] = []
    for _ in range(n):
        u = int(rng.integers(spec.min_label_len, spec.max_label_len + 1))
        label = [int(rng.integers(1, spec.vocab_size))]
        while len(label) < u:
            if rng.random() < spec.repeat_prob:
                label.append(label[-1])
            else:
                label.append(int(rng.integers(1, spec.vocab_size)))
        repeats = [allowed[int(rng.integers(len(allowed)))] for _ in label]
        # a symbol followed by its own repeat must span two down-sampled
        # frames so its tail frame can carry the separating CTC blank
        for i in range(u - 1):
            if label[i] == label[i + 1]:
                repeats[i] = max(repeats[i], 2 * ensure_rate)
        chunks = []
        for sym, r in zip(label, repeats):
            chunk = np.tile(spec.templates[sym], (r, 1))
            chunk[0] *= 1.0 + ONSET_GAIN
            chunk[-1] *= RELEASE_SCALE
            if spec.noise_std > 0:
                chunk = chunk + rng.normal(0.0, spec.noise_std, size=chunk.shape)
            chunks.append(chunk)
        items.append((np.concatenate(chunks).astype(np.float32), label))
    return items


def gen_dataset(spec: DomainSpec, n: int, seed: int, ensure_rate: int = 1) -> list[Item]:
    """Deterministic stream of (features [T, d_feat], label) pairs.

    ``ensure_rate`` pads repeat counts so every item remains CTC-feasible
    after that down-sampling factor.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return _gen_items(spec, n, np.random.default_rng(seed), ensure_rate)


@dataclass
class DatasetSplits:
    train: list[Item] = field(default_factory=list)
    valid: list[Item] = field(default_factory=list)
    test: list[Item] = field(default_factory=list)


def gen_splits(
    spec: DomainSpec,
    n_train: int,
    n_valid: int,
    n_test: int,
    seed: int,
    ensure_rate: int = 1,
) -> DatasetSplits:
    rng = np.random.default_rng(seed)
    return DatasetSplits(
        train=_gen_items(spec, n_train, rng, ensure_rate),
        valid=_gen_items(spec, n_valid, rng, ensure_rate),
        test=_gen_items(spec, n_test, rng, ensure_rate),
    )


def interleave(primary: list[Item], secondary: list[Item], every: int) -> list[Item]:
    """Uniformly interleave: every ``every``-th slot takes a secondary item.

    Pools are consumed in order; when one runs out the other fills the rest.
    """
    if every < 2:
        raise ValueError(f"every must be >= 2, got {every}")
    out: list[Item] = []
    pi, si = 0, 0
    total = len(primary) + len(secondary)
    for slot in range(1, total + 1):
        take_secondary = slot % every == 0
        if take_secondary and si < len(secondary):
            out.append(secondary[si])
            si += 1
        elif pi < len(primary):
            out.append(primary[pi])
            pi += 1
        else:
            out.append(secondary[si])
            si += 1
    return out


class BatchSampler:
    """Seeded epoch-shuffled batches of a fixed size."""

    def __init__(self, items: list[Item], batch_size: int, seed: int):
        if not items:
            raise ValueError("cannot sample from an empty dataset")
        self._items = items
        self._batch_size = min(batch_size, len(items))
        self._rng = np.random.default_rng(seed)
        self._order: list[int] = []

    def next_batch(self) -> Batch:
        if len(self._order) < self._batch_size:
            self._order = self._rng.permutation(len(self._items)).tolist()
        take, self._order = self._order[: self._batch_size], self._order[self._batch_size :]
        return make_batch([self._items[i] for i in take])


def iter_eval_batches(items: list[Item], batch_size: int):
    for start in range(0, len(items), batch_size):
        yield make_batch(items[start : start + batch_size])
