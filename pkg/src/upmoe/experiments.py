"""The five experiment protocols over a synthetic two-domain corpus.

PRETRAIN trains the dense baseline on an A-dominated mix of two domains;
the continued-training protocols then adapt it to domain B only:

    FMFT           continue the dense model, all parameters trainable
    UME            upcycle to MoE, train experts + routers only
    UME_NOFREEZE   upcycle to MoE, train everything
    UME_NOBALANCE  like UME but without the balancing term

Every artifact (checkpoints, history/report/usage CSVs, result files) is a
deterministic function of the experiment config and lands in the workdir.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import configio
from .checkpoint import load_checkpoint, save_checkpoint
from .configio import ConfigError, get_typed
from .data import DatasetSplits, DomainSpec, gen_splits, interleave, make_domain
from .model import DenseModel, ModelConfig
from .moe import MoEConfig
from .train import EvalReport, TrainConfig, evaluate, train
from .upcycle import build_freeze_mask, upcycle

PROTOCOLS = ("PRETRAIN", "FMFT", "UME", "UME_NOFREEZE", "UME_NOBALANCE")


class ProtocolError(RuntimeError):
    """A protocol's inputs are missing or invalid."""


@dataclass(frozen=True)
class DataSettings:
    noise_std: float = 0.12
    min_label_len: int = 2
    max_label_len: int = 6
    repeat_prob: float = 0.25
    template_seed_a: int = 101
    template_seed_b: int = 202
    template_overlap_b: float = 0.2  # how much domain B's templates lean on A's
    data_seed_a: int = 11
    data_seed_b: int = 22
    n_train: int = 4096
    n_valid: int = 64
    n_test: int = 128
    mix_every: int = 32  # every k-th pretraining item comes from domain B
    mix_pool: int = 16  # distinct domain-B items available during pretraining


@dataclass(frozen=True)
class ExperimentSettings:
    seed: int
    model: ModelConfig
    moe: MoEConfig
    data: DataSettings
    pretrain: TrainConfig
    cont: TrainConfig


DEFAULT_MODEL = ModelConfig(
    d_model=64,
    n_blocks=4,
    ffn_hidden=128,
    n_heads=4,
    vocab_size=12,
    downsample_rate=2,
    max_len=64,
    d_feat=8,
)
DEFAULT_MOE = MoEConfig(n_experts=8, top_k=2, alpha=0.01, router_noise_std=0.02)
DEFAULT_DATA = DataSettings()
DEFAULT_PRETRAIN = TrainConfig(
    peak_lr=1e-3,
    warmup_steps=200,
    max_steps=2500,
    eval_interval=100,
    early_stop_patience_steps=1000,
    batch_size=16,
    alpha=0.01,
    seed=0,
)
# patience equals max_steps: continued runs are short and the forgetting
# contrast needs every protocol to take the same number of steps
DEFAULT_CONTINUE = TrainConfig(
    peak_lr=1e-3,
    warmup_steps=200,
    max_steps=1500,
    eval_interval=100,
    early_stop_patience_steps=1500,
    batch_size=16,
    alpha=0.01,
    seed=0,
)


def _dataclass_from_mapping(prefix: str, cls, defaults, mapping: dict[str, str]):
    kwargs = {}
    for field in dataclasses.fields(cls):
        key = f"{prefix}.{field.name}"
        default = getattr(defaults, field.name)
        if key in mapping:
            convert = type(default)
            kwargs[field.name] = get_typed(mapping, key, convert)
        else:
            kwargs[field.name] = default
    return cls(**kwargs)


def settings_from_mapping(mapping: dict[str, str], seed_override: int | None = None) -> ExperimentSettings:
    unknown = [
        k
        for k in mapping
        if not k.startswith(("model.", "moe.", "data.", "pretrain.", "continue."))
        and k != "seed"
    ]
    if unknown:
        raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
    seed = seed_override if seed_override is not None else get_typed(mapping, "seed", int, 7)
    pretrain = _dataclass_from_mapping("pretrain", TrainConfig, DEFAULT_PRETRAIN, mapping)
    cont = _dataclass_from_mapping("continue", TrainConfig, DEFAULT_CONTINUE, mapping)
    if "pretrain.seed" not in mapping:
        pretrain = dataclasses.replace(pretrain, seed=seed)
    if "continue.seed" not in mapping:
        cont = dataclasses.replace(cont, seed=seed)
    return ExperimentSettings(
        seed=seed,
        model=_dataclass_from_mapping("model", ModelConfig, DEFAULT_MODEL, mapping),
        moe=_dataclass_from_mapping("moe", MoEConfig, DEFAULT_MOE, mapping),
        data=_dataclass_from_mapping("data", DataSettings, DEFAULT_DATA, mapping),
        pretrain=pretrain,
        cont=cont,
    )


def settings_to_mapping(settings: ExperimentSettings) -> dict[str, object]:
    out: dict[str, object] = {"seed": settings.seed}
    for prefix, obj in (
        ("model", settings.model),
        ("moe", settings.moe),
        ("data", settings.data),
        ("pretrain", settings.pretrain),
        ("continue", settings.cont),
    ):
        for field in dataclasses.fields(obj):
            out[f"{prefix}.{field.name}"] = getattr(obj, field.name)
    return out


def _blend_templates(base: np.ndarray, fresh: np.ndarray, overlap: float) -> np.ndarray:
    # correlated draw with the same marginal scale as the base templates
    mixed = overlap * base + np.sqrt(max(0.0, 1.0 - overlap**2)) * fresh
    mixed[0] = 0.0
    return mixed.astype(np.float32)


def domain_spec(settings: ExperimentSettings, which: str) -> DomainSpec:
    d = settings.data
    vocab, d_feat = settings.model.vocab_size, settings.model.d_feat
    spec_a = make_domain(
        "domain_a", vocab, d_feat, d.template_seed_a, d.noise_std,
        d.min_label_len, d.max_label_len, d.repeat_prob,
    )
    if which == "domain_a":
        return spec_a
    if which != "domain_b":
        raise ValueError(f"unknown domain {which!r}")
    fresh = np.random.default_rng(d.template_seed_b).standard_normal((vocab, d_feat))
    return DomainSpec(
        "domain_b",
        _blend_templates(spec_a.templates.astype(np.float64), fresh, d.template_overlap_b),
        d.noise_std,
        d.min_label_len,
        d.max_label_len,
        d.repeat_prob,
    )


def domain_splits(settings: ExperimentSettings, which: str) -> DatasetSplits:
    d = settings.data
    seed = d.data_seed_a if which == "domain_a" else d.data_seed_b
    return gen_splits(
        domain_spec(settings, which),
        d.n_train,
        d.n_valid,
        d.n_test,
        seed,
        ensure_rate=settings.model.downsample_rate,
    )


def _domain_dir_mapping(settings: ExperimentSettings, which: str) -> dict[str, object]:
    d = settings.data
    return {
        "domain_id": which,
        "vocab_size": settings.model.vocab_size,
        "d_feat": settings.model.d_feat,
        "template_seed": d.template_seed_a if which == "domain_a" else d.template_seed_b,
        "template_base_seed": d.template_seed_a,
        "template_overlap": 0.0 if which == "domain_a" else d.template_overlap_b,
        "noise_std": d.noise_std,
        "min_label_len": d.min_label_len,
        "max_label_len": d.max_label_len,
        "repeat_prob": d.repeat_prob,
        "data_seed": d.data_seed_a if which == "domain_a" else d.data_seed_b,
        "n_train": d.n_train,
        "n_valid": d.n_valid,
        "n_test": d.n_test,
        "ensure_rate": settings.model.downsample_rate,
    }


def write_domain_dir(path: str, settings: ExperimentSettings, which: str) -> str:
    os.makedirs(path, exist_ok=True)
    cfg_path = os.path.join(path, "domain.cfg")
    configio.write_kv(cfg_path, _domain_dir_mapping(settings, which))
    return cfg_path


def load_domain_dir(path: str) -> tuple[DomainSpec, DatasetSplits]:
    """Regenerate a dataset from a data directory's ``domain.cfg``."""
    cfg_path = os.path.join(path, "domain.cfg")
    if not os.path.isfile(cfg_path):
        raise ConfigError(f"data directory {path!r} has no domain.cfg")
    kv = configio.read_kv(cfg_path)
    vocab = get_typed(kv, "vocab_size", int)
    d_feat = get_typed(kv, "d_feat", int)
    noise = get_typed(kv, "noise_std", float)
    lo = get_typed(kv, "min_label_len", int)
    hi = get_typed(kv, "max_label_len", int)
    repeat_prob = get_typed(kv, "repeat_prob", float)
    overlap = get_typed(kv, "template_overlap", float, 0.0)
    seed = get_typed(kv, "template_seed", int)
    if overlap > 0.0:
        base = np.random.default_rng(get_typed(kv, "template_base_seed", int)).standard_normal(
            (vocab, d_feat)
        )
        base[0] = 0.0
        fresh = np.random.default_rng(seed).standard_normal((vocab, d_feat))
        spec = DomainSpec(
            get_typed(kv, "domain_id", str),
            _blend_templates(base, fresh, overlap),
            noise,
            lo,
            hi,
            repeat_prob,
        )
    else:
        spec = make_domain(
            get_typed(kv, "domain_id", str), vocab, d_feat, seed, noise, lo, hi, repeat_prob
        )
    splits = gen_splits(
        spec,
        get_typed(kv, "n_train", int),
        get_typed(kv, "n_valid", int),
        get_typed(kv, "n_test", int),
        get_typed(kv, "data_seed", int),
        ensure_rate=get_typed(kv, "ensure_rate", int, 1),
    )
    return spec, splits


def pretrain_mix(settings: ExperimentSettings, a: DatasetSplits, b: DatasetSplits):
    """A-dominated training/validation streams with a limited B pool."""
    pool = b.train[: settings.data.mix_pool]
    train_items = interleave(a.train, pool, settings.data.mix_every)
    valid_items = interleave(a.valid, b.valid[: max(1, len(a.valid) // settings.data.mix_every)],
                             settings.data.mix_every)
    return train_items, valid_items


@dataclass
class ProtocolResult:
    protocol: str
    checkpoint: str
    reports: dict[str, EvalReport]
    artifacts: dict[str, str]


def _eval_and_write(model, splits_by_domain, workdir: str, name: str) -> tuple[dict, dict]:
    reports = {}
    artifacts = {}
    for domain, splits in splits_by_domain.items():
        report = evaluate(model, splits.test, f"{domain}.test")
        path = os.path.join(workdir, f"report_{name}_{domain}.csv")
        report.write_csv(path)
        reports[domain] = report
        artifacts[f"report_{domain}"] = path
    if model.kind == "moe":
        combined = evaluate(
            model,
            splits_by_domain["domain_a"].test + splits_by_domain["domain_b"].test,
            "combined.test",
        )
        usage_path = os.path.join(workdir, f"usage_{name}.csv")
        combined.usage.write_csv(usage_path)
        artifacts["usage"] = usage_path
        reports["combined"] = combined
    return reports, artifacts


def _write_result(workdir: str, name: str, reports: dict, history, extra: dict[str, object]):
    path = os.path.join(workdir, f"{name}.result")
    mapping: dict[str, object] = {"protocol": name.upper()}
    mapping.update(extra)
    for domain in ("domain_a", "domain_b"):
        if domain in reports:
            r = reports[domain]
            mapping[f"{domain}.token_error_rate"] = repr(r.token_error_rate)
            mapping[f"{domain}.mean_ctc_loss"] = repr(r.mean_ctc_loss)
            mapping[f"{domain}.mean_balance_loss"] = repr(r.mean_balance_loss)
            mapping[f"{domain}.flops_per_token"] = r.flops_per_token
    if "combined" in reports:
        mapping["engaged_experts"] = reports["combined"].usage.engaged_expert_count()
    if history is not None:
        mapping["steps_run"] = history.rows[-1].step if history.rows else 0
        mapping["skipped_instances"] = history.skipped_instances
    configio.write_kv(path, mapping)
    return path


def run_protocol(protocol: str, workdir: str, settings: ExperimentSettings) -> ProtocolResult:
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; choices: {PROTOCOLS}")
    os.makedirs(workdir, exist_ok=True)
    configio.write_kv(os.path.join(workdir, "manifest.cfg"), settings_to_mapping(settings))
    data_root = os.path.join(workdir, "data")
    write_domain_dir(os.path.join(data_root, "domain_a"), settings, "domain_a")
    write_domain_dir(os.path.join(data_root, "domain_b"), settings, "domain_b")
    a = domain_splits(settings, "domain_a")
    b = domain_splits(settings, "domain_b")
    by_domain = {"domain_a": a, "domain_b": b}
    name = protocol.lower()
    dense_path = os.path.join(workdir, "dense.ckpt")

    if protocol == "PRETRAIN":
        model = DenseModel.init(settings.model, seed=settings.seed)
        train_items, valid_items = pretrain_mix(settings, a, b)
        model, history = train(
            model, DatasetSplits(train_items, valid_items, []), settings.pretrain
        )
        save_checkpoint(model, dense_path)
        ckpt_path = dense_path
        mask = None
    else:
        if not os.path.isfile(dense_path):
            raise ProtocolError(
                f"protocol {protocol} needs {dense_path}; run the PRETRAIN protocol first"
            )
        dense = load_checkpoint(dense_path)
        if dense.kind != "dense":
            raise ProtocolError(f"{dense_path} does not hold a dense model")
        cont_cfg = settings.cont
        if protocol == "FMFT":
            model, mask = dense, None
        else:
            model = upcycle(dense, settings.moe, seed=settings.seed)
            mask = build_freeze_mask(model) if protocol != "UME_NOFREEZE" else None
            if protocol == "UME_NOBALANCE":
                cont_cfg = dataclasses.replace(cont_cfg, alpha=0.0)
        model, history = train(
            model, DatasetSplits(b.train, b.valid, []), cont_cfg, mask=mask
        )
        ckpt_path = os.path.join(workdir, f"{name}.ckpt")
        save_checkpoint(model, ckpt_path)

    history_path = os.path.join(workdir, f"history_{name}.csv")
    history.write_csv(history_path)
    reports, artifacts = _eval_and_write(model, by_domain, workdir, name)
    artifacts["history"] = history_path
    artifacts["checkpoint"] = ckpt_path
    extra: dict[str, object] = {"checkpoint": ckpt_path}
    if mask is not None:
        extra["trainable_parameters"] = sum(model.params[n].data.size for n in mask)
    result_path = _write_result(workdir, name, reports, history, extra)
    artifacts["result"] = result_path
    return ProtocolResult(protocol=protocol, checkpoint=ckpt_path, reports=reports, artifacts=artifacts)
