"""Command-line pipeline: pretrain, upcycle, train, eval, stats, flops, experiment.

Exit codes: 0 success, 1 usage error, 2 data/IO error, 3 training failure.
Every subcommand writes a machine-readable result artifact and prints a
short human-readable summary to stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import configio
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .configio import ConfigError
from .data import DatasetSplits
from .experiments import (
    PROTOCOLS,
    ProtocolError,
    load_domain_dir,
    pretrain_mix,
    domain_splits,
    run_protocol,
    settings_from_mapping,
)
from .flops import flop_proxy
from .layers import InputError
from .model import DenseModel
from .moe import MoEConfig
from .train import BatchError, TrainingError, evaluate, train
from .upcycle import ContractError, UpcycleError, build_freeze_mask, upcycle

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="upmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the dense baseline on the two-domain mix")
    p.add_argument("--config", help="key=value experiment config file")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("upcycle", help="expand a dense checkpoint into an MoE checkpoint")
    p.add_argument("--in", dest="input", required=True, help="dense checkpoint")
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--topk", type=int, required=True)
    p.add_argument("--noise-std", type=float, default=0.0, help="router init noise")
    p.add_argument("--alpha", type=float, default=0.01, help="balancing coefficient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="continue training a checkpoint on a data directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--data", required=True, help="directory containing domain.cfg")
    p.add_argument("--freeze", choices=["moe-only", "none"], default="none")
    p.add_argument("--alpha", type=float, help="override the balancing coefficient")
    p.add_argument("--steps", type=int, help="override max training steps")
    p.add_argument("--config", help="key=value experiment config (continue.* section)")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="decode a test split and report error rates")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output CSV path")

    p = sub.add_parser("stats", help="export per-layer expert usage as CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("flops", help="activated-path FLOPs per token of a checkpoint")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", help="result file (default: <in>.flops)")

    p = sub.add_parser("experiment", help="run a full protocol into a working directory")
    p.add_argument("--protocol", required=True, choices=list(PROTOCOLS))
    p.add_argument("--workdir", required=True)
    p.add_argument("--config", help="key=value experiment config file")
    p.add_argument("--seed", type=int, help="override the config seed")

    return parser


def _load_settings(config_path: str | None, seed: int | None):
    mapping = configio.read_kv(config_path) if config_path else {}
    return settings_from_mapping(mapping, seed_override=seed)


def _require_file(path: str, role: str) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{role} {path!r} does not exist")


def _cmd_pretrain(args) -> int:
    settings = _load_settings(args.config, args.seed)
    model = DenseModel.init(settings.model, seed=settings.seed)
    a = domain_splits(settings, "domain_a")
    b = domain_splits(settings, "domain_b")
    train_items, valid_items = pretrain_mix(settings, a, b)
    model, history = train(model, DatasetSplits(train_items, valid_items, []), settings.pretrain)
    save_checkpoint(model, args.out)
    history_path = f"{args.out}.history.csv"
    history.write_csv(history_path)
    report = evaluate(model, a.test, "domain_a.test")
    configio.write_kv(
        f"{args.out}.result",
        {
            "command": "pretrain",
            "checkpoint": args.out,
            "history": history_path,
            "steps_run": history.rows[-1].step if history.rows else 0,
            "final_val_loss": repr(history.rows[-1].val_loss) if history.rows else "nan",
            "domain_a.token_error_rate": repr(report.token_error_rate),
        },
    )
    print(f"pretrained dense model -> {args.out}")
    print(f"domain_a test error rate: {report.token_error_rate:.4f}")
    return EXIT_OK


def _cmd_upcycle(args) -> int:
    try:
        moe_cfg = MoEConfig(
            n_experts=args.experts,
            top_k=args.topk,
            alpha=args.alpha,
            router_noise_std=args.noise_std,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _require_file(args.input, "input checkpoint")
    dense = load_checkpoint(args.input)
    model = upcycle(dense, moe_cfg, seed=args.seed)
    save_checkpoint(model, args.out)
    mask = build_freeze_mask(model)
    configio.write_kv(
        f"{args.out}.result",
        {
            "command": "upcycle",
            "input": args.input,
            "checkpoint": args.out,
            "n_experts": args.experts,
            "top_k": args.topk,
            "router_noise_std": repr(args.noise_std),
            "total_parameters": model.parameter_count(),
            "trainable_parameters": sum(model.params[n].data.size for n in mask),
        },
    )
    print(f"upcycled {args.input} -> {args.out} ({args.experts} experts, top-{args.topk})")
    print(f"parameters: {model.parameter_count()} total")
    return EXIT_OK


def _cmd_train(args) -> int:
    settings = _load_settings(args.config, None)
    cfg = settings.cont
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.alpha is not None:
        cfg = dataclasses.replace(cfg, alpha=args.alpha)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, max_steps=args.steps)
    _require_file(args.input, "input checkpoint")
    model = load_checkpoint(args.input)
    if args.freeze == "moe-only" and model.kind != "moe":
        raise UsageError("--freeze moe-only requires an MoE checkpoint")
    mask = build_freeze_mask(model) if args.freeze == "moe-only" else None
    _, splits = load_domain_dir(args.data)
    model, history = train(model, DatasetSplits(splits.train, splits.valid, []), cfg, mask=mask)
    save_checkpoint(model, args.out)
    history_path = f"{args.out}.history.csv"
    history.write_csv(history_path)
    configio.write_kv(
        f"{args.out}.result",
        {
            "command": "train",
            "input": args.input,
            "checkpoint": args.out,
            "history": history_path,
            "freeze": args.freeze,
            "steps_run": history.rows[-1].step if history.rows else 0,
            "final_val_loss": repr(history.rows[-1].val_loss) if history.rows else "nan",
            "skipped_instances": history.skipped_instances,
        },
    )
    print(f"trained {args.input} -> {args.out} (freeze={args.freeze})")
    if history.rows:
        print(f"final validation loss: {history.rows[-1].val_loss:.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    _require_file(args.input, "input checkpoint")
    model = load_checkpoint(args.input)
    spec, splits = load_domain_dir(args.data)
    report = evaluate(model, splits.test, f"{spec.domain_id}.test")
    report.write_csv(args.report)
    print(f"evaluated {args.input} on {spec.domain_id}.test -> {args.report}")
    print(
        f"token error rate {report.token_error_rate:.4f}, "
        f"mean ctc loss {report.mean_ctc_loss:.4f}, "
        f"flops/token {report.flops_per_token}"
    )
    return EXIT_OK


def _cmd_stats(args) -> int:
    _require_file(args.input, "input checkpoint")
    model = load_checkpoint(args.input)
    if model.kind != "moe":
        raise UsageError("stats requires an MoE checkpoint (dense models have no routers)")
    spec, splits = load_domain_dir(args.data)
    report = evaluate(model, splits.test, f"{spec.domain_id}.test")
    report.usage.write_csv(args.out)
    engaged = report.usage.engaged_expert_count()
    print(f"usage stats for {args.input} on {spec.domain_id}.test -> {args.out}")
    print(f"experts with >=5% top-k share, summed over layers: {engaged}")
    return EXIT_OK


def _cmd_flops(args) -> int:
    _require_file(args.input, "input checkpoint")
    model = load_checkpoint(args.input)
    moe_cfg = model.moe_config if model.kind == "moe" else None
    breakdown = flop_proxy(model.config, moe_cfg)
    out = args.out or f"{args.input}.flops"
    configio.write_kv(
        out,
        {
            "command": "flops",
            "checkpoint": args.input,
            "model_kind": model.kind,
            "downsample": breakdown.downsample,
            "attention": breakdown.attention,
            "ffn_path": breakdown.ffn_path,
            "router": breakdown.router,
            "head": breakdown.head,
            "total": breakdown.total,
        },
    )
    print(f"activated FLOPs per token for {args.input} ({model.kind}): {breakdown.total}")
    print(
        f"  downsample {breakdown.downsample}, attention {breakdown.attention}, "
        f"ffn path {breakdown.ffn_path}, router {breakdown.router}, head {breakdown.head}"
    )
    return EXIT_OK


def _cmd_experiment(args) -> int:
    settings = _load_settings(args.config, args.seed)
    result = run_protocol(args.protocol, args.workdir, settings)
    print(f"protocol {args.protocol} finished; artifacts in {args.workdir}")
    for domain in ("domain_a", "domain_b"):
        if domain in result.reports:
            print(f"  {domain} token error rate: {result.reports[domain].token_error_rate:.4f}")
    return EXIT_OK


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "upcycle": _cmd_upcycle,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
    "flops": _cmd_flops,
    "experiment": _cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UpcycleError, ContractError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ConfigError, ProtocolError, InputError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, BatchError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
