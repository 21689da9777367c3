"""Command-line front end.

Subcommands:

    train               train a model from a config file
    eval                loss + routing stats for a checkpoint
    sweep-p             evaluate one checkpoint across thresholds
    analyze             write the full routing report for a checkpoint
    inspect-checkpoint  print checkpoint metadata and its embedded config

Exit codes: 0 success, 1 usage or configuration problems, 2 runtime failures
(divergence, corrupt checkpoints, numeric errors).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import tensor as T
from .analysis import (
    emit_report,
    evaluate,
    layer_profile,
    layer_trend,
    sweep_p,
    token_profile,
    write_sweep,
)
from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    load_config,
    parse_config,
    render_config,
    with_overrides,
)
from .data import CorpusError, ingest_corpus
from .model import ModelConfig
from .training import (
    TrainConfig,
    TrainingError,
    load_model_state,
    read_metrics,
    resume,
    train,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data", action="append", default=None, metavar="TAG=PATH[:RATIO]",
                   help="data source; repeatable, overrides config sources")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--max-eval-tokens", type=int, default=None,
                   help="cap on eval tokens per pass")


def _add_policy_flags(p: _Parser) -> None:
    p.add_argument("--routing", choices=["top-k", "top-p"], default=None)
    p.add_argument("--k", type=int, default=None, help="experts per token for top-k")
    p.add_argument("--p", type=float, default=None, help="confidence threshold for top-p")


def build_parser() -> _Parser:
    parser = _Parser(prog="moelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p_train = sub.add_parser("train", help="train a model", parents=[])
    _add_common(p_train)
    _add_policy_flags(p_train)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--alpha", type=float, default=None, help="balance loss weight")
    p_train.add_argument("--beta", type=float, default=None, help="entropy loss weight")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from out_dir/checkpoint.dmoe")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p_eval)
    _add_policy_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)

    p_sweep = sub.add_parser("sweep-p", help="threshold sweep for a checkpoint")
    _add_common(p_sweep)
    p_sweep.add_argument("--checkpoint", required=True)
    p_sweep.add_argument("--p-values", default=None,
                         help="comma-separated thresholds (default: config sweep_p)")

    p_an = sub.add_parser("analyze", help="write the routing report for a checkpoint")
    _add_common(p_an)
    _add_policy_flags(p_an)
    p_an.add_argument("--checkpoint", required=True)
    p_an.add_argument("--min-occurrences", type=int, default=None,
                      help="token profile cutoff")

    p_ins = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p_ins.add_argument("checkpoint")
    return parser


# -- shared plumbing ---------------------------------------------------------


def _run_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig(model=ModelConfig(), train=TrainConfig())
    overrides = {
        key: getattr(args, key, None)
        for key in ("seed", "steps", "alpha", "beta", "routing", "k", "p",
                    "out_dir", "max_eval_tokens", "data")
    }
    return with_overrides(cfg, **overrides)


def _checkpoint_config(args) -> tuple[RunConfig, "object"]:
    """RunConfig for an eval-style command plus the loaded checkpoint."""
    ck = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    elif ck.config_text.strip():
        cfg = parse_config(ck.config_text)
    else:
        raise ConfigError(
            f"checkpoint {args.checkpoint} carries no config; pass --config"
        )
    overrides = {
        key: getattr(args, key, None)
        for key in ("routing", "k", "p", "out_dir", "max_eval_tokens", "data")
    }
    return with_overrides(cfg, **overrides), ck


def _corpus(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("no data sources; add data = tag=path:ratio lines or --data")
    return ingest_corpus(list(cfg.data))


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _run_config(args)
    corpus = _corpus(cfg)
    config_text = render_config(cfg)
    out_dir = Path(cfg.out_dir)
    if args.resume:
        result = resume(cfg.model, cfg.train, corpus, out_dir, config_text=config_text)
    else:
        result = train(cfg.model, cfg.train, corpus, out_dir, config_text=config_text)
    _, records = read_metrics(result.metrics_path)
    last = records[-1] if records else {}
    print(f"trained {result.steps_run} steps in {result.wall_seconds:.1f}s")
    if last:
        print(
            f"final: lm loss {last['loss_lm']:.4f} nats, "
            f"mean experts {last['mean_experts']:.3f}"
        )
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _eval_once(args):
    cfg, _ = _checkpoint_config(args)
    corpus = _corpus(cfg)
    state = load_model_state(args.checkpoint, cfg.model)
    run = evaluate(
        state,
        corpus,
        context_len=cfg.train.train_context,
        max_tokens=cfg.max_eval_tokens,
    )
    return cfg, state, corpus, run


def cmd_eval(args) -> int:
    cfg, state, corpus, run = _eval_once(args)
    print(f"routing: {cfg.model.routing.describe()}")
    print(f"eval loss: {run.loss_nats:.4f} nats/token over {run.predicted_tokens} tokens")
    print(f"mean experts per token-layer: {run.mean_experts:.3f}")
    profile = layer_profile(run.stats)
    print("per-layer mean experts: " + ", ".join(f"{v:.3f}" for v in profile))
    return 0


def cmd_sweep(args) -> int:
    cfg, _ = _checkpoint_config(args)
    corpus = _corpus(cfg)
    state = load_model_state(args.checkpoint, cfg.model)
    if args.p_values:
        try:
            values = [float(v) for v in args.p_values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--p-values must be numbers, got '{args.p_values}'")
    else:
        values = list(cfg.sweep_p)
    report = sweep_p(
        state, corpus, values,
        context_len=cfg.train.train_context,
        max_tokens=cfg.max_eval_tokens,
    )
    out_dir = Path(cfg.out_dir if args.out_dir is None else args.out_dir)
    paths = write_sweep(report, out_dir)
    print(f"{'p':>6} {'mean_experts':>13} {'eval_loss':>10}")
    for row in report.rows:
        print(f"{row.p:>6.3f} {row.mean_experts:>13.3f} {row.eval_loss_nats:>10.4f}")
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_analyze(args) -> int:
    cfg, state, corpus, run = _eval_once(args)
    min_occ = args.min_occurrences
    if min_occ is None:
        min_occ = cfg.min_token_occurrences
    out_dir = Path(cfg.out_dir)
    paths = emit_report(run.stats, out_dir, min_occurrences=min_occ)
    print(f"eval loss: {run.loss_nats:.4f} nats/token")
    profile = layer_profile(run.stats)
    print("per-layer mean experts: " + ", ".join(f"{v:.3f}" for v in profile))
    trend = layer_trend(run.stats)
    print(f"layer trend (spearman rho vs depth): {trend:.3f}")
    for tag in sorted(run.stats.source_tokens):
        print(f"source {tag}: mean experts {run.stats.source_mean(tag):.3f}")
    rows = token_profile(run.stats, min_occ)
    rows.sort(key=lambda r: r["occurrences"], reverse=True)
    for r in rows[:10]:
        print(
            f"token {r['token_id']:>3} ({r['byte_repr']}): "
            f"{r['mean_experts']:.3f} experts over {r['occurrences']} occurrences"
        )
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    n_params = sum(
        arr.size for name, arr in ck.tensors.items() if not name.startswith("opt.")
    )
    n_opt = sum(
        arr.size for name, arr in ck.tensors.items() if name.startswith("opt.")
    )
    print(f"checkpoint: {args.checkpoint}")
    print(f"format version: {ck.version}")
    print(f"step: {ck.step}")
    print(f"tensors: {len(ck.tensors)} ({n_params} parameters, {n_opt} optimizer values)")
    print(f"sampler state: {'present' if ck.rng_state is not None else 'absent'}")
    if ck.config_text.strip():
        print("config:")
        sys.stdout.write(ck.config_text if ck.config_text.endswith("\n")
                         else ck.config_text + "\n")
    else:
        print("config: (none embedded)")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-p": cmd_sweep,
    "analyze": cmd_analyze,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("moelab: error: a command is required", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CorpusError) as exc:
        print(f"moelab: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, CheckpointError, T.NumericError, T.ShapeError) as exc:
        print(f"moelab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
