"""Training loop: AdamW, warmup+cosine schedule, checkpoints, metrics.

The loop is deterministic end to end. Parameter init draws from one seeded
stream and batch sampling from a second, the sampler state is serialized into
every checkpoint, and optimizer math runs in the parameter dtype with scalar
coefficients — so a run restarted from a checkpoint replays the exact bit
pattern of an uninterrupted run.

Optimizer semantics: parameters whose gradient is absent for a step (experts
that fired on no token in the batch) are skipped entirely — no moment decay,
no weight decay, and their bias-correction step count does not advance. This
matches the usual decoupled-AdamW reference implementations.

Metrics go to ``metrics.ndjson``: the first line records the run config, each
later line is one stats-interval snapshot.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import RoutingStats
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Corpus, sample_batch
from .losses import DEFAULT_ALPHA, DEFAULT_BETA, balance_loss, combine, entropy_loss
from .model import ModelConfig, ModelState, forward, init_model


class TrainingError(RuntimeError):
    """Training aborted: divergence, bad state, or an unusable checkpoint."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 4
    train_context: int = 128
    lr_peak: float = 3e-4
    lr_final: float = 3e-5
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    seed: int = 0
    stats_interval: int = 50
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1 or self.train_context < 1:
            raise ValueError("batch_size and train_context must be >= 1")
        if self.warmup_steps < 0 or self.warmup_steps > self.steps:
            raise ValueError(
                f"warmup_steps must be in [0, steps], got {self.warmup_steps}"
            )
        if self.lr_peak <= 0 or self.lr_final < 0:
            raise ValueError("learning rates must be positive")
        for name in ("stats_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-based optimizer step.

    Linear warmup from 0 to lr_peak over warmup_steps, then cosine decay to
    lr_final at cfg.steps. Exact at the corners: lr_at(0) == 0,
    lr_at(warmup_steps) == lr_peak, lr_at(steps) == lr_final.
    """
    if step <= 0:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if step >= cfg.steps:
        return cfg.lr_final
    span = max(1, cfg.steps - cfg.warmup_steps)
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (
        1.0 + math.cos(math.pi * frac)
    )


@dataclass
class OptState:
    """Per-parameter AdamW state, keyed by canonical parameter name."""

    m: dict
    v: dict
    t: dict  # per-parameter update counts for bias correction

    @classmethod
    def zeros(cls, named_params) -> "OptState":
        m = {name: np.zeros_like(p.data) for name, p in named_params}
        v = {name: np.zeros_like(p.data) for name, p in named_params}
        t = {name: 0 for name, _ in named_params}
        return cls(m=m, v=v, t=t)


def clip_gradients(named_params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm. Raises TrainingError on a non-finite gradient,
    naming the first offending parameter.
    """
    sq = 0.0
    for _, p in named_params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            sq += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        for name, p in named_params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in parameter {name}")
        raise TrainingError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        coef = max_norm / (norm + 1e-6)
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(coef)
    return norm


def adamw_step(named_params, opt: OptState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update in place.

    Weight decay applies only to matrices (ndim >= 2); norm gains and any
    other vectors decay-free. Parameters without a gradient this step are
    skipped entirely.
    """
    b1, b2, eps, wd = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay
    for name, p in named_params:
        if p.grad is None:
            continue
        g = np.asarray(p.grad)
        t = opt.t[name] + 1
        opt.t[name] = t
        dt = p.data.dtype.type
        m = opt.m[name]
        v = opt.v[name]
        m *= dt(b1)
        buf = np.empty_like(g)
        np.multiply(g, dt(1.0 - b1), out=buf)
        m += buf
        v *= dt(b2)
        np.multiply(g, g, out=buf)
        buf *= dt(1.0 - b2)
        v += buf
        # buf becomes the update: m_hat / (sqrt(v_hat) + eps)
        np.divide(v, dt(1.0 - b2**t), out=buf)
        np.sqrt(buf, out=buf)
        buf += dt(eps)
        np.divide(m / dt(1.0 - b1**t), buf, out=buf)
        if wd > 0 and p.data.ndim >= 2:
            buf += p.data * dt(wd)
        buf *= dt(lr)
        p.data -= buf


# -- checkpoint plumbing -----------------------------------------------------


def checkpoint_tensors(state: ModelState, opt: OptState) -> dict:
    """Canonically ordered tensor dict: parameters, then optimizer state."""
    named = list(state.named_parameters())
    out = {name: p.data for name, p in named}
    for name, _ in named:
        out["opt.m." + name] = opt.m[name]
    for name, _ in named:
        out["opt.v." + name] = opt.v[name]
    for name, _ in named:
        out["opt.t." + name] = np.asarray(float(opt.t[name]))
    return out


def load_model_state(path: str | Path, config: ModelConfig) -> ModelState:
    """Model parameters from a checkpoint, cast to the current default dtype."""
    ck = load_checkpoint(path)
    state = init_model(config, seed=0)
    dt = T.default_dtype()
    for name, p in state.named_parameters():
        if name not in ck.tensors:
            raise TrainingError(f"checkpoint {path} lacks parameter {name}")
        arr = ck.tensors[name]
        if arr.shape != p.data.shape:
            raise TrainingError(
                f"checkpoint {path}: parameter {name} has shape {arr.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = arr.astype(dt, copy=True)
    return state


def _restore_opt(ck, named_params, path) -> OptState:
    opt = OptState.zeros(named_params)
    dt = T.default_dtype()
    for name, p in named_params:
        for prefix, store in (("opt.m.", opt.m), ("opt.v.", opt.v)):
            key = prefix + name
            if key not in ck.tensors:
                raise TrainingError(f"checkpoint {path} lacks optimizer state {key}")
            arr = ck.tensors[key]
            if arr.shape != p.data.shape:
                raise TrainingError(f"checkpoint {path}: bad shape for {key}")
            store[name] = arr.astype(dt, copy=True)
        tkey = "opt.t." + name
        if tkey not in ck.tensors:
            raise TrainingError(f"checkpoint {path} lacks optimizer state {tkey}")
        opt.t[name] = int(ck.tensors[tkey])
    return opt


# -- metrics -----------------------------------------------------------------


def read_metrics(path: str | Path) -> tuple[dict, list[dict]]:
    """Parse a metrics.ndjson file into (config header, step records)."""
    header: dict = {}
    records: list[dict] = []
    with Path(path).open() as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if i == 0 and "config" in rec:
                header = rec["config"]
            else:
                records.append(rec)
    return header, records


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_path: Path
    stats: RoutingStats
    state: ModelState
    steps_run: int
    wall_seconds: float


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path,
    config_text: str = "",
    resume_from: str | Path | None = None,
    stop_at_step: int | None = None,
) -> TrainResult:
    """Run (or resume) a training job; returns the trained state and stats.

    Writes out_dir/checkpoint.dmoe every checkpoint_interval steps and at the
    end, and appends one metrics record every stats_interval steps. Resuming
    replays the exact run: same parameters, same batches, same metrics tail.

    stop_at_step pauses the run early while keeping the full train_cfg.steps
    schedule horizon, so a later resume completes the identical run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.dmoe"
    metrics_path = out_dir / "metrics.ndjson"
    t_start = time.monotonic()

    data_rng = np.random.default_rng([train_cfg.seed, 1])
    start_step = 0
    if resume_from is None:
        state = init_model(model_cfg, seed=train_cfg.seed)
        named = list(state.named_parameters())
        opt = OptState.zeros(named)
        metrics_fh = metrics_path.open("w")
        header = {"config": {"model": _cfg_dict(model_cfg), "train": _cfg_dict(train_cfg)}}
        metrics_fh.write(json.dumps(header) + "\n")
    else:
        ck = load_checkpoint(resume_from)
        state = load_model_state(resume_from, model_cfg)
        named = list(state.named_parameters())
        opt = _restore_opt(ck, named, resume_from)
        start_step = ck.step
        if start_step >= train_cfg.steps:
            raise TrainingError(
                f"checkpoint {resume_from} is at step {ck.step}; "
                f"nothing to do for a {train_cfg.steps}-step run"
            )
        if ck.rng_state is None:
            raise TrainingError(
                f"checkpoint {resume_from} carries no sampler state; cannot resume"
            )
        data_rng.bit_generator.state = ck.rng_state
        metrics_fh = metrics_path.open("a")

    last_step = train_cfg.steps
    if stop_at_step is not None:
        if not start_step < stop_at_step <= train_cfg.steps:
            raise TrainingError(
                f"stop_at_step {stop_at_step} is outside "
                f"({start_step}, {train_cfg.steps}]"
            )
        last_step = stop_at_step

    stats = RoutingStats.zeros(
        model_cfg.n_layers, model_cfg.n_experts, model_cfg.vocab_size
    )
    last_saved: Path | None = ckpt_path if resume_from is not None else None
    vocab = model_cfg.vocab_size

    def save(step: int) -> None:
        save_checkpoint(
            ckpt_path,
            checkpoint_tensors(state, opt),
            step=step,
            config_text=config_text,
            rng_state=data_rng.bit_generator.state,
        )

    try:
        for step in range(start_step + 1, last_step + 1):
            windows, tags = sample_batch(
                corpus, data_rng, train_cfg.batch_size, train_cfg.train_context
            )
            x, y = windows[:, :-1], windows[:, 1:]
            logits, records = forward(state, x)
            loss_lm = T.cross_entropy(logits.reshape(-1, vocab), y.reshape(-1))
            balance_terms = [balance_loss(rec.probs, rec.mask) for rec in records]
            entropy_terms = [entropy_loss(rec.probs) for rec in records]
            total, parts = combine(
                loss_lm,
                balance_terms,
                entropy_terms,
                alpha=train_cfg.alpha,
                beta=train_cfg.beta,
            )
            if not math.isfinite(parts.loss_total):
                where = last_saved if last_saved is not None else "none saved yet"
                raise TrainingError(
                    f"non-finite loss at step {step} "
                    f"(lm={parts.loss_lm}, balance={parts.loss_balance}, "
                    f"entropy={parts.loss_entropy}); last good checkpoint: {where}"
                )
            state.zero_grads()
            total.backward()
            clip_gradients(named, train_cfg.grad_clip)
            adamw_step(named, opt, lr_at(step, train_cfg), train_cfg)

            stats.update(records, x.reshape(-1), np.repeat(tags, x.shape[1]))

            if step % train_cfg.stats_interval == 0 or step == last_step:
                m_tokens = x.size
                t_sum = sum(int(rec.t.sum()) for rec in records)
                per_layer = [
                    float(rec.t.sum() / m_tokens) for rec in records
                ]
                rec_out = {
                    "step": step,
                    "loss_lm": parts.loss_lm,
                    "loss_b": parts.loss_balance,
                    "loss_d": parts.loss_entropy,
                    "loss_total": parts.loss_total,
                    "lr": lr_at(step, train_cfg),
                    "mean_experts": t_sum / (m_tokens * len(records)),
                    "mean_experts_per_layer": per_layer,
                }
                metrics_fh.write(json.dumps(rec_out) + "\n")
                metrics_fh.flush()
            if step % train_cfg.checkpoint_interval == 0 or step == last_step:
                save(step)
                last_saved = ckpt_path
    finally:
        metrics_fh.close()

    return TrainResult(
        final_checkpoint=ckpt_path,
        metrics_path=metrics_path,
        stats=stats,
        state=state,
        steps_run=last_step - start_step,
        wall_seconds=time.monotonic() - t_start,
    )


def _cfg_dict(cfg) -> dict:
    out = {}
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if hasattr(val, "describe"):
            val = val.describe()
        out[f.name] = val
    return out


def resume(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path,
    config_text: str = "",
) -> TrainResult:
    """Continue a run from out_dir/checkpoint.dmoe to train_cfg.steps."""
    ckpt = Path(out_dir) / "checkpoint.dmoe"
    if not ckpt.exists():
        raise TrainingError(f"no checkpoint at {ckpt} to resume from")
    return train(
        model_cfg, train_cfg, corpus, out_dir, config_text=config_text, resume_from=ckpt
    )
