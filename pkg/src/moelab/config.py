"""Flat ``key = value`` run configuration.

One file drives a whole run: model shape, routing policy, optimizer schedule,
and analysis settings. The format is a plain line-per-key text file:

    # model
    n_layers = 4
    d_model = 128
    routing = top-p
    p = 0.4

    # data sources, one line each: tag=path:ratio
    data = web=corpus/web.txt:0.7
    data = code=corpus/code.txt:0.3

Keys are case-insensitive and hyphens equal underscores. Unknown keys are
rejected by name rather than ignored, so a typo fails loudly instead of
silently training with a default. ``render_config`` emits the canonical full
snapshot (every key, fixed order, out_dir excluded) and is the exact inverse
of ``parse_config`` — the snapshot embedded in checkpoints round-trips.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .model import ModelConfig
from .routing import RoutingPolicy
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration text or values."""


DEFAULT_SWEEP = (0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    sweep_p: tuple = DEFAULT_SWEEP
    max_eval_tokens: int | None = 32768
    min_token_occurrences: int = 100
    out_dir: str = "runs/default"
    data: tuple = ()  # (tag, path, ratio) triples

    def __post_init__(self):
        for p in self.sweep_p:
            if not 0.0 < p <= 1.0:
                raise ConfigError(f"sweep_p values must be in (0, 1], got {p}")
        if self.max_eval_tokens is not None and self.max_eval_tokens < 1:
            raise ConfigError("max_eval_tokens must be >= 1 or none")
        if self.min_token_occurrences < 1:
            raise ConfigError("min_token_occurrences must be >= 1")


# key -> (target, attribute, parser). Order here is the canonical render order.
def _parse_int(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"key '{key}' expects an integer, got '{value}'") from None


def _parse_float(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"key '{key}' expects a number, got '{value}'") from None


def _parse_float_list(key, value):
    items = [v.strip() for v in value.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"key '{key}' expects a comma-separated list of numbers")
    return tuple(_parse_float(key, v) for v in items)


def _parse_opt_int(key, value):
    if value.lower() in ("none", "off"):
        return None
    return _parse_int(key, value)


def _parse_str(key, value):
    return value


_MODEL_KEYS = {
    "n_layers": _parse_int,
    "d_model": _parse_int,
    "n_heads": _parse_int,
    "head_dim": _parse_int,
    "vocab_size": _parse_int,
    "context_len": _parse_int,
    "n_experts": _parse_int,
    "d_ff": _parse_int,
    "init_std": _parse_float,
    "rope_base": _parse_float,
    "norm_eps": _parse_float,
}
_ROUTING_KEYS = {"routing": _parse_str, "k": _parse_int, "p": _parse_float}
_TRAIN_KEYS = {
    "steps": _parse_int,
    "batch_size": _parse_int,
    "train_context": _parse_int,
    "lr_peak": _parse_float,
    "lr_final": _parse_float,
    "warmup_steps": _parse_int,
    "adam_beta1": _parse_float,
    "adam_beta2": _parse_float,
    "adam_eps": _parse_float,
    "weight_decay": _parse_float,
    "grad_clip": _parse_float,
    "alpha": _parse_float,
    "beta": _parse_float,
    "seed": _parse_int,
    "stats_interval": _parse_int,
    "checkpoint_interval": _parse_int,
}
_RUN_KEYS = {
    "sweep_p": _parse_float_list,
    "max_eval_tokens": _parse_opt_int,
    "min_token_occurrences": _parse_int,
    "out_dir": _parse_str,
}

_ALL_KEYS = {**_MODEL_KEYS, **_ROUTING_KEYS, **_TRAIN_KEYS, **_RUN_KEYS, "data": None}


def _normalize_key(raw: str) -> str:
    return raw.strip().lower().replace("-", "_")


def parse_data_spec(value: str) -> tuple:
    """One source spec 'tag=path' or 'tag=path:ratio' -> (tag, path, ratio)."""
    if "=" not in value:
        raise ConfigError(
            f"data spec '{value}' must look like tag=path or tag=path:ratio"
        )
    tag, rest = value.split("=", 1)
    tag = tag.strip()
    rest = rest.strip()
    ratio = 1.0
    if ":" in rest:
        head, tail = rest.rsplit(":", 1)
        try:
            ratio = float(tail)
            rest = head
        except ValueError:
            pass  # the colon belongs to the path
    if not tag or not rest:
        raise ConfigError(f"data spec '{value}' has an empty tag or path")
    return (tag, rest, ratio)


def parse_config(text: str) -> RunConfig:
    """Parse flat key = value text into a RunConfig."""
    values: dict = {}
    data_specs: list = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line}'")
        key_raw, value = line.split("=", 1)
        key = _normalize_key(key_raw)
        value = value.strip()
        if key == "data":
            data_specs.append(parse_data_spec(value))
            continue
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        parser = _ALL_KEYS[key]
        values[key] = parser(key, value)

    try:
        routing_kwargs = {}
        if "routing" in values:
            routing_kwargs["mode"] = values.pop("routing")
        if "k" in values:
            routing_kwargs["k"] = values.pop("k")
        if "p" in values:
            routing_kwargs["p"] = values.pop("p")
        routing = RoutingPolicy(**routing_kwargs)
        model = ModelConfig(
            routing=routing,
            **{k: values[k] for k in _MODEL_KEYS if k in values},
        )
        train = TrainConfig(**{k: values[k] for k in _TRAIN_KEYS if k in values})
        run = RunConfig(
            model=model,
            train=train,
            data=tuple(data_specs),
            **{k: values[k] for k in _RUN_KEYS if k in values},
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return run


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_config(cfg: RunConfig, include_out_dir: bool = False) -> str:
    """Canonical full snapshot; parse_config(render_config(cfg)) == cfg.

    out_dir is a placement detail of one invocation, not part of the
    experiment, so it stays out of the snapshot unless asked for.
    """
    lines = ["# model"]
    for key in _MODEL_KEYS:
        lines.append(f"{key} = {_fmt_value(getattr(cfg.model, key))}")
    pol = cfg.model.routing
    lines.append(f"routing = {pol.mode}")
    lines.append(f"k = {pol.k}")
    lines.append(f"p = {repr(pol.p)}")
    lines.append("")
    lines.append("# training")
    for key in _TRAIN_KEYS:
        lines.append(f"{key} = {_fmt_value(getattr(cfg.train, key))}")
    lines.append("")
    lines.append("# analysis")
    lines.append("sweep_p = " + ", ".join(repr(p) for p in cfg.sweep_p))
    max_tokens = "none" if cfg.max_eval_tokens is None else str(cfg.max_eval_tokens)
    lines.append(f"max_eval_tokens = {max_tokens}")
    lines.append(f"min_token_occurrences = {cfg.min_token_occurrences}")
    if include_out_dir:
        lines.append(f"out_dir = {cfg.out_dir}")
    if cfg.data:
        lines.append("")
        lines.append("# data sources")
        for tag, path, ratio in cfg.data:
            lines.append(f"data = {tag}={path}:{repr(ratio)}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """A copy of cfg with command-line style overrides applied.

    Recognized keys: seed, steps, alpha, beta, out_dir, routing, k, p,
    max_eval_tokens, data (full replacement list of specs).
    """
    try:
        model, train = cfg.model, cfg.train
        run_kwargs: dict = {}
        routing = model.routing
        if "routing" in overrides and overrides["routing"] is not None:
            routing = replace(routing, mode=overrides["routing"])
        if "k" in overrides and overrides["k"] is not None:
            routing = replace(routing, k=overrides["k"])
        if "p" in overrides and overrides["p"] is not None:
            routing = replace(routing, p=overrides["p"])
        if routing is not model.routing:
            model = model.with_routing(routing)
        train_fields = {}
        for key in ("seed", "steps", "alpha", "beta"):
            if overrides.get(key) is not None:
                train_fields[key] = overrides[key]
        if train_fields:
            train = replace(train, **train_fields)
        if overrides.get("out_dir") is not None:
            run_kwargs["out_dir"] = overrides["out_dir"]
        if overrides.get("max_eval_tokens") is not None:
            run_kwargs["max_eval_tokens"] = overrides["max_eval_tokens"]
        if overrides.get("data"):
            run_kwargs["data"] = tuple(parse_data_spec(s) for s in overrides["data"])
        return replace(cfg, model=model, train=train, **run_kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
