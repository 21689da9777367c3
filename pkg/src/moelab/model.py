"""Decoder-only transformer language model with MoE feed-forward blocks.

LLaMA-style block layout: pre-norm (RMS) residual branches, rotary position
embeddings on queries/keys, causal self-attention, and a mixture-of-experts
SwiGLU feed-forward in every layer. The token embedding and the output
projection are separate (untied) matrices. The default configuration is the
byte-level desk-scale model; every dimension is configurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .moe import ExpertBank, LayerRouting, moe_forward
from .routing import RouterParams, RoutingPolicy, TOP_K
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    constant,
    default_dtype,
    matmul,
    rmsnorm,
    softmax,
    take_rows,
    transpose,
)

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    head_dim: int = 32
    vocab_size: int = 256
    context_len: int = 256
    n_experts: int = 8
    d_ff: int = 256
    init_std: float = 0.006
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    routing: RoutingPolicy = field(default_factory=RoutingPolicy)

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "head_dim", "vocab_size", "context_len", "n_experts", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError(
                f"n_heads * head_dim must equal d_model "
                f"({self.n_heads} * {self.head_dim} != {self.d_model})"
            )
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        if self.init_std <= 0.0:
            raise ValueError(f"init_std must be positive, got {self.init_std}")
        if self.routing.mode == TOP_K and self.routing.k > self.n_experts:
            raise ValueError(
                f"routing k={self.routing.k} exceeds n_experts={self.n_experts}"
            )

    def with_routing(self, routing: RoutingPolicy) -> "ModelConfig":
        return replace(self, routing=routing)


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    attn_norm: Tensor
    ffn_norm: Tensor
    router: RouterParams
    bank: ExpertBank


@dataclass
class ModelState:
    """All learnable tensors plus the configuration that shaped them."""

    config: ModelConfig
    embed: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    lm_head: Tensor

    def named_parameters(self):
        """(name, tensor) pairs in the canonical order used everywhere.

        The same order drives initialization draws, optimizer state, and
        checkpoint layout, so it must stay stable.
        """
        yield "embed.weight", self.embed
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.attn.wq", layer.wq
            yield f"layers.{i}.attn.wk", layer.wk
            yield f"layers.{i}.attn.wv", layer.wv
            yield f"layers.{i}.attn.wo", layer.wo
            yield f"layers.{i}.attn_norm.gain", layer.attn_norm
            yield f"layers.{i}.ffn_norm.gain", layer.ffn_norm
            yield f"layers.{i}.router.weight", layer.router.weight
            for e in range(self.config.n_experts):
                yield f"layers.{i}.experts.{e}.w_gate", layer.bank.w_gate[e]
                yield f"layers.{i}.experts.{e}.w_up", layer.bank.w_up[e]
                yield f"layers.{i}.experts.{e}.w_down", layer.bank.w_down[e]
        yield "final_norm.gain", self.final_norm
        yield "lm_head.weight", self.lm_head

    def parameters(self):
        for _, t in self.named_parameters():
            yield t

    def zero_grads(self):
        for t in self.parameters():
            t.zero_grad()


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Create a model with N(0, init_std^2) weights; norm gains start at 1.

    Draws come from a dedicated PCG64 stream in canonical parameter order,
    so a given (config, seed) pair always produces identical weights.
    """
    rng = np.random.default_rng([seed, 0])
    dt = default_dtype()

    def w(*shape):
        return Tensor(
            rng.normal(0.0, config.init_std, size=shape).astype(dt), requires_grad=True
        )

    def gain(n):
        return Tensor(np.ones(n, dtype=dt), requires_grad=True)

    d, ff, n = config.d_model, config.d_ff, config.n_experts
    embed = w(config.vocab_size, d)
    layers = []
    for _ in range(config.n_layers):
        wq, wk, wv, wo = w(d, d), w(d, d), w(d, d), w(d, d)
        attn_norm, ffn_norm = gain(d), gain(d)
        router = RouterParams(w(n, d))
        w_gate, w_up, w_down = [], [], []
        for _ in range(n):
            w_gate.append(w(d, ff))
            w_up.append(w(d, ff))
            w_down.append(w(ff, d))
        layers.append(
            LayerParams(
                wq=wq, wk=wk, wv=wv, wo=wo,
                attn_norm=attn_norm, ffn_norm=ffn_norm,
                router=router, bank=ExpertBank(w_gate=w_gate, w_up=w_up, w_down=w_down),
            )
        )
    return ModelState(
        config=config,
        embed=embed,
        layers=layers,
        final_norm=gain(d),
        lm_head=w(d, config.vocab_size),
    )


# -- rotary tables and masks (cached constants) ------------------------------

_rope_cache: dict = {}
_mask_cache: dict = {}


def _rope_tables(t_len: int, head_dim: int, base: float, dt) -> tuple[Tensor, Tensor, Tensor]:
    key = (t_len, head_dim, base, np.dtype(dt).str)
    hit = _rope_cache.get(key)
    if hit is not None:
        return hit
    half = head_dim // 2
    inv_freq = base ** (-np.arange(0, half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.outer(np.arange(t_len, dtype=np.float64), inv_freq)  # (T, half)
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1).astype(dt)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1).astype(dt)
    # rotate_half as a constant right-multiplication: maps x to (-x2, x1).
    rot = np.zeros((head_dim, head_dim), dtype=dt)
    rot[np.arange(half) + half, np.arange(half)] = -1.0
    rot[np.arange(half), np.arange(half) + half] = 1.0
    entry = (constant(cos), constant(sin), constant(rot))
    _rope_cache[key] = entry
    return entry


def _causal_mask(t_len: int, dt) -> Tensor:
    key = (t_len, np.dtype(dt).str)
    hit = _mask_cache.get(key)
    if hit is None:
        m = np.triu(np.full((t_len, t_len), MASK_VALUE, dtype=dt), k=1)
        hit = constant(m)
        _mask_cache[key] = hit
    return hit


def apply_rope(x: Tensor, cos: Tensor, sin: Tensor, rot: Tensor) -> Tensor:
    """Rotate (B, H, T, head_dim) queries/keys by their position angle."""
    return x * cos + matmul(x, rot) * sin


def _attention(x: Tensor, layer: LayerParams, b: int, t_len: int, config: ModelConfig) -> Tensor:
    h, hd = config.n_heads, config.head_dim
    dt = x.dtype
    cos, sin, rot = _rope_tables(t_len, hd, config.rope_base, dt)
    mask = _causal_mask(t_len, dt)

    def split_heads(m: Tensor) -> Tensor:
        return m.reshape(b, t_len, h, hd).transpose(0, 2, 1, 3)

    q = apply_rope(split_heads(matmul(x, layer.wq)), cos, sin, rot)
    k = apply_rope(split_heads(matmul(x, layer.wk)), cos, sin, rot)
    v = split_heads(matmul(x, layer.wv))

    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    att = softmax(scores + mask)
    ctx = matmul(att, v).transpose(0, 2, 1, 3).reshape(b * t_len, config.d_model)
    return matmul(ctx, layer.wo)


def forward(
    state: ModelState,
    tokens: np.ndarray,
    policy: RoutingPolicy | None = None,
) -> tuple[Tensor, list[LayerRouting]]:
    """Run the model on a (B, T) token batch.

    Returns logits of shape (B, T, V) and one routing record per layer.
    ``policy`` overrides the configured routing (used by threshold sweeps).
    """
    config = state.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be 2-D (batch, time), got {tokens.shape}")
    b, t_len = tokens.shape
    if t_len > config.context_len:
        raise ShapeError(
            f"sequence length {t_len} exceeds context_len {config.context_len}"
        )
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise NumericError(f"token ids out of range [0, {config.vocab_size})")
    if policy is None:
        policy = config.routing

    flat = tokens.reshape(-1)
    x = take_rows(state.embed, flat)  # (M, d)
    records: list[LayerRouting] = []
    for layer in state.layers:
        attn_out = _attention(rmsnorm(x, layer.attn_norm, config.norm_eps), layer, b, t_len, config)
        x = x + attn_out
        moe_out, record = moe_forward(
            rmsnorm(x, layer.ffn_norm, config.norm_eps), layer.router, layer.bank, policy
        )
        x = x + moe_out
        records.append(record)
    final = rmsnorm(x, state.final_norm, config.norm_eps)
    logits = matmul(final, state.lm_head)
    return logits.reshape(b, t_len, config.vocab_size), records


# -- parameter accounting ----------------------------------------------------


@dataclass(frozen=True)
class ParamCounts:
    """Parameter totals, split so activated-per-token sizes can be derived."""

    total: int
    non_expert: int
    expert_each: int  # one expert in one layer
    n_layers: int
    n_experts: int

    def activated(self, mean_experts: float) -> float:
        """Parameters touched per token when ``mean_experts`` fire per layer."""
        return self.non_expert + self.n_layers * mean_experts * self.expert_each


def param_counts(config: ModelConfig) -> ParamCounts:
    d, ff = config.d_model, config.d_ff
    expert_each = 3 * d * ff
    per_layer_shared = 4 * d * d + 2 * d + config.n_experts * d
    non_expert = (
        2 * config.vocab_size * d  # embedding + untied head
        + config.n_layers * per_layer_shared
        + d  # final norm
    )
    total = non_expert + config.n_layers * config.n_experts * expert_each
    return ParamCounts(
        total=total,
        non_expert=non_expert,
        expert_each=expert_each,
        n_layers=config.n_layers,
        n_experts=config.n_experts,
    )


def count_parameters(state: ModelState) -> ParamCounts:
    """Count actual tensors; always equals ``param_counts(state.config)``."""
    counts = param_counts(state.config)
    actual = sum(t.size for t in state.parameters())
    if actual != counts.total:
        raise ShapeError(
            f"parameter tensors sum to {actual}, expected {counts.total}"
        )
    return counts
