"""Expert routing: probabilities, fixed-count (top-k) and threshold (top-p) selection.

The router projects each token onto per-expert logits and softmaxes them into
a probability row P. Top-k keeps the K largest entries and renormalizes them
into gates; top-p keeps the shortest prefix of the probability-sorted experts
whose cumulative mass reaches the threshold p and uses the *raw* probabilities
as gates, so the number of active experts adapts to router confidence and the
gate mass lands in [p, 1]. Sorting is stable with ties broken toward the
lower expert index, which makes every decision deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, softmax, transpose

TOP_K = "top-k"
TOP_P = "top-p"


@dataclass(frozen=True)
class RoutingPolicy:
    """How many experts to activate: a fixed count or a confidence threshold."""

    mode: str = TOP_P
    k: int = 2
    p: float = 0.4

    def __post_init__(self):
        if self.mode not in (TOP_K, TOP_P):
            raise ValueError(f"routing mode must be '{TOP_K}' or '{TOP_P}', got {self.mode!r}")
        if self.mode == TOP_K and (not isinstance(self.k, int) or self.k < 1):
            raise ValueError(f"top-k routing needs an integer k >= 1, got {self.k!r}")
        if self.mode == TOP_P and not (0.0 < self.p < 1.0):
            raise ValueError(f"top-p routing needs 0 < p < 1, got {self.p!r}")

    def describe(self) -> str:
        return f"{TOP_K}:{self.k}" if self.mode == TOP_K else f"{TOP_P}:{self.p:g}"

    def with_p(self, p: float) -> "RoutingPolicy":
        return RoutingPolicy(mode=TOP_P, k=self.k, p=p)


@dataclass
class RouterParams:
    """Learnable router projection; ``weight`` has shape (n_experts, d_model)."""

    weight: Tensor

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def d_model(self) -> int:
        return self.weight.shape[1]


@dataclass
class RouterDecision:
    """Routing outcome for a single token.

    probs: full probability row P over the N experts.
    order: expert indices sorted by descending probability (stable).
    selected: the activated prefix of ``order`` (length t, 1 <= t <= N).
    gates: length-N combination weights, zero for unselected experts.
    """

    probs: np.ndarray
    order: np.ndarray
    selected: np.ndarray
    gates: np.ndarray

    @property
    def t(self) -> int:
        return int(self.selected.size)

    @property
    def gate_mass(self) -> float:
        return float(self.gates.sum())


def _descending_order(probs: np.ndarray) -> np.ndarray:
    # Stable sort on the negated values resolves ties toward lower indices.
    return np.argsort(-probs, kind="stable")


def select_top_k(probs: np.ndarray, k: int) -> RouterDecision:
    """Keep the k most probable experts; gates renormalize to sum to 1."""
    probs = np.asarray(probs)
    if probs.ndim != 1:
        raise ValueError(f"select_top_k expects a 1-D probability row, got {probs.shape}")
    n = probs.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} experts")
    order = _descending_order(probs)
    selected = order[:k]
    gates = np.zeros_like(probs)
    mass = probs[selected].sum()
    gates[selected] = probs[selected] / mass
    return RouterDecision(probs=probs, order=order, selected=selected, gates=gates)


def select_top_p(probs: np.ndarray, p: float) -> RouterDecision:
    """Keep the minimal high-probability prefix with cumulative mass >= p.

    Gates are the raw probabilities of the selected experts (no
    renormalization), so the combined gate mass is at least p and at most 1.
    """
    probs = np.asarray(probs)
    if probs.ndim != 1:
        raise ValueError(f"select_top_p expects a 1-D probability row, got {probs.shape}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"threshold p must lie in (0, 1), got {p}")
    n = probs.shape[0]
    order = _descending_order(probs)
    csum = np.cumsum(probs[order])
    t = int(np.searchsorted(csum, p, side="left")) + 1
    t = min(t, n)
    selected = order[:t]
    gates = np.zeros_like(probs)
    gates[selected] = probs[selected]
    return RouterDecision(probs=probs, order=order, selected=selected, gates=gates)


def select(probs: np.ndarray, policy: RoutingPolicy) -> RouterDecision:
    if policy.mode == TOP_K:
        return select_top_k(probs, policy.k)
    return select_top_p(probs, policy.p)


def route_probs(x: Tensor, params: RouterParams) -> Tensor:
    """Router probabilities softmax(x @ W_r^T) for token rows ``x`` (M, d)."""
    return softmax(matmul(x, transpose(params.weight, (1, 0))))


def route(x: Tensor, params: RouterParams, policy: RoutingPolicy, observer=None) -> RouterDecision:
    """Route a single token vector (d,) and return its decision.

    Deterministic: identical inputs always produce the identical decision.
    ``observer``, if given, receives the decision (instrumentation hook).
    """
    probs = route_probs(x.reshape(1, -1), params)
    decision = select(probs.data[0], policy)
    if observer is not None:
        observer(decision)
    return decision


def select_batch(probs: np.ndarray, policy: RoutingPolicy):
    """Vectorized selection over probability rows (M, N).

    Returns (mask, order, t): boolean selection mask (M, N), the stable
    descending order (M, N), and per-token activation counts (M,).
    Bitwise-equivalent to applying the per-token selectors row by row.
    """
    m, n = probs.shape
    order = np.argsort(-probs, axis=1, kind="stable")
    if policy.mode == TOP_K:
        if policy.k > n:
            raise ValueError(f"k={policy.k} out of range for {n} experts")
        t = np.full(m, policy.k, dtype=np.int64)
    else:
        sorted_probs = np.take_along_axis(probs, order, axis=1)
        csum = np.cumsum(sorted_probs, axis=1)
        t = np.minimum((csum < policy.p).sum(axis=1) + 1, n)
    in_prefix = np.arange(n)[None, :] < t[:, None]
    mask = np.zeros((m, n), dtype=bool)
    np.put_along_axis(mask, order, in_prefix, axis=1)
    return mask, order, t
