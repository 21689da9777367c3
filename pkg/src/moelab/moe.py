"""Sparse mixture-of-experts layer: per-token expert dispatch and combination.

Each token row activates the experts chosen by the routing policy and the
layer output is the gate-weighted sum of the activated expert outputs,
MoE(x) = sum_i g_i(x) * e_i(x). Dispatch is gather-compute-scatter per
expert: the rows routed to expert e are gathered into one matrix, run through
that expert's SwiGLU FFN in a single batched matmul, then scattered back and
summed in fixed expert order (deterministic). There are no capacity limits —
every token keeps every expert it selected.

Gradients flow through the gate values of selected experts and through the
selected experts' weights only; the selection itself is a non-differentiable
index set, and unselected experts receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .routing import (
    TOP_K,
    RouterDecision,
    RouterParams,
    RoutingPolicy,
    select_batch,
)
from .tensor import Tensor, ShapeError, constant, matmul, silu, softmax, take_elems, take_rows, scatter_rows, transpose


@dataclass
class ExpertBank:
    """Weights for N identically shaped SwiGLU experts.

    Per expert: w_gate (d, ff), w_up (d, ff), w_down (ff, d).
    """

    w_gate: list
    w_up: list
    w_down: list

    def __post_init__(self):
        n = len(self.w_gate)
        if not (len(self.w_up) == len(self.w_down) == n) or n == 0:
            raise ShapeError("expert weight lists must be non-empty and equal length")
        first = (self.w_gate[0].shape, self.w_up[0].shape, self.w_down[0].shape)
        for e in range(n):
            got = (self.w_gate[e].shape, self.w_up[e].shape, self.w_down[e].shape)
            if got != first:
                raise ShapeError(f"expert {e} shapes {got} differ from expert 0 {first}")

    @property
    def n_experts(self) -> int:
        return len(self.w_gate)

    @property
    def d_model(self) -> int:
        return self.w_gate[0].shape[0]

    @property
    def d_ff(self) -> int:
        return self.w_gate[0].shape[1]


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """SwiGLU feed-forward: (silu(x W_gate) * (x W_up)) W_down."""
    return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_down)


@dataclass
class LayerRouting:
    """Batched routing record for one MoE layer over M token rows.

    probs holds the differentiable router distribution (M, N); mask/order/t
    and the realized gates are plain arrays for instrumentation.
    """

    probs: Tensor
    mask: np.ndarray
    order: np.ndarray
    t: np.ndarray
    gates: np.ndarray
    policy: RoutingPolicy

    def decisions(self) -> Iterator[RouterDecision]:
        for i in range(self.mask.shape[0]):
            sel = self.order[i, : self.t[i]]
            yield RouterDecision(
                probs=self.probs.data[i],
                order=self.order[i],
                selected=sel,
                gates=self.gates[i],
            )


def count_activated(routing: LayerRouting) -> np.ndarray:
    """Per-token number of activated experts (copy of the t vector)."""
    return routing.t.copy()


def moe_forward(
    x: Tensor,
    router: RouterParams,
    bank: ExpertBank,
    policy: RoutingPolicy,
) -> tuple[Tensor, LayerRouting]:
    """Route token rows ``x`` (M, d) and combine activated expert outputs."""
    if x.ndim != 2 or x.shape[1] != bank.d_model:
        raise ShapeError(f"moe_forward expects (M, {bank.d_model}) input, got {x.shape}")
    if router.n_experts != bank.n_experts:
        raise ShapeError(
            f"router has {router.n_experts} experts, bank has {bank.n_experts}"
        )
    m = x.shape[0]
    n = bank.n_experts
    probs = softmax(matmul(x, transpose(router.weight, (1, 0))))
    mask, order, t = select_batch(probs.data, policy)
    maskf = constant(mask.astype(probs.data.dtype))
    kept = probs * maskf
    if policy.mode == TOP_K:
        gates = kept * (kept.sum(axis=1, keepdims=True) ** -1.0)
    else:
        gates = kept

    out: Tensor | None = None
    for e in range(n):
        rows = np.nonzero(mask[:, e])[0]
        if rows.size == 0:
            continue
        xe = take_rows(x, rows, unique=True)
        he = swiglu_ffn(xe, bank.w_gate[e], bank.w_up[e], bank.w_down[e])
        ge = take_elems(gates, rows, np.full(rows.size, e), unique=True).reshape(-1, 1)
        piece = scatter_rows(he * ge, rows, m, unique=True)
        out = piece if out is None else out + piece
    assert out is not None  # t >= 1 guarantees at least one expert fired

    record = LayerRouting(
        probs=probs, mask=mask, order=order, t=t, gates=gates.data, policy=policy
    )
    return out, record
