"""Auxiliary routing objectives and the combined training loss.

Two regularizers act on the router distributions:

* entropy_loss — mean Shannon entropy of the per-token router distribution,
  -sum_i P_i ln P_i averaged over tokens. Minimizing it sharpens the router,
  which under threshold routing reduces the number of activated experts.
* balance_loss — N * sum_i f_i * Q_i, where f_i is the fraction of tokens
  that activated expert i (discrete, treated as a constant) and Q_i the mean
  router probability of expert i over the same tokens. Gradients flow through
  Q only. The value is 1 under perfectly balanced single-expert dispatch and
  grows when load concentrates.

The total objective is loss_lm + alpha * balance + beta * entropy, with the
auxiliary terms averaged across MoE layers before weighting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .routing import RouterDecision
from .tensor import Tensor, NumericError, constant, xlogx

DEFAULT_ALPHA = 1e-2
DEFAULT_BETA = 1e-4


def _check_rows(probs: np.ndarray) -> None:
    if (probs < 0.0).any():
        raise NumericError("negative probability in router distribution")
    err = np.abs(probs.sum(axis=-1) - 1.0).max()
    if err > 1e-5:
        raise NumericError(f"router distribution rows do not sum to 1 (off by {err:.3g})")


def entropy_loss(probs: Tensor) -> Tensor:
    """Mean entropy (nats) of router rows (M, N), with 0*ln(0) := 0."""
    _check_rows(probs.data)
    return -(xlogx(probs).sum(axis=-1)).mean()


def balance_loss(probs: Tensor, mask: np.ndarray) -> Tensor:
    """Load-balance penalty over a batch of M router rows and its selection mask."""
    _check_rows(probs.data)
    if mask.shape != probs.shape:
        raise NumericError(f"mask shape {mask.shape} does not match probs {probs.shape}")
    n = probs.shape[-1]
    freq = constant(mask.astype(probs.data.dtype).mean(axis=0))  # f_i, no gradient
    mean_prob = probs.mean(axis=0)  # Q_i, gradient flows
    return (freq * mean_prob).sum() * float(n)


def balance_loss_from_decisions(decisions: Sequence[RouterDecision]) -> float:
    """Reference evaluation of the balance penalty from per-token decisions."""
    if not decisions:
        raise ValueError("balance_loss_from_decisions needs at least one decision")
    n = decisions[0].probs.shape[0]
    m = len(decisions)
    freq = np.zeros(n)
    mean_prob = np.zeros(n)
    for d in decisions:
        freq[d.selected] += 1.0
        mean_prob += d.probs
    freq /= m
    mean_prob /= m
    return float(n * (freq * mean_prob).sum())


@dataclass
class LossBreakdown:
    """Scalar components of one training step's objective."""

    loss_lm: float
    loss_balance: float
    loss_entropy: float
    alpha: float
    beta: float

    @property
    def loss_total(self) -> float:
        return self.loss_lm + self.alpha * self.loss_balance + self.beta * self.loss_entropy


def combine(
    loss_lm: Tensor,
    balance_terms: Sequence[Tensor],
    entropy_terms: Sequence[Tensor],
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> tuple[Tensor, LossBreakdown]:
    """Total loss: LM term plus layer-averaged auxiliary terms, weighted."""
    if len(balance_terms) != len(entropy_terms) or not balance_terms:
        raise ValueError("need matching non-empty per-layer auxiliary terms")
    scale = 1.0 / len(balance_terms)
    balance = balance_terms[0] * scale
    entropy = entropy_terms[0] * scale
    for b in balance_terms[1:]:
        balance = balance + b * scale
    for d in entropy_terms[1:]:
        entropy = entropy + d * scale
    total = loss_lm + balance * alpha + entropy * beta
    parts = LossBreakdown(
        loss_lm=loss_lm.item(),
        loss_balance=balance.item(),
        loss_entropy=entropy.item(),
        alpha=alpha,
        beta=beta,
    )
    return total, parts
