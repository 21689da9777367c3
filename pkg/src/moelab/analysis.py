"""Routing statistics, threshold sweeps, and report emission.

All statistics are exact integer counters accumulated from routing records:
activation counts per (layer, expert), token and activation totals per layer,
per token id, and per source tag. Counters merge by pure addition, so stats
collected over shards and merged equal stats collected over the whole run.
Derived means are computed only at read time:

    per-layer mean experts  = activations[l] / tokens[l]
    per-token mean experts  = activated[token] / (occurrences[token] * L)
    per-source mean experts = activated[tag] / (tokens[tag] * L)

Evaluation runs the model forward-only over deterministic corpus windows and
reports the LM loss in nats/token alongside the routing stats; sweep_p
repeats that for a list of thresholds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sstats

from . import tensor as T
from .data import Corpus, iter_eval_windows
from .model import ModelState, forward
from .moe import LayerRouting
from .routing import RoutingPolicy


@dataclass
class RoutingStats:
    """Exact activation counters for a set of forward passes."""

    n_layers: int
    n_experts: int
    vocab_size: int
    layer_expert: np.ndarray  # (L, N) activation counts
    layer_tokens: np.ndarray  # (L,) tokens routed per layer
    token_occurrences: np.ndarray  # (V,) positions seen per token id
    token_activated: np.ndarray  # (V,) activations summed over layers
    source_tokens: dict = field(default_factory=dict)
    source_activated: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, n_layers: int, n_experts: int, vocab_size: int) -> "RoutingStats":
        return cls(
            n_layers=n_layers,
            n_experts=n_experts,
            vocab_size=vocab_size,
            layer_expert=np.zeros((n_layers, n_experts), dtype=np.int64),
            layer_tokens=np.zeros(n_layers, dtype=np.int64),
            token_occurrences=np.zeros(vocab_size, dtype=np.int64),
            token_activated=np.zeros(vocab_size, dtype=np.int64),
        )

    def update(self, records: list[LayerRouting], token_ids: np.ndarray, tags) -> None:
        """Accumulate one forward pass.

        records: per-layer routing records over M token rows.
        token_ids: flat (M,) ids those rows correspond to.
        tags: source tag per row (length M), or a single tag for all rows.
        """
        if len(records) != self.n_layers:
            raise ValueError(f"expected {self.n_layers} layer records, got {len(records)}")
        token_ids = np.asarray(token_ids)
        m = token_ids.shape[0]
        t_total = np.zeros(m, dtype=np.int64)
        for l, rec in enumerate(records):
            self.layer_expert[l] += rec.mask.sum(axis=0)
            self.layer_tokens[l] += m
            t_total += rec.t
        np.add.at(self.token_occurrences, token_ids, 1)
        np.add.at(self.token_activated, token_ids, t_total)
        if isinstance(tags, str):
            tag_list = [(tags, np.arange(m))]
        else:
            tags = np.asarray(tags)
            tag_list = [(tag, np.nonzero(tags == tag)[0]) for tag in np.unique(tags)]
        for tag, idx in tag_list:
            self.source_tokens[tag] = self.source_tokens.get(tag, 0) + int(idx.size)
            self.source_activated[tag] = self.source_activated.get(tag, 0) + int(
                t_total[idx].sum()
            )

    def merge(self, other: "RoutingStats") -> "RoutingStats":
        """Pure-addition merge; commutative and associative by construction."""
        if (self.n_layers, self.n_experts, self.vocab_size) != (
            other.n_layers, other.n_experts, other.vocab_size,
        ):
            raise ValueError("cannot merge stats with different shapes")
        merged = RoutingStats(
            n_layers=self.n_layers,
            n_experts=self.n_experts,
            vocab_size=self.vocab_size,
            layer_expert=self.layer_expert + other.layer_expert,
            layer_tokens=self.layer_tokens + other.layer_tokens,
            token_occurrences=self.token_occurrences + other.token_occurrences,
            token_activated=self.token_activated + other.token_activated,
            source_tokens=dict(self.source_tokens),
            source_activated=dict(self.source_activated),
        )
        for tag, count in other.source_tokens.items():
            merged.source_tokens[tag] = merged.source_tokens.get(tag, 0) + count
        for tag, count in other.source_activated.items():
            merged.source_activated[tag] = merged.source_activated.get(tag, 0) + count
        return merged

    # -- derived means -------------------------------------------------------

    @property
    def per_layer_mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(
                self.layer_tokens > 0,
                self.layer_expert.sum(axis=1) / np.maximum(self.layer_tokens, 1),
                np.nan,
            )

    @property
    def overall_mean(self) -> float:
        tokens = self.layer_tokens.sum()
        return float(self.layer_expert.sum() / tokens) if tokens else float("nan")

    def token_mean(self, token_id: int) -> float:
        occ = self.token_occurrences[token_id]
        if occ == 0:
            return float("nan")
        return float(self.token_activated[token_id] / (occ * self.n_layers))

    def source_mean(self, tag: str) -> float:
        tokens = self.source_tokens.get(tag, 0)
        if tokens == 0:
            return float("nan")
        return float(self.source_activated[tag] / (tokens * self.n_layers))


def layer_profile(stats: RoutingStats) -> list[float]:
    """Mean activated experts per layer, bottom to top."""
    return [float(v) for v in stats.per_layer_mean]


def layer_trend(stats: RoutingStats) -> float:
    """Spearman rank correlation between layer index and mean activation.

    Negative values mean deeper layers activate fewer experts. Reported for
    inspection only; small models need not reproduce any particular trend.
    """
    means = stats.per_layer_mean
    if stats.n_layers < 2 or not np.isfinite(means).all():
        return float("nan")
    if np.ptp(means) == 0.0:
        return float("nan")  # constant profile: rank correlation undefined
    rho = sstats.spearmanr(np.arange(stats.n_layers), means).statistic
    return float(rho)


BYTE_CLASSES = ("letter", "digit", "punct", "whitespace", "other")


def byte_class(token_id: int) -> str:
    b = chr(token_id)
    if b.isascii() and b.isalpha():
        return "letter"
    if b.isascii() and b.isdigit():
        return "digit"
    if b in " \t\n\r\x0b\x0c":
        return "whitespace"
    if 33 <= token_id <= 126:
        return "punct"
    return "other"


def byte_repr(token_id: int) -> str:
    if 33 <= token_id <= 126:
        return chr(token_id)
    if token_id == 32:
        return "space"
    return f"0x{token_id:02x}"


def token_profile(stats: RoutingStats, min_occurrences: int = 100) -> list[dict]:
    """Per-token-id mean activation for ids seen at least min_occurrences times."""
    rows = []
    for tid in range(stats.vocab_size):
        occ = int(stats.token_occurrences[tid])
        if occ < min_occurrences:
            continue
        rows.append(
            {
                "token_id": tid,
                "byte_repr": byte_repr(tid),
                "occurrences": occ,
                "mean_experts": stats.token_mean(tid),
            }
        )
    return rows


def class_profile(stats: RoutingStats) -> list[dict]:
    """Token-id stats aggregated into byte classes (letter/digit/punct/...)."""
    occ = {c: 0 for c in BYTE_CLASSES}
    act = {c: 0 for c in BYTE_CLASSES}
    for tid in range(stats.vocab_size):
        c = byte_class(tid)
        occ[c] += int(stats.token_occurrences[tid])
        act[c] += int(stats.token_activated[tid])
    rows = []
    for c in BYTE_CLASSES:
        if occ[c] == 0:
            continue
        rows.append(
            {
                "class": c,
                "occurrences": occ[c],
                "mean_experts": act[c] / (occ[c] * stats.n_layers),
            }
        )
    return rows


# -- evaluation and sweeps ---------------------------------------------------


@dataclass
class EvalRun:
    """One forward-only pass over the eval windows."""

    stats: RoutingStats
    loss_nats: float
    predicted_tokens: int

    @property
    def mean_experts(self) -> float:
        return self.stats.overall_mean


def evaluate(
    state: ModelState,
    corpus: Corpus,
    context_len: int,
    policy: RoutingPolicy | None = None,
    max_tokens: int | None = None,
    batch_rows: int = 8,
) -> EvalRun:
    """Deterministic eval pass: LM loss (nats/token) plus routing stats."""
    cfg = state.config
    stats = RoutingStats.zeros(cfg.n_layers, cfg.n_experts, cfg.vocab_size)
    total_nll = 0.0
    total_pred = 0
    pending: list[tuple[str, np.ndarray]] = []

    def flush():
        nonlocal total_nll, total_pred
        if not pending:
            return
        windows = np.stack([w for _, w in pending])
        x, y = windows[:, :-1], windows[:, 1:]
        with T.no_grad():
            logits, records = forward(state, x, policy=policy)
            loss = T.cross_entropy(
                logits.reshape(-1, cfg.vocab_size), y.reshape(-1)
            )
        n_pred = y.size
        total_nll += loss.item() * n_pred
        total_pred += n_pred
        row_tags = np.repeat([tag for tag, _ in pending], x.shape[1])
        stats.update(records, x.reshape(-1), row_tags)
        pending.clear()

    for tag, window in iter_eval_windows(corpus, context_len, max_tokens=max_tokens):
        pending.append((tag, window))
        if len(pending) == batch_rows:
            flush()
    flush()
    if total_pred == 0:
        raise ValueError(
            f"corpus has no window of {context_len + 1} tokens; nothing to evaluate"
        )
    return EvalRun(stats=stats, loss_nats=total_nll / total_pred, predicted_tokens=total_pred)


def collect_stats(
    state: ModelState, corpus: Corpus, context_len: int, **kwargs
) -> RoutingStats:
    """Routing statistics over the eval windows (see ``evaluate``)."""
    return evaluate(state, corpus, context_len, **kwargs).stats


@dataclass
class SweepRow:
    p: float
    mean_experts: float
    eval_loss_nats: float
    per_layer: list[float]


@dataclass
class SweepReport:
    """Threshold sweep over a fixed model and dataset, sorted by p."""

    rows: list[SweepRow]
    n_layers: int

    def thresholds(self) -> list[float]:
        return [r.p for r in self.rows]


def sweep_p(
    state: ModelState,
    corpus: Corpus,
    p_values: list[float],
    context_len: int,
    max_tokens: int | None = None,
) -> SweepReport:
    """Evaluate the model under each threshold p; rows come back sorted by p."""
    if not p_values:
        raise ValueError("sweep needs at least one threshold")
    rows = []
    for p in sorted(p_values):
        run = evaluate(
            state,
            corpus,
            context_len,
            policy=RoutingPolicy(mode="top-p", p=float(p)),
            max_tokens=max_tokens,
        )
        rows.append(
            SweepRow(
                p=float(p),
                mean_experts=run.mean_experts,
                eval_loss_nats=run.loss_nats,
                per_layer=layer_profile(run.stats),
            )
        )
    return SweepReport(rows=rows, n_layers=state.config.n_layers)


# -- report files ------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def write_layer_profile(stats: RoutingStats, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "layer_profile.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "mean_experts", "token_count"])
        for l, mean in enumerate(stats.per_layer_mean):
            w.writerow([l, _fmt(float(mean)), int(stats.layer_tokens[l])])
    dat_path = out_dir / "layer_profile.dat"
    with dat_path.open("w") as fh:
        fh.write("# layer mean_experts token_count\n")
        for l, mean in enumerate(stats.per_layer_mean):
            fh.write(f"{l} {_fmt(float(mean))} {int(stats.layer_tokens[l])}\n")
    return [csv_path, dat_path]


def write_token_profile(
    stats: RoutingStats, out_dir: str | Path, min_occurrences: int = 100
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = token_profile(stats, min_occurrences)
    csv_path = out_dir / "token_profile.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token_id", "byte_repr", "occurrences", "mean_experts"])
        for r in rows:
            w.writerow([r["token_id"], r["byte_repr"], r["occurrences"], _fmt(r["mean_experts"])])
    class_path = out_dir / "byte_class_profile.csv"
    with class_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "occurrences", "mean_experts"])
        for r in class_profile(stats):
            w.writerow([r["class"], r["occurrences"], _fmt(r["mean_experts"])])
    return [csv_path, class_path]


def write_source_profile(stats: RoutingStats, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "source_profile.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "token_count", "mean_experts"])
        for tag in sorted(stats.source_tokens):
            w.writerow([tag, stats.source_tokens[tag], _fmt(stats.source_mean(tag))])
    return csv_path


def write_sweep(report: SweepReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layer_cols = [f"layer{l}_mean" for l in range(report.n_layers)]
    csv_path = out_dir / "sweep.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "mean_experts", "eval_loss_nats", *layer_cols])
        for r in report.rows:
            w.writerow(
                [_fmt(r.p), _fmt(r.mean_experts), _fmt(r.eval_loss_nats)]
                + [_fmt(v) for v in r.per_layer]
            )
    dat_path = out_dir / "sweep.dat"
    with dat_path.open("w") as fh:
        fh.write("# p mean_experts eval_loss_nats " + " ".join(layer_cols) + "\n")
        for r in report.rows:
            cells = [_fmt(r.p), _fmt(r.mean_experts), _fmt(r.eval_loss_nats)]
            cells += [_fmt(v) for v in r.per_layer]
            fh.write(" ".join(cells) + "\n")
    return [csv_path, dat_path]


def emit_report(
    stats: RoutingStats, out_dir: str | Path, min_occurrences: int = 100
) -> list[Path]:
    """Write the full stats report (layer, token, class, source files)."""
    paths = write_layer_profile(stats, out_dir)
    paths += write_token_profile(stats, out_dir, min_occurrences)
    paths.append(write_source_profile(stats, out_dir))
    return paths
