"""Byte-level corpus handling: tagged sources, ratio sampling, eval windows.

Text is tokenized as raw bytes (vocab 256, no merges). A corpus is a list of
tagged sources, each one file read fully into memory; training batches draw
each sequence's source by the configured mixing ratios and slice a window at
a uniform start offset (wrapping modularly, so short sources still work).
Evaluation iterates deterministic non-overlapping windows instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CorpusError(Exception):
    """Unreadable, empty, or inconsistently specified corpus input."""


def encode_bytes(data: bytes) -> np.ndarray:
    """Map raw bytes to token ids (identity: one byte = one id in [0, 256))."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


@dataclass
class Source:
    tag: str
    path: str
    ratio: float
    tokens: np.ndarray

    def __len__(self):
        return int(self.tokens.shape[0])


@dataclass
class Corpus:
    sources: list[Source]

    def __post_init__(self):
        if not self.sources:
            raise CorpusError("corpus has no sources")
        total = sum(s.ratio for s in self.sources)
        self._weights = np.array([s.ratio / total for s in self.sources])

    @property
    def tags(self) -> list[str]:
        return [s.tag for s in self.sources]

    @property
    def weights(self) -> np.ndarray:
        return self._weights.copy()

    @property
    def total_tokens(self) -> int:
        return sum(len(s) for s in self.sources)


def ingest_corpus(specs: list[tuple[str, str, float]]) -> Corpus:
    """Load (tag, path, ratio) source specs into memory as byte tokens."""
    if not specs:
        raise CorpusError("no data sources given")
    seen: set[str] = set()
    sources = []
    for tag, path, ratio in specs:
        if not tag:
            raise CorpusError("source tag must be non-empty")
        if tag in seen:
            raise CorpusError(f"duplicate source tag {tag!r}")
        seen.add(tag)
        if not ratio > 0.0:
            raise CorpusError(f"source {tag!r} needs a positive ratio, got {ratio}")
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise CorpusError(f"cannot read source {tag!r} from {path}: {exc}") from exc
        if not raw:
            raise CorpusError(f"source {tag!r} at {path} is empty")
        sources.append(Source(tag=tag, path=str(path), ratio=float(ratio), tokens=encode_bytes(raw)))
    return Corpus(sources=sources)


def sample_batch(
    corpus: Corpus, rng: np.random.Generator, batch_size: int, context_len: int
) -> tuple[np.ndarray, list[str]]:
    """Draw (B, T+1) token windows; returns the windows and their source tags.

    Each row picks a source by mixing ratio, then a uniform start offset;
    the extra trailing token provides next-byte targets. Windows wrap around
    the end of the source, so any non-empty source is usable.
    """
    windows = np.empty((batch_size, context_len + 1), dtype=np.int64)
    tags = []
    weights = corpus._weights
    span = np.arange(context_len + 1)
    for row in range(batch_size):
        src = corpus.sources[int(rng.choice(len(corpus.sources), p=weights))]
        start = int(rng.integers(0, len(src)))
        windows[row] = src.tokens[(start + span) % len(src)]
        tags.append(src.tag)
    return windows, tags


def iter_eval_windows(corpus: Corpus, context_len: int, max_tokens: int | None = None):
    """Deterministic non-overlapping (T+1)-windows per source, in corpus order.

    Yields (tag, window). Consecutive windows advance by T so the prediction
    targets tile each source exactly once; a trailing partial window is
    dropped. ``max_tokens`` caps the total predicted tokens, split across
    sources in proportion to their length.
    """
    total = corpus.total_tokens
    for src in corpus.sources:
        budget = len(src)
        if max_tokens is not None:
            budget = min(budget, int(np.ceil(max_tokens * len(src) / total)))
        used = 0
        start = 0
        while start + context_len + 1 <= len(src) and used < budget:
            yield src.tag, src.tokens[start : start + context_len + 1]
            start += context_len
            used += context_len
