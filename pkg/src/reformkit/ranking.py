"""Ranked result lists shared by every retriever."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class RankedList:
    """Top-k results, descending score, ties broken by ascending doc_id."""

    entries: tuple[tuple[str, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple((str(d), float(s)) for d, s in self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        for i, (doc_id, score) in enumerate(entries):
            if doc_id in seen:
                raise ValidationError(f"duplicate doc_id {doc_id!r} in ranked list")
            seen.add(doc_id)
            if i and not _ordered(entries[i - 1], entries[i]):
                raise ValidationError(f"ranked list out of order at position {i + 1}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, float]]:
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]


def _ordered(a, b) -> bool:
    if a[1] != b[1]:
        return a[1] > b[1]
    return a[0] < b[0]


def top_k(doc_ids: Sequence[str], scores: np.ndarray, candidates: np.ndarray, k: int) -> RankedList:
    """Select the k best candidates.

    ``doc_ids`` must be sorted ascending so that a candidate's position
    doubles as its tie-break key.
    """
    if candidates.size == 0:
        return RankedList()
    cand_scores = scores[candidates]
    order = np.lexsort((candidates, -cand_scores))[:k]
    chosen = candidates[order]
    return RankedList(tuple((doc_ids[i], float(scores[i])) for i in chosen))
