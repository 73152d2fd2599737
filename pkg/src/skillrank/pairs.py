"""Pairwise skill annotations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator


@dataclass(frozen=True, order=True)
class PairLabel:
    """``label`` is 1 if ``id_a`` shows better skill, -1 if ``id_b`` does, 0 if neither."""

    id_a: str
    id_b: str
    label: int

    def __post_init__(self):
        if self.label not in (1, -1, 0):
            raise ValueError(f"pair label must be 1, -1 or 0, got {self.label!r}")
        if self.id_a == self.id_b:
            raise ValueError(f"a video cannot be paired with itself ({self.id_a})")

    def reversed(self) -> "PairLabel":
        return PairLabel(self.id_b, self.id_a, -self.label)

    def canonical(self) -> "PairLabel":
        """Reorder so the label is non-negative; ties sort their ids."""
        if self.label < 0 or (self.label == 0 and self.id_b < self.id_a):
            return self.reversed()
        return self

    @property
    def better(self) -> str:
        return self.canonical().id_a

    @property
    def worse(self) -> str:
        return self.canonical().id_b

    @property
    def key(self) -> frozenset[str]:
        return frozenset((self.id_a, self.id_b))


@dataclass
class PairSet:
    """Canonical pairs with a skill disparity (label 1 only).

    ``ties`` counts annotated pairs without disparity that were dropped.
    """

    pairs: list[PairLabel] = field(default_factory=list)
    ties: int = 0

    def __post_init__(self):
        seen = set()
        for p in self.pairs:
            if p.label != 1:
                raise ValueError(f"pair set holds only label-1 pairs, got {p}")
            if p.key in seen:
                raise ValueError(f"duplicate pair {p.id_a},{p.id_b}")
            seen.add(p.key)

    @classmethod
    def from_labels(cls, labels: Iterable[PairLabel]) -> "PairSet":
        kept, ties = [], 0
        for lab in labels:
            lab = lab.canonical()
            if lab.label == 0:
                ties += 1
            else:
                kept.append(lab)
        return cls(kept, ties)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[PairLabel]:
        return iter(self.pairs)

    def __getitem__(self, i: int) -> PairLabel:
        return self.pairs[i]

    def video_ids(self) -> list[str]:
        return sorted({v for p in self.pairs for v in (p.id_a, p.id_b)})

    def restrict(self, ids: Iterable[str]) -> "PairSet":
        """Pairs whose two videos are both in ``ids``."""
        keep = set(ids)
        return PairSet([p for p in self.pairs if p.id_a in keep and p.id_b in keep])
