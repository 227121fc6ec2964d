"""Accuracy prior over width combinations.

Lookups go through a small table of measured top-1 accuracies keyed by the
4-tuple of per-segment widths. Partial tuples (the first n segments of a
request that is still in flight) resolve to the nearest stored prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import NUM_SEGMENTS

WidthTuple = tuple[float, ...]


def _key(widths: Sequence[float]) -> WidthTuple:
    return tuple(round(float(w), 6) for w in widths)


@dataclass
class AccuracyTable:
    entries: dict[WidthTuple, float]
    top1_mean_override: Optional[float] = None

    def __post_init__(self):
        if not self.entries:
            raise ValueError("accuracy table is empty")
        for k, v in self.entries.items():
            if len(k) != NUM_SEGMENTS:
                raise ValueError(f"tuple {k} must have {NUM_SEGMENTS} widths")
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} for {k} outside [0, 1]")
        self._sorted = sorted(self.entries)
        self._cache: dict[WidthTuple, float] = {}

    @property
    def top1_mean(self) -> float:
        if self.top1_mean_override is not None:
            return self.top1_mean_override
        return math.fsum(self.entries.values()) / len(self.entries)

    @classmethod
    def from_text(cls, text: str) -> "AccuracyTable":
        entries = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != NUM_SEGMENTS + 1:
                raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
            *ws, acc = (float(p) for p in parts)
            entries[_key(ws)] = acc
        return cls(entries)

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "AccuracyTable":
        if path is None:
            text = resources.files("slimsched.data").joinpath("accuracy_table.csv").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_text(text)

    def exact_lookup(self, widths: Sequence[float]) -> Optional[float]:
        return self.entries.get(_key(widths))

    def prior_lookup(self, prefix: Sequence[float]) -> float:
        """Accuracy for the first n segments' widths.

        The nearest stored prefix (Euclidean, ties to the lexicographically
        smallest) wins; all entries sharing that prefix are averaged.
        """
        q = _key(prefix)
        n = len(q)
        if not 1 <= n <= NUM_SEGMENTS:
            raise ValueError(f"prefix length must be 1..{NUM_SEGMENTS}, got {n}")
        hit = self._cache.get(q)
        if hit is not None:
            return hit
        best: Optional[WidthTuple] = None
        best_d = math.inf
        for t in self._sorted:
            d = math.dist(t[:n], q)
            if d < best_d - 1e-12:
                best, best_d = t[:n], d
        matches = [v for t, v in self.entries.items() if t[:n] == best]
        value = math.fsum(matches) / len(matches)
        self._cache[q] = value
        return value

    def centered_prior(self, p: float, enabled: bool) -> float:
        return p - self.top1_mean if enabled else p

    def sample_correctness(self, widths: Sequence[float], rng: np.random.Generator) -> bool:
        return bool(rng.random() < self.prior_lookup(widths))
