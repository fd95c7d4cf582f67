"""Sorted, disjoint, half-open integer intervals."""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from typing import Iterable, Iterator


class RangeSet:
    __slots__ = ("starts", "ends")

    def __init__(self, ranges: Iterable[tuple[int, int]] = ()):
        self.starts: list[int] = []
        self.ends: list[int] = []
        for s, e in ranges:
            self.add(s, e)

    def add(self, start: int, end: int) -> int:
        """Insert ``[start, end)``; returns the number of newly covered integers."""
        if end <= start:
            return 0
        starts, ends = self.starts, self.ends
        # first interval whose end >= start (touching intervals merge)
        i = bisect_left(ends, start)
        j = bisect_right(starts, end)
        if i == j:
            starts.insert(i, start)
            ends.insert(i, end)
            return end - start
        covered = sum(min(e, end) - max(s, start) for s, e in zip(starts[i:j], ends[i:j])
                      if min(e, end) > max(s, start))
        ns = min(start, starts[i])
        ne = max(end, ends[j - 1])
        starts[i:j] = [ns]
        ends[i:j] = [ne]
        return (end - start) - covered

    def subtract(self, start: int, end: int) -> int:
        """Remove ``[start, end)``; returns the number of integers removed."""
        if end <= start:
            return 0
        starts, ends = self.starts, self.ends
        i = bisect_right(ends, start)
        j = bisect_left(starts, end)
        if i >= j:
            return 0
        removed = 0
        new_s, new_e = [], []
        for s, e in zip(starts[i:j], ends[i:j]):
            lo, hi = max(s, start), min(e, end)
            removed += hi - lo
            if s < start:
                new_s.append(s)
                new_e.append(start)
            if e > end:
                new_s.append(end)
                new_e.append(e)
        starts[i:j] = new_s
        ends[i:j] = new_e
        return removed

    def contains(self, x: int) -> bool:
        i = bisect_right(self.starts, x) - 1
        return i >= 0 and x < self.ends[i]

    def covers(self, start: int, end: int) -> bool:
        if end <= start:
            return True
        i = bisect_right(self.starts, start) - 1
        return i >= 0 and self.ends[i] >= end

    def first_gap_from(self, x: int) -> int:
        """Smallest value >= x not in the set."""
        i = bisect_right(self.starts, x) - 1
        if i >= 0 and x < self.ends[i]:
            return self.ends[i]
        return x

    def above(self, x: int) -> list[tuple[int, int]]:
        """Ranges (clipped) lying at or above ``x``."""
        i = bisect_right(self.ends, x)
        out = []
        for s, e in zip(self.starts[i:], self.ends[i:]):
            out.append((max(s, x), e))
        return out

    def trim_below(self, x: int) -> None:
        if self.starts and self.starts[0] < x:
            self.subtract(self.starts[0], x)

    @property
    def total(self) -> int:
        return sum(e - s for s, e in zip(self.starts, self.ends))

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(zip(self.starts, self.ends))

    def __len__(self) -> int:
        return len(self.starts)

    def __bool__(self) -> bool:
        return bool(self.starts)

    def __eq__(self, other) -> bool:
        return isinstance(other, RangeSet) and list(self) == list(other)

    def __repr__(self) -> str:
        return f"RangeSet({list(self)!r})"

    def check(self) -> None:
        for k in range(len(self.starts)):
            assert self.starts[k] < self.ends[k], "empty interval"
            if k:
                assert self.ends[k - 1] < self.starts[k], "overlapping or touching intervals"
