"""Scalar operation counters for the complexity benchmarks.

Primitives report how many scalar multiply-adds, comparisons and
exponentials they perform. Counting is off unless a ``counting()`` block
is active, in which case every primitive adds to the innermost counter.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from typing import Iterator

_local = threading.local()


class OpCounter(Counter):
    @property
    def total(self) -> int:
        return int(sum(self.values()))


def _stack() -> list[OpCounter]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def record(kind: str, n: int) -> None:
    stack = _stack()
    if stack:
        stack[-1][kind] += int(n)


def active() -> bool:
    return bool(_stack())


@contextmanager
def counting() -> Iterator[OpCounter]:
    counter = OpCounter()
    stack = _stack()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()
        if stack:
            stack[-1].update(counter)
