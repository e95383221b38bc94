"""Merge-list byte-pair encoding with ``@@`` continuation markers.

Codes files hold one merge per line as two space-separated symbols, most
frequent first; an optional ``#version`` header line is skipped. The final
symbol of a word carries the ``</w>`` end marker during merging, matching
the common subword-nmt format.
"""

from __future__ import annotations

from collections import Counter
from functools import lru_cache
from pathlib import Path
from typing import Iterable

from .errors import DataError

END = "</w>"
CONT = "@@"


def _symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + END,)


def learn_bpe(words: Iterable[str], num_merges: int) -> list[tuple[str, str]]:
    """Greedy merge list from word frequencies (ties broken lexicographically)."""
    vocab = Counter(_symbols(w) for w in words if w)
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for syms, freq in vocab.items():
            for a, b in zip(syms, syms[1:]):
                pairs[a, b] += freq
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        merges.append(best)
        merged: Counter = Counter()
        for syms, f in vocab.items():
            merged[_merge(syms, best)] += f
        vocab = merged
    return merges


def _merge(syms: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out, i = [], 0
    while i < len(syms):
        if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
            out.append(syms[i] + syms[i + 1])
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


class BPE:
    """Callable splitter: ``BPE(merges)("studying") -> ["study@@", "ing"]``."""

    def __init__(self, merges: Iterable[tuple[str, str]]):
        self.merges = list(merges)
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._segment = lru_cache(maxsize=65536)(self._segment_uncached)

    @classmethod
    def from_codes(cls, text: str) -> "BPE":
        merges = []
        for k, line in enumerate(text.splitlines(), 1):
            if not line.strip() or (k == 1 and line.startswith("#version")):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"codes line {k}: expected two symbols, got {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges)

    @classmethod
    def load(cls, path: str | Path) -> "BPE":
        return cls.from_codes(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        return "#version: 0.2\n" + "".join(f"{a} {b}\n" for a, b in self.merges)

    def _segment_uncached(self, word: str) -> tuple[str, ...]:
        syms = _symbols(word)
        while len(syms) > 1:
            ranked = [(self.ranks.get(p, -1), p) for p in zip(syms, syms[1:])]
            ranked = [rp for rp in ranked if rp[0] >= 0]
            if not ranked:
                break
            syms = _merge(syms, min(ranked)[1])
        return tuple(s + CONT for s in syms[:-1]) + (syms[-1][: -len(END)],)

    def __call__(self, word: str) -> list[str]:
        if not word:
            raise DataError("cannot segment an empty token")
        return list(self._segment(word))


def join_pieces(pieces: Iterable[str]) -> list[str]:
    """Undo segmentation: glue ``@@``-marked pieces to their successors."""
    words, buf = [], ""
    for p in pieces:
        if p.endswith(CONT):
            buf += p[: -len(CONT)]
        else:
            words.append(buf + p)
            buf = ""
    if buf:
        words.append(buf)
    return words
