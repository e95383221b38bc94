"""Synthetic hierarchical classification task.

Documents are MIN/MAX/NEG expression trees over +1/-1 tokens, labeled
with their value. The operators live only on phrase nodes, so a model
that sees just the token sequence cannot recover them.
"""

from __future__ import annotations

import numpy as np

from .treebank import Example, ParseTree

OPERATORS = ("MIN", "MAX", "NEG")
LEAF_TAG = "x"


def evaluate(tree: ParseTree) -> int:
    if tree.is_leaf:
        return int(tree.label)
    vals = [evaluate(c) for c in tree.children]
    if tree.label == "MIN":
        return min(vals)
    if tree.label == "MAX":
        return max(vals)
    if tree.label == "NEG":
        return -vals[0]
    return vals[0]  # preterminal


def _token(rng) -> ParseTree:
    return ParseTree(LEAF_TAG, (ParseTree("+1" if rng.random() < 0.5 else "-1"),))


def random_expression(
    rng: np.random.Generator,
    depth: int,
    max_arity: int = 3,
    leaf_prob: float = 0.3,
    neg_prob: float = 0.3,
) -> ParseTree:
    """Operator tree of height at most ``depth``; NEG always wraps a MIN/MAX node."""

    def op_node(h: int) -> ParseTree:
        if h >= 2 and rng.random() < neg_prob:
            return ParseTree("NEG", (minmax(h - 1),))
        return minmax(h)

    def minmax(h: int) -> ParseTree:
        label = "MIN" if rng.random() < 0.5 else "MAX"
        arity = int(rng.integers(2, max_arity + 1))
        return ParseTree(label, tuple(child(h - 1) for _ in range(arity)))

    def child(h: int) -> ParseTree:
        if h <= 0 or rng.random() < leaf_prob:
            return _token(rng)
        return op_node(h)

    return op_node(max(depth, 1))


def make_synthetic_dataset(seed: int, size: int, depth: int = 3, **kw) -> list[Example]:
    """``size`` labeled expression trees; labels are "+1"/"-1", balanced by symmetry."""
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(size):
        t = random_expression(rng, depth, **kw)
        out.append(Example("+1" if evaluate(t) > 0 else "-1", t))
    return out
