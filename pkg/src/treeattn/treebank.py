"""Bracketed constituency trees and their (leaves, nodes, rules) encoding.

``encode_tree`` turns a parse tree into a :class:`TreeEncoding`: the
ordered leaves, the phrase nodes in post-order, and for every node the set
of elements (nodes and leaves) of the subtree it roots. ``decode_tree``
rebuilds the exact tree from an encoding by recovering each element's
parent as its unique innermost ancestor and ordering siblings by the
leftmost leaf they cover.

Indices are 0-based throughout. Elements are ``Elem("N", i)`` for node i
and ``Elem("L", j)`` for leaf j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataError, InvalidTreeError, ParseError


@dataclass(frozen=True)
class ParseTree:
    label: str
    children: tuple["ParseTree", ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def leaves(self) -> list[str]:
        if self.is_leaf:
            return [self.label]
        out: list[str] = []
        stack = [self]
        while stack:
            t = stack.pop()
            if t.is_leaf:
                out.append(t.label)
            else:
                stack.extend(reversed(t.children))
        return out

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(c.depth() for c in self.children)

    def __str__(self) -> str:
        return to_bracketed(self)


def leaf(token: str) -> ParseTree:
    return ParseTree(token)


def node(label: str, *children: ParseTree | str) -> ParseTree:
    return ParseTree(label, tuple(c if isinstance(c, ParseTree) else ParseTree(c) for c in children))


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace("(", "\\(").replace(")", "\\)")


def to_bracketed(t: ParseTree) -> str:
    if t.is_leaf:
        return _escape(t.label)
    return "(" + _escape(t.label) + " " + " ".join(to_bracketed(c) for c in t.children) + ")"


# ---------------------------------------------------------------- parsing


def _lex(text: str) -> list[tuple[str, str, int]]:
    """Split into ("(", ")", or "atom") tokens paired with their byte offsets."""
    out = []
    i, n = 0, len(text)
    byte = 0
    while i < n:
        ch = text[i]
        if ch.isspace():
            byte += len(ch.encode("utf-8"))
            i += 1
        elif ch in "()":
            out.append((ch, ch, byte))
            byte += 1
            i += 1
        else:
            start = byte
            buf = []
            while i < n and not text[i].isspace() and text[i] not in "()":
                if text[i] == "\\" and i + 1 < n:
                    buf.append(text[i + 1])
                    byte += 1 + len(text[i + 1].encode("utf-8"))
                    i += 2
                else:
                    buf.append(text[i])
                    byte += len(text[i].encode("utf-8"))
                    i += 1
            out.append(("atom", "".join(buf), start))
    return out


def parse_bracketed(text: str) -> ParseTree:
    """Parse one Penn-Treebank-style s-expression.

    A label-less outer wrapper ``( (S ...) )`` is unwrapped. Parentheses
    inside tokens must be escaped as ``\\(`` and ``\\)``.
    """
    toks = _lex(text)
    end = len(text.encode("utf-8"))
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else ("eof", "", end)

    def parse_node() -> ParseTree:
        nonlocal pos
        kind, _, off = peek()
        if kind != "(":
            raise ParseError("expected '('", off)
        pos += 1
        kind, val, off = peek()
        label = ""
        if kind == "atom":
            label = val
            pos += 1
        children: list[ParseTree] = []
        while True:
            kind, val, off2 = peek()
            if kind == "eof":
                raise ParseError("unbalanced parentheses: input ended inside a node", end)
            if kind == ")":
                pos += 1
                break
            if kind == "(":
                children.append(parse_node())
            else:
                children.append(ParseTree(val))
                pos += 1
        if not children:
            raise ParseError("empty node", off)
        if not label:
            if len(children) == 1 and not children[0].is_leaf:
                return children[0]
            raise ParseError("node without a label", off)
        return ParseTree(label, tuple(children))

    tree = parse_node()
    kind, _, off = peek()
    if kind != "eof":
        raise ParseError("trailing input after tree", off)
    return tree


# ---------------------------------------------------------------- encoding


class Elem(NamedTuple):
    kind: str  # "N" or "L"
    index: int

    def __repr__(self) -> str:
        return f"{self.kind}{self.index}"


def N(i: int) -> Elem:
    return Elem("N", i)


def L(j: int) -> Elem:
    return Elem("L", j)


@dataclass(frozen=True)
class TreeEncoding:
    """Ordered leaves, phrase nodes, and per-node subtree membership.

    ``node_chains[i]`` is the collapsed unary chain for node i (top-down;
    its first entry is the node label) and ``leaf_chains[j]`` holds the
    preterminal labels dropped above leaf j. Both exist only so decoding
    is exact; the accumulation kernels ignore them.
    """

    leaves: tuple[str, ...]
    nodes: tuple[str, ...]
    rules: tuple[frozenset[Elem], ...]
    node_chains: tuple[tuple[str, ...], ...] = ()
    leaf_chains: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        if not self.node_chains:
            object.__setattr__(self, "node_chains", tuple((lab,) for lab in self.nodes))
        if not self.leaf_chains:
            object.__setattr__(self, "leaf_chains", tuple(() for _ in self.leaves))

    @property
    def n(self) -> int:
        return len(self.leaves)

    @property
    def m(self) -> int:
        return len(self.nodes)

    def leaf_set(self, i: int) -> list[int]:
        return sorted(e.index for e in self.rules[i] if e.kind == "L")

    def node_set(self, i: int) -> list[int]:
        return sorted(e.index for e in self.rules[i] if e.kind == "N")

    # Derived structure below assumes a valid encoding.

    @cached_property
    def spans(self) -> np.ndarray:
        """(m, 2) half-open leaf interval covered by each node."""
        out = np.zeros((self.m, 2), dtype=np.int64)
        for i, r in enumerate(self.rules):
            js = [e.index for e in r if e.kind == "L"]
            out[i] = (min(js), max(js) + 1) if js else (0, 0)
        return out

    @cached_property
    def span_sizes(self) -> np.ndarray:
        return self.spans[:, 1] - self.spans[:, 0]

    @cached_property
    def _parents(self) -> tuple[np.ndarray, np.ndarray]:
        size = np.array([len(r) for r in self.rules])
        node_parent = np.full(self.m, -1, dtype=np.int64)
        leaf_parent = np.full(self.n, -1, dtype=np.int64)
        best_node = np.full(self.m, np.iinfo(np.int64).max)
        best_leaf = np.full(self.n, np.iinfo(np.int64).max)
        for y, r in enumerate(self.rules):
            for e in r:
                if e.kind == "N":
                    if e.index != y and size[y] < best_node[e.index]:
                        best_node[e.index] = size[y]
                        node_parent[e.index] = y
                elif size[y] < best_leaf[e.index]:
                    best_leaf[e.index] = size[y]
                    leaf_parent[e.index] = y
        return node_parent, leaf_parent

    @property
    def node_parent(self) -> np.ndarray:
        return self._parents[0]

    @property
    def leaf_parent(self) -> np.ndarray:
        return self._parents[1]

    @cached_property
    def root(self) -> int:
        roots = np.flatnonzero(self.node_parent < 0)
        if len(roots) != 1:
            raise InvalidTreeError(f"expected exactly one root, found {len(roots)}")
        return int(roots[0])

    @cached_property
    def node_heights(self) -> np.ndarray:
        """Longest downward node path: 1 for nodes whose children are all leaves."""
        h = np.ones(self.m, dtype=np.int64)
        # a parent's rule set strictly contains each child's
        for i in np.argsort([len(r) for r in self.rules], kind="stable"):
            p = self.node_parent[i]
            if p >= 0:
                h[p] = max(h[p], h[i] + 1)
        return h

    def permute_nodes(self, perm: Sequence[int]) -> "TreeEncoding":
        """Reorder nodes so that new node k is old node ``perm[k]``; rules are relabeled."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        rules = tuple(
            frozenset(N(inv[e.index]) if e.kind == "N" else e for e in self.rules[old]) for old in perm
        )
        return TreeEncoding(
            self.leaves,
            tuple(self.nodes[o] for o in perm),
            rules,
            tuple(self.node_chains[o] for o in perm),
            self.leaf_chains,
        )


def encode_tree(t: ParseTree, drop_preterminals: bool = True, collapse_unary: bool = True) -> TreeEncoding:
    """Transform a parse tree into leaves, post-order nodes, and subtree rules.

    With ``drop_preterminals``, a non-root unary chain that ends in a single
    leaf (a POS tag, possibly stacked) is folded into that leaf. With
    ``collapse_unary``, a node whose only child is another node merges with
    it under the upper label. Both rewrites are recorded so decoding stays
    exact.
    """
    if t.is_leaf:
        raise InvalidTreeError("a bare token is not a tree; wrap it in a labeled node")
    leaves: list[str] = []
    leaf_chains: list[tuple[str, ...]] = []
    nodes: list[str] = []
    node_chains: list[tuple[str, ...]] = []
    rules: list[frozenset[Elem]] = []

    def add_leaf(tok: str, chain: tuple[str, ...]) -> Elem:
        leaves.append(tok)
        leaf_chains.append(chain)
        return L(len(leaves) - 1)

    # explicit stack so deep chains do not hit the recursion limit
    def visit(root: ParseTree, is_root: bool) -> set[Elem]:
        result: set[Elem] = set()
        # frame: [subtree, is_root, chain, cur, child_iter_pos, members]
        stack: list[list] = []

        def open_frame(tree: ParseTree, top: bool):
            chain = [tree.label]
            cur = tree
            while collapse_unary and len(cur.children) == 1 and not cur.children[0].is_leaf:
                cur = cur.children[0]
                chain.append(cur.label)
            if drop_preterminals and not top and len(cur.children) == 1 and cur.children[0].is_leaf:
                return add_leaf(cur.children[0].label, tuple(chain))
            stack.append([tuple(chain), cur, 0, set()])
            return None

        absorbed = open_frame(root, is_root)
        if absorbed is not None:
            return {absorbed}
        while stack:
            frame = stack[-1]
            chain, cur, k, members = frame
            if k < len(cur.children):
                frame[2] += 1
                child = cur.children[k]
                if child.is_leaf:
                    members.add(add_leaf(child.label, ()))
                else:
                    absorbed = open_frame(child, False)
                    if absorbed is not None:
                        members.add(absorbed)
                continue
            stack.pop()
            nodes.append(chain[0])
            node_chains.append(chain)
            me = N(len(nodes) - 1)
            members.add(me)
            rules.append(frozenset(members))
            if stack:
                stack[-1][3].update(members)
            else:
                result = members
        return result

    visit(t, True)
    return TreeEncoding(tuple(leaves), tuple(nodes), tuple(rules), tuple(node_chains), tuple(leaf_chains))


def parent_of(x: Elem, enc: TreeEncoding) -> int | None:
    """Parent node index of element ``x``, or None when ``x`` is the root.

    The parent is the unique strict ancestor whose subtree contains no
    other ancestor of ``x``.
    """
    ancestors = {y for y in range(enc.m) if x in enc.rules[y] and Elem("N", y) != x}
    if not ancestors:
        if x.kind == "N":
            return None
        raise InvalidTreeError(f"leaf {x.index} belongs to no node")
    anc_elems = {N(y) for y in ancestors}
    cands = [y for y in ancestors if (enc.rules[y] & anc_elems) == {N(y)}]
    if len(cands) != 1:
        raise InvalidTreeError(f"element {x!r} has {len(cands)} parent candidates {sorted(cands)}")
    return cands[0]


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    element: str
    message: str


@dataclass
class Diagnostics:
    items: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.items

    def add(self, element, message: str, severity: str = "error") -> None:
        self.items.append(Diagnostic(severity, repr(element) if not isinstance(element, str) else element, message))

    def kinds(self) -> set[str]:
        return {d.message.split(":")[0] for d in self.items}

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __str__(self) -> str:
        return "\n".join(f"{d.severity}: {d.element}: {d.message}" for d in self.items) or "ok"


def validate(enc: TreeEncoding) -> Diagnostics:
    diag = Diagnostics()
    m, n = enc.m, enc.n
    if len(enc.rules) != m:
        diag.add("rules", f"shape: {len(enc.rules)} rule sets for {m} nodes")
        return diag
    if m == 0:
        diag.add("nodes", "root: encoding has no nodes")
        return diag
    for i, r in enumerate(enc.rules):
        for e in r:
            bound = m if e.kind == "N" else n
            if e.kind not in ("N", "L") or not 0 <= e.index < bound:
                diag.add(N(i), f"range: member {e!r} out of range")
    if diag.items:
        return diag
    for i, r in enumerate(enc.rules):
        if N(i) not in r:
            diag.add(N(i), "self-membership: node missing from its own rule set")
    # nesting: a member's subtree must sit inside the container's subtree
    for i, r in enumerate(enc.rules):
        for e in r:
            if e.kind == "N" and e.index != i:
                if N(i) in enc.rules[e.index]:
                    diag.add(N(i), f"cycle: mutual membership with {e!r}")
                elif not enc.rules[e.index] <= r:
                    diag.add(N(i), f"nesting: contains {e!r} but not all of its subtree")
    contained = {e.index for i, r in enumerate(enc.rules) for e in r if e.kind == "N" and e.index != i}
    roots = [i for i in range(m) if i not in contained]
    if len(roots) != 1:
        diag.add("nodes", f"root: expected exactly one root, found {len(roots)}")
    else:
        r = enc.rules[roots[0]]
        if len(r) != m + n:
            diag.add(N(roots[0]), "root: root does not cover every node and leaf")
    for i in range(m):
        js = enc.leaf_set(i)
        if not js:
            diag.add(N(i), "span: node covers no leaves")
        elif js[-1] - js[0] + 1 != len(js):
            diag.add(N(i), f"contiguity: leaves {js} are not a contiguous interval")
    elems = [N(i) for i in range(m) if i not in roots[:1]] + [L(j) for j in range(n)]
    for x in elems:
        try:
            p = parent_of(x, enc)
        except InvalidTreeError as err:
            diag.add(x, f"unique-parent: {err}")
            continue
        if p is None and x.kind == "N" and len(roots) == 1:
            diag.add(x, "unique-parent: non-root node has no parent")
    return diag


# ---------------------------------------------------------------- decoding


def decode_tree(enc: TreeEncoding) -> ParseTree:
    diag = validate(enc)
    if not diag.ok:
        raise InvalidTreeError(f"cannot decode invalid encoding:\n{diag}")
    children: dict[int, list[tuple[int, Elem]]] = {i: [] for i in range(enc.m)}
    root = None
    for i in range(enc.m):
        p = parent_of(N(i), enc)
        if p is None:
            root = i
        else:
            children[p].append((int(enc.spans[i, 0]), N(i)))
    for j in range(enc.n):
        children[parent_of(L(j), enc)].append((j, L(j)))

    def wrap(chain: Sequence[str], inner: tuple[ParseTree, ...]) -> ParseTree:
        t = ParseTree(chain[-1], inner)
        for lab in reversed(chain[:-1]):
            t = ParseTree(lab, (t,))
        return t

    built: dict[int, ParseTree] = {}
    for i in np.argsort(enc.node_heights, kind="stable"):
        kids = []
        for _, e in sorted(children[int(i)]):
            if e.kind == "L":
                tok = ParseTree(enc.leaves[e.index])
                chain = enc.leaf_chains[e.index]
                kids.append(wrap(chain, (tok,)) if chain else tok)
            else:
                kids.append(built[e.index])
        built[int(i)] = wrap(enc.node_chains[int(i)], tuple(kids))
    return built[root]


# ---------------------------------------------------------------- data rewrites


def apply_bpe_split(t: ParseTree, splitter: Callable[[str], Sequence[str]]) -> ParseTree:
    """Replace multi-piece words by a subtree over their subword pieces.

    A preterminal ``(P word)`` whose word splits into k > 1 pieces becomes
    ``(P (P-BPE piece1) ... (P-BPE piecek))``. A bare multi-piece leaf with
    no preterminal gets the synthetic preterminal ``TOK``.
    """

    def pieces(tok: str) -> list[str]:
        ps = list(splitter(tok))
        if not ps:
            raise DataError(f"splitter returned no pieces for token {tok!r}")
        return ps

    def split_under(label: str, tok: str) -> ParseTree | None:
        ps = pieces(tok)
        if len(ps) == 1 and ps[0] == tok:
            return None
        return ParseTree(label, tuple(ParseTree(f"{label}-BPE", (ParseTree(p),)) for p in ps))

    def rec(tree: ParseTree) -> ParseTree:
        if tree.is_leaf:
            return split_under("TOK", tree.label) or tree
        if len(tree.children) == 1 and tree.children[0].is_leaf:
            return split_under(tree.label, tree.children[0].label) or tree
        return ParseTree(tree.label, tuple(rec(c) for c in tree.children))

    return rec(t)


DOC_LABEL = "DOC"


def join_forest(trees: Sequence[ParseTree]) -> ParseTree:
    """Join sentence trees under a dummy ``DOC`` root (always added, even for one tree)."""
    trees = list(trees)
    if not trees:
        raise DataError("join_forest needs at least one tree")
    return ParseTree(DOC_LABEL, tuple(trees))


# ---------------------------------------------------------------- corpora


@dataclass(frozen=True)
class Example:
    label: str | None
    tree: ParseTree


def parse_corpus_line(line: str, lineno: int = 0) -> Example:
    """``tree``, ``label<TAB>tree`` or ``label<TAB>tree<TAB>tree...`` (forest joined under DOC)."""
    parts = line.rstrip("\n").split("\t")
    try:
        if len(parts) == 1:
            return Example(None, parse_bracketed(parts[0]))
        trees = [parse_bracketed(p) for p in parts[1:]]
    except ParseError as err:
        raise DataError(f"line {lineno}: {err}") from err
    tree = trees[0] if len(trees) == 1 else join_forest(trees)
    return Example(parts[0], tree)


def read_corpus(path: str | Path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_corpus_line(line, k))
    return out


def format_corpus_line(ex: Example) -> str:
    body = to_bracketed(ex.tree)
    return body if ex.label is None else f"{ex.label}\t{body}"


# ---------------------------------------------------------------- generators


PHRASE_LABELS = ("S", "NP", "VP", "PP", "ADJP", "SBAR")


def random_tree(
    rng: np.random.Generator,
    n_leaves: int,
    max_arity: int = 5,
    unary_prob: float = 0.2,
    bare_leaf_prob: float = 0.5,
    labels: Sequence[str] = PHRASE_LABELS,
) -> ParseTree:
    """Random labeled tree over ``n_leaves`` tokens with node arity in [1, max_arity]."""
    counter = iter(range(10**9))

    def make(k: int, depth: int) -> ParseTree:
        label = labels[int(rng.integers(len(labels)))]
        if (k == 1 or rng.random() < unary_prob) and depth < 6:
            arity = 1
        else:
            # a node over k >= 2 leaves must branch, whatever max_arity says
            arity = int(rng.integers(2, max(2, min(max_arity, k)) + 1)) if k >= 2 else 1
        if arity == 1:
            if k == 1:
                return ParseTree(label, (ParseTree(f"w{next(counter)}"),))
            return ParseTree(label, (make(k, depth + 1),))
        cuts = np.sort(rng.choice(np.arange(1, k), size=arity - 1, replace=False))
        sizes = np.diff(np.concatenate([[0], cuts, [k]]))
        kids = []
        for s in sizes:
            if s == 1 and rng.random() < bare_leaf_prob:
                kids.append(ParseTree(f"w{next(counter)}"))
            else:
                kids.append(make(int(s), depth + 1))
        return ParseTree(label, tuple(kids))

    if n_leaves < 1:
        raise DataError("random_tree needs at least one leaf")
    return make(n_leaves, 0)


def balanced_tree(n_leaves: int, label: str = "X") -> ParseTree:
    """Balanced binary tree over tokens t0..t{n-1}; ``n-1`` nodes once encoded."""

    def make(lo: int, hi: int) -> ParseTree:
        if hi - lo == 1:
            return ParseTree(f"t{lo}")
        mid = (lo + hi + 1) // 2
        return ParseTree(label, (make(lo, mid), make(mid, hi)))

    if n_leaves < 1:
        raise DataError("balanced_tree needs at least one leaf")
    if n_leaves == 1:
        return ParseTree(label, (ParseTree("t0"),))
    return make(0, n_leaves)


def iter_elements(enc: TreeEncoding) -> Iterable[Elem]:
    yield from (N(i) for i in range(enc.m))
    yield from (L(j) for j in range(enc.n))
