"""Hierarchical accumulation: interpolation, upward cumulative average,
hierarchical embeddings and weighted aggregation.

The dense (m+1) x n x d tensor is mostly structural zeros, so the kernels
work on a packed layout instead: one row per (node i, covered leaf j)
pair, grouped by node and ordered by leaf. ``BranchSets`` precomputes that
layout for an encoding. The dense functions (``interpolate``,
``upward_cumavg``, ``build_hier_embeddings``, ``weighted_aggregate``)
gather into and scatter out of the packed form; ``accumulate`` never
materializes the dense tensor.

Branch sums are a dynamic program: the sum for (i, j) is node i's vector
plus the sum already computed for (child of i on the way to j, j), or
plus leaf j when j hangs directly under i. Each packed row costs one
vector add, so a balanced tree of n leaves costs O(n log n) per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import opcount
from .errors import DimensionError, InvalidTreeError
from .tensor import Tensor, as_tensor, concat, record_op, reshape, scatter_rows, take
from .treebank import TreeEncoding


class BranchSets:
    """Packed (node, leaf) layout and branch statistics for one encoding.

    Per packed entry e = (i, j):

    * ``branch_len[e]``  size of the branch set: leaf j plus nodes from i down to j
    * ``vertical[e]``    ancestors of j within i's subtree, counting i
    * ``horizontal[e]``  position of j inside i's leaf span, starting at 1
    """

    def __init__(self, enc: TreeEncoding):
        m, n = enc.m, enc.n
        if m == 0:
            raise InvalidTreeError("accumulation needs at least one node")
        spans = enc.spans
        sizes = spans[:, 1] - spans[:, 0]
        if (sizes <= 0).any():
            raise InvalidTreeError("node with zero covered leaves")
        self.m, self.n = m, n
        self.spans = spans
        self.leaf_counts = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        K = int(self.offsets[-1])
        self.K = K
        self.entry_node = np.repeat(np.arange(m), sizes)
        self.entry_leaf = np.concatenate([np.arange(s, e) for s, e in spans]).astype(np.int64)
        self.horizontal = self.entry_leaf - spans[self.entry_node, 0] + 1

        parent = enc.node_parent
        leaf_parent = enc.leaf_parent
        self.vertical = np.zeros(K, dtype=np.int64)
        # source of each entry: -1 means "leaf j directly", else a packed entry index
        self.src = np.full(K, -1, dtype=np.int64)
        for j in range(n):
            below = -1
            p = int(leaf_parent[j])
            depth = 0
            while p >= 0:
                depth += 1
                e = int(self.offsets[p] + (j - spans[p, 0]))
                self.vertical[e] = depth
                self.src[e] = below
                below = e
                p = int(parent[p])
        self.branch_len = self.vertical + 1

        heights = enc.node_heights
        self.leaf_src = np.flatnonzero(self.src < 0)
        chained = np.flatnonzero(self.src >= 0)
        order = np.argsort(heights[self.entry_node[chained]], kind="stable")
        chained = chained[order]
        level_of = heights[self.entry_node[chained]]
        cuts = np.flatnonzero(np.diff(level_of)) + 1
        self.levels = [blk for blk in np.split(chained, cuts) if blk.size]

    @property
    def dense_index(self) -> np.ndarray:
        """Flat row index of each packed entry in an (m+1)*n dense layout (node rows start at 1)."""
        return (self.entry_node + 1) * self.n + self.entry_leaf


def branch_sets(enc: TreeEncoding) -> BranchSets:
    cached = enc.__dict__.get("_branch_sets")
    if cached is None:
        cached = BranchSets(enc)
        enc.__dict__["_branch_sets"] = cached
    return cached


@dataclass
class Interpolated:
    values: Tensor  # (m+1, n, d); row 0 holds the leaves
    occupancy: np.ndarray  # (m+1, n) bool


@dataclass
class HierEmbedTable:
    E_v: Tensor
    E_h: Tensor

    def __post_init__(self):
        if self.E_v.shape != self.E_h.shape:
            raise DimensionError(f"vertical {self.E_v.shape} and horizontal {self.E_h.shape} tables differ")

    @property
    def size(self) -> int:
        return self.E_v.shape[0]

    @property
    def d(self) -> int:
        return 2 * self.E_v.shape[1]

    @classmethod
    def zeros(cls, size: int, d: int, dtype=np.float64) -> "HierEmbedTable":
        if d % 2:
            raise DimensionError("hierarchical embeddings need an even width")
        return cls(Tensor(np.zeros((size, d // 2), dtype=dtype)), Tensor(np.zeros((size, d // 2), dtype=dtype)))


# ---------------------------------------------------------------- packed primitives


def branch_sums(leaf_vals: Tensor, entry_vals: Tensor, bs: BranchSets) -> Tensor:
    """out[e] = entry_vals[e] + (leaf_vals[j] if j hangs under node(e) else out[src[e]])."""
    if leaf_vals.shape[0] != bs.n or entry_vals.shape[0] != bs.K:
        raise DimensionError(f"branch_sums: got {leaf_vals.shape} leaves / {entry_vals.shape} entries for n={bs.n}, K={bs.K}")
    out = entry_vals.data.copy()
    ls = bs.leaf_src
    out[ls] += leaf_vals.data[bs.entry_leaf[ls]]
    for blk in bs.levels:
        out[blk] += out[bs.src[blk]]
    width = int(np.prod(out.shape[1:], dtype=np.int64))
    opcount.record("add", bs.K * width)

    def bw(g):
        gt = g.copy()
        for blk in reversed(bs.levels):
            gt[bs.src[blk]] += gt[blk]
        gl = np.zeros_like(leaf_vals.data)
        gl[bs.entry_leaf[ls]] = gt[ls]
        return gl, gt

    return record_op(out, (leaf_vals, entry_vals), bw)


def segment_sum(x: Tensor, bs: BranchSets) -> Tensor:
    """Sum packed rows per node: (K, ...) -> (m, ...)."""
    out = np.add.reduceat(x.data, bs.offsets[:-1], axis=0)
    opcount.record("add", x.size)
    counts = bs.leaf_counts
    return record_op(out, (x,), lambda g: (np.repeat(g, counts, axis=0),))


def packed_embeddings(bs: BranchSets, table: HierEmbedTable) -> Tensor:
    """(K, d) rows [e_v at |V|; e_h at |H|], counts 1-indexed and clipped to the table size."""
    size = table.size
    v_idx = np.minimum(bs.vertical, size) - 1
    h_idx = np.minimum(bs.horizontal, size) - 1
    return concat([take(table.E_v, v_idx), take(table.E_h, h_idx)], axis=1)


def _inv_branch_len(bs: BranchSets, dtype) -> Tensor:
    return Tensor((1.0 / bs.branch_len).astype(dtype)[:, None])


def upward_cumavg_packed(leaf_vals: Tensor, entry_vals: Tensor, bs: BranchSets) -> Tensor:
    sums = branch_sums(leaf_vals, entry_vals, bs)
    return sums * _inv_branch_len(bs, sums.dtype)


def weighted_aggregate_packed(shat: Tensor, w: Tensor, bs: BranchSets) -> Tensor:
    w = as_tensor(w)
    if w.shape != (bs.n,):
        raise DimensionError(f"weights must have shape ({bs.n},), got {w.shape}")
    wg = reshape(take(w, bs.entry_leaf), (bs.K, 1))
    summed = segment_sum(shat * wg, bs)
    return summed * Tensor((1.0 / bs.leaf_counts).astype(summed.dtype)[:, None])


# ---------------------------------------------------------------- dense interface


def _check_ld(Lt: Tensor, Nt: Tensor, enc: TreeEncoding) -> None:
    if Lt.ndim != 2 or Nt.ndim != 2 or Lt.shape[0] != enc.n or Nt.shape[0] != enc.m or Lt.shape[1] != Nt.shape[1]:
        raise DimensionError(f"expected L ({enc.n}, d) and N ({enc.m}, d), got {Lt.shape} and {Nt.shape}")


def interpolate(Lt: Tensor, Nt: Tensor, enc: TreeEncoding) -> Interpolated:
    """Arrange leaves (row 0) and node vectors (rows 1..m) over the leaf columns they cover."""
    Lt, Nt = as_tensor(Lt), as_tensor(Nt)
    _check_ld(Lt, Nt, enc)
    bs = branch_sets(enc)
    m, n, d = enc.m, enc.n, Lt.shape[1]
    rows = concat([Lt, take(Nt, bs.entry_node)], axis=0)
    idx = np.concatenate([np.arange(n), bs.dense_index])
    values = reshape(scatter_rows(rows, idx, (m + 1) * n), (m + 1, n, d))
    occ = np.zeros((m + 1) * n, dtype=bool)
    occ[idx] = True
    return Interpolated(values, occ.reshape(m + 1, n))


def upward_cumavg(s: Interpolated, enc: TreeEncoding) -> Tensor:
    """Branch averages (m, n, d); exactly zero where leaf j is outside node i's subtree."""
    bs = branch_sets(enc)
    m, n = enc.m, enc.n
    vals = s.values
    if vals.shape[:2] != (m + 1, n):
        raise DimensionError(f"interpolated tensor {vals.shape} does not match m={m}, n={n}")
    d = vals.shape[2]
    flat = reshape(vals, ((m + 1) * n, d))
    leaf_rows = take(flat, np.arange(n))
    entry_rows = take(flat, bs.dense_index)
    shat = upward_cumavg_packed(leaf_rows, entry_rows, bs)
    return reshape(scatter_rows(shat, bs.dense_index - n, m * n), (m, n, d))


def build_hier_embeddings(enc: TreeEncoding, table: HierEmbedTable, d: int | None = None) -> Tensor:
    """Dense (m+1, n, d) tensor of hierarchical embeddings; leaf row and uncovered cells are 0."""
    if d is not None and d != table.d:
        raise DimensionError(f"model width {d} != 2 x table width {table.d // 2}")
    bs = branch_sets(enc)
    packed = packed_embeddings(bs, table)
    return reshape(scatter_rows(packed, bs.dense_index, (enc.m + 1) * enc.n), (enc.m + 1, enc.n, table.d))


def weighted_aggregate(shat: Tensor, w: Tensor, enc: TreeEncoding) -> Tensor:
    bs = branch_sets(enc)
    m, n = enc.m, enc.n
    if shat.shape[:2] != (m, n):
        raise DimensionError(f"branch tensor {shat.shape} does not match m={m}, n={n}")
    flat = reshape(shat, (m * n, shat.shape[2]))
    return weighted_aggregate_packed(take(flat, bs.dense_index - n), w, bs)


def accumulate(
    Lt: Tensor,
    Nt: Tensor,
    enc: TreeEncoding,
    w: Tensor,
    table: HierEmbedTable | None = None,
    use_embeddings: bool = True,
) -> Tensor:
    """Node representations (m, d) from leaf and node states via the packed kernels."""
    Lt, Nt = as_tensor(Lt), as_tensor(Nt)
    _check_ld(Lt, Nt, enc)
    bs = branch_sets(enc)
    x = take(Nt, bs.entry_node)
    if use_embeddings and table is not None:
        if table.d != Lt.shape[1]:
            raise DimensionError(f"model width {Lt.shape[1]} != hierarchical embedding width {table.d}")
        x = x + packed_embeddings(bs, table)
    shat = upward_cumavg_packed(Lt, x, bs)
    return weighted_aggregate_packed(shat, w, bs)
