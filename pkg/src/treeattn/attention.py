"""Tree-based attention layers and the standard multi-head baseline.

Element order everywhere is [nodes; leaves]: row/column k < m is node k,
k >= m is leaf k - m. Encoder self-attention scores all four blocks
(node-node, node-leaf, leaf-node, leaf-leaf) in one product, masks them
with the subtree mask and attends over values [accumulated nodes; leaves].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .accumulation import HierEmbedTable, accumulate
from .errors import DimensionError
from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    layer_norm,
    linear,
    masked_softmax_rows,
    matmul,
    relu,
    reshape,
    scale,
    swap_last,
    take,
    transpose,
)
from .treebank import TreeEncoding


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclass
class AttentionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    b_Q: Tensor
    b_K: Tensor
    b_V: Tensor
    b_O: Tensor
    heads: int
    u: Tensor | None = None  # leaf-weight vector; tree layers only
    table: HierEmbedTable | None = None  # shared, not owned
    dropout: float = 0.0

    def __post_init__(self):
        d = self.W_Q.shape[0]
        if self.heads < 1 or d % self.heads:
            raise DimensionError(f"model width {d} is not divisible by {self.heads} heads")

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @classmethod
    def init(cls, rng, d: int, heads: int, tree: bool = False, table=None, dropout: float = 0.0, dtype=np.float64):
        bound = 1.0 / math.sqrt(d)
        mats = [_uniform(rng, (d, d), bound, dtype) for _ in range(4)]
        biases = [Tensor(np.zeros(d, dtype=dtype), requires_grad=True) for _ in range(4)]
        u = _uniform(rng, (d,), bound, dtype) if tree else None
        return cls(*mats, *biases, heads=heads, u=u, table=table, dropout=dropout)

    @classmethod
    def identity(cls, d: int, heads: int = 1, tree: bool = False, dtype=np.float64):
        eye = [Tensor(np.eye(d, dtype=dtype), requires_grad=True) for _ in range(4)]
        zeros = [Tensor(np.zeros(d, dtype=dtype), requires_grad=True) for _ in range(4)]
        u = Tensor(np.zeros(d, dtype=dtype), requires_grad=True) if tree else None
        return cls(*eye, *zeros, heads=heads, u=u)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {
            f"{prefix}W_Q": self.W_Q, f"{prefix}W_K": self.W_K, f"{prefix}W_V": self.W_V, f"{prefix}W_O": self.W_O,
            f"{prefix}b_Q": self.b_Q, f"{prefix}b_K": self.b_K, f"{prefix}b_V": self.b_V, f"{prefix}b_O": self.b_O,
        }
        if self.u is not None:
            out[f"{prefix}u"] = self.u
        return out


@dataclass
class PhiParams:
    """Weights of the post-attention block: two layer norms around a ReLU FFN."""

    ln1_g: Tensor
    ln1_b: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    dropout: float = 0.0

    @classmethod
    def init(cls, rng, d: int, d_ffn: int, dropout: float = 0.0, dtype=np.float64):
        return cls(
            Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
            _uniform(rng, (d, d_ffn), 1.0 / math.sqrt(d), dtype),
            Tensor(np.zeros(d_ffn, dtype=dtype), requires_grad=True),
            _uniform(rng, (d_ffn, d), 1.0 / math.sqrt(d_ffn), dtype),
            Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
            Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
            dropout,
        )

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        names = ("ln1_g", "ln1_b", "W1", "b1", "W2", "b2", "ln2_g", "ln2_b")
        return {f"{prefix}{k}": getattr(self, k) for k in names}


@dataclass
class LayerNormParams:
    g: Tensor
    b: Tensor

    @classmethod
    def init(cls, d: int, dtype=np.float64):
        return cls(Tensor(np.ones(d, dtype=dtype), requires_grad=True), Tensor(np.zeros(d, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}g": self.g, f"{prefix}b": self.b}


@dataclass
class SubtreeMask:
    matrix: np.ndarray  # (m+n, m+n) bool, True where attention is allowed
    m: int
    n: int = field(default=0)


# ---------------------------------------------------------------- building blocks


def _heads(x: Tensor, heads: int) -> Tensor:
    """(a, d) -> (h, a, d/h)."""
    a, d = x.shape
    return transpose(reshape(x, (a, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, a, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (a, h * dh))


def affinity(q_in: Tensor, k_in: Tensor, params: AttentionParams) -> Tensor:
    """Per-head scaled dot products (h, a, b) between projected queries and keys."""
    d = params.d
    if q_in.shape[-1] != d or k_in.shape[-1] != d:
        raise DimensionError(f"affinity: inputs {q_in.shape}, {k_in.shape} vs model width {d}")
    q = _heads(linear(q_in, params.W_Q, params.b_Q), params.heads)
    k = _heads(linear(k_in, params.W_K, params.b_K), params.heads)
    return scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d // params.heads))


def build_subtree_mask(enc: TreeEncoding, leaf_groups: np.ndarray | None = None) -> SubtreeMask:
    """Node queries see their own subtree; leaf queries see every leaf.

    ``leaf_groups`` (one id per leaf) restricts leaf queries to leaves of
    the same group; it is how a batch of trees packed into one forest keeps
    sentences apart. Node rows are already confined by their subtree.
    """
    m, n = enc.m, enc.n
    mat = np.zeros((m + n, m + n), dtype=bool)
    for i, r in enumerate(enc.rules):
        for e in r:
            mat[i, e.index if e.kind == "N" else m + e.index] = True
    if leaf_groups is None:
        mat[m:, m:] = True
    else:
        g = np.asarray(leaf_groups)
        mat[m:, m:] = g[:, None] == g[None, :]
    return SubtreeMask(mat, m, n)


def transformer_layer_phi(O: Tensor, Q: Tensor, p: PhiParams, rng=None, training: bool = False) -> Tensor:
    """LN(FFN(LN(O + Q)) + LN(O + Q)) with a ReLU feed-forward block."""
    if O.shape != Q.shape:
        raise DimensionError(f"phi: attention output {O.shape} vs residual {Q.shape}")
    h = layer_norm(add(dropout(O, p.dropout, rng, training), Q), p.ln1_g, p.ln1_b)
    f = linear(relu(linear(h, p.W1, p.b1)), p.W2, p.b2)
    return layer_norm(add(dropout(f, p.dropout, rng, training), h), p.ln2_g, p.ln2_b)


def _attend(scores: Tensor, allowed, values_h: Tensor, params: AttentionParams, rng, training):
    weights = masked_softmax_rows(scores, allowed)
    att = matmul(dropout(weights, params.dropout, rng, training), values_h)
    return linear(_merge_heads(att), params.W_O, params.b_O), weights


def standard_attention(
    Q: Tensor,
    K: Tensor,
    V_in: Tensor,
    params: AttentionParams,
    causal: bool = False,
    allowed: np.ndarray | None = None,
    rng=None,
    training: bool = False,
    return_weights: bool = False,
):
    """softmax(Q W_Q (K W_K)^T / sqrt(d/h)) (V W_V), heads merged and projected by W_O."""
    if K.shape[0] != V_in.shape[0]:
        raise DimensionError(f"keys {K.shape} and values {V_in.shape} disagree in length")
    scores = affinity(Q, K, params)
    if causal:
        tri = np.tril(np.ones((Q.shape[0], K.shape[0]), dtype=bool))
        allowed = tri if allowed is None else (allowed & tri)
    values = _heads(linear(V_in, params.W_V, params.b_V), params.heads)
    out, weights = _attend(scores, allowed, values, params, rng, training)
    return (out, weights) if return_weights else out


def tree_values(
    L: Tensor,
    N: Tensor,
    enc: TreeEncoding,
    params: AttentionParams,
    use_hier_embeddings: bool = True,
) -> Tensor:
    """Values [accumulated nodes; projected leaves] at full width, (m+n, d)."""
    Lbar = linear(L, params.W_V, params.b_V)
    if enc.m == 0:
        return Lbar
    Nv = linear(N, params.W_V, params.b_V)
    w = reshape(matmul(L, reshape(params.u, (params.d, 1))), (enc.n,))
    Nbar = accumulate(Lbar, Nv, enc, w, params.table, use_hier_embeddings)
    return concat([Nbar, Lbar], axis=0)


def encoder_tree_self_attention(
    L: Tensor,
    N: Tensor,
    enc: TreeEncoding,
    params: AttentionParams,
    phi: PhiParams,
    use_hier_embeddings: bool = True,
    use_subtree_mask: bool = True,
    leaf_groups: np.ndarray | None = None,
    skip_masked_leaf_node: bool = False,
    rng=None,
    training: bool = False,
    return_weights: bool = False,
):
    """One tree self-attention layer; returns (L_hat, N_hat) and optionally the weights.

    ``skip_masked_leaf_node`` avoids scoring leaf-query/node-key pairs that
    the subtree mask discards anyway; results are identical.
    """
    m, n = enc.m, enc.n
    d = params.d
    if L.shape != (n, d) or (m and N.shape != (m, d)):
        raise DimensionError(f"encoder layer: L {L.shape}, N {getattr(N, 'shape', None)} for n={n}, m={m}, d={d}")
    X = concat([N, L], axis=0) if m else L
    values = _heads(tree_values(L, N, enc, params, use_hier_embeddings), params.heads)

    if use_subtree_mask:
        allowed = build_subtree_mask(enc, leaf_groups).matrix
    elif leaf_groups is not None:
        allowed = _group_block(enc, leaf_groups)
    else:
        allowed = None

    if skip_masked_leaf_node and use_subtree_mask and m:
        Nq = take(X, np.arange(m))
        s_node = affinity(Nq, X, params)
        s_leaf = affinity(L, L, params)
        o_node, w_node = _attend(s_node, allowed[:m], values, params, rng, training)
        leaf_vals = take(values, np.arange(m, m + n), axis=1)
        o_leaf, w_leaf = _attend(s_leaf, allowed[m:, m:], leaf_vals, params, rng, training)
        out = concat([o_node, o_leaf], axis=0)
        weights = None
        if return_weights:
            full = np.zeros((params.heads, m + n, m + n), dtype=w_node.dtype)
            full[:, :m] = w_node.data
            full[:, m:, m:] = w_leaf.data
            weights = Tensor(full)
    else:
        scores = affinity(X, X, params)
        out, weights = _attend(scores, allowed, values, params, rng, training)

    Y = transformer_layer_phi(out, X, phi, rng, training)
    if m:
        N_hat = take(Y, np.arange(m))
        L_hat = take(Y, np.arange(m, m + n))
    else:
        N_hat, L_hat = N, Y
    if return_weights:
        return L_hat, N_hat, weights
    return L_hat, N_hat


def _group_block(enc: TreeEncoding, leaf_groups: np.ndarray) -> np.ndarray:
    """Same-tree block mask over [nodes; leaves] for a packed forest."""
    g = np.asarray(leaf_groups)
    node_g = g[enc.spans[:, 0]] if enc.m else np.zeros(0, dtype=g.dtype)
    allg = np.concatenate([node_g, g])
    return allg[:, None] == allg[None, :]


def decoder_cross_attention(
    Q: Tensor,
    L: Tensor,
    N: Tensor,
    enc: TreeEncoding,
    params: AttentionParams,
    use_hier_embeddings: bool = True,
    allowed: np.ndarray | None = None,
    rng=None,
    training: bool = False,
    return_weights: bool = False,
):
    """Target queries over source [accumulated nodes; leaves]; no subtree mask.

    ``allowed`` (t, m+n) is only for keeping packed batches apart.
    """
    m = enc.m
    keys = concat([N, L], axis=0) if m else L
    scores = affinity(Q, keys, params)
    values = _heads(tree_values(L, N, enc, params, use_hier_embeddings), params.heads)
    out, weights = _attend(scores, allowed, values, params, rng, training)
    return (out, weights) if return_weights else out


def node_mass(weights: np.ndarray, m: int) -> np.ndarray:
    """Share of each query's attention landing on node keys (the first m columns)."""
    return weights[..., :m].sum(axis=-1)
