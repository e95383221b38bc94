"""Brute-force reference implementations used to cross-check the kernels.

Everything here works straight from the rule sets with explicit loops and
set tests, sharing no code with the packed kernels.
"""

from __future__ import annotations

import math

import numpy as np

from .treebank import TreeEncoding, Elem


def _in(enc: TreeEncoding, kind: str, idx: int, node: int) -> bool:
    return Elem(kind, idx) in enc.rules[node]


def interpolate(L: np.ndarray, N: np.ndarray, enc: TreeEncoding) -> np.ndarray:
    m, n = enc.m, enc.n
    S = np.zeros((m + 1, n, L.shape[1]))
    for j in range(n):
        S[0, j] = L[j]
    for i in range(m):
        for j in range(n):
            if _in(enc, "L", j, i):
                S[i + 1, j] = N[i]
    return S


def branch_nodes(enc: TreeEncoding, i: int, j: int) -> list[int]:
    """Nodes t in the subtree of i whose subtree holds leaf j."""
    return [t for t in range(enc.m) if _in(enc, "N", t, i) and _in(enc, "L", j, t)]


def upward_cumavg(S: np.ndarray, enc: TreeEncoding) -> np.ndarray:
    m, n, d = enc.m, enc.n, S.shape[2]
    out = np.zeros((m, n, d))
    for i in range(m):
        for j in range(n):
            if not _in(enc, "L", j, i):
                continue
            members = [S[0, j]] + [S[t + 1, j] for t in branch_nodes(enc, i, j)]
            total = np.zeros(d)
            for v in members:
                total = total + v
            out[i, j] = total / len(members)
    return out


def vertical_horizontal(enc: TreeEncoding, i: int, j: int) -> tuple[int, int]:
    v = len(branch_nodes(enc, i, j))
    h = len([t for t in range(j + 1) if _in(enc, "L", t, i)])
    return v, h


def hier_embeddings(enc: TreeEncoding, E_v: np.ndarray, E_h: np.ndarray) -> np.ndarray:
    m, n = enc.m, enc.n
    size = E_v.shape[0]
    d = 2 * E_v.shape[1]
    E = np.zeros((m + 1, n, d))
    for i in range(m):
        for j in range(n):
            if _in(enc, "L", j, i):
                v, h = vertical_horizontal(enc, i, j)
                E[i + 1, j] = np.concatenate([E_v[min(v, size) - 1], E_h[min(h, size) - 1]])
    return E


def weighted_aggregate(shat: np.ndarray, w: np.ndarray, enc: TreeEncoding) -> np.ndarray:
    m, n, d = shat.shape
    out = np.zeros((m, d))
    for i in range(m):
        cover = [j for j in range(n) if _in(enc, "L", j, i)]
        total = np.zeros(d)
        for j in cover:
            total = total + w[j] * shat[i, j]
        out[i] = total / len(cover)
    return out


def accumulate(L, N, enc, w, E_v=None, E_h=None) -> np.ndarray:
    S = interpolate(L, N, enc)
    if E_v is not None:
        S = S + hier_embeddings(enc, E_v, E_h)
    return weighted_aggregate(upward_cumavg(S, enc), w, enc)


def subtree_mask(enc: TreeEncoding) -> np.ndarray:
    m, n = enc.m, enc.n
    mask = np.zeros((m + n, m + n), dtype=bool)
    for q in range(m + n):
        for k in range(m + n):
            if q < m:
                key = Elem("N", k) if k < m else Elem("L", k - m)
                mask[q, k] = key in enc.rules[q]
            else:
                mask[q, k] = k >= m
    return mask


def softmax_row(a, allowed=None) -> list[float]:
    allowed = [True] * len(a) if allowed is None else list(allowed)
    top = max(x for x, ok in zip(a, allowed) if ok)
    e = [math.exp(x - top) if ok else 0.0 for x, ok in zip(a, allowed)]
    s = sum(e)
    return [x / s for x in e]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    p, q = a.shape
    q2, r = b.shape
    assert q == q2
    out = np.zeros((p, r))
    for i in range(p):
        for k in range(r):
            acc = 0.0
            for j in range(q):
                acc += a[i, j] * b[j, k]
            out[i, k] = acc
    return out


def attention(q_in, k_in, v_in, Wq, Wk, Wv, heads: int, allowed=None) -> np.ndarray:
    """Loop-level multi-head attention; returns concatenated heads before the output projection."""
    Q, K, V = matmul(q_in, Wq), matmul(k_in, Wk), matmul(v_in, Wv)
    d = Q.shape[1]
    dh = d // heads
    out = np.zeros((Q.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for a in range(Q.shape[0]):
            scores = [float(np.dot(Q[a, sl], K[b, sl])) / math.sqrt(dh) for b in range(K.shape[0])]
            row_ok = None if allowed is None else allowed[a]
            p = softmax_row(scores, row_ok)
            for b, pb in enumerate(p):
                out[a, sl] += pb * V[b, sl]
    return out


def evaluate_expression(tree) -> int:
    """Recursive value of a MIN/MAX/NEG expression tree with +1/-1 leaves."""
    if tree.is_leaf:
        return int(tree.label)
    vals = [evaluate_expression(c) for c in tree.children]
    if tree.label == "MIN":
        return min(vals)
    if tree.label == "MAX":
        return max(vals)
    if tree.label == "NEG":
        assert len(vals) == 1
        return -vals[0]
    assert len(vals) == 1, tree.label
    return vals[0]
