"""Operation-count and wall-time benchmark for accumulation and a full tree layer."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import opcount
from .accumulation import HierEmbedTable, accumulate, branch_sets
from .attention import AttentionParams, PhiParams, encoder_tree_self_attention
from .tensor import Tensor
from .treebank import balanced_tree, encode_tree, parse_bracketed

COLUMNS = ("n", "m", "accumulate_ops", "layer_ops", "accumulate_ns", "layer_ns", "parse_ns", "fit_ops", "residual")


@dataclass
class BenchRow:
    n: int
    m: int
    accumulate_ops: int
    layer_ops: int
    accumulate_ns: int
    layer_ns: int
    parse_ns: int
    fit_ops: float = 0.0
    residual: float = 0.0


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    fit_c: float = 0.0

    def ratios(self, key: str = "accumulate_ops") -> list[tuple[int, float]]:
        """(n, ops(next n)/ops(n)) for consecutive lengths."""
        out = []
        for a, b in zip(self.rows, self.rows[1:]):
            out.append((a.n, getattr(b, key) / getattr(a, key)))
        return out

    @property
    def max_residual(self) -> float:
        return max((abs(r.residual) for r in self.rows), default=0.0)

    def to_csv(self, timings: bool = True) -> str:
        cols = COLUMNS if timings else tuple(c for c in COLUMNS if not c.endswith("_ns"))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            vals = []
            for c in cols:
                v = getattr(r, c)
                vals.append(f"{v:.6g}" if isinstance(v, float) else v)
            w.writerow(vals)
        return buf.getvalue()


def _count(fn) -> tuple[int, int]:
    with opcount.counting() as counter:
        t0 = time.perf_counter_ns()
        fn()
        elapsed = time.perf_counter_ns() - t0
    return counter.total, elapsed


def bench_accumulation(
    lengths: Sequence[int],
    repeats: int = 1,
    d: int = 16,
    d_ffn: int = 32,
    heads: int = 2,
    hier_size: int = 100,
    seed: int = 0,
    include_layer: bool = True,
) -> BenchReport:
    """Count scalar ops of ``accumulate`` (and of a full tree layer) on balanced binary trees.

    Op counts are deterministic; wall times are the minimum over ``repeats``
    runs. ``repeats=0`` returns an empty report.
    """
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be sorted ascending")
    report = BenchReport()
    if repeats <= 0 or not lengths:
        return report
    rng = np.random.default_rng(seed)
    table = HierEmbedTable(*(Tensor(rng.normal(size=(hier_size, d // 2))) for _ in range(2)))
    params = AttentionParams.init(rng, d, heads, tree=True, table=table)
    phi = PhiParams.init(rng, d, d_ffn)
    for n in lengths:
        text = str(balanced_tree(n))
        t0 = time.perf_counter_ns()
        enc = encode_tree(parse_bracketed(text))
        branch_sets(enc)
        parse_ns = time.perf_counter_ns() - t0
        L = Tensor(rng.normal(size=(n, d)))
        N = Tensor(rng.normal(size=(enc.m, d)))
        w = Tensor(rng.normal(size=n))
        acc_ops = layer_ops = 0
        acc_ns = layer_ns = None
        for _ in range(repeats):
            acc_ops, ns = _count(lambda: accumulate(L, N, enc, w, table))
            acc_ns = ns if acc_ns is None else min(acc_ns, ns)
            if include_layer:
                layer_ops, ns = _count(lambda: encoder_tree_self_attention(L, N, enc, params, phi))
                layer_ns = ns if layer_ns is None else min(layer_ns, ns)
        report.rows.append(BenchRow(n, enc.m, acc_ops, layer_ops, acc_ns, layer_ns or 0, parse_ns))
    xs = np.array([r.n * math.log2(r.n) if r.n > 1 else 1.0 for r in report.rows])
    ys = np.array([r.accumulate_ops for r in report.rows], dtype=float)
    c = float(xs @ ys / (xs @ xs))
    report.fit_c = c
    for r, x in zip(report.rows, xs):
        r.fit_ops = c * x
        r.residual = (r.accumulate_ops - r.fit_ops) / r.accumulate_ops if r.accumulate_ops else 0.0
    return report
