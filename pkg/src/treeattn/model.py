"""Encoder stacks, classification head, tree2seq decoder and parameter accounting.

Parameters are declared once by ``param_shapes``; ``count_parameters``
sums those declarations and ``TreeTransformer`` allocates exactly them,
so the accounting and the built model cannot drift apart.

Several trees are run together by packing them into one forest
(``Batch``): node rows are confined to their own subtree by construction
and leaf rows are confined to their own sentence by a group mask, so a
packed forward pass equals running the trees one at a time.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .accumulation import HierEmbedTable
from .attention import (
    AttentionParams,
    LayerNormParams,
    PhiParams,
    decoder_cross_attention,
    encoder_tree_self_attention,
    standard_attention,
    transformer_layer_phi,
)
from .errors import ConfigError, DataError, VocabError
from .tensor import (
    Tensor,
    add,
    dropout,
    linear,
    matmul,
    reshape,
    scale,
    scatter_rows,
    sinusoidal_positions,
    swap_last,
    take,
)
from .treebank import Elem, ParseTree, TreeEncoding, encode_tree, join_forest

CONFIG_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    d: int = 64
    d_ffn: int = 256
    layers_enc: int = 2
    layers_dec: int = 0
    heads: int = 4
    hier_size: int = 100
    token_vocab: int = 100
    label_vocab: int = 32
    target_vocab: int = 0
    num_classes: int = 2
    dropout: float = 0.1
    attention_dropout: float = 0.0
    use_hier_embeddings: bool = True
    use_subtree_mask: bool = True
    tree_mode: bool = True
    tie_label_embeddings: bool = False
    share_all_embeddings: bool = False
    tie_output: bool = False
    float_width: int = 64
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.d <= 0 or self.d % 2:
            raise ConfigError(f"d must be positive and even, got {self.d}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        for name in ("d_ffn", "layers_enc", "hier_size", "token_vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.layers_dec < 0 or self.num_classes < 0:
            raise ConfigError("layers_dec and num_classes must be >= 0")
        if self.layers_dec > 0 and not self.share_all_embeddings and self.target_vocab < 1:
            raise ConfigError("a decoder needs target_vocab >= 1")
        if self.tree_mode and not self.tie_label_embeddings and self.label_vocab < 1:
            raise ConfigError("tree mode needs label_vocab >= 1 (or tie_label_embeddings)")
        if self.float_width not in (32, 64):
            raise ConfigError("float_width must be 32 or 64")
        for name in ("dropout", "attention_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        return self

    @property
    def dtype(self):
        return np.float64 if self.float_width == 64 else np.float32

    @property
    def tgt_vocab(self) -> int:
        return self.token_vocab if self.share_all_embeddings else self.target_vocab

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(known[k].type, v) for k, v in data.items()})


def _coerce(typ, value):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "bool":
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"cannot read {value!r} as {typ}") from None
    return value


# ---------------------------------------------------------------- config files


def dump_config(values: dict[str, Any]) -> str:
    """Flat ``key = value`` text, versioned, keys sorted."""
    lines = [f"format_version = {CONFIG_FORMAT_VERSION}"]
    for k in sorted(values):
        v = values[k]
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for k, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {k}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    version = out.pop("format_version", str(CONFIG_FORMAT_VERSION))
    if int(version) != CONFIG_FORMAT_VERSION:
        raise ConfigError(f"unsupported config format_version {version}")
    return out


def load_config(path: str | Path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


PRESETS: dict[str, dict[str, Any]] = {
    # WMT'14 En-De base: shared 34,392-entry vocabulary, tied output
    "base": dict(d=512, d_ffn=2048, layers_enc=6, layers_dec=6, heads=8, hier_size=100, token_vocab=34392,
                 share_all_embeddings=True, tie_output=True, tie_label_embeddings=True, num_classes=0,
                 tree_mode=False, dropout=0.1),
    "big": dict(d=1024, d_ffn=4096, layers_enc=6, layers_dec=6, heads=16, hier_size=100, token_vocab=32672,
                share_all_embeddings=True, tie_output=True, tie_label_embeddings=True, num_classes=0,
                tree_mode=False, dropout=0.3),
    "tiny": dict(d=64, d_ffn=256, layers_enc=2, layers_dec=0, heads=4, tree_mode=False),
}
PRESETS["base-tree"] = {**PRESETS["base"], "tree_mode": True}
PRESETS["big-tree"] = {**PRESETS["big"], "tree_mode": True}
PRESETS["tiny-tree"] = {**PRESETS["tiny"], "tree_mode": True}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides}).validate()


# ---------------------------------------------------------------- parameter declarations


def _attn_shapes(prefix: str, d: int, tree: bool) -> dict[str, tuple[int, ...]]:
    out = {f"{prefix}.W_{k}": (d, d) for k in "QKVO"}
    out.update({f"{prefix}.b_{k}": (d,) for k in "QKVO"})
    if tree:
        out[f"{prefix}.u"] = (d,)
    return out


def _phi_shapes(prefix: str, d: int, d_ffn: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1_g": (d,), f"{prefix}.ln1_b": (d,),
        f"{prefix}.W1": (d, d_ffn), f"{prefix}.b1": (d_ffn,),
        f"{prefix}.W2": (d_ffn, d), f"{prefix}.b2": (d,),
        f"{prefix}.ln2_g": (d,), f"{prefix}.ln2_b": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, tree = cfg.d, cfg.tree_mode
    shapes: dict[str, tuple[int, ...]] = {"embed.tokens": (cfg.token_vocab, d)}
    if tree and not cfg.tie_label_embeddings:
        shapes["embed.labels"] = (cfg.label_vocab, d)
    if tree and cfg.use_hier_embeddings:
        shapes["hier.E_v"] = (cfg.hier_size, d // 2)
        shapes["hier.E_h"] = (cfg.hier_size, d // 2)
    for k in range(cfg.layers_enc):
        shapes.update(_attn_shapes(f"enc.{k}.attn", d, tree))
        shapes.update(_phi_shapes(f"enc.{k}.phi", d, cfg.d_ffn))
    if cfg.layers_dec:
        if not cfg.share_all_embeddings:
            shapes["embed.target"] = (cfg.target_vocab, d)
        for k in range(cfg.layers_dec):
            shapes.update(_attn_shapes(f"dec.{k}.self", d, False))
            shapes[f"dec.{k}.self_ln.g"] = (d,)
            shapes[f"dec.{k}.self_ln.b"] = (d,)
            shapes.update(_attn_shapes(f"dec.{k}.cross", d, tree))
            shapes.update(_phi_shapes(f"dec.{k}.phi", d, cfg.d_ffn))
        if not cfg.tie_output:
            shapes["out.W"] = (d, cfg.tgt_vocab)
    if cfg.num_classes:
        shapes["cls.W"] = (d, cfg.num_classes)
        shapes["cls.b"] = (cfg.num_classes,)
    return shapes


def _group_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] in ("enc", "dec"):
        sub = parts[2]
        if sub in ("attn", "self", "cross"):
            return f"{parts[0]}.{sub}.u" if parts[-1] == "u" else f"{parts[0]}.{sub}"
        if sub == "phi":
            kind = "ln" if parts[-1].startswith("ln") else "ffn"
            return f"{parts[0]}.phi.{kind}"
        return f"{parts[0]}.{sub}"
    return ".".join(parts[:2])


@dataclass
class ParamCount:
    items: dict[str, int]
    total: int
    baseline_total: int

    @property
    def overhead(self) -> int:
        return self.total - self.baseline_total

    @property
    def overhead_pct(self) -> float:
        return 100.0 * self.overhead / self.total if self.total else 0.0

    def lines(self) -> list[str]:
        out = [f"{k:<22} {v:>14,}" for k, v in self.items.items()]
        out.append(f"{'total':<22} {self.total:>14,}")
        out.append(f"{'baseline total':<22} {self.baseline_total:>14,}")
        out.append(f"{'tree overhead':<22} {self.overhead:>14,} ({self.overhead_pct:.4f}%)")
        return out


def count_parameters(cfg: ModelConfig) -> ParamCount:
    """Itemized parameter counts plus the tree-over-baseline overhead."""
    cfg.validate()
    items: dict[str, int] = {}
    for name, shape in param_shapes(cfg).items():
        g = _group_of(name)
        items[g] = items.get(g, 0) + int(np.prod(shape))
    total = sum(items.values())
    base = sum(int(np.prod(s)) for s in param_shapes(cfg.replace(tree_mode=False)).values())
    return ParamCount(items, total, base)


# ---------------------------------------------------------------- vocabularies


PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"


@dataclass
class Vocab:
    itos: list[str]
    unk_fallback: bool = True
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    @classmethod
    def build(cls, tokens: Iterable[str], specials: Sequence[str] = (PAD, UNK, BOS, EOS), min_count: int = 1):
        counts: dict[str, int] = {}
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
        words = sorted(w for w, c in counts.items() if c >= min_count and w not in specials)
        return cls(list(specials) + words)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def id(self, tok: str) -> int:
        i = self.stoi.get(tok)
        if i is None:
            if not self.unk_fallback or UNK not in self.stoi:
                raise VocabError(f"unknown token {tok!r}")
            i = self.stoi[UNK]
        return i

    def ids(self, toks: Iterable[str]) -> np.ndarray:
        return np.array([self.id(t) for t in toks], dtype=np.int64)


# ---------------------------------------------------------------- batches


@dataclass
class Prepared:
    """One tree with vocabulary ids resolved."""

    enc: TreeEncoding
    leaf_ids: np.ndarray
    chain_ids: np.ndarray  # label ids of every node's collapsed chain, flattened
    chain_node: np.ndarray  # node index for each entry of chain_ids


def prepare(tree: ParseTree | TreeEncoding, tok_vocab: Vocab, label_vocab: Vocab) -> Prepared:
    enc = tree if isinstance(tree, TreeEncoding) else encode_tree(tree)
    chain_ids, chain_node = [], []
    for i, chain in enumerate(enc.node_chains):
        for lab in chain:
            chain_ids.append(label_vocab.id(lab))
            chain_node.append(i)
    return Prepared(enc, tok_vocab.ids(enc.leaves), np.array(chain_ids, dtype=np.int64), np.array(chain_node, dtype=np.int64))


@dataclass
class Batch:
    enc: TreeEncoding  # forest of all trees, leaves and nodes concatenated
    leaf_ids: np.ndarray
    chain_ids: np.ndarray
    chain_node: np.ndarray
    leaf_groups: np.ndarray
    node_groups: np.ndarray
    positions: np.ndarray  # leaf position inside its own sentence
    roots: np.ndarray  # forest node index of each tree's root
    size: int

    @classmethod
    def pack(cls, items: Sequence[Prepared]) -> "Batch":
        if not items:
            raise DataError("empty batch")
        if len(items) == 1:
            p = items[0]
            e = p.enc
            roots = [e.root] if e.m else []
            return cls(e, p.leaf_ids, p.chain_ids, p.chain_node, np.zeros(e.n, dtype=np.int64),
                       np.zeros(e.m, dtype=np.int64), np.arange(e.n), np.array(roots, dtype=np.int64), 1)
        leaves, nodes, rules, nchains = [], [], [], []
        leaf_groups, node_groups, positions, roots = [], [], [], []
        chain_ids, chain_node = [], []
        n_off = m_off = 0
        for g, p in enumerate(items):
            e = p.enc
            leaves.extend(e.leaves)
            nodes.extend(e.nodes)
            nchains.extend(e.node_chains)
            for r in e.rules:
                rules.append(frozenset(Elem(x.kind, x.index + (m_off if x.kind == "N" else n_off)) for x in r))
            leaf_groups.append(np.full(e.n, g))
            node_groups.append(np.full(e.m, g))
            positions.append(np.arange(e.n))
            if e.m:
                roots.append(m_off + e.root)
            chain_ids.append(p.chain_ids)
            chain_node.append(p.chain_node + m_off)
            n_off += e.n
            m_off += e.m
        forest = TreeEncoding(tuple(leaves), tuple(nodes), tuple(rules), tuple(nchains))
        return cls(
            forest,
            np.concatenate([p.leaf_ids for p in items]),
            np.concatenate(chain_ids),
            np.concatenate(chain_node),
            np.concatenate(leaf_groups),
            np.concatenate(node_groups),
            np.concatenate(positions),
            np.array(roots, dtype=np.int64),
            len(items),
        )


# ---------------------------------------------------------------- model


_NORMAL_INIT = ("embed.", "hier.")


class TreeTransformer:
    """Tree-attention encoder (or plain Transformer encoder when ``tree_mode`` is off),
    an optional classification head and an optional tree2seq decoder."""

    def __init__(self, cfg: ModelConfig, tok_vocab: Vocab | None = None, label_vocab: Vocab | None = None,
                 target_vocab: Vocab | None = None):
        self.cfg = cfg.validate()
        self.tok_vocab = tok_vocab
        self.label_vocab = label_vocab
        self.target_vocab = target_vocab
        dtype = cfg.dtype
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in param_shapes(cfg).items():
            self.params[name] = Tensor(self._init(rng, name, shape).astype(dtype), requires_grad=True, name=name)
        self.dropout_rng = np.random.default_rng(cfg.seed + 1)
        self.training = False
        self._wire()

    def _init(self, rng, name: str, shape) -> np.ndarray:
        d = self.cfg.d
        last = name.rsplit(".", 1)[-1]
        if name.startswith(_NORMAL_INIT):
            return rng.normal(0.0, d ** -0.5, size=shape)
        if last.startswith("ln") and last.endswith("_g") or name.endswith("_ln.g"):
            return np.ones(shape)
        if last.startswith(("b", "ln")) or name.endswith("_ln.b") or name == "cls.b":
            return np.zeros(shape)
        bound = 1.0 / math.sqrt(shape[0])
        return rng.uniform(-bound, bound, size=shape)

    def _wire(self) -> None:
        cfg, P = self.cfg, self.params
        self.table = HierEmbedTable(P["hier.E_v"], P["hier.E_h"]) if "hier.E_v" in P else None

        def attn(prefix: str, tree: bool) -> AttentionParams:
            return AttentionParams(
                *(P[f"{prefix}.W_{k}"] for k in "QKVO"), *(P[f"{prefix}.b_{k}"] for k in "QKVO"),
                heads=cfg.heads, u=P.get(f"{prefix}.u") if tree else None,
                table=self.table if tree else None, dropout=cfg.attention_dropout,
            )

        def phi(prefix: str) -> PhiParams:
            names = ("ln1_g", "ln1_b", "W1", "b1", "W2", "b2", "ln2_g", "ln2_b")
            return PhiParams(*(P[f"{prefix}.{k}"] for k in names), dropout=cfg.dropout)

        self.enc_layers = [(attn(f"enc.{k}.attn", cfg.tree_mode), phi(f"enc.{k}.phi")) for k in range(cfg.layers_enc)]
        self.dec_layers = [
            (attn(f"dec.{k}.self", False), LayerNormParams(P[f"dec.{k}.self_ln.g"], P[f"dec.{k}.self_ln.b"]),
             attn(f"dec.{k}.cross", cfg.tree_mode), phi(f"dec.{k}.phi"))
            for k in range(cfg.layers_dec)
        ]

    # -- bookkeeping

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise DataError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise DataError(f"{k}: checkpoint shape {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=self.cfg.dtype)

    def train(self, mode: bool = True) -> "TreeTransformer":
        self.training = mode
        return self

    def eval(self) -> "TreeTransformer":
        return self.train(False)

    # -- embeddings

    def _embed_leaves(self, ids: np.ndarray, positions: np.ndarray, table: str = "embed.tokens") -> Tensor:
        cfg = self.cfg
        tok = scale(take(self.params[table], ids), math.sqrt(cfg.d))
        pos = take(sinusoidal_positions(int(positions.max()) + 1, cfg.d, cfg.dtype), positions)
        return dropout(add(tok, pos), cfg.dropout, self.dropout_rng, self.training)

    def _embed_nodes(self, batch: Batch) -> Tensor:
        table = self.params["embed.tokens" if self.cfg.tie_label_embeddings else "embed.labels"]
        per_label = take(table, batch.chain_ids)
        summed = scatter_rows(per_label, batch.chain_node, batch.enc.m)
        return dropout(scale(summed, math.sqrt(self.cfg.d)), self.cfg.dropout, self.dropout_rng, self.training)

    # -- encoder

    def prepare(self, tree: ParseTree | TreeEncoding) -> Prepared:
        if self.tok_vocab is None or (self.cfg.tree_mode and self.label_vocab is None):
            raise VocabError("model has no vocabulary attached")
        labels = self.tok_vocab if self.cfg.tie_label_embeddings else self.label_vocab
        return prepare(tree, self.tok_vocab, labels or self.tok_vocab)

    def encode(self, batch: Batch, return_weights: bool = False):
        """Final (L, N) states for a packed batch; N is None without tree mode."""
        cfg = self.cfg
        L = self._embed_leaves(batch.leaf_ids, batch.positions)
        weights = []
        if not cfg.tree_mode:
            allowed = batch.leaf_groups[:, None] == batch.leaf_groups[None, :] if batch.size > 1 else None
            for attn, phi in self.enc_layers:
                out, w = standard_attention(L, L, L, attn, allowed=allowed, rng=self.dropout_rng,
                                            training=self.training, return_weights=True)
                L = transformer_layer_phi(out, L, phi, self.dropout_rng, self.training)
                weights.append(w)
            return (L, None, weights) if return_weights else (L, None)
        N = self._embed_nodes(batch)
        groups = batch.leaf_groups if batch.size > 1 else None
        for attn, phi in self.enc_layers:
            L, N, w = encoder_tree_self_attention(
                L, N, batch.enc, attn, phi,
                use_hier_embeddings=cfg.use_hier_embeddings, use_subtree_mask=cfg.use_subtree_mask,
                leaf_groups=groups, rng=self.dropout_rng, training=self.training, return_weights=True,
            )
            weights.append(w)
        return (L, N, weights) if return_weights else (L, N)

    # -- classification

    def classify_batch(self, batch: Batch) -> Tensor:
        """(batch, classes) logits from each tree's root node, or mean-pooled leaves without tree mode."""
        if not self.cfg.num_classes:
            raise ConfigError("model has no classification head")
        L, N = self.encode(batch)
        if self.cfg.tree_mode:
            pooled = take(N, batch.roots)
        else:
            counts = np.bincount(batch.leaf_groups, minlength=batch.size).astype(self.cfg.dtype)
            summed = scatter_rows(L, batch.leaf_groups, batch.size)
            pooled = summed * Tensor((1.0 / counts)[:, None])
        return linear(pooled, self.params["cls.W"], self.params["cls.b"])

    def classify(self, document: ParseTree | TreeEncoding) -> Tensor:
        if isinstance(document, ParseTree) and document.is_leaf:
            raise DataError("empty document")
        logits = self.classify_batch(Batch.pack([self.prepare(document)]))
        return reshape(logits, (self.cfg.num_classes,))

    # -- tree2seq

    def _target_table(self) -> Tensor:
        return self.params["embed.tokens" if self.cfg.share_all_embeddings else "embed.target"]

    def decode_batch(self, batch: Batch, target_ids: Sequence[np.ndarray], return_weights: bool = False):
        """Logits (sum of prefix lengths, target vocab) for packed sources and target prefixes."""
        cfg = self.cfg
        if not cfg.layers_dec:
            raise ConfigError("model has no decoder")
        if len(target_ids) != batch.size:
            raise DataError(f"{len(target_ids)} target prefixes for {batch.size} sources")
        if any(len(t) == 0 for t in target_ids):
            raise DataError("target prefix must be nonempty (start with the begin token)")
        L, N = self.encode(batch)
        ids = np.concatenate(target_ids)
        tgroups = np.concatenate([np.full(len(t), g) for g, t in enumerate(target_ids)])
        tpos = np.concatenate([np.arange(len(t)) for t in target_ids])
        Y = self._embed_leaves(ids, tpos, "embed.target" if not cfg.share_all_embeddings else "embed.tokens")
        self_allowed = tgroups[:, None] == tgroups[None, :]
        if cfg.tree_mode and batch.enc.m:
            src_groups = np.concatenate([batch.node_groups, batch.leaf_groups])
        else:
            src_groups = batch.leaf_groups
        cross_allowed = tgroups[:, None] == src_groups[None, :] if batch.size > 1 else None
        weights = []
        for self_attn, self_ln, cross, phi in self.dec_layers:
            h = standard_attention(Y, Y, Y, self_attn, causal=True, allowed=self_allowed,
                                   rng=self.dropout_rng, training=self.training)
            h = self_ln(add(dropout(h, cfg.dropout, self.dropout_rng, self.training), Y))
            if cfg.tree_mode:
                c, w = decoder_cross_attention(h, L, N, batch.enc, cross, cfg.use_hier_embeddings,
                                               allowed=cross_allowed, rng=self.dropout_rng,
                                               training=self.training, return_weights=True)
            else:
                c, w = standard_attention(h, L, L, cross, allowed=cross_allowed, rng=self.dropout_rng,
                                          training=self.training, return_weights=True)
            weights.append(w)
            Y = transformer_layer_phi(c, h, phi, self.dropout_rng, self.training)
        out_w = self.params["out.W"] if not cfg.tie_output else swap_last(self._target_table())
        logits = matmul(Y, out_w)
        return (logits, weights) if return_weights else logits

    def seq2seq_forward(self, source: ParseTree | TreeEncoding, target_prefix: Sequence[str]) -> Tensor:
        if self.target_vocab is None and not self.cfg.share_all_embeddings:
            raise VocabError("model has no target vocabulary attached")
        vocab = self.tok_vocab if self.cfg.share_all_embeddings else self.target_vocab
        if not target_prefix:
            raise DataError("target prefix must be nonempty")
        ids = vocab.ids(target_prefix)
        return self.decode_batch(Batch.pack([self.prepare(source)]), [ids])


def build_encoder(cfg: ModelConfig, tok_vocab: Vocab | None = None, label_vocab: Vocab | None = None) -> TreeTransformer:
    return TreeTransformer(cfg, tok_vocab, label_vocab)


def classify(model: TreeTransformer, document: ParseTree | Sequence[ParseTree]) -> Tensor:
    """Logits for one document; several sentence trees are joined under a DOC root first."""
    if not isinstance(document, ParseTree):
        document = join_forest(document)
    return model.classify(document)


def seq2seq_forward(model: TreeTransformer, source: ParseTree, target_prefix: Sequence[str]) -> Tensor:
    return model.seq2seq_forward(source, target_prefix)


# ---------------------------------------------------------------- checkpoints


def to_checkpoint(model: TreeTransformer, step: int = 0, metrics: dict | None = None) -> ckpt_io.Checkpoint:
    config = {"model": model.cfg.to_dict()}
    for name in ("tok_vocab", "label_vocab", "target_vocab"):
        v = getattr(model, name)
        if v is not None:
            config[name] = v.itos
    return ckpt_io.Checkpoint(model.state_dict(), config, step, model.cfg.seed, metrics or {})


def from_checkpoint(ck: ckpt_io.Checkpoint) -> TreeTransformer:
    cfg = ModelConfig.from_dict(ck.config["model"])
    vocabs = {k: Vocab(ck.config[k]) for k in ("tok_vocab", "label_vocab", "target_vocab") if k in ck.config}
    model = TreeTransformer(cfg, **vocabs)
    model.load_state_dict(ck.params)
    return model
