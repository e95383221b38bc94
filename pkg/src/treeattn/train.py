"""Optimizer, classification training and evaluation, gradient checks and
attention-mass statistics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import opcount
from .attention import node_mass
from .checkpoint import Checkpoint
from .errors import ConfigError, DataError, NumericError
from .model import Batch, ModelConfig, Prepared, TreeTransformer, Vocab, from_checkpoint, to_checkpoint
from .tensor import Tape, cross_entropy, finite_diff_report
from .treebank import Example, ParseTree, encode_tree, parse_bracketed, random_tree, validate

log = logging.getLogger(__name__)


@dataclass
class TrainPlan:
    lr: float = 7e-4
    warmup: int = 8000
    max_updates: int = 15000
    batch_tokens: int = 2048
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    eval_every: int = 250
    seed: int = 0

    def validate(self) -> "TrainPlan":
        if self.lr < 0 or self.warmup < 0 or self.max_updates < 0 or self.batch_tokens < 1:
            raise ConfigError("train plan values must be non-negative (batch_tokens >= 1)")
        if self.warmup > self.max_updates and self.max_updates:
            raise ConfigError("warmup exceeds max_updates")
        return self

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``lr`` then inverse-square-root decay (step counts from 1)."""
        if self.warmup == 0:
            return self.lr
        if step <= self.warmup:
            return self.lr * step / self.warmup
        return self.lr * math.sqrt(self.warmup / step)


# Named recipes. "sst" and "sva" follow the desk-scale classification settings; "synthetic" is ours.
TRAIN_PRESETS = {
    "sst": dict(plan=dict(lr=7e-4, warmup=8000, max_updates=15000, batch_tokens=2048), model=dict(dropout=0.5)),
    "sva": dict(plan=dict(lr=0.01, warmup=20, max_updates=15000, batch_tokens=2048), model=dict(dropout=0.2)),
    "synthetic": dict(plan=dict(lr=1e-3, warmup=200, max_updates=5000, batch_tokens=256, eval_every=250),
                      model=dict(dropout=0.0)),
}


class Adam:
    def __init__(self, params, plan: TrainPlan):
        self.params = list(params)
        self.plan = plan
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict) -> float:
        self.t += 1
        plan = self.plan
        lr = plan.lr_at(self.t)
        b1, b2 = plan.beta1, plan.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in enumerate(self.params):
            g = grads[p]
            if plan.weight_decay:
                g = g + plan.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if lr:
                p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + plan.adam_eps)
        return lr


@dataclass
class RunReport:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    best_dev_accuracy: float = 0.0
    best_step: int = 0
    wall_time: float = 0.0
    op_counts: dict[str, int] = field(default_factory=dict)
    attention_mass: dict[str, float] = field(default_factory=dict)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for k, loss in enumerate(self.losses, 1):
            w.writerow([k, repr(loss)])
        return buf.getvalue()

    def records(self) -> str:
        """Line-delimited JSON: one record per evaluation plus a summary line."""
        lines = [json.dumps({"event": "eval", "step": s, "accuracy": a}) for s, a in self.evals]
        summary = {k: v for k, v in asdict(self).items() if k not in ("losses", "evals")}
        lines.append(json.dumps({"event": "summary", **summary}, sort_keys=True))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- data plumbing

SST_PHRASE_LABEL = "X"


def _sst_class(score: str, binary: bool) -> str | None:
    if not binary:
        return score
    return {"0": "neg", "1": "neg", "3": "pos", "4": "pos"}.get(score)


def read_sst(path, binary: bool = True, phrase_level: bool = False) -> list[Example]:
    """Stanford Sentiment Treebank lines, e.g. ``(3 (2 It) (4 (4 works) (2 .)))``.

    Every node in SST carries a sentiment score, so phrase labels are
    replaced by a constant to keep the answer out of the input. With
    ``phrase_level`` each labeled subtree also becomes its own example.
    ``binary`` maps 0/1 to ``neg`` and 3/4 to ``pos`` and drops neutral items.
    """

    def strip(t: ParseTree) -> ParseTree:
        if t.is_leaf:
            return t
        if len(t.children) == 1 and t.children[0].is_leaf:
            return t.children[0]
        return ParseTree(SST_PHRASE_LABEL, tuple(strip(c) for c in t.children))

    out = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                tree = parse_bracketed(line)
            except DataError as err:
                raise DataError(f"line {k}: {err}") from err
            subtrees = [tree]
            if phrase_level:
                stack = list(tree.children)
                while stack:
                    t = stack.pop()
                    if not t.is_leaf and not (len(t.children) == 1 and t.children[0].is_leaf):
                        subtrees.append(t)
                        stack.extend(t.children)
            for t in subtrees:
                label = _sst_class(t.label, binary)
                if label is not None:
                    out.append(Example(label, strip(t)))
    return out



def build_vocabs(examples: Sequence[Example]) -> tuple[Vocab, Vocab, Vocab]:
    encs = [encode_tree(e.tree) for e in examples]
    tok = Vocab.build(t for e in encs for t in e.leaves)
    lab = Vocab.build(x for e in encs for c in e.node_chains for x in c)
    classes = Vocab(sorted({e.label for e in examples if e.label is not None}), unk_fallback=False)
    return tok, lab, classes


def _prepare_all(model: TreeTransformer, examples: Sequence[Example], classes: Vocab):
    prepared, targets = [], []
    for k, ex in enumerate(examples):
        enc = encode_tree(ex.tree)
        diag = validate(enc)
        if not diag.ok:
            raise DataError(f"example {k}: invalid tree\n{diag}")
        if ex.label is None:
            raise DataError(f"example {k} has no label")
        if ex.label not in classes:
            raise DataError(f"example {k}: label {ex.label!r} outside the label space {classes.itos}")
        prepared.append(model.prepare(enc))
        targets.append(classes.id(ex.label))
    return prepared, np.array(targets, dtype=np.int64)


def _batches(prepared: Sequence[Prepared], batch_tokens: int, rng: np.random.Generator):
    order = rng.permutation(len(prepared))
    batch, tokens = [], 0
    for i in order:
        n = prepared[i].enc.n
        if batch and tokens + n > batch_tokens:
            yield batch
            batch, tokens = [], 0
        batch.append(int(i))
        tokens += n
    if batch:
        yield batch


def predict(model: TreeTransformer, prepared: Sequence[Prepared], chunk: int = 64) -> np.ndarray:
    model.eval()
    preds = []
    for s in range(0, len(prepared), chunk):
        logits = model.classify_batch(Batch.pack(prepared[s : s + chunk])).data
        preds.append(np.argmax(logits, axis=1))  # first maximum wins ties
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- training


def train_classifier(
    cfg: ModelConfig,
    plan: TrainPlan,
    train: Sequence[Example],
    dev: Sequence[Example],
    vocabs: tuple[Vocab, Vocab, Vocab] | None = None,
    on_eval: Callable[[int, float], None] | None = None,
) -> tuple[Checkpoint, RunReport]:
    """Train on root labels with Adam; returns the best-dev checkpoint and the run report."""
    plan.validate()
    tok, lab, classes = vocabs or build_vocabs(train)
    cfg = cfg.replace(token_vocab=len(tok), label_vocab=len(lab), num_classes=len(classes))
    model = TreeTransformer(cfg, tok, lab)
    model.class_vocab = classes
    train_p, train_y = _prepare_all(model, train, classes)
    dev_p, dev_y = _prepare_all(model, dev, classes)
    opt = Adam(model.parameters(), plan)
    rng = np.random.default_rng(plan.seed)
    report = RunReport()
    best_state = model.state_dict()
    best_acc = -1.0
    start = time.perf_counter()
    step = 0

    def evaluate_dev():
        nonlocal best_acc, best_state
        acc = float(np.mean(predict(model, dev_p) == dev_y)) if len(dev_p) else 0.0
        report.evals.append((step, acc))
        if acc > best_acc:
            best_acc, best_state = acc, model.state_dict()
            report.best_step = step
        if on_eval:
            on_eval(step, acc)
        log.info("step %d dev accuracy %.4f", step, acc)

    while step < plan.max_updates:
        for idx in _batches(train_p, plan.batch_tokens, rng):
            if step >= plan.max_updates:
                break
            model.train()
            batch = Batch.pack([train_p[i] for i in idx])
            with Tape() as tape:
                loss = cross_entropy(model.classify_batch(batch), train_y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss diverged to {value} at update {step + 1} (lr {plan.lr_at(step + 1):.3g})")
            grads = tape.backward(loss, model.parameters())
            opt.step(grads)
            step += 1
            report.losses.append(value)
            if step % plan.eval_every == 0:
                evaluate_dev()
    if not report.evals or report.evals[-1][0] != step:
        evaluate_dev()
    report.best_dev_accuracy = max(best_acc, 0.0)
    report.wall_time = time.perf_counter() - start
    model.load_state_dict(best_state)
    if dev_p:
        model.eval()
        with opcount.counting() as counter:
            model.classify_batch(Batch.pack(dev_p[:64]))
        report.op_counts = dict(sorted(counter.items()))
        if cfg.tree_mode:
            st = attention_mass_stats(model, [ex.tree for ex in dev[:64]])
            report.attention_mass = {k: getattr(st, k) for k in ("node_mass", "leaf_mass", "node_count_share", "leaf_count_share")}
    ck = to_checkpoint(model, report.best_step, {"dev_accuracy": report.best_dev_accuracy})
    ck.config["classes"] = classes.itos
    return ck, report


def load_classifier(ck: Checkpoint) -> tuple[TreeTransformer, Vocab]:
    model = from_checkpoint(ck)
    classes = Vocab(ck.config.get("classes", []), unk_fallback=False)
    model.class_vocab = classes
    return model, classes


def evaluate_accuracy(ck: Checkpoint | TreeTransformer, corpus: Sequence[Example]) -> float:
    """Fraction of examples whose argmax class (lowest index on ties) matches the label."""
    if isinstance(ck, Checkpoint):
        model, classes = load_classifier(ck)
    else:
        model, classes = ck, ck.class_vocab
    prepared, y = _prepare_all(model, corpus, classes)
    if not len(prepared):
        return 0.0
    return float(np.mean(predict(model, prepared) == y))


# ---------------------------------------------------------------- gradient checks


@dataclass
class GradCheckResult:
    max_error: float
    per_param: dict[str, float]
    worst_param: str


def grad_check_model(
    cfg: ModelConfig,
    tree: ParseTree | None = None,
    seq2seq: bool = False,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    fail_above: float | None = 1e-4,
) -> GradCheckResult:
    """Central-difference check of every parameter group on a classification
    (or, with ``seq2seq``, a next-token) loss over one tree."""
    if cfg.d > 16:
        raise ConfigError("grad_check_model is meant for tiny configs (d <= 16)")
    rng = np.random.default_rng(seed)
    if tree is None:
        tree = random_tree(rng, 3 if seq2seq else 5, max_arity=3)
    enc = encode_tree(tree)
    tok = Vocab.build(enc.leaves)
    lab = Vocab.build(x for c in enc.node_chains for x in c)
    cfg = cfg.replace(
        token_vocab=len(tok), label_vocab=len(lab), dropout=0.0, attention_dropout=0.0, float_width=64,
        layers_dec=max(cfg.layers_dec, 1) if seq2seq else 0, target_vocab=len(tok) if seq2seq else 0,
        num_classes=0 if seq2seq else max(cfg.num_classes, 2),
    )
    model = TreeTransformer(cfg, tok, lab, tok if seq2seq else None)
    # move LN/bias parameters off their symmetric init so every path carries gradient
    for p in model.parameters():
        p.data = p.data + rng.normal(0, 0.1, size=p.shape)
    batch = Batch.pack([model.prepare(enc)])
    if seq2seq:
        prefix = tok.ids(["<s>"] + list(enc.leaves[:1]))
        gold = tok.ids(list(enc.leaves[:2]))

        def f():
            return cross_entropy(model.decode_batch(batch, [prefix]), gold)
    else:

        def f():
            return cross_entropy(model.classify_batch(batch), [1])

    report = finite_diff_report(f, model.parameters(), eps=eps, max_coords=max_coords, seed=seed)
    worst = max(report, key=report.get)
    result = GradCheckResult(report[worst], report, worst)
    if fail_above is not None and result.max_error > fail_above:
        raise NumericError(f"gradient check failed: {worst} has relative error {result.max_error:.3g}")
    return result


# ---------------------------------------------------------------- attention statistics


@dataclass
class MassStats:
    node_mass: float
    leaf_mass: float
    node_count_share: float
    leaf_count_share: float
    queries: int


def attention_mass_stats(model: TreeTransformer, corpus: Sequence[Example | ParseTree], chunk: int = 32,
                         targets: Sequence[Sequence[str]] | None = None) -> MassStats:
    """Average attention mass on node keys vs leaf keys.

    Encoder-only models average over node queries of every encoder layer;
    with ``targets`` and a decoder, over target queries of every
    cross-attention layer. Count shares are m/(m+n) and n/(m+n) averaged
    over trees.
    """
    if not model.cfg.tree_mode:
        raise ConfigError("attention statistics need a tree-mode model")
    model.eval()
    trees = [ex.tree if isinstance(ex, Example) else ex for ex in corpus]
    total_node = total_leaf = 0.0
    count = 0
    shares = []
    for s in range(0, len(trees), chunk):
        part = [model.prepare(t) for t in trees[s : s + chunk]]
        batch = Batch.pack(part)
        m = batch.enc.m
        for p in part:
            shares.append(p.enc.m / (p.enc.m + p.enc.n))
        if targets is not None:
            vocab = model.tok_vocab if model.cfg.share_all_embeddings else model.target_vocab
            ids = [vocab.ids(t) for t in targets[s : s + chunk]]
            _, weights = model.decode_batch(batch, ids, return_weights=True)
            rows = [w.data for w in weights]  # (h, t, m+n)
        else:
            _, _, weights = model.encode(batch, return_weights=True)
            rows = [w.data[:, :m, :] for w in weights]
        for w in rows:
            nm = node_mass(w, m)
            lm = w[..., m:].sum(axis=-1)
            total_node += float(nm.sum())
            total_leaf += float(lm.sum())
            count += nm.size
    if count == 0:
        return MassStats(0.0, 0.0, 0.0, 0.0, 0)
    node_share = float(np.mean(shares))
    return MassStats(total_node / count, total_leaf / count, node_share, 1.0 - node_share, count)
