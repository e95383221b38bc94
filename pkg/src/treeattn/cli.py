"""``treeattn`` command-line entry point.

Exit codes: 0 success, 1 usage, 2 data, 3 numeric, 4 acceptance failure.
Every run writes its resolved configuration to stderr as one JSON line
starting with ``# config``; primary results go to stdout or ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import oracles
from .accumulation import HierEmbedTable, build_hier_embeddings, interpolate, upward_cumavg, weighted_aggregate
from .bench import bench_accumulation
from .bpe import BPE
from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .errors import AcceptanceFailure, ConfigError, DataError, TreeAttnError, UsageError
from .model import PRESETS, ModelConfig, count_parameters, dump_config, load_config, preset
from .synth import make_synthetic_dataset
from .tensor import Tensor
from .train import (
    TRAIN_PRESETS,
    TrainPlan,
    attention_mass_stats,
    evaluate_accuracy,
    grad_check_model,
    load_classifier,
    read_sst,
    train_classifier,
)
from .treebank import (
    Example,
    apply_bpe_split,
    decode_tree,
    encode_tree,
    format_corpus_line,
    random_tree,
    read_corpus,
    validate,
)


PLAN_KEYS = {f for f in TrainPlan.__dataclass_fields__}
MODEL_KEYS = {f for f in ModelConfig.__dataclass_fields__}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _echo(args: argparse.Namespace, **extra) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    resolved.update(extra)
    print("# config " + json.dumps(resolved, sort_keys=True, default=str), file=sys.stderr)


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read(path: str, sst: bool = False, phrase_level: bool = False):
    try:
        if sst:
            return read_sst(path, phrase_level=phrase_level)
        return read_corpus(path)
    except OSError as err:
        raise DataError(f"cannot read {path}: {err.strerror}") from err


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise UsageError(f"--set expects KEY=VALUE, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args) -> tuple[ModelConfig, TrainPlan]:
    """Layering: model preset < train preset < config file < --set < explicit flags."""
    values: dict[str, object] = dict(PRESETS[args.model_preset]) if args.model_preset else {}
    plan_values: dict[str, object] = {}
    if getattr(args, "recipe", None):
        values.update(TRAIN_PRESETS[args.recipe]["model"])
        plan_values.update(TRAIN_PRESETS[args.recipe]["plan"])
    layered = {}
    if args.config:
        try:
            layered.update(load_config(args.config))
        except OSError as err:
            raise ConfigError(f"cannot read config {args.config}: {err.strerror}") from err
    layered.update(_overrides(args.set))
    for k, v in layered.items():
        if k in PLAN_KEYS and k != "seed":
            plan_values[k] = v
        elif k in MODEL_KEYS:
            values[k] = v
        else:
            raise ConfigError(f"unknown config key {k!r}")
    if args.seed is not None:
        values["seed"] = plan_values["seed"] = args.seed
    for flag, key in (("no_tree", "tree_mode"), ("no_hier_emb", "use_hier_embeddings"), ("no_subtree_mask", "use_subtree_mask")):
        if getattr(args, flag, False):
            values[key] = False
    cfg = ModelConfig.from_dict(values)
    plan_fields = TrainPlan.__dataclass_fields__
    plan = TrainPlan(**{k: type(getattr(TrainPlan(), k))(v) for k, v in plan_values.items() if k in plan_fields})
    return cfg, plan


# ---------------------------------------------------------------- subcommands


def cmd_tree_roundtrip(args) -> int:
    _echo(args)
    corpus = _read(args.input)
    bad = 0
    for k, ex in enumerate(corpus, 1):
        enc = encode_tree(ex.tree, drop_preterminals=not args.keep_preterminals)
        if decode_tree(enc) != ex.tree:
            bad += 1
            print(f"line {k}: round-trip mismatch", file=sys.stderr)
    print(f"trees={len(corpus)} mismatches={bad}")
    if bad:
        raise DataError(f"{bad} trees failed the round trip")
    return 0


def cmd_tree_validate(args) -> int:
    _echo(args)
    corpus = _read(args.input)
    bad = 0
    for k, ex in enumerate(corpus, 1):
        enc = encode_tree(ex.tree)
        diag = validate(enc)
        if not diag.ok:
            bad += 1
            print(f"line {k}:\n{diag}", file=sys.stderr)
        elif args.verbose:
            print(f"line {k}: n={enc.n} m={enc.m} ok")
    print(f"trees={len(corpus)} invalid={bad}")
    if bad:
        raise DataError(f"{bad} invalid trees")
    return 0


def cmd_bpe_split(args) -> int:
    _echo(args)
    try:
        splitter = BPE.load(args.bpe_codes)
    except OSError as err:
        raise DataError(f"cannot read codes {args.bpe_codes}: {err.strerror}") from err
    corpus = _read(args.input)
    lines = [format_corpus_line(Example(ex.label, apply_bpe_split(ex.tree, splitter))) + "\n" for ex in corpus]
    _write("".join(lines), args.out)
    return 0


def cmd_oracle_check(args) -> int:
    _echo(args)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trees):
        enc = encode_tree(random_tree(rng, int(rng.integers(1, args.max_leaves + 1))))
        d = args.d
        Lx, Nx = rng.normal(size=(enc.n, d)), rng.normal(size=(enc.m, d))
        w = rng.normal(size=enc.n)
        table = HierEmbedTable(*(Tensor(rng.normal(size=(args.hier_size, d // 2))) for _ in range(2)))
        S = interpolate(Tensor(Lx), Tensor(Nx), enc)
        pairs = [(S.values.data, oracles.interpolate(Lx, Nx, enc))]
        if enc.m:
            E = build_hier_embeddings(enc, table).data
            pairs.append((E, oracles.hier_embeddings(enc, table.E_v.data, table.E_h.data)))
            shat = upward_cumavg(S, enc).data
            pairs.append((shat, oracles.upward_cumavg(S.values.data, enc)))
            pairs.append((weighted_aggregate(Tensor(shat), Tensor(w), enc).data, oracles.weighted_aggregate(shat, w, enc)))
        for got, ref in pairs:
            worst = max(worst, float(np.max(np.abs(got - ref), initial=0.0)))
    print(f"trees={args.trees} max_abs_diff={worst:.3e} tolerance={args.tol:.0e}")
    if worst >= args.tol:
        raise AcceptanceFailure(f"kernels disagree with the oracles by {worst:.3e}")
    return 0


def cmd_grad_check(args) -> int:
    _echo(args)
    cfg = ModelConfig(d=args.d, d_ffn=2 * args.d, layers_enc=args.layers, heads=args.heads, hier_size=8,
                      use_subtree_mask=not args.no_subtree_mask, use_hier_embeddings=not args.no_hier_emb,
                      seed=args.seed)
    tree = random_tree(np.random.default_rng(args.seed), args.leaves, max_arity=3)
    res = grad_check_model(cfg.validate(), tree, seq2seq=args.seq2seq, seed=args.seed, max_coords=args.max_coords,
                           fail_above=args.tol)
    if args.verbose:
        for name, err in sorted(res.per_param.items()):
            print(f"{name:<24} {err:.3e}")
    print(f"max_rel_error={res.max_error:.3e} worst={res.worst_param}")
    return 0


def cmd_train(args) -> int:
    cfg, plan = _resolve(args)
    _echo(args, model=cfg.to_dict(), plan=vars(plan))
    if args.synthetic:
        train = make_synthetic_dataset(plan.seed, args.synthetic, depth=args.depth)
        dev = make_synthetic_dataset(plan.seed + 1, max(args.synthetic // 8, 1), depth=args.depth)
    else:
        if not (args.train and args.dev):
            raise UsageError("train needs --train and --dev (or --synthetic SIZE)")
        train = _read(args.train, args.sst, args.phrase_level)
        dev = _read(args.dev, args.sst)
    ck, report = train_classifier(cfg, plan, train, dev)
    ckpt_io.save(ck, args.out)
    if args.report:
        Path(f"{args.report}.csv").write_text(report.loss_csv(), encoding="utf-8")
        Path(f"{args.report}.jsonl").write_text(report.records(), encoding="utf-8")
    print(f"best_dev_accuracy={report.best_dev_accuracy:.4f} best_step={report.best_step} updates={len(report.losses)}")
    return 0


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return ckpt_io.load(path)
    except OSError as err:
        raise DataError(f"cannot read checkpoint {path}: {err.strerror}") from err


def cmd_eval(args) -> int:
    _echo(args)
    acc = evaluate_accuracy(_load_ckpt(args.ckpt), _read(args.input, args.sst))
    print(f"accuracy={acc:.4f}")
    return 0


def cmd_attn_stats(args) -> int:
    _echo(args)
    model, _ = load_classifier(_load_ckpt(args.ckpt))
    s = attention_mass_stats(model, _read(args.input, args.sst))
    print(f"node_mass={s.node_mass:.4f} leaf_mass={s.leaf_mass:.4f} "
          f"node_count_share={s.node_count_share:.4f} leaf_count_share={s.leaf_count_share:.4f} queries={s.queries}")
    return 0


def cmd_bench(args) -> int:
    _echo(args)
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x]
    except ValueError:
        raise UsageError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    if lengths != sorted(lengths):
        raise UsageError("--lengths must be ascending")
    report = bench_accumulation(lengths, args.repeats, d=args.d, d_ffn=args.d_ffn, heads=args.heads,
                                include_layer=not args.accumulate_only)
    _write(report.to_csv(timings=not args.no_timings), args.out)
    for n, r in report.ratios():
        print(f"# accumulate ops ratio from n={n}: {r:.4f}", file=sys.stderr)
    if args.check:
        acc = [r for _, r in report.ratios()]
        layer = [r for _, r in report.ratios("layer_ops")] if not args.accumulate_only else []
        bad = [r for r in acc if not 2.0 <= r <= 2.5] + [r for r in layer if not 3.5 <= r <= 4.5]
        if bad or report.max_residual >= 0.2:
            raise AcceptanceFailure(f"complexity check failed: ratios {bad}, residual {report.max_residual:.3f}")
    return 0


def cmd_count_params(args) -> int:
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfg = preset(args.preset, **_coerced_overrides(args.set))
    _echo(args, model=cfg.to_dict())
    pc = count_parameters(cfg)
    print("\n".join(pc.lines()))
    return 0


def _coerced_overrides(pairs) -> dict:
    raw = _overrides(pairs)
    bad = set(raw) - MODEL_KEYS
    if bad:
        raise ConfigError(f"unknown model keys {sorted(bad)}")
    typed = ModelConfig.from_dict(raw)
    return {k: getattr(typed, k) for k in raw}


def cmd_make_synth(args) -> int:
    _echo(args)
    if args.size < 1:
        raise UsageError("--size must be >= 1")
    data = make_synthetic_dataset(args.seed, args.size, depth=args.depth)
    _write("".join(format_corpus_line(ex) + "\n" for ex in data), args.out)
    return 0


def cmd_dump_config(args) -> int:
    cfg, plan = _resolve(args)
    _write(dump_config({**cfg.to_dict(), **{k: v for k, v in vars(plan).items() if k != "seed"}}), args.out)
    return 0


# ---------------------------------------------------------------- parser


def _model_flags(p: argparse.ArgumentParser, recipe: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--model-preset", choices=sorted(PRESETS), default="tiny-tree", help="starting model config")
    if recipe:
        p.add_argument("--recipe", choices=sorted(TRAIN_PRESETS), help="named training recipe")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--no-tree", action="store_true", help="sequence baseline (tree_mode off)")
    p.add_argument("--no-hier-emb", action="store_true", help="disable hierarchical embeddings")
    p.add_argument("--no-subtree-mask", action="store_true", help="disable subtree masking")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treeattn", description="Tree-structured attention with hierarchical accumulation.")
    p.add_argument("--log-level", default="WARNING", help="logging level")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=None if name in ("train", "dump-config") else 0,
                        help="random seed")
        return sp

    sp = add("tree-roundtrip", cmd_tree_roundtrip, "encode then decode every tree and compare")
    sp.add_argument("--in", dest="input", required=True, help="corpus file")
    sp.add_argument("--keep-preterminals", action="store_true", help="keep part-of-speech nodes as phrase nodes")

    sp = add("tree-validate", cmd_tree_validate, "validate the encoding of every tree")
    sp.add_argument("--in", dest="input", required=True, help="corpus file")
    sp.add_argument("-v", "--verbose", action="store_true", help="print one line per tree")

    sp = add("bpe-split", cmd_bpe_split, "split corpus words into BPE subtrees")
    sp.add_argument("--in", dest="input", required=True, help="corpus file")
    sp.add_argument("--bpe-codes", required=True, help="merge list, one merge per line")
    sp.add_argument("--out", help="output corpus (default stdout)")

    sp = add("oracle-check", cmd_oracle_check, "compare accumulation kernels with brute-force oracles")
    sp.add_argument("--trees", type=int, default=200, help="number of random trees")
    sp.add_argument("--max-leaves", type=int, default=12, help="largest tree size")
    sp.add_argument("--d", type=int, default=8, help="vector width")
    sp.add_argument("--hier-size", type=int, default=6, help="hierarchical table size")
    sp.add_argument("--tol", type=float, default=1e-12, help="max abs difference allowed")

    sp = add("grad-check", cmd_grad_check, "finite-difference gradient check of a tiny model")
    sp.add_argument("--d", type=int, default=8, help="model width (<= 16)")
    sp.add_argument("--leaves", type=int, default=5, help="leaves in the random fixture tree")
    sp.add_argument("--heads", type=int, default=2, help="attention heads")
    sp.add_argument("--layers", type=int, default=1, help="encoder layers")
    sp.add_argument("--seq2seq", action="store_true", help="check a next-token loss through a decoder")
    sp.add_argument("--no-subtree-mask", action="store_true", help="disable subtree masking")
    sp.add_argument("--no-hier-emb", action="store_true", help="disable hierarchical embeddings")
    sp.add_argument("--max-coords", type=int, default=None, help="probe at most this many entries per parameter")
    sp.add_argument("--tol", type=float, default=1e-4, help="fail above this relative error")
    sp.add_argument("-v", "--verbose", action="store_true", help="print per-parameter errors")

    sp = add("train", cmd_train, "train a tree classifier")
    _model_flags(sp)
    sp.add_argument("--train", help="training corpus (label<TAB>tree)")
    sp.add_argument("--dev", help="development corpus")
    sp.add_argument("--sst", action="store_true", help="read corpora in sentiment-treebank format")
    sp.add_argument("--phrase-level", action="store_true", help="train on every labeled phrase (with --sst)")
    sp.add_argument("--synthetic", type=int, metavar="SIZE", help="train on a generated expression corpus")
    sp.add_argument("--depth", type=int, default=3, help="expression depth for --synthetic")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--report", metavar="PREFIX", help="write PREFIX.csv (loss) and PREFIX.jsonl (records)")

    sp = add("eval", cmd_eval, "accuracy of a checkpoint on a labeled corpus")
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--in", dest="input", required=True, help="labeled corpus")
    sp.add_argument("--sst", action="store_true", help="sentiment-treebank format")

    sp = add("attn-stats", cmd_attn_stats, "attention mass on nodes versus leaves")
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--in", dest="input", required=True, help="corpus")
    sp.add_argument("--sst", action="store_true", help="sentiment-treebank format")

    sp = add("bench", cmd_bench, "operation counts and timings on balanced trees")
    sp.add_argument("--lengths", default="128,256,512,1024", help="comma-separated ascending leaf counts")
    sp.add_argument("--repeats", type=int, default=1, help="timed repetitions (0 gives an empty report)")
    sp.add_argument("--d", type=int, default=16, help="vector width")
    sp.add_argument("--d-ffn", type=int, default=32, help="feed-forward width")
    sp.add_argument("--heads", type=int, default=2, help="attention heads")
    sp.add_argument("--accumulate-only", action="store_true", help="skip the full-layer measurement")
    sp.add_argument("--no-timings", action="store_true", help="omit wall-time columns")
    sp.add_argument("--check", action="store_true", help="exit 4 if the growth ratios are out of bounds")
    sp.add_argument("--out", help="CSV path (default stdout)")

    sp = add("count-params", cmd_count_params, "itemized parameter counts and tree overhead")
    sp.add_argument("--preset", default="base-tree", help=f"one of {', '.join(sorted(PRESETS))}")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    sp = add("make-synth", cmd_make_synth, "generate the synthetic expression corpus")
    sp.add_argument("--size", type=int, default=1000, help="number of examples")
    sp.add_argument("--depth", type=int, default=3, help="expression depth")
    sp.add_argument("--out", help="corpus path (default stdout)")

    sp = add("dump-config", cmd_dump_config, "print the resolved config file")
    _model_flags(sp)
    sp.add_argument("--out", help="config path (default stdout)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except TreeAttnError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except (ValueError, TypeError) as err:  # bad flag values surfacing from config coercion
        print(f"error: {err}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
