"""Command-line interface.

Subcommands: convert, pretrain, train, eval, predict, gradcheck, report.
Exit codes are stable: 0 success, 1 runtime failure, 2 bad input or
configuration (including argparse usage errors)."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T
from . import training as TR
from .errors import CheckpointError, ConfigError, NtrrError, ParseError
from .gradcheck import TOLERANCE, gradcheck_model
from .tagging import Entity, entity_prf, scan_entities


def _load_configs(args) -> tuple[M.ModelConfig, TR.TrainConfig]:
    if getattr(args, "config", None):
        mc, tc = D.load_run_config(args.config)
    else:
        mc, tc = M.ModelConfig(), TR.TrainConfig()
    mc, tc = D.apply_overrides(mc, tc, getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        tc = replace(tc, seed=args.seed)
    return mc, tc


def _tee_log(path: str):
    fh = open(path, "w", encoding="utf-8")

    def emit(line: str):
        print(line)
        fh.write(line + "\n")
        fh.flush()

    return emit, fh


def _print_prf(precision: float, recall: float, f1: float,
               per_type: dict | None = None) -> None:
    print("Precise (%)\tRecall (%)\tF1 Score (%)")
    print(f"{precision * 100:.2f}\t{recall * 100:.2f}\t{f1 * 100:.2f}")
    if per_type:
        for etype, (p, r, f) in sorted(per_type.items()):
            print(f"{etype}\t{p * 100:.2f}\t{r * 100:.2f}\t{f * 100:.2f}")


def cmd_convert(args) -> int:
    corpus = D.read_conll(args.infile, scheme=args.src_scheme)
    if args.dst_scheme != "bmes":
        raise ConfigError(f"only bmes output is supported, got '{args.dst_scheme}'")
    for warning in corpus.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    D.write_conll(args.outfile, corpus.sentences)
    print(f"wrote {len(corpus.sentences)} sentences to {args.outfile}; "
          f"{corpus.repair_count} repairs")
    return 0


def cmd_train(args) -> int:
    mc, tc = _load_configs(args)
    train_corpus = D.read_conll(args.train, scheme=args.scheme)
    dev_corpus = D.read_conll(args.dev, scheme=args.scheme)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "model.ckpt")
    vocab = None
    init_arrays = None
    if args.init:
        ckpt = D.load_checkpoint(args.init)
        init_arrays = ckpt.params
        vocab_path = D.sibling_vocab_path(args.init)
        if not os.path.exists(vocab_path):
            raise ConfigError(f"warm start needs the pretraining vocabulary at {vocab_path}")
        vocab = D.load_vocab(vocab_path)
    emit, fh = _tee_log(os.path.join(args.out, "train.log"))
    try:
        report = TR.train(train_corpus, dev_corpus, mc, tc, log=emit,
                          checkpoint_path=ckpt_path, vocab=vocab,
                          init_params_from=init_arrays)
    finally:
        fh.close()
    print(f"best dev F1 {report.best_f1:.4f} at epoch {report.best_epoch}; "
          f"checkpoint {ckpt_path}")
    return 0


def cmd_pretrain(args) -> int:
    mc, tc = _load_configs(args)
    corpus = D.read_conll(args.train, scheme=args.scheme)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "pretrain.ckpt")
    emit, fh = _tee_log(os.path.join(args.out, "pretrain.log"))
    try:
        report = TR.pretrain(corpus, mc, tc, log=emit, checkpoint_path=ckpt_path)
    finally:
        fh.close()
    print(f"pretraining finished: {report.history[0].steps} steps, "
          f"mean loss {report.history[0].mean_total:.4f}; checkpoint {ckpt_path}")
    return 0


def _load_model(args) -> tuple[M.ModelConfig, dict, D.Vocab]:
    ckpt = D.load_checkpoint(args.ckpt)
    vocab_path = args.vocab or D.sibling_vocab_path(args.ckpt)
    if not os.path.exists(vocab_path):
        raise ConfigError(f"no vocabulary at {vocab_path}; pass --vocab")
    vocab = D.load_vocab(vocab_path)
    if ckpt.model_config.vocab_size != len(vocab):
        raise ConfigError(f"checkpoint expects vocab of {ckpt.model_config.vocab_size}, "
                          f"file has {len(vocab)}")
    return ckpt.model_config, D.params_from_checkpoint(ckpt), vocab


def cmd_eval(args) -> int:
    if bool(args.ckpt) == bool(args.pred):
        raise ConfigError("pass exactly one of --ckpt (model eval) or --pred (file eval)")
    if args.ckpt:
        mc, params, vocab = _load_model(args)
        corpus = D.read_conll(args.data, scheme=args.scheme)
        extra = set(corpus.label_set.entity_types) - set(mc.entity_types)
        if extra:
            raise ConfigError(f"dataset entity types {sorted(extra)} are outside the "
                              f"checkpoint label set {list(mc.entity_types)}")
        res = TR.evaluate(corpus, vocab, params, mc)
        _print_prf(res.precision, res.recall, res.f1, res.per_type)
        print(f"repairs\t{res.repair_count}")
        return 0
    pred = D.read_conll(args.pred, scheme=args.scheme)
    gold = D.read_conll(args.data, scheme=args.scheme)
    if len(pred.sentences) != len(gold.sentences):
        raise ParseError(f"{args.pred}: {len(pred.sentences)} sentences but gold has "
                         f"{len(gold.sentences)}")
    pred_entities, gold_entities = [], []
    base = 0
    for (ptoks, ptags), (gtoks, gtags) in zip(pred.sentences, gold.sentences):
        if len(ptoks) != len(gtoks):
            raise ParseError(f"{args.pred}: sentence length mismatch against gold")
        pred_entities.extend(Entity(e.start + base, e.end + base, e.etype)
                             for e in scan_entities(ptags)[0])
        gold_entities.extend(Entity(e.start + base, e.end + base, e.etype)
                             for e in scan_entities(gtags)[0])
        base += len(gtoks)
    scores = entity_prf(pred_entities, gold_entities)
    _print_prf(scores.precision, scores.recall, scores.f1, scores.per_type)
    return 0


def cmd_predict(args) -> int:
    mc, params, vocab = _load_model(args)
    label_set = mc.label_set
    try:
        with open(args.infile, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
    except UnicodeDecodeError as exc:
        raise ParseError(f"{args.infile}: not valid UTF-8 at byte {exc.start}") from None
    sentences = []
    with T.no_grad():
        for line in lines:
            if mc.token_mode == "char":
                tokens = [ch for ch in line if not ch.isspace()]
            else:
                tokens = line.split()
            if not tokens:
                continue
            ids = vocab.encode(tokens)[None, :]
            lp, _ = M.forward_ner(ids, None, mc, params, None, False)
            seq = M.decode(lp.data[0], label_set, mc.decode_mode)
            sentences.append((tokens, label_set.decode(seq.tags)))
    if not sentences:
        raise ParseError(f"{args.infile}: no sentences found")
    D.write_conll(args.outfile, sentences)
    print(f"wrote {len(sentences)} sentences to {args.outfile}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.scale != "tiny":
        raise ConfigError(f"unknown scale '{args.scale}'")
    modes = ("absolute", "relative") if args.mode == "both" else (args.mode,)
    worst = 0.0
    for mode in modes:
        errors = gradcheck_model(mode, seed=args.seed)
        for name in sorted(errors):
            print(f"{mode}\t{name}\t{errors[name]:.3e}")
        mode_worst = max(errors.values())
        worst = max(worst, mode_worst)
        print(f"{mode}\tmax\t{mode_worst:.3e}")
    ok = worst <= TOLERANCE
    print(f"gradcheck {'passed' if ok else 'FAILED'}: "
          f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if ok else 1


def cmd_report(args) -> int:
    try:
        with open(args.log, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"{args.log}: cannot read: {exc}") from None
    steps = []  # (step, lr, ce, kl, total)
    epochs = []  # (epoch, p, r, f1, first_step_index)
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            if parts[0] == "epoch" and len(parts) == 5:
                epochs.append((int(parts[1]), float(parts[2]), float(parts[3]),
                               float(parts[4]), len(steps)))
            elif len(parts) == 5:
                steps.append(tuple(float(x) for x in parts))
            else:
                raise ValueError
        except ValueError:
            raise ParseError(f"{args.log}: line {lineno}: not a training log line") from None
    if not steps:
        raise ParseError(f"{args.log}: no step lines found")
    print("epoch\tsteps\tmean_ce\tmean_kl\tmean_total\tP\tR\tF1")
    prev = 0
    for epoch, p, r, f1, upto in epochs:
        chunk = steps[prev:upto] or steps[prev:prev + 1]
        prev = upto
        ce = sum(s[2] for s in chunk) / len(chunk)
        kl = sum(s[3] for s in chunk) / len(chunk)
        total = sum(s[4] for s in chunk) / len(chunk)
        print(f"{epoch}\t{len(chunk)}\t{ce:.4f}\t{kl:.4f}\t{total:.4f}"
              f"\t{p:.4f}\t{r:.4f}\t{f1:.4f}")
    totals = [s[4] for s in steps]
    print("\nloss curve (total per step, binned):")
    print(_sketch(totals, width=60, height=8))
    return 0


def _sketch(values, width: int = 60, height: int = 8) -> str:
    """Plain-text curve: bins averaged to `width` columns, `height` rows."""
    if len(values) > width:
        edges = np.linspace(0, len(values), width + 1).astype(int)
        cols = [float(np.mean(values[a:b])) for a, b in zip(edges, edges[1:]) if b > a]
    else:
        cols = [float(v) for v in values]
    lo, hi = min(cols), max(cols)
    span = (hi - lo) or 1.0
    rows = []
    for r in range(height, 0, -1):
        cut = lo + span * (r - 0.5) / height
        line = "".join("*" if v >= cut else " " for v in cols)
        rows.append(line.rstrip() or "")
    rows.append("-" * len(cols))
    rows.append(f"min {lo:.4f}  max {hi:.4f}  steps {len(values)}")
    return "\n".join(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ntrr",
        description="sequence labeling lab: permutation-LM pretraining, "
                    "relative-position attention, R-Drop fine-tuning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run config file (key = value lines)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key; repeatable")
            p.add_argument("--seed", type=int, help="override the master seed")

    p = sub.add_parser("convert", help="convert a tagged corpus between schemes")
    p.add_argument("infile")
    p.add_argument("outfile")
    p.add_argument("--from", dest="src_scheme", choices=("bio", "bmes"), required=True)
    p.add_argument("--to", dest="dst_scheme", choices=("bmes",), default="bmes")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("pretrain", help="permutation-LM pretraining")
    p.add_argument("--train", required=True, help="tagged corpus (tags unused)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scheme", choices=("bio", "bmes"), default="bmes")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune a tagger")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=("bio", "bmes"), default="bmes")
    p.add_argument("--init", help="warm-start encoder from a pretraining checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model or a predictions file")
    p.add_argument("--ckpt", help="model checkpoint to evaluate")
    p.add_argument("--pred", help="predictions file to score instead of a model")
    p.add_argument("--data", required=True, help="gold corpus")
    p.add_argument("--vocab", help="vocabulary file (default: next to the checkpoint)")
    p.add_argument("--scheme", choices=("bio", "bmes"), default="bmes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="tag plain text, one sentence per line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--scale", default="tiny")
    p.add_argument("--mode", choices=("absolute", "relative", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="summarize a training log")
    p.add_argument("log")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NtrrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # anything unplanned is a runtime failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
