"""Command-line entry point: gen-corpus, label, train, convert, sweep, eval.

Every command resolves a :class:`RunConfig` (``--config`` file, then the
run directory's ``config.json``, then defaults), applies its flags on top and
writes the resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from .config import RunConfig
from .corpus import default_corpus_spec, generate_corpus, load_corpus_spec, save_corpus_spec, split_by_latents
from .ctp import lcs_labels
from .evaluate import EVAL_COLUMNS, SWEEP_AXES, SWEEP_COLUMNS, evaluate, sweep, write_rows
from .model import load_checkpoint
from .sampler import REUSE_MODES, ConversionError, convert_batch
from .tokens import CorpusFormatError, VocabularyError, parse_record, read_corpus, write_corpus
from .train import TrainingError, train

log = logging.getLogger("maskconv")


def _resolve_config(args) -> RunConfig:
    if args.config:
        return RunConfig.load(args.config)
    run_cfg = os.path.join(args.run_dir, "config.json") if getattr(args, "run_dir", None) else None
    if run_cfg and os.path.exists(run_cfg):
        return RunConfig.load(run_cfg)
    return RunConfig()


def _corpus_spec(cfg: RunConfig):
    return load_corpus_spec(cfg.corpus.spec_path) if cfg.corpus.spec_path else default_corpus_spec()


def _config_path(out: str) -> str:
    root, _ = os.path.splitext(out)
    return root + ".config.json"


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _heldout(cfg: RunConfig, path: str | None):
    path = path or cfg.corpus.path
    if not path:
        raise SystemExit("no corpus given (--corpus or corpus.path in the config)")
    samples = read_corpus(path, cfg.model.vocab)
    _, held = split_by_latents(samples, cfg.corpus.heldout_percent)
    return held[:cfg.eval.n_samples]


def _checkpoint(args) -> str:
    if args.checkpoint:
        return args.checkpoint
    if args.run_dir:
        return os.path.join(args.run_dir, "checkpoints", "model.ckpt")
    raise SystemExit("no checkpoint given (--checkpoint or --run-dir)")


def cmd_gen_corpus(args) -> int:
    cfg = _resolve_config(args)
    corpus = replace(cfg.corpus, path=args.out,
                     n=args.n if args.n is not None else cfg.corpus.n,
                     spec_path=args.specs or cfg.corpus.spec_path)
    cfg = replace(cfg, corpus=corpus, seed=args.seed if args.seed is not None else cfg.seed)
    spec = _corpus_spec(cfg)
    _ensure_parent(args.out)
    generated = generate_corpus(spec, corpus.n, cfg.seed)
    write_corpus([g.sample for g in generated], args.out)
    if not corpus.spec_path:
        spec_out = os.path.splitext(args.out)[0] + ".spec.json"
        save_corpus_spec(spec, spec_out)
        cfg = replace(cfg, corpus=replace(corpus, spec_path=spec_out))
    cfg.save(_config_path(args.out))
    log.info("wrote %d samples to %s", len(generated), args.out)
    return 0


def cmd_label(args) -> int:
    """Recompute common-token labels for every ``src``/``tgt`` pair."""
    cfg = _resolve_config(args)
    vocab = cfg.model.vocab
    out_lines = []
    with open(args.corpus, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", lineno, args.corpus) from None
            if not isinstance(record, dict) or "src" not in record or "tgt" not in record:
                raise CorpusFormatError("record needs 'src' and 'tgt'", lineno, args.corpus)
            labeled = {"src": record["src"], "tgt": record["tgt"],
                       "labels": lcs_labels(record["src"], record["tgt"]),
                       "latents": record.get("latents", [])}
            if record.get("accent") is not None:
                labeled["accent"] = record["accent"]
            line_out = json.dumps(labeled, separators=(",", ":"))
            if labeled["latents"]:
                parse_record(line_out, vocab, lineno, args.corpus)
            out_lines.append(line_out)
    _ensure_parent(args.out)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(line + "\n" for line in out_lines)
    cfg.save(_config_path(args.out))
    log.info("labeled %d records into %s", len(out_lines), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.corpus:
        cfg = replace(cfg, corpus=replace(cfg.corpus, path=args.corpus))
    if args.epochs is not None:
        pre, fine = args.epochs
        cfg = replace(cfg, train=replace(cfg.train, pretrain_epochs=pre, finetune_epochs=fine))
    if not cfg.corpus.path:
        raise SystemExit("no corpus given (--corpus or corpus.path in the config)")
    os.makedirs(args.run_dir, exist_ok=True)
    cfg.save(os.path.join(args.run_dir, "config.json"))
    samples = read_corpus(cfg.corpus.path, cfg.model.vocab)
    train_set, _ = split_by_latents(samples, cfg.corpus.heldout_percent)
    try:
        train(cfg, train_set, args.run_dir)
    except TrainingError as exc:
        log.error("%s (last good weights in %s)", exc,
                  os.path.join(args.run_dir, "checkpoints", "last_good.ckpt"))
        return 1
    return 0


def _sampler_overrides(cfg: RunConfig, args) -> RunConfig:
    s = cfg.sampler
    updates = {}
    for flag, name in (("tau", "tau"), ("proportion", "proportion"), ("reuse", "reuse_mode"),
                       ("steps", "steps"), ("cfg", "cfg_weight"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[name] = value
    if "proportion" in updates and "reuse_mode" not in updates:
        updates["reuse_mode"] = "proportion"
    return replace(cfg, sampler=replace(s, **updates))


def _parse_ratio(text: str):
    if text in ("auto", "source", "1.0"):
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("ratio must be a number, 'auto' or 'source'") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("ratio must be positive")
    return value


def cmd_convert(args) -> int:
    cfg = _sampler_overrides(_resolve_config(args), args)
    model = load_checkpoint(_checkpoint(args)).eval()
    if args.tokens is not None:
        sources = [[int(t) for t in args.tokens.split()]]
    else:
        sources = [list(s.source) for s in read_corpus(args.input, cfg.model.vocab)]
    try:
        convs = convert_batch(sources, model, cfg.sampler, args.ratio)
    except ConversionError as exc:
        log.error("%s", exc)
        return 1
    out = args.out or os.path.join(args.run_dir or ".", "converted.jsonl")
    _ensure_parent(out)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for src, c in zip(sources, convs):
            fh.write(json.dumps({"src": src, "out": c.tokens, "ratio": c.ratio}, separators=(",", ":")) + "\n")
    if args.trace_out:
        _ensure_parent(args.trace_out)
        with open(args.trace_out, "w", encoding="utf-8", newline="\n") as fh:
            for c in convs:
                fh.write(json.dumps(c.trace.to_json(), separators=(",", ":")) + "\n")
    cfg.save(_config_path(out))
    if args.tokens is not None:
        print(" ".join(str(t) for t in convs[0].tokens))
    return 0


def cmd_sweep(args) -> int:
    cfg = _sampler_overrides(_resolve_config(args), args)
    if args.n_samples is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, n_samples=args.n_samples))
    if args.corpus:
        cfg = replace(cfg, corpus=replace(cfg.corpus, path=args.corpus))
    model = load_checkpoint(_checkpoint(args)).eval()
    held = _heldout(cfg, None)
    markers = set(_corpus_spec(cfg).markers)
    values = [float(v) for v in args.values.split(",")] if args.values else None
    rows = sweep(model, held, args.axis, cfg.sampler, values, markers, cfg.eval.workers)
    out = args.out or os.path.join(args.run_dir or ".", f"sweep_{args.axis}.csv")
    _ensure_parent(out)
    write_rows(rows, SWEEP_COLUMNS, out)
    cfg.save(_config_path(out))
    log.info("wrote %d sweep points to %s", len(rows), out)
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    if args.n_samples is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, n_samples=args.n_samples))
    if args.ratio is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, ratio=args.ratio))
    if args.corpus:
        cfg = replace(cfg, corpus=replace(cfg.corpus, path=args.corpus))
    model = load_checkpoint(_checkpoint(args)).eval()
    held = _heldout(cfg, None)
    ratio = cfg.eval.ratio
    if ratio not in ("auto", "source", "1.0"):
        ratio = float(ratio)
    report = evaluate(model, held, cfg.sampler, set(_corpus_spec(cfg).markers), ratio)
    out = args.out or os.path.join(args.run_dir or ".", "eval.csv")
    _ensure_parent(out)
    write_rows([report], EVAL_COLUMNS, out)
    cfg.save(_config_path(out))
    for key in EVAL_COLUMNS:
        print(f"{key}: {report[key]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskconv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="RunConfig JSON file")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "generate a synthetic paired corpus")
    p.add_argument("--specs", help="corpus spec JSON (default: built-in spec, written next to --out)")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("label", cmd_label, "recompute common-token labels for src/tgt pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "pretrain then fine-tune a model")
    p.add_argument("--corpus")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--epochs", type=int, nargs=2, metavar=("PRETRAIN", "FINETUNE"))

    def add_model_args(p):
        p.add_argument("--run-dir")
        p.add_argument("--checkpoint")

    def add_sampler_args(p):
        p.add_argument("--tau", type=float)
        p.add_argument("--proportion", type=float)
        p.add_argument("--reuse", choices=REUSE_MODES)
        p.add_argument("--steps", type=int)
        p.add_argument("--cfg", type=float, help="guidance weight w")
        p.add_argument("--seed", type=int)

    p = add("convert", cmd_convert, "convert source sequences")
    add_model_args(p)
    add_sampler_args(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--input", help="JSON-lines corpus whose 'src' fields are converted")
    group.add_argument("--tokens", help="one space-separated source sequence")
    p.add_argument("--ratio", type=_parse_ratio, default="auto")
    p.add_argument("--out")
    p.add_argument("--trace-out")

    p = add("sweep", cmd_sweep, "sweep tau, reuse proportion or duration ratio")
    add_model_args(p)
    add_sampler_args(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", help="comma-separated sweep points (default per axis)")
    p.add_argument("--corpus")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--out")

    p = add("eval", cmd_eval, "held-out metrics report")
    add_model_args(p)
    p.add_argument("--corpus")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--ratio")
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CorpusFormatError, VocabularyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
