"""Single command-line entry point: every pipeline stage is a subcommand.

Exit codes: 0 success, 1 runtime error, 2 usage error. Subcommands are
idempotent on identical inputs and seed, and write only inside their declared
output paths. Reporting subcommands write delimited text plus a rendered
figure next to it.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bpe, carbon, corpus, kvconfig, normalizer

DEFAULT_SEED = 20


class CliError(RuntimeError):
    pass


def _load_corpus_dir(directory: str) -> list[corpus.Document]:
    docs = corpus.read_corpus_dir(directory)
    if not docs:
        raise CliError(f"no corpus records found under {directory}")
    return docs


# ---------------------------------------------------------------------------
# corpus stages

def cmd_ingest(args: argparse.Namespace) -> int:
    metadata = corpus.read_metadata_table(args.meta)
    files = [(path, corpus.detect_format(path)) for path in args.files]
    docs, errors = corpus.ingest(files, metadata, jobs=args.jobs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus.write_corpus(docs, out_dir / "corpus.jsonl")
    print(f"ingested {len(docs)} documents -> {out_dir / 'corpus.jsonl'}")
    for err in errors:
        print(f"error: {err.path}: {err.message}", file=sys.stderr)
    return 1 if errors else 0


def cmd_partition(args: argparse.Namespace) -> int:
    docs = _load_corpus_dir(args.in_dir)
    distributable, withheld = corpus.partition(docs)
    out_dir = Path(args.out or args.in_dir)
    (out_dir / "distributable").mkdir(parents=True, exist_ok=True)
    (out_dir / "withheld").mkdir(parents=True, exist_ok=True)
    corpus.write_corpus(distributable, out_dir / "distributable" / "corpus.jsonl")
    corpus.write_corpus(withheld, out_dir / "withheld" / "corpus.jsonl")
    print(f"distributable: {len(distributable)}  withheld: {len(withheld)}")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    docs = _load_corpus_dir(args.in_dir)
    st = corpus.stats(docs)
    print(f"documents: {len(docs)}")
    print(f"total tokens: {st.total_tokens}")
    for origin in sorted(st.per_origin_tokens):
        print(f"  {origin}\t{st.per_origin_tokens[origin]}")
    hist_text = corpus.emit_histogram(st, args.hist_width)
    if hist_text:
        print(hist_text, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["origin\ttokens"]
        lines += [f"{o}\t{st.per_origin_tokens[o]}"
                  for o in sorted(st.per_origin_tokens)]
        lines.append(f"TOTAL\t{st.total_tokens}")
        (out_dir / "stats.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (out_dir / "histogram.tsv").write_text(hist_text, encoding="utf-8")
        from . import figures
        figures.save_year_histogram(corpus.histogram_bins(st, args.hist_width),
                                    out_dir / "histogram.png")
        print(f"wrote {out_dir / 'stats.tsv'} and histogram artifacts")
    return 0


def cmd_normalize(args: argparse.Namespace) -> int:
    rules = (normalizer.load_rules(args.rules) if args.rules
             else normalizer.default_rules())
    docs = _load_corpus_dir(args.in_dir)
    out: list[corpus.Document] = []
    skipped = 0
    for doc in docs:
        if doc.licence.tier is corpus.Tier.NO_MODIFICATION and not args.force:
            # Licence forbids rewriting the body; pass it through untouched.
            print(f"refusing to normalize {doc.id} (no_modification licence); "
                  f"use --force to override", file=sys.stderr)
            out.append(doc)
            skipped += 1
            continue
        out.append(corpus.mark_normalised(doc, normalizer.normalize_text(doc.body,
                                                                         rules)))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus.write_corpus(out, out_dir / "corpus.jsonl")
    print(f"normalized {len(out) - skipped} documents ({skipped} passed through) "
          f"-> {out_dir / 'corpus.jsonl'}")
    return 0


# ---------------------------------------------------------------------------
# tokenizer stages

def cmd_bpe_train(args: argparse.Namespace) -> int:
    docs = _load_corpus_dir(args.in_dir)
    model = bpe.train((d.body for d in docs), args.vocab_size, jobs=args.jobs)
    bpe.save_model(model, args.out)
    print(f"trained BPE model: vocab {model.vocab_size}, "
          f"{len(model.merges)} merges -> {args.out}")
    return 0


def _read_text_arg(args: argparse.Namespace) -> str:
    if args.text is not None:
        return args.text
    if args.in_file:
        return Path(args.in_file).read_text(encoding="utf-8")
    return sys.stdin.read()


def cmd_bpe_encode(args: argparse.Namespace) -> int:
    model = bpe.load_model(args.model)
    ids = bpe.encode(_read_text_arg(args), model)
    line = " ".join(str(i) for i in ids)
    if args.out:
        Path(args.out).write_text(line + "\n", encoding="utf-8")
    else:
        print(line)
    return 0


def cmd_bpe_decode(args: argparse.Namespace) -> int:
    model = bpe.load_model(args.model)
    if args.ids is not None:
        id_text = args.ids
    elif args.in_file:
        id_text = Path(args.in_file).read_text(encoding="utf-8")
    else:
        id_text = sys.stdin.read()
    ids = [int(tok) for tok in id_text.split()]
    out = bpe.decode(ids, model)
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
    else:
        print(out)
    return 0


# ---------------------------------------------------------------------------
# training stages

def _encoder_config_from_kv(mapping: dict[str, str], vocab_size: int):
    from . import encoder
    return encoder.EncoderConfig(
        n_layers=kvconfig.get_int(mapping, "n_layers", 2),
        hidden_dim=kvconfig.get_int(mapping, "hidden_dim", 64),
        n_heads=kvconfig.get_int(mapping, "n_heads", 2),
        ffn_dim=kvconfig.get_int(mapping, "ffn_dim", 128),
        vocab_size=vocab_size,
        max_positions=kvconfig.get_int(mapping, "max_positions", 512),
        dropout=kvconfig.get_float(mapping, "dropout", 0.1),
        pre_norm=kvconfig.get_bool(mapping, "pre_norm", False),
        tie_embeddings=kvconfig.get_bool(mapping, "tie_embeddings", True),
        dtype=kvconfig.get_str(mapping, "dtype", "float32"),
    )


def cmd_pretrain(args: argparse.Namespace) -> int:
    from . import encoder, pretrain
    mapping = kvconfig.read_kv(args.config) if args.config else {}
    for override in args.set or []:
        key, _, value = override.partition("=")
        mapping[key.strip()] = value.strip()
    bpe_model = bpe.load_model(args.bpe)
    docs = _load_corpus_dir(args.corpus)
    opt_cfg = pretrain.optimizer_config_from_mapping(mapping)
    policy = pretrain.masking_policy_from_mapping(mapping)
    blocks = pretrain.pack_blocks((bpe.encode(d.body, bpe_model) for d in docs),
                                  opt_cfg.max_seq_len)
    if args.resume:
        model, state = pretrain.load_pretrain_checkpoint(args.resume)
    else:
        cfg = _encoder_config_from_kv(mapping, bpe_model.vocab_size)
        model = encoder.init(cfg, seed=args.seed)
        state = None
    result = pretrain.pretrain(blocks, model, opt_cfg, policy, seed=args.seed,
                               out_dir=args.out,
                               checkpoint_every=args.checkpoint_every,
                               state=state)
    from . import figures
    figures.save_loss_curve(result.log_rows, Path(args.out) / "loss_curve.png")
    print(f"pretrained to step {result.state.step}; "
          f"running loss {result.state.running_loss:.4f} -> {args.out}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    from . import encoder, tagger
    mapping = kvconfig.read_kv(args.config) if args.config else {}
    cfg = tagger.FinetuneConfig(
        lr=kvconfig.get_float(mapping, "lr", 0.000005),
        epochs=kvconfig.get_int(mapping, "epochs", 10),
        seed=args.seed,
        pooling=kvconfig.get_str(mapping, "pooling", "concat"),
    )
    train_docs = tagger.read_tagged_file(args.train)
    dev_docs = tagger.read_tagged_file(args.dev)
    encoder_model = encoder.load_checkpoint(args.encoder)
    bpe_model = bpe.load_model(args.bpe)
    model, history = tagger.finetune(train_docs, dev_docs, encoder_model,
                                     bpe_model, cfg)
    out_dir = Path(args.out)
    tagger.save_tagger(model, out_dir)
    lines = ["epoch\ttrain_loss\tdev_accuracy"]
    lines += [f"{e}\t{l:.6f}\t{a:.6f}" for e, l, a in history]
    (out_dir / "history.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    best = max(a for _, _, a in history) if history else 0.0
    print(f"fine-tuned {cfg.epochs} epochs; best dev accuracy {best:.4f} "
          f"-> {out_dir}")
    return 0


def cmd_tag(args: argparse.Namespace) -> int:
    from . import tagger
    model = tagger.load_tagger(args.tagger)
    docs = tagger.read_tagged_file(args.in_file)
    for doc in docs:
        predictions = tagger.tag([s.tokens for s in doc.sentences], model)
        for sent, pred in zip(doc.sentences, predictions):
            sent.gold_tags = pred
    tagger.write_tagged_file(docs, args.out)
    n = sum(len(s.tokens) for d in docs for s in d.sentences)
    print(f"tagged {n} tokens -> {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from . import tagger
    model = tagger.load_tagger(args.tagger)
    docs = tagger.read_tagged_file(args.test)
    report = tagger.evaluate(docs, model)
    grid = tagger.render_report_grid(report)
    print(grid)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.tsv").write_text(tagger.report_tsv(report),
                                            encoding="utf-8")
        (out_dir / "report.txt").write_text(grid + "\n", encoding="utf-8")
        from . import figures
        figures.save_eval_grid(report, out_dir / "report.png")
        print(f"wrote report artifacts -> {out_dir}")
    return 0


def cmd_carbon(args: argparse.Namespace) -> int:
    profiles = [carbon.load_profile(path) for path in args.profile]
    rep = carbon.report(profiles, factor=args.factor)
    print(carbon.render_table(rep))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "carbon.tsv").write_text(carbon.render_tsv(rep), encoding="utf-8")
        from . import figures
        figures.save_carbon_bars([r.name for r in rep.rows],
                                 [r.co2e_kg for r in rep.rows],
                                 out_dir / "carbon.png")
    return 0


# ---------------------------------------------------------------------------
# parser wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emfr",
        description="Early Modern French language-model workbench")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                       help="rng seed (default %(default)s)")
        return p

    p = add("ingest", cmd_ingest, "canonicalize source files into a corpus")
    p.add_argument("--meta", required=True, help="tab-separated metadata table")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("files", nargs="+", help="source files (txt, xml, jsonl)")

    p = add("partition", cmd_partition, "split corpus by licence tier")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", default=None,
                   help="output directory (default: the input directory)")

    p = add("stats", cmd_stats, "token counts and per-year histogram")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--hist-width", type=int, default=10)
    p.add_argument("--out", default=None, help="write TSV + PNG artifacts here")

    p = add("normalize", cmd_normalize, "graphemic normalization of bodies")
    p.add_argument("--rules", default=None, help="rule file (default: shipped rules)")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="normalize even no_modification documents")

    p = add("bpe-train", cmd_bpe_train, "train the byte-level BPE model")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--jobs", type=int, default=1)

    p = add("bpe-encode", cmd_bpe_encode, "encode text to token ids")
    p.add_argument("--model", required=True)
    p.add_argument("--text", default=None)
    p.add_argument("--in", dest="in_file", default=None)
    p.add_argument("--out", default=None)

    p = add("bpe-decode", cmd_bpe_decode, "decode token ids to text")
    p.add_argument("--model", required=True)
    p.add_argument("--ids", default=None, help="space-separated ids")
    p.add_argument("--in", dest="in_file", default=None)
    p.add_argument("--out", default=None)

    p = add("pretrain", cmd_pretrain, "masked-LM pretraining")
    p.add_argument("--config", default=None, help="key/value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--corpus", required=True, help="canonical corpus directory")
    p.add_argument("--bpe", required=True, help="BPE model directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = add("finetune", cmd_finetune, "fine-tune the POS tagging head")
    p.add_argument("--config", default=None)
    p.add_argument("--train", required=True, help="tagged training corpus")
    p.add_argument("--dev", required=True, help="tagged dev corpus")
    p.add_argument("--encoder", required=True, help="encoder checkpoint")
    p.add_argument("--bpe", required=True, help="BPE model directory")
    p.add_argument("--out", required=True, help="tagger output directory")

    p = add("tag", cmd_tag, "predict tags for sentences")
    p.add_argument("--tagger", required=True)
    p.add_argument("--in", dest="in_file", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "century/genre-stratified evaluation")
    p.add_argument("--tagger", required=True)
    p.add_argument("--test", required=True, help="tagged test corpus")
    p.add_argument("--out", default=None)

    p = add("carbon", cmd_carbon, "power/energy/CO2e report")
    p.add_argument("--profile", action="append", required=True,
                   help="profile file; repeat for several rows")
    p.add_argument("--factor", type=float, default=carbon.DEFAULT_EMISSION_FACTOR,
                   help="emission factor in kg/kWh (default %(default)s)")
    p.add_argument("--out", default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, kvconfig.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
