"""Command-line pipeline: vocabulary training, filtering, training,
encoding, retrieval, transfer, parameter counting, ablation grids, and
synthetic-corpus generation.

Every run resolves its configuration from (lowest to highest precedence)
defaults, --config file, the DUOSENT_SEED environment variable, and
repeated --set overrides, then echoes the resolved values. Output files
are written atomically. Exit codes: 0 success, 1 input error, 2 numeric
divergence abort.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys

import numpy as np

from duosent import fileio
from duosent.config import AppConfig, echo
from duosent.corpus import filter_pairs, read_parallel, tokenize_pairs
from duosent.errors import DivergenceError, InputError
from duosent.evaluation import (
    EvalIndex,
    retrieval_report,
    retrieve_p_at_1,
    train_probe,
    zero_shot_transfer,
)
from duosent.model import count_params, encode_texts
from duosent.synth import SynthConfig, bag_of_words_oracle_accuracy, generate, write_corpus
from duosent.tokenizer import Vocab, iter_lines, train_bpe
from duosent.trainer import load_checkpoint, train

logger = logging.getLogger("duosent")

GRID_CONTRASTIVE = {
    "none": (False, False),
    "align": (True, False),
    "align+sim": (True, True),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are input errors (exit 1)
        raise InputError(message)


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _read_labels(path) -> np.ndarray:
    labels = []
    for lineno, line in enumerate(_read_lines(path), 1):
        try:
            labels.append(int(line))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: labels must be integers") from exc
    return np.asarray(labels)


def _echo_config(app: AppConfig, out_dir=None) -> None:
    text = echo(app.values)
    for line in text.strip().split("\n"):
        logger.info("config %s", line)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fileio.atomic_write_text(os.path.join(out_dir, "config_resolved.txt"), text)


def _load_training_pairs(app: AppConfig, src, tgt, vocab: Vocab):
    rules = app.filter_rules()
    pairs = read_parallel(src, tgt)
    kept, report = filter_pairs(pairs, rules, vocab)
    logger.info("corpus filter: %s", report.to_text().replace("\n", " ").strip())
    return tokenize_pairs(kept, vocab)


# -- subcommands -----------------------------------------------------------------


def cmd_count_params(app: AppConfig, args) -> int:
    print(count_params(app.model_config()))
    return 0


def cmd_synth(app: AppConfig, args) -> int:
    _echo_config(app, args.out)
    cfg = SynthConfig(
        train_pairs=app["synth.train_pairs"],
        val_pairs=app["synth.val_pairs"],
        test_pairs=app["synth.test_pairs"],
        vocab_per_lang=app["synth.vocab_per_lang"],
        classes=app["synth.classes"],
        min_words=app["synth.min_words"],
        max_words=app["synth.max_words"],
    )
    corpus = generate(cfg, seed=app["train.seed"])
    write_corpus(corpus, args.out)
    oracle = bag_of_words_oracle_accuracy(corpus)
    logger.info("bag-of-words oracle accuracy on test split: %.3f", oracle)
    print(f"synthetic corpus written to {args.out} (oracle_accuracy={oracle:.3f})")
    return 0


def cmd_build_vocab(app: AppConfig, args) -> int:
    _echo_config(app)
    vocab = train_bpe(
        iter_lines(args.src, args.tgt),
        target_size=app["vocab.size"],
        lowercase=app["vocab.lowercase"],
    )
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} tokens written to {args.out}")
    return 0


def cmd_filter(app: AppConfig, args) -> int:
    _echo_config(app)
    vocab = Vocab.load(args.vocab, lowercase=app["vocab.lowercase"]) if args.vocab else None
    rules = app.filter_rules()
    if vocab is None and rules.length_unit == "subword":
        logger.info("no --vocab given: measuring lengths in whitespace words")
        rules.length_unit = "word"
    pairs = read_parallel(args.src, args.tgt)
    kept, report = filter_pairs(pairs, rules, vocab)
    fileio.atomic_write_text(args.out_src, "".join(s + "\n" for s, _ in kept))
    fileio.atomic_write_text(args.out_tgt, "".join(t + "\n" for _, t in kept))
    if args.report:
        fileio.atomic_write_text(args.report, report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_train(app: AppConfig, args) -> int:
    _echo_config(app, args.out)
    vocab = Vocab.load(args.vocab, lowercase=app["vocab.lowercase"])
    model_config = app.model_config()
    if model_config.vocab_size < len(vocab):
        raise InputError(
            f"model.vocab_size {model_config.vocab_size} is below the vocabulary size {len(vocab)}"
        )
    pairs = _load_training_pairs(app, args.src, args.tgt, vocab)
    result = train(
        pairs,
        vocab,
        model_config,
        app.loss_config(),
        app.train_config(),
        args.out,
        resume_from=args.resume,
        batch_config=app.batch_config(),
    )
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"metrics log: {result.metrics_path}")
    return 0


def cmd_encode(app: AppConfig, args) -> int:
    _echo_config(app)
    params, model_config = load_checkpoint(args.ckpt)
    vocab = Vocab.load(args.vocab, lowercase=app["vocab.lowercase"])
    texts = _read_lines(args.input)
    for lineno, text in enumerate(texts, 1):
        if not text.strip():
            raise InputError(f"{args.input}:{lineno}: cannot embed an empty line")
    reps = encode_texts(params, model_config, vocab, texts)
    ids = [str(i) for i in range(len(texts))]
    fileio.save_embeddings(args.out, reps, ids)
    print(f"wrote {len(texts)} x {reps.shape[1]} embeddings to {args.out}")
    return 0


def cmd_retrieve(app: AppConfig, args) -> int:
    _echo_config(app)
    queries = EvalIndex.from_file(args.queries)
    targets = EvalIndex.from_file(args.targets)
    p_at_1, rows = retrieve_p_at_1(
        queries,
        targets,
        mode=app["eval.mode"],
        k=app["eval.margin_k"],
        variant=app["eval.margin_variant"],
    )
    if args.report:
        fileio.atomic_write_text(args.report, retrieval_report(rows))
    print(f"p_at_1={p_at_1:.4f}")
    return 0


def cmd_transfer(app: AppConfig, args) -> int:
    _echo_config(app)
    params, model_config = load_checkpoint(args.ckpt)
    vocab = Vocab.load(args.vocab, lowercase=app["vocab.lowercase"])
    reps_train = encode_texts(params, model_config, vocab, _read_lines(args.train_texts))
    reps_val = encode_texts(params, model_config, vocab, _read_lines(args.val_texts))
    probe = train_probe(
        reps_train,
        _read_labels(args.train_labels),
        reps_val,
        _read_labels(args.val_labels),
    )
    accuracy = zero_shot_transfer(
        params, model_config, vocab, probe,
        _read_lines(args.test_texts), _read_labels(args.test_labels),
    )
    print(f"transfer_accuracy={accuracy:.4f}")
    return 0


def _parse_grid(tokens: list[str]) -> dict[str, list[str]]:
    axes: dict[str, list[str]] = {}
    for token in tokens:
        name, sep, values = token.partition("=")
        if not sep:
            raise InputError(f"--grid expects axis=value,value,... got {token!r}")
        if name not in ("generative", "contrastive"):
            raise InputError(f"unknown grid axis {name!r}; use 'generative' or 'contrastive'")
        axes[name] = [v.strip() for v in values.split(",") if v.strip()]
    axes.setdefault("generative", [None])
    axes.setdefault("contrastive", [None])
    return axes


def cmd_ablate(app: AppConfig, args) -> int:
    _echo_config(app, args.out)
    vocab = Vocab.load(args.vocab, lowercase=app["vocab.lowercase"])
    data = args.data
    train_pairs = _load_training_pairs(
        app, os.path.join(data, "train.a.txt"), os.path.join(data, "train.b.txt"), vocab
    )
    val_a = _read_lines(os.path.join(data, "val.a.txt"))
    val_b = _read_lines(os.path.join(data, "val.b.txt"))

    axes = _parse_grid(args.grid)
    results = ["generative\tcontrastive\tp_at_1_ab\tp_at_1_ba\tfinal_epoch_loss"]
    for gen_value, con_value in itertools.product(axes["generative"], axes["contrastive"]):
        loss_config = app.loss_config()
        cell_bits = []
        if gen_value is not None:
            loss_config.generative_mode = gen_value.lower()
            loss_config.__post_init__()  # re-validate the override
            cell_bits.append(gen_value.lower())
        if con_value is not None:
            if con_value not in GRID_CONTRASTIVE:
                raise InputError(
                    f"unknown contrastive cell {con_value!r}; choose from {sorted(GRID_CONTRASTIVE)}"
                )
            loss_config.use_align, loss_config.use_sim = GRID_CONTRASTIVE[con_value]
            cell_bits.append(con_value.replace("+", "-"))
        cell = "_".join(cell_bits) or "base"
        logger.info("ablation cell %s", cell)
        batch_config = app.batch_config()
        batch_config.generative_mode = loss_config.generative_mode
        result = train(
            train_pairs,
            vocab,
            app.model_config(),
            loss_config,
            app.train_config(),
            os.path.join(args.out, cell),
            batch_config=batch_config,
        )
        params, model_config = load_checkpoint(result.final_checkpoint)
        ids = [str(i) for i in range(len(val_a))]
        index_a = EvalIndex(encode_texts(params, model_config, vocab, val_a), ids)
        index_b = EvalIndex(encode_texts(params, model_config, vocab, val_b), ids)
        p_ab, _ = retrieve_p_at_1(index_a, index_b, mode=app["eval.mode"],
                                  k=app["eval.margin_k"], variant=app["eval.margin_variant"])
        p_ba, _ = retrieve_p_at_1(index_b, index_a, mode=app["eval.mode"],
                                  k=app["eval.margin_k"], variant=app["eval.margin_variant"])
        results.append(
            f"{loss_config.generative_mode}\t{con_value or 'config'}\t"
            f"{p_ab:.4f}\t{p_ba:.4f}\t{result.mean_epoch_totals[-1]:.6f}"
        )
    table = "\n".join(results) + "\n"
    fileio.atomic_write_text(os.path.join(args.out, "results.tsv"), table)
    print(table, end="")
    return 0


# -- wiring ----------------------------------------------------------------------


def build_parser() -> _Parser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", "-c", help="key=value config file")
    shared.add_argument(
        "--set", "-s", dest="overrides", action="append", default=[],
        metavar="KEY=VALUE", help="override a config key (repeatable)",
    )

    parser = _Parser(prog="duosent", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help):
        p = sub.add_parser(name, parents=[shared], help=help)
        p.set_defaults(handler=handler)
        return p

    command("count-params", cmd_count_params, "print the trainable-parameter count")

    p = command("synth", cmd_synth, "generate the synthetic bilingual corpus")
    p.add_argument("--out", required=True, help="output directory")

    p = command("build-vocab", cmd_build_vocab, "train the shared subword vocabulary")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out", required=True, help="vocabulary file to write")

    p = command("filter", cmd_filter, "apply the corpus cleaning rules")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out-src", required=True)
    p.add_argument("--out-tgt", required=True)
    p.add_argument("--report", help="write the key=value filter report here")
    p.add_argument("--vocab", help="vocabulary for subword length measurement")

    p = command("train", cmd_train, "train the dual encoder")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = command("encode", cmd_encode, "embed sentences with a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="one sentence per line")
    p.add_argument("--out", required=True, help="embedding file to write")

    p = command("retrieve", cmd_retrieve, "nearest-neighbor retrieval between embedding files")
    p.add_argument("--queries", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--report", help="write the per-query TSV report here")

    p = command("transfer", cmd_transfer, "zero-shot classification transfer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--train-texts", required=True)
    p.add_argument("--train-labels", required=True)
    p.add_argument("--val-texts", required=True)
    p.add_argument("--val-labels", required=True)
    p.add_argument("--test-texts", required=True)
    p.add_argument("--test-labels", required=True)

    p = command("ablate", cmd_ablate, "run a generative x contrastive training grid")
    p.add_argument("--data", required=True, help="directory in the synth corpus layout")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", nargs="+", required=True, metavar="AXIS=V1,V2")

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    app = AppConfig.load(config_path=args.config, set_overrides=args.overrides)
    return args.handler(app, args)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return run(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
