"""Command-line pipeline: synth, build-vocab, pretrain, distill, finetune,
eval, bench. One subcommand per stage; `--config` supplies flat key=value
defaults for any flag; every run prints a header with the resolved settings
and input digests. Exit codes: 0 ok, 2 input error, 3 config error, 4 runtime.
"""
from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import data as D
from . import distillation as DS
from . import evaluation as E
from . import model as M
from . import tokenizer as TK
from . import training as TR
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, EdlmError, InputError
from .io_utils import atomic_write_text, file_digest

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4

ARCH_DEFAULTS = {
    "hidden_size": 128,
    "num_layers": 4,
    "num_heads": 4,
    "ffn_size": 512,
    "max_positions": 512,
    "dropout": 0.1,
    "tie_decoder": True,
    "gelu_form": "exact",
}


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"not a fraction: {text} ({e})")


def _layer_map(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer map must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edlm",
        description="Desk-scale pipeline for domain-adaptive MLM pretraining, "
                    "distillation and forum-post classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0, help="global random seed")
        p.add_argument("--config", type=Path, default=None, help="flat key=value file providing flag defaults")
        p.add_argument("--log", type=Path, default=None, help="append training log lines to this file")
        if out_required:
            p.add_argument("--out", type=Path, required=True, help="output path")

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic labeled forum-post dataset", formatter_class=fmt)
    p.add_argument("--n-posts", type=int, default=500, help="number of posts to generate")
    p.add_argument("--balance", type=float, default=0.5, help="positive-class fraction per task")
    p.add_argument("--theme", default="course-forum", help="vocabulary theme for the filler text")
    add_common(p, out_required=False)
    p.add_argument("--out", type=Path, required=True, help="output directory (corpus.txt, posts.jsonl)")

    p = sub.add_parser("build-vocab", help="build a subword vocabulary from a corpus", formatter_class=fmt)
    p.add_argument("--corpus", type=Path, required=True, help="text file, one post per line")
    p.add_argument("--size", type=int, default=2000, help="target vocabulary size incl. specials")
    p.add_argument("--min-freq", type=int, default=1, help="minimum frequency for a token")
    add_common(p)

    p = sub.add_parser("pretrain", help="MLM-pretrain from scratch or continue from --init", formatter_class=fmt)
    p.add_argument("--corpus", type=Path, required=True, help="text file, one post per line")
    p.add_argument("--vocab", type=Path, required=True, help="vocabulary file")
    p.add_argument("--init", type=Path, default=None, help="checkpoint to continue from (domain adaptation)")
    p.add_argument("--lr", type=float, default=5e-5, help="learning rate")
    p.add_argument("--epochs", type=int, default=5, help="training epochs")
    p.add_argument("--max-len", type=int, default=512, help="input sequence length")
    p.add_argument("--batch-size", type=int, default=8, help="sequences per step")
    p.add_argument("--mask-rate", type=float, default=0.15, help="fraction of maskable tokens corrupted")
    p.add_argument("--warmup", type=float, default=0.1, help="fraction of steps with linear lr warmup")
    p.add_argument("--hidden-size", type=int, default=ARCH_DEFAULTS["hidden_size"], help="encoder width")
    p.add_argument("--num-layers", type=int, default=ARCH_DEFAULTS["num_layers"], help="encoder depth")
    p.add_argument("--num-heads", type=int, default=ARCH_DEFAULTS["num_heads"], help="attention heads")
    p.add_argument("--ffn-size", type=int, default=ARCH_DEFAULTS["ffn_size"], help="feed-forward inner width")
    p.add_argument("--max-positions", type=int, default=ARCH_DEFAULTS["max_positions"], help="position table size")
    p.add_argument("--dropout", type=float, default=ARCH_DEFAULTS["dropout"], help="dropout rate in train mode")
    p.add_argument("--tie-decoder", action=argparse.BooleanOptionalAction, default=ARCH_DEFAULTS["tie_decoder"],
                   help="tie the MLM decoder to the token embeddings")
    p.add_argument("--gelu-form", choices=("exact", "tanh"), default=ARCH_DEFAULTS["gelu_form"], help="GELU variant")
    add_common(p)

    p = sub.add_parser("distill", help="train a half-depth student against a teacher", formatter_class=fmt)
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--corpus", type=Path, required=True, help="text file, one post per line")
    p.add_argument("--vocab", type=Path, required=True, help="vocabulary file")
    p.add_argument("--temperature", type=float, default=2.0, help="softmax temperature for soft targets")
    p.add_argument("--w-ce", type=float, default=5.0, help="soft-target KL weight")
    p.add_argument("--w-mlm", type=float, default=2.0, help="hard MLM cross-entropy weight")
    p.add_argument("--w-cos", type=float, default=1.0, help="hidden-state cosine weight")
    p.add_argument("--lr", type=float, default=5e-5, help="learning rate")
    p.add_argument("--epochs", type=int, default=5, help="training epochs")
    p.add_argument("--max-len", type=int, default=512, help="input sequence length")
    p.add_argument("--batch-size", type=int, default=16, help="sequences per step")
    p.add_argument("--mask-rate", type=float, default=0.15, help="fraction of maskable tokens corrupted")
    p.add_argument("--warmup", type=float, default=0.1, help="fraction of steps with linear lr warmup")
    p.add_argument("--layer-map", type=_layer_map, default=None,
                   help="comma-separated teacher layers to copy (default: even layers)")
    add_common(p)

    p = sub.add_parser("finetune", help="fine-tune a classifier on one task", formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="initialization checkpoint")
    p.add_argument("--data", type=Path, required=True, help="posts.jsonl with Likert scores")
    p.add_argument("--vocab", type=Path, required=True, help="vocabulary file")
    p.add_argument("--task", choices=D.TASKS, required=True, help="classification task")
    p.add_argument("--lr", type=float, default=5e-5, help="learning rate")
    p.add_argument("--epochs", type=int, default=2, help="training epochs")
    p.add_argument("--max-len", type=int, default=300, help="input sequence length (512 for distilled models)")
    p.add_argument("--batch-size", type=int, default=8, help="sequences per step")
    p.add_argument("--warmup", type=float, default=0.0, help="fraction of steps with linear lr warmup")
    p.add_argument("--train-fraction", type=_fraction, default=Fraction(2, 3),
                   help="train share of the shuffled dataset")
    p.add_argument("--split-seed", type=int, default=0, help="seed for the train/test shuffle")
    p.add_argument("--stratify-by-course", action="store_true", help="split within each course_id")
    add_common(p)

    p = sub.add_parser("eval", help="evaluate checkpoints and render report tables", formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, action="append", required=True,
                   help="checkpoint to evaluate (repeatable; one table row each)")
    p.add_argument("--data", type=Path, required=True, help="posts.jsonl with Likert scores")
    p.add_argument("--vocab", type=Path, required=True, help="vocabulary file")
    p.add_argument("--task", choices=D.TASKS + ("all",), default="urgency", help="task(s) to evaluate")
    p.add_argument("--style", choices=("table1", "table2"), default="table1", help="report layout")
    p.add_argument("--max-len", type=int, default=300, help="input sequence length")
    p.add_argument("--batch-size", type=int, default=16, help="inference batch size")
    p.add_argument("--split", choices=("train", "test", "all"), default="test",
                   help="which side of the split to score")
    p.add_argument("--train-fraction", type=_fraction, default=Fraction(2, 3),
                   help="train share of the shuffled dataset")
    p.add_argument("--split-seed", type=int, default=0, help="seed for the train/test shuffle")
    p.add_argument("--kv-out", type=Path, default=None, help="machine-readable twin (default: <out>.kv)")
    add_common(p, out_required=False)
    p.add_argument("--out", type=Path, default=None, help="write the markdown report here instead of stdout")

    p = sub.add_parser("bench", help="benchmark inference latency and memory", formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint to benchmark")
    p.add_argument("--reference", type=Path, default=None, help="reference checkpoint for the speedup ratio")
    p.add_argument("--batch-size", type=int, default=8, help="posts per inference batch")
    p.add_argument("--seq-len", type=int, default=64, help="sequence length of the synthetic batch")
    p.add_argument("--reps", type=int, default=20, help="timed repetitions (median reported)")
    p.add_argument("--rss", action="store_true", help="also record process RSS (noisy)")
    add_common(p, out_required=False)
    p.add_argument("--out", type=Path, default=None, help="write the benchmark table here instead of stdout")

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Pre-scan for --config and install its key=value pairs as defaults."""
    if "--config" not in argv:
        return argv
    pos = argv.index("--config")
    if pos + 1 >= len(argv):
        raise ConfigError("--config requires a file path")
    path = Path(argv[pos + 1])
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    overrides = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        overrides[key.strip().replace("-", "_")] = value.strip()
    known = {a.dest for sp in parser._subparsers._group_actions for sp_name, spp in sp.choices.items()
             for a in spp._actions}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    for sp_action in parser._subparsers._group_actions:
        for spp in sp_action.choices.values():
            defaults = {}
            for action in spp._actions:
                if action.dest in overrides:
                    raw = overrides[action.dest]
                    if action.type is not None:
                        defaults[action.dest] = action.type(raw)
                    elif isinstance(action.default, bool) or isinstance(action, argparse.BooleanOptionalAction):
                        defaults[action.dest] = raw.lower() in ("1", "true", "yes")
                    elif isinstance(action.default, int):
                        defaults[action.dest] = int(raw)
                    elif isinstance(action.default, float):
                        defaults[action.dest] = float(raw)
                    else:
                        defaults[action.dest] = raw
            spp.set_defaults(**defaults)
    return argv


def _print_header(args: argparse.Namespace) -> None:
    print(f"edlm {args.command}")
    for key in sorted(vars(args)):
        if key == "command":
            continue
        print(f"  {key}={getattr(args, key)}")


def _require_files(*paths: Path | None) -> list[Path]:
    """Validate inputs and print their digests into the run header."""
    present = []
    for path in paths:
        if path is None:
            continue
        if not path.exists():
            raise InputError(f"input file not found: {path}")
        print(f"  input {path} sha256:{file_digest(path)}")
        present.append(path)
    return present


def _read_corpus(path: Path) -> list[str]:
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise InputError(f"corpus {path} is empty")
    return lines


def _open_log(args):
    return open(args.log, "a", encoding="utf-8") if args.log else None


def _model_name(path: Path) -> str:
    return path.stem


def cmd_synth(args) -> int:
    _print_header(args)
    spec = D.SynthSpec(n_posts=args.n_posts, class_balance=args.balance, vocabulary_theme=args.theme)
    corpus, posts = D.synth_corpus(spec, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(args.out / "corpus.txt", "\n".join(corpus) + "\n")
    D.save_posts(posts, args.out / "posts.jsonl")
    print(f"wrote {len(posts)} posts to {args.out}/posts.jsonl and corpus.txt")
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    _print_header(args)
    _require_files(args.corpus)
    vocab = TK.build_vocab(_read_corpus(args.corpus), target_size=args.size, min_freq=args.min_freq)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} tokens to {args.out}")
    return EXIT_OK


def _arch_config(args, vocab_size: int) -> M.ModelConfig:
    return M.ModelConfig(
        vocab_size=vocab_size,
        hidden_size=args.hidden_size,
        num_layers=args.num_layers,
        num_heads=args.num_heads,
        ffn_size=args.ffn_size,
        max_positions=args.max_positions,
        dropout_rate=args.dropout,
        tie_mlm_decoder=args.tie_decoder,
        gelu_form=args.gelu_form,
    )


def cmd_pretrain(args) -> int:
    _print_header(args)
    _require_files(args.corpus, args.vocab, args.init)
    vocab = TK.Vocab.load(args.vocab)
    hyper = TR.PretrainHyper(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                             max_len=args.max_len, mask_rate=args.mask_rate, seed=args.seed,
                             warmup_fraction=args.warmup)
    init = None
    config = None
    if args.init is not None:
        init = load_checkpoint(args.init)
        if len(vocab) != init.config.vocab_size:
            raise ConfigError(f"vocab has {len(vocab)} tokens but init checkpoint expects {init.config.vocab_size}")
        # Architecture flags left at their defaults are taken from the checkpoint;
        # explicitly changed ones must agree with it.
        for flag, default in ARCH_DEFAULTS.items():
            given = getattr(args, flag)
            if given != default:
                field = {"dropout": "dropout_rate", "tie_decoder": "tie_mlm_decoder"}.get(flag, flag)
                if given != getattr(init.config, field):
                    raise ConfigError(f"--{flag.replace('_', '-')}={given} conflicts with the init checkpoint")
    else:
        config = _arch_config(args, len(vocab))
    seqs = TR.encode_corpus(_read_corpus(args.corpus), vocab, hyper.max_len)
    log = _open_log(args)
    try:
        ckpt = TR.pretrain_mlm(seqs, hyper, config=config, init=init, log=log)
    finally:
        if log:
            log.close()
    save_checkpoint(ckpt.params, ckpt.config, ckpt.provenance, args.out)
    print(f"wrote checkpoint ({ckpt.provenance}, {M.count_parameters(ckpt.config)} parameters) to {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    _print_header(args)
    _require_files(args.teacher, args.corpus, args.vocab)
    vocab = TK.Vocab.load(args.vocab)
    teacher = load_checkpoint(args.teacher)
    if len(vocab) != teacher.config.vocab_size:
        raise ConfigError(f"vocab has {len(vocab)} tokens but teacher expects {teacher.config.vocab_size}")
    hyper = DS.DistillHyper(temperature=args.temperature, w_ce=args.w_ce, w_mlm=args.w_mlm,
                            w_cos=args.w_cos, learning_rate=args.lr, epochs=args.epochs,
                            batch_size=args.batch_size, max_len=args.max_len,
                            mask_rate=args.mask_rate, seed=args.seed, warmup_fraction=args.warmup)
    layer_map = DS.LayerMap(args.layer_map) if args.layer_map is not None else None
    seqs = TR.encode_corpus(_read_corpus(args.corpus), vocab, hyper.max_len)
    log = _open_log(args)
    try:
        student = DS.distill(teacher, seqs, hyper, layer_map=layer_map, log=log)
    finally:
        if log:
            log.close()
    save_checkpoint(student.params, student.config, student.provenance, args.out)
    print(f"wrote student checkpoint ({student.config.num_layers} layers, "
          f"{M.count_parameters(student.config)} parameters) to {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    _print_header(args)
    _require_files(args.ckpt, args.data, args.vocab)
    vocab = TK.Vocab.load(args.vocab)
    init = load_checkpoint(args.ckpt)
    posts = D.load_posts(args.data)
    train, _ = D.split(posts, train_fraction=args.train_fraction, seed=args.split_seed,
                       stratify_by_course=args.stratify_by_course)
    hyper = TR.FinetuneHyper(learning_rate=args.lr, epochs=args.epochs, max_len=args.max_len,
                             batch_size=args.batch_size, seed=args.seed, warmup_fraction=args.warmup)
    log = _open_log(args)
    try:
        ckpt = TR.finetune_classifier(init, train, args.task, hyper, vocab, log=log)
    finally:
        if log:
            log.close()
    save_checkpoint(ckpt.params, ckpt.config, ckpt.provenance, args.out)
    print(f"wrote checkpoint ({ckpt.provenance}) trained on {len(train)} posts to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _print_header(args)
    _require_files(*args.ckpt, args.data, args.vocab)
    vocab = TK.Vocab.load(args.vocab)
    posts = D.load_posts(args.data)
    if args.split == "all":
        part = posts
    else:
        train, test = D.split(posts, train_fraction=args.train_fraction, seed=args.split_seed)
        part = train if args.split == "train" else test
    if not part:
        raise InputError(f"selected split {args.split!r} is empty")
    tasks = list(D.TASKS) if args.task == "all" else [args.task]
    reports = []
    for ckpt_path in args.ckpt:
        ckpt = load_checkpoint(ckpt_path)
        for task in tasks:
            dataset = D.make_task_dataset(part, task, provenance=str(args.data))
            reports.append(E.evaluate_checkpoint(ckpt, vocab, dataset, max_len=args.max_len,
                                                 model_name=_model_name(ckpt_path),
                                                 batch_size=args.batch_size))
    text = E.render_report(reports, style=args.style)
    kv = E.kv_report(reports)
    if args.out:
        atomic_write_text(args.out, text)
        kv_path = args.kv_out or Path(str(args.out) + ".kv")
        atomic_write_text(kv_path, kv)
        print(f"wrote report to {args.out} and {kv_path}")
    else:
        print(text)
        if args.kv_out:
            atomic_write_text(args.kv_out, kv)
    return EXIT_OK


def cmd_bench(args) -> int:
    _print_header(args)
    _require_files(args.ckpt, args.reference)
    ckpt = load_checkpoint(args.ckpt)
    reference = load_checkpoint(args.reference) if args.reference else None
    results = E.benchmark_inference(ckpt, batch_size=args.batch_size, seq_len=args.seq_len,
                                    repetitions=args.reps, reference=reference,
                                    model_name=_model_name(args.ckpt),
                                    reference_name=_model_name(args.reference) if args.reference else "reference",
                                    log_rss=args.rss)
    text = E.render_benchmark(results)
    if args.out:
        atomic_write_text(args.out, text)
        print(f"wrote benchmark to {args.out}")
    else:
        print(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (InputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except EdlmError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
