"""``longform-tts`` command line: corpus, chunking, training, synthesis and evaluation."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from . import eval as ev
from .chunker import ChunkPolicy, OverlongSentenceWarning, chunk_corpus, materialize, sentence_chunks, write_manifest
from .corpus import FRAME_SHIFT_MS, CorpusSpec, generate_corpus, load_corpus, write_corpus, write_mel
from .models import (
    VARIANTS,
    ModelBundle,
    NumericError,
    TrainConfig,
    TrainSynthesisMismatchWarning,
    build_models,
    check_policy,
    split_corpus,
    synthesize_many,
    train_acoustic,
    train_duration,
    training_items,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("longform_tts")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_run_record(path: Path, command: str, seed: int, **details) -> None:
    """Sidecar JSON describing how an output was produced (no timestamps)."""
    record = {"command": command, "seed": seed, **details}
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".run.json")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args) -> int:
    spec = CorpusSpec(
        num_speakers=args.num_speakers,
        num_utterances=args.num_utterances,
        sentences_per_utterance=(args.min_sentences, args.max_sentences),
        phoneme_inventory_size=args.inventory_size,
        seed=args.seed,
        context_coupling=args.context_coupling,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(generate_corpus(spec), out)
    _write_run_record(_sidecar(out), "gen-corpus", args.seed, spec={k: v for k, v in vars(spec).items()})
    print(f"wrote {spec.num_utterances} utterances to {out}")
    return EXIT_OK


def cmd_chunk(args) -> int:
    corpus = load_corpus(args.corpus)
    policy = ChunkPolicy(args.max_seconds)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", OverlongSentenceWarning)
        chunks = chunk_corpus(corpus, policy)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Path(args.out)
    write_manifest(chunks, out)
    _write_run_record(_sidecar(out), "chunk", args.seed, corpus=str(args.corpus), max_seconds=args.max_seconds)
    print(f"wrote {len(chunks)} chunks to {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        max_steps=args.steps,
        seed=args.seed,
        validation_fraction=args.validation_fraction,
        eval_every=args.eval_every,
    )


def _load_or_build(args, corpus) -> ModelBundle:
    bundle_dir = Path(args.bundle)
    if (bundle_dir / "manifest.json").exists():
        bundle = ModelBundle.load(bundle_dir)
        if bundle.variant != args.variant:
            raise ValueError(f"{bundle_dir} holds a {bundle.variant} bundle, not {args.variant}")
        return bundle
    return build_models(corpus, args.variant, seed=args.seed, max_seconds=args.max_seconds, word_mode=args.word_mode)


def _write_history(path: Path, result) -> None:
    lines = ["step,train_loss,validation"]
    lines += [f"{h.step},{h.train_loss:.6f},{h.validation:.6f}" for h in result.history]
    path.write_text("\n".join(lines) + "\n")


def _train(args, kind: str) -> int:
    corpus = load_corpus(args.corpus)
    if len(corpus) == 0:
        raise ValueError(f"{args.corpus}: corpus is empty")
    bundle = _load_or_build(args, corpus)
    train, val = split_corpus(corpus, args.validation_fraction, args.seed)
    config = _train_config(args)
    train_items = training_items(train, bundle.chunk_policy)
    val_items = training_items(val, bundle.chunk_policy)
    if kind == "duration":
        result = train_duration(bundle.duration, train_items, val_items, config)
    else:
        if bundle.acoustic is None:
            raise ValueError("bundle has no acoustic model")
        config.selection = "last"
        result = train_acoustic(bundle.acoustic, train_items, val_items, config)
    bundle.save(args.bundle)
    _write_history(Path(args.bundle) / f"{kind}_history.csv", result)
    print(f"{kind} model: {len(result.history)} evaluations, selected step {result.selected_step}, "
          f"validation {result.history[-1].validation:.4f}")
    return EXIT_OK


def cmd_train_duration(args) -> int:
    return _train(args, "duration")


def cmd_train_acoustic(args) -> int:
    return _train(args, "acoustic")


_WORKER_BUNDLE: ModelBundle | None = None


def _worker_init(bundle_dir: str) -> None:
    global _WORKER_BUNDLE
    _WORKER_BUNDLE = ModelBundle.load(bundle_dir)


def _worker_run(job):
    chunks, speaker = job
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TrainSynthesisMismatchWarning)
        return synthesize_many(_WORKER_BUNDLE, chunks, speaker)


def cmd_synthesize(args) -> int:
    bundle = ModelBundle.load(args.bundle)
    corpus = load_corpus(args.corpus)
    if args.speaker is not None and args.speaker not in bundle.speakers.vectors:
        raise ValueError(f"unknown speaker {args.speaker!r}")
    max_seconds = args.max_seconds
    if max_seconds is None and bundle.chunk_policy is not None:
        max_seconds = bundle.chunk_policy.max_seconds
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OverlongSentenceWarning)
        chunks = sentence_chunks(corpus) if max_seconds is None else chunk_corpus(corpus, ChunkPolicy(max_seconds))
    items = materialize(corpus, chunks)
    if items:
        # a single representative check keeps the warning to one line per run
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", TrainSynthesisMismatchWarning)
            longest = max(items, key=lambda u: len(u.sentences))
            check_policy(bundle, longest, longest.n_frames * FRAME_SHIFT_MS / 1000.0)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    groups = [items[i : i + 8] for i in range(0, len(items), 8)]
    if args.jobs > 1 and len(groups) > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_worker_init, initargs=(str(args.bundle),)) as pool:
            parts = list(pool.map(_worker_run, [(g, args.speaker) for g in groups]))
    else:
        global _WORKER_BUNDLE
        _WORKER_BUNDLE = bundle
        parts = [_worker_run((g, args.speaker)) for g in groups]
    results = [r for part in parts for r in part]

    out = Path(args.out)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    rows = []
    for utt, res in zip(items, results):
        write_mel(out / "mels" / (res.utterance_id.replace(":", "_") + ".mel"), res.mel)
        rows.extend(
            (utt.id, i, sym, float(p), float(r)) for i, (sym, p, r) in enumerate(zip(utt.symbols, res.durations, utt.durations))
        )
    ev.write_duration_csv(out / "durations.csv", rows)
    _write_run_record(
        out / "manifest.json",
        "synthesize",
        bundle.seed,
        bundle=str(args.bundle),
        corpus=str(args.corpus),
        speaker=args.speaker,
        max_seconds=max_seconds,
        chunks=[r.utterance_id for r in results],
    )
    print(f"synthesized {len(results)} chunks into {out}")
    return EXIT_OK


def _labelled(specs: Sequence[str]) -> dict[str, Path]:
    out = {}
    for spec in specs:
        label, sep, path = spec.partition("=")
        if not sep:
            label, path = Path(spec).stem, spec
        out[label] = Path(path)
    return out


def _duration_reports(specs: Sequence[str]) -> dict[str, ev.MetricsReport]:
    reports = {}
    for label, path in _labelled(specs).items():
        rows = ev.read_duration_csv(path)
        reports[label] = ev.duration_metrics(rows.pred, rows.ref, rows.symbols)
    return reports


def cmd_eval_durations(args) -> int:
    reports = _duration_reports(args.input)
    print(ev.format_metrics_table(reports), end="")
    if args.out:
        ev.write_metrics_csv(args.out, reports)
    if args.histogram:
        label, path = next(iter(_labelled(args.input).items()))
        rows = ev.read_duration_csv(path)
        category = ev.DurationCategory(args.histogram_category)
        hist = ev.pause_histogram(ev.durations_in(category, rows.ref.astype(int), rows.symbols), args.bin_width)
        ev.write_histogram_csv(args.histogram, hist, category.value)
    return EXIT_OK


def cmd_eval_mushra(args) -> int:
    table = ev.read_mushra_csv(args.input)
    print(f"{'system':<12} {'mean':>6} {'±95%':>6} {'n':>6}")
    for name in table.systems:
        s = ev.mushra_summary(table, name)
        print(f"{name:<12} {s.mean:6.1f} {s.half_width:6.1f} {s.n:6d}")
    if args.system and args.baseline:
        try:
            t = ev.mushra_paired_test(table, args.system, args.baseline, args.unit)
            print(f"paired t-test {args.system} vs {args.baseline} ({args.unit}): t={t.t:.3f} df={t.df} p={t.p_value:.3g}")
        except ev.DegenerateTestError as exc:
            print(f"paired t-test {args.system} vs {args.baseline}: {exc}")
        if args.reference:
            means = {n: ev.mushra_summary(table, n).mean for n in (args.system, args.baseline, args.reference)}
            gap = ev.gap_reduction(means[args.system], means[args.baseline], means[args.reference])
            print(f"gap reduction: {gap:.1f}%")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = _duration_reports(args.input)
    table = ev.format_metrics_table(reports)
    print(table, end="")
    if args.out:
        ev.write_metrics_csv(args.out, reports)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common_training(p) -> None:
    p.add_argument("--corpus", required=True, help="corpus JSONL file")
    p.add_argument("--bundle", required=True, help="model bundle directory (created or updated)")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="mltb")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--max-seconds", type=float, default=24.0, help="chunk budget for long-context variants")
    p.add_argument("--word-mode", choices=("trainable_table", "frozen_hash"), default="trainable_table")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="longform-tts", description=__doc__)
    parser.add_argument("--config", help="INI file; [common] and per-command sections supply flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--out", default="corpus.jsonl")
    p.add_argument("--num-speakers", type=int, default=3)
    p.add_argument("--num-utterances", type=int, default=40)
    p.add_argument("--min-sentences", type=int, default=3)
    p.add_argument("--max-sentences", type=int, default=8)
    p.add_argument("--inventory-size", type=int, default=40)
    p.add_argument("--context-coupling", type=float, default=1.0)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("chunk", help="group sentences into long-context chunks")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-seconds", type=float, default=24.0)
    p.add_argument("--out", default="chunks.csv")
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("train-duration", help="train the duration model of a bundle")
    _common_training(p)
    p.set_defaults(func=cmd_train_duration)

    p = sub.add_parser("train-acoustic", help="train the acoustic model of a bundle")
    _common_training(p)
    p.set_defaults(func=cmd_train_acoustic)

    p = sub.add_parser("synthesize", help="predict durations and mel frames for a corpus")
    p.add_argument("--bundle", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default="synth")
    p.add_argument("--speaker", help="override the speaker of every chunk")
    p.add_argument("--max-seconds", type=float, help="chunk budget; defaults to the bundle's training policy")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("eval-durations", help="duration MSE / R2 by phoneme category")
    p.add_argument("--input", nargs="+", required=True, help="duration CSVs, optionally as label=path")
    p.add_argument("--out", help="metrics CSV")
    p.add_argument("--histogram", help="histogram CSV of reference pause durations (first input)")
    p.add_argument("--histogram-category", choices=[c.value for c in ev.DurationCategory], default="inter_pause")
    p.add_argument("--bin-width", type=int, default=10)
    p.set_defaults(func=cmd_eval_durations)

    p = sub.add_parser("eval-mushra", help="MUSHRA means, paired t-test and gap reduction")
    p.add_argument("--input", required=True, help="MUSHRA CSV (rater, sample, system, score)")
    p.add_argument("--system")
    p.add_argument("--baseline")
    p.add_argument("--reference")
    p.add_argument("--unit", choices=ev.PAIRING_UNITS, default="rating")
    p.set_defaults(func=cmd_eval_mushra)

    p = sub.add_parser("report", help="comparison table across trained variants")
    p.add_argument("--input", nargs="+", required=True, help="label=durations.csv per variant")
    p.add_argument("--out", help="metrics CSV")
    p.set_defaults(func=cmd_report)

    for name, action in sub.choices.items():
        action.add_argument("--seed", type=int, default=0, help="root seed")
    return parser


def _apply_config(parser: argparse.ArgumentParser, path: str, command: str) -> None:
    cfg = configparser.ConfigParser()
    if not cfg.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    known = {a.dest: a for a in sub._actions}
    values = {}
    for section in ("common", command):
        if cfg.has_section(section):
            values.update(cfg.items(section))
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in known:
            if cfg.has_section(command) and cfg.has_option(command, key):
                raise UsageError(f"{path}: unknown option {key!r} for {command}")
            continue
        action = known[dest]
        if action.nargs in ("+", "*"):
            defaults[dest] = raw.split()
        else:
            defaults[dest] = action.type(raw) if action.type else raw
        action.required = False
    sub.set_defaults(**defaults)


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        if args.config:
            _apply_config(parser, args.config, args.command)
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        name = exc.filename if getattr(exc, "filename", None) else exc
        print(f"I/O error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
