"""Desk-scale training experiments: memorization check and the context comparison."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

from . import eval as metrics
from .chunker import ChunkPolicy
from .corpus import PAU_INTER, CorpusSpec, Utterance, generate_corpus
from .models import (
    ModelBundle,
    TrainConfig,
    TrainSynthesisMismatchWarning,
    acoustic_validation_mse,
    build_models,
    duration_validation_mae,
    split_corpus,
    synthesize_many,
    train_acoustic,
    train_duration,
    training_items,
)


@dataclass(frozen=True)
class OverfitResult:
    duration_mae: float
    mel_mse: float
    duration_steps: int
    acoustic_steps: int
    seconds: float
    duration_history: tuple = ()
    acoustic_history: tuple = ()


def overfit(
    seed: int = 0,
    n_utterances: int = 5,
    max_steps: int = 5000,
    mae_target: float = 0.5,
    mse_target: float = 0.01,
    sentences_per_utterance: tuple[int, int] = (1, 1),
) -> OverfitResult:
    """Train desk-preset models on a handful of utterances and score them on those same utterances."""
    start = time.perf_counter()
    spec = CorpusSpec(num_speakers=2, num_utterances=n_utterances, seed=seed, sentences_per_utterance=sentences_per_utterance)
    corpus = generate_corpus(spec)
    bundle = build_models(corpus, "mtb", seed=seed)
    items = list(corpus)
    dur = train_duration(
        bundle.duration,
        items,
        items,
        TrainConfig(batch_size=n_utterances, max_steps=max_steps, eval_every=50, seed=seed, stop_below=mae_target / 2),
    )
    ac = train_acoustic(
        bundle.acoustic,
        items,
        items,
        TrainConfig(batch_size=n_utterances, max_steps=max_steps, eval_every=50, seed=seed, stop_below=mse_target / 2),
    )
    return OverfitResult(
        duration_validation_mae(bundle.duration, items),
        acoustic_validation_mse(bundle.acoustic, items),
        dur.history[-1].step,
        ac.history[-1].step,
        time.perf_counter() - start,
        tuple(dur.history),
        tuple(ac.history),
    )


@dataclass(frozen=True)
class PauseScore:
    mse: float
    r2: float
    count: int


def inter_pause_score(bundle: ModelBundle, items: list[Utterance]) -> PauseScore:
    """MSE and R^2 of synthesized inter-sentence pause durations against the reference."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TrainSynthesisMismatchWarning)
        results = synthesize_many(bundle, items, with_mel=False)
    pred, ref = [], []
    for utt, res in zip(items, results):
        for sym, p, r in zip(utt.symbols, res.durations, utt.durations):
            if sym == PAU_INTER:
                pred.append(p)
                ref.append(r)
    return PauseScore(metrics.mse(pred, ref), metrics.r_squared(pred, ref), len(ref))


@dataclass(frozen=True)
class ContextResult:
    seed: int
    # single-sentence model on single sentences
    single: PauseScore
    # long-context model on chunks
    long: PauseScore
    # single-sentence model fed the long-context chunks
    single_on_chunks: PauseScore
    seconds: float

    @property
    def long_context_wins(self) -> bool:
        return self.long.mse < self.single.mse and self.long.r2 > self.single.r2

    @property
    def mismatch_hurts(self) -> bool:
        return self.single_on_chunks.mse >= self.long.mse


def context_experiment(
    seed: int = 0,
    n_utterances: int = 60,
    steps: int = 800,
    learning_rate: float = 3e-4,
    validation_fraction: float = 0.2,
    max_seconds: float = 24.0,
    context_coupling: float = 1.0,
) -> ContextResult:
    """Train the single-sentence (mtb) and long-context (mltb) duration models on one corpus and compare pauses."""
    start = time.perf_counter()
    corpus = generate_corpus(CorpusSpec(num_utterances=n_utterances, seed=seed, context_coupling=context_coupling))
    train, held_out = split_corpus(corpus, validation_fraction, seed)
    # checkpoint selection uses a slice of the training recordings, never the held-out ones
    fit, val = split_corpus(train, 0.1, seed + 1)
    config = TrainConfig(learning_rate=learning_rate, max_steps=steps, eval_every=max(steps // 8, 1), seed=seed)
    bundles = {}
    for variant in ("mtb", "mltb"):
        bundle = build_models(fit, variant, seed=seed, max_seconds=max_seconds)
        train_duration(bundle.duration, training_items(fit, bundle.chunk_policy), training_items(val, bundle.chunk_policy), config)
        bundles[variant] = bundle
    sentences = training_items(held_out, None)
    chunks = training_items(held_out, ChunkPolicy(max_seconds))
    return ContextResult(
        seed,
        inter_pause_score(bundles["mtb"], sentences),
        inter_pause_score(bundles["mltb"], chunks),
        inter_pause_score(bundles["mtb"], chunks),
        time.perf_counter() - start,
    )


def majority(flags: list[bool]) -> bool:
    return sum(flags) * 2 > len(flags)


def summarize(results: list[ContextResult]) -> str:
    lines = ["seed  single mse/r2    long mse/r2      single-on-chunks mse"]
    for r in results:
        lines.append(
            f"{r.seed:<5} {r.single.mse:8.1f}/{r.single.r2:6.3f} {r.long.mse:8.1f}/{r.long.r2:6.3f} {r.single_on_chunks.mse:10.1f}"
        )
    return "\n".join(lines)


__all__ = [
    "ContextResult",
    "OverfitResult",
    "PauseScore",
    "context_experiment",
    "inter_pause_score",
    "majority",
    "overfit",
    "summarize",
]
