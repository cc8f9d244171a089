"""Greedy grouping of consecutive complete sentences under a duration budget."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import FRAME_SHIFT_MS, Corpus, Utterance


class OverlongSentenceWarning(UserWarning):
    """A single sentence is longer than the chunk budget and was kept whole."""


@dataclass(frozen=True)
class ChunkPolicy:
    max_seconds: float = 24.0
    frame_shift_ms: float = FRAME_SHIFT_MS

    def __post_init__(self):
        if not self.max_seconds > 0:
            raise ValueError(f"max_seconds must be positive, got {self.max_seconds}")


@dataclass(frozen=True)
class Chunk:
    source_utterance_id: str
    first: int
    last: int
    total_seconds: float

    @property
    def sentence_indices(self) -> range:
        return range(self.first, self.last + 1)

    def __len__(self) -> int:
        return self.last - self.first + 1


def group_sentences(frames: Sequence[int], policy: ChunkPolicy) -> list[tuple[int, int]]:
    """Inclusive ``(first, last)`` sentence groups for one recording.

    A sentence joins the current group iff the group stays within budget;
    budgets are compared in milliseconds, which is exact for 12.5 ms frames.
    """
    budget_ms = policy.max_seconds * 1000.0
    groups: list[tuple[int, int]] = []
    start, acc = 0, 0.0
    for i, n in enumerate(frames):
        ms = n * policy.frame_shift_ms
        if i > start and acc + ms > budget_ms:
            groups.append((start, i - 1))
            start, acc = i, 0.0
        acc += ms
    if len(frames):
        groups.append((start, len(frames) - 1))
    return groups


def chunk_utterance(utt: Utterance, policy: ChunkPolicy) -> list[Chunk]:
    frames = [s.n_frames for s in utt.sentences]
    chunks = []
    for first, last in group_sentences(frames, policy):
        seconds = sum(frames[first : last + 1]) * policy.frame_shift_ms / 1000.0
        if seconds > policy.max_seconds:
            warnings.warn(
                f"{utt.id}: sentence {first} lasts {seconds:.2f}s, over the {policy.max_seconds}s budget; kept whole",
                OverlongSentenceWarning,
                stacklevel=2,
            )
        chunks.append(Chunk(utt.id, first, last, seconds))
    return chunks


def chunk_corpus(corpus: Corpus | Iterable[Utterance], policy: ChunkPolicy) -> list[Chunk]:
    """Chunks never cross utterance boundaries; order follows the corpus."""
    return [c for utt in corpus for c in chunk_utterance(utt, policy)]


def sentence_chunks(corpus: Corpus | Iterable[Utterance]) -> list[Chunk]:
    """One chunk per sentence: the single-sentence regime."""
    return [
        Chunk(utt.id, i, i, s.n_frames * FRAME_SHIFT_MS / 1000.0)
        for utt in corpus
        for i, s in enumerate(utt.sentences)
    ]


def concatenate_chunk(source: Corpus | Utterance, chunk: Chunk) -> Utterance:
    """The chunk's sentences as one utterance, mel frames sliced to match."""
    utt = source if isinstance(source, Utterance) else source.by_id(chunk.source_utterance_id)
    if utt.id != chunk.source_utterance_id:
        raise ValueError(f"chunk refers to {chunk.source_utterance_id}, got utterance {utt.id}")
    if not 0 <= chunk.first <= chunk.last < len(utt.sentences):
        raise IndexError(
            f"chunk {chunk.first}..{chunk.last} out of range for {utt.id} with {len(utt.sentences)} sentences"
        )
    bounds = utt.sentence_frame_bounds()
    lo, hi = bounds[chunk.first][0], bounds[chunk.last][1]
    return Utterance(
        f"{utt.id}:{chunk.first}-{chunk.last}",
        utt.speaker_id,
        utt.sentences[chunk.first : chunk.last + 1],
        np.array(utt.mel[lo:hi]),
    )


def materialize(corpus: Corpus, chunks: Sequence[Chunk]) -> list[Utterance]:
    return [concatenate_chunk(corpus, c) for c in chunks]


MANIFEST_FIELDS = ("utterance_id", "first_sentence", "last_sentence", "seconds")


def write_manifest(chunks: Sequence[Chunk], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for c in chunks:
            writer.writerow([c.source_utterance_id, c.first, c.last, f"{c.total_seconds:.4f}"])


def read_manifest(path: str | Path) -> list[Chunk]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            Chunk(row["utterance_id"], int(row["first_sentence"]), int(row["last_sentence"]), float(row["seconds"]))
            for row in reader
        ]
