"""Speaker and word-level conditioning, and duration-driven upsampling."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nnet
from .corpus import Word, is_pause
from .nnet import Tensor


class ConditioningError(ValueError):
    pass


# ---------------------------------------------------------------------------
# speakers


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class SpeakerTable:
    """Fixed unit-norm speaker vectors."""

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        self.vectors = {k: np.asarray(v, dtype=np.float32) for k, v in vectors.items()}
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise ConditioningError(f"speaker vectors disagree in shape: {dims}")

    @classmethod
    def random(cls, speaker_ids: Iterable[str], dim: int = 256, seed: int = 0) -> SpeakerTable:
        vectors = {}
        for sid in sorted(set(speaker_ids)):
            digest = int.from_bytes(hashlib.blake2b(sid.encode(), digest_size=8).digest(), "little")
            rng = np.random.default_rng([seed, digest])
            vectors[sid] = _unit(rng.normal(size=dim))
        return cls(vectors)

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0] if self.vectors else 0

    def __getitem__(self, speaker_id: str) -> np.ndarray:
        try:
            return self.vectors[speaker_id]
        except KeyError:
            raise ConditioningError(f"unknown speaker {speaker_id!r}") from None

    def __contains__(self, speaker_id: str) -> bool:
        return speaker_id in self.vectors

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for sid in sorted(self.vectors):
                writer.writerow([sid, *(repr(float(x)) for x in self.vectors[sid])])

    @classmethod
    def load(cls, path: str | Path) -> SpeakerTable:
        vectors = {}
        with open(path, newline="") as fh:
            for line_no, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                try:
                    vectors[row[0]] = np.array([float(x) for x in row[1:]], dtype=np.float32)
                except ValueError as exc:
                    raise ConditioningError(f"{path}:{line_no}: bad speaker vector") from exc
        return cls(vectors)


# ---------------------------------------------------------------------------
# word embeddings


class SubTokenizer:
    """Whitespace split, then greedy longest-prefix match against a vocabulary.

    Only the first sub-token of a word is ever needed; a word with no
    vocabulary prefix falls back to its first character.
    """

    def __init__(self, vocab: Iterable[str]):
        self.vocab = frozenset(vocab)
        self._max_len = max((len(v) for v in self.vocab), default=1)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> SubTokenizer:
        return cls(set(words))

    def first_subtoken(self, word: str) -> str:
        piece = word.split()[0] if word.split() else word
        for n in range(min(len(piece), self._max_len), 0, -1):
            if piece[:n] in self.vocab:
                return piece[:n]
        return piece[:1]


def hash_vector(token: str, dim: int, seed: int = 0) -> np.ndarray:
    digest = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")
    return _unit(np.random.default_rng([seed, digest]).normal(size=dim)).astype(np.float32)


class WordEmbeddingProvider:
    """Stand-in for a pretrained contextual model's first-sub-token output.

    ``frozen_hash`` maps each first sub-token to a fixed unit vector.
    ``trainable_table`` starts from the same vectors for the vocabulary and
    lets task gradients update them; out-of-vocabulary tokens stay frozen.
    """

    MODES = ("frozen_hash", "trainable_table")

    def __init__(self, tokenizer: SubTokenizer, dim: int = 768, mode: str = "frozen_hash", seed: int = 0):
        if mode not in self.MODES:
            raise ConditioningError(f"unknown word-embedding mode {mode!r}")
        self.tokenizer = tokenizer
        self.dim = dim
        self.mode = mode
        self.seed = seed
        self.index: dict[str, int] = {}
        self.table: Tensor | None = None
        if mode == "trainable_table":
            tokens = sorted(tokenizer.vocab)
            self.index = {t: i for i, t in enumerate(tokens)}
            init = np.stack([hash_vector(t, dim, seed) for t in tokens]) if tokens else np.zeros((0, dim))
            self.table = Tensor(init.astype(np.float32), requires_grad=True)

    def vector(self, word: str) -> np.ndarray:
        token = self.tokenizer.first_subtoken(word)
        if self.table is not None and token in self.index:
            return self.table.data[self.index[token]]
        return hash_vector(token, self.dim, self.seed)

    def matrix(self, words: Sequence[str]) -> Tensor:
        """``[len(words), dim]``; differentiable into the table in trainable mode."""
        tokens = [self.tokenizer.first_subtoken(w) for w in words]
        if self.table is None:
            rows = [hash_vector(t, self.dim, self.seed) for t in tokens]
            return Tensor(np.stack(rows) if rows else np.zeros((0, self.dim), np.float32))
        oov = sorted({t for t in tokens if t not in self.index})
        oov_pos = {t: len(self.index) + i for i, t in enumerate(oov)}
        ids = np.array([self.index.get(t, oov_pos.get(t, -1)) for t in tokens], dtype=np.int64)
        if oov:
            extra = Tensor(np.stack([hash_vector(t, self.dim, self.seed) for t in oov]))
            source = nnet.concat([self.table, extra], axis=0)
        else:
            source = self.table
        return nnet.embedding(source, ids)


def word_index(words: Sequence[Word], symbols: Sequence[str]) -> np.ndarray:
    """Per phoneme, the index of the word containing it, or -1 for pauses."""
    owner = np.full(len(symbols), -1, dtype=np.int64)
    for k, w in enumerate(words):
        if w.start < 0 or w.stop > len(symbols):
            raise ConditioningError(f"word {w.text!r} span {w.start}..{w.stop} exceeds {len(symbols)} phonemes")
        owner[w.start : w.stop] = k
    for i in np.flatnonzero(owner < 0):
        if not is_pause(symbols[i]):
            raise ConditioningError(f"phoneme {i} ({symbols[i]}) is outside every word and is not a pause")
    return owner


def align_word_embeddings(words: Sequence[Word], symbols: Sequence[str], provider: WordEmbeddingProvider) -> Tensor:
    """``[n_phonemes, dim]``: row i holds the embedding of the word containing phoneme i (zeros for pauses)."""
    owner = word_index(words, symbols)
    return gather_word_rows(provider.matrix([w.text for w in words]), owner)


def gather_word_rows(word_matrix: Tensor, owner: np.ndarray) -> Tensor:
    """Rows of ``word_matrix`` by ``owner`` index, with -1 mapped to a zero row."""
    n_words, dim = word_matrix.shape
    padded = nnet.concat([word_matrix, Tensor(np.zeros((1, dim), word_matrix.data.dtype))], axis=0)
    return nnet.embedding(padded, np.where(owner < 0, n_words, owner))


# ---------------------------------------------------------------------------
# projection and upsampling


@dataclass(frozen=True)
class ConditioningConfig:
    use_speaker: bool = False
    use_word_embeddings: bool = False
    d_model: int = 256
    speaker_dim: int = 256
    word_dim: int = 768

    @property
    def input_dim(self) -> int:
        return (
            self.d_model
            + (self.speaker_dim if self.use_speaker else 0)
            + (self.word_dim if self.use_word_embeddings else 0)
        )


@dataclass
class ConditioningParams:
    weight: Tensor
    bias: Tensor

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


def init_conditioning(cfg: ConditioningConfig, rng: np.random.Generator, dtype=np.float32) -> ConditioningParams:
    w = rng.normal(0, math.sqrt(2.0 / cfg.input_dim), (cfg.input_dim, cfg.d_model))
    return ConditioningParams(Tensor(w.astype(dtype), requires_grad=True), Tensor(np.zeros(cfg.d_model, dtype), requires_grad=True))


def attach_conditioning(
    phoneme_encodings,
    speaker_vec,
    word_matrix,
    cfg: ConditioningConfig,
    params: ConditioningParams,
) -> Tensor:
    """Concatenate ``[phoneme, speaker (broadcast over time), word]`` and project with linear + ReLU.

    ``phoneme_encodings`` is ``[..., n, d_model]``; ``speaker_vec`` is
    ``[..., speaker_dim]``; ``word_matrix`` is ``[..., n, word_dim]``.
    """
    enc = nnet._wrap(phoneme_encodings)
    if enc.shape[-1] != cfg.d_model:
        raise ConditioningError(f"phoneme encodings have dim {enc.shape[-1]}, expected {cfg.d_model}")
    parts = [enc]
    if cfg.use_speaker:
        if speaker_vec is None:
            raise ConditioningError("speaker conditioning is enabled but no speaker vector was given")
        spk = np.asarray(speaker_vec.data if isinstance(speaker_vec, Tensor) else speaker_vec, enc.data.dtype)
        if spk.shape[-1] != cfg.speaker_dim:
            raise ConditioningError(f"speaker vector has dim {spk.shape[-1]}, expected {cfg.speaker_dim}")
        spk = np.broadcast_to(spk[..., None, :], (*enc.shape[:-1], cfg.speaker_dim))
        parts.append(Tensor(np.ascontiguousarray(spk)))
    if cfg.use_word_embeddings:
        if word_matrix is None:
            raise ConditioningError("word conditioning is enabled but no word matrix was given")
        wm = nnet._wrap(word_matrix)
        if wm.shape[:-1] != enc.shape[:-1] or wm.shape[-1] != cfg.word_dim:
            raise ConditioningError(f"word matrix {wm.shape} does not match encodings {enc.shape}")
        parts.append(wm)
    h = nnet.concat(parts, axis=-1) if len(parts) > 1 else enc
    return nnet.relu(nnet.linear(h, params.weight, params.bias))


def _check_durations(durations) -> np.ndarray:
    d = np.asarray(durations)
    if d.size and not np.issubdtype(d.dtype, np.integer):
        if not np.all(d == np.round(d)):
            raise ConditioningError("durations must be integers")
    d = d.astype(np.int64)
    if (d < 0).any():
        raise ConditioningError("durations must be non-negative")
    return d


def length_regulate(encodings, durations: Sequence[int]) -> Tensor:
    """Repeat row i of ``encodings`` (``[n, d]``) ``durations[i]`` times."""
    enc = nnet._wrap(encodings)
    d = _check_durations(durations)
    if d.shape != (enc.shape[0],):
        raise ConditioningError(f"{len(d)} durations for {enc.shape[0]} encodings")
    index = np.repeat(np.arange(enc.shape[0]), d)
    if enc.shape[0] == 0:
        return Tensor(np.zeros((0, enc.shape[1]), enc.data.dtype))
    return nnet.reshape(nnet.gather_rows(nnet.reshape(enc, (1, *enc.shape)), index[None, :]), (len(index), enc.shape[1]))


def length_regulate_batch(encodings, durations: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Batched upsampling of ``[B, n, d]`` with per-row durations ``[B, n]`` (zeros on padding).

    Returns the ``[B, T_max, d]`` frames (padding rows zero) and the frame mask.
    """
    enc = nnet._wrap(encodings)
    d = _check_durations(durations)
    if d.shape != enc.shape[:2]:
        raise ConditioningError(f"durations {d.shape} do not match encodings {enc.shape[:2]}")
    totals = d.sum(axis=1)
    t_max = int(totals.max()) if len(totals) else 0
    index = np.zeros((enc.shape[0], t_max), dtype=np.int64)
    mask = np.zeros((enc.shape[0], t_max), dtype=bool)
    for b in range(enc.shape[0]):
        idx = np.repeat(np.arange(enc.shape[1]), d[b])
        index[b, : len(idx)] = idx
        mask[b, : len(idx)] = True
    if t_max == 0:
        return Tensor(np.zeros((enc.shape[0], 0, enc.shape[2]), enc.data.dtype)), mask
    return nnet.mask_rows(nnet.gather_rows(enc, index), mask), mask
