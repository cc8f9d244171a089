"""Aligned multi-sentence speech data: types, a synthetic generator, file I/O.

Ground-truth durations stand in for force-aligned ones.  Mel frames are
80 bands at a 12.5 ms shift.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

N_MELS = 80
FRAME_SHIFT_MS = 12.5
PAU_INTRA = "PAU_INTRA"
PAU_INTER = "PAU_INTER"
PAUSES = (PAU_INTRA, PAU_INTER)

_SYMBOL_RE = re.compile(r"^P(\d{3})$")


class CorpusFormatError(ValueError):
    """A corpus record could not be parsed."""


class CorpusValidationError(ValueError):
    """A corpus record parsed but violates an invariant."""


def phoneme_inventory(size: int) -> tuple[str, ...]:
    """The two pause symbols followed by ``size`` ordinary phonemes ``P000..``."""
    if size < 1:
        raise ValueError("phoneme inventory needs at least one non-pause symbol")
    return PAUSES + tuple(f"P{i:03d}" for i in range(size))


def inventory_hash(inventory: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(inventory).encode()).hexdigest()[:16]


def is_pause(symbol: str) -> bool:
    return symbol in PAUSES


def _check_symbol(symbol: str) -> None:
    if symbol not in PAUSES and not _SYMBOL_RE.match(symbol):
        raise CorpusValidationError(f"unknown phoneme symbol {symbol!r}")


class SentenceKind(str, enum.Enum):
    DECLARATIVE = "declarative"
    WH_QUESTION = "wh_question"
    YN_QUESTION = "yn_question"
    TOPIC_SHIFT = "topic_shift"


@dataclass(frozen=True)
class PhonemeToken:
    symbol: str
    duration_frames: int

    def __post_init__(self):
        _check_symbol(self.symbol)
        if self.duration_frames < 0:
            raise CorpusValidationError(f"negative duration for {self.symbol}")


@dataclass(frozen=True)
class Word:
    """A word and the half-open range ``[start, stop)`` of its phonemes."""

    text: str
    start: int
    stop: int

    @property
    def span(self) -> range:
        return range(self.start, self.stop)

    def shifted(self, offset: int) -> Word:
        return Word(self.text, self.start + offset, self.stop + offset)


@dataclass(frozen=True)
class Sentence:
    words: tuple[Word, ...]
    phonemes: tuple[PhonemeToken, ...]
    kind: SentenceKind

    def __post_init__(self):
        owner = [-1] * len(self.phonemes)
        cursor = 0
        for w_idx, word in enumerate(self.words):
            if word.start < cursor or word.stop <= word.start or word.stop > len(self.phonemes):
                raise CorpusValidationError(f"word {word.text!r} has an invalid span {word.start}..{word.stop}")
            for i in word.span:
                owner[i] = w_idx
            cursor = word.stop
        for i, (o, ph) in enumerate(zip(owner, self.phonemes)):
            if o >= 0 and is_pause(ph.symbol):
                raise CorpusValidationError(f"pause at index {i} lies inside word {self.words[o].text!r}")
            if o < 0 and not is_pause(ph.symbol):
                raise CorpusValidationError(f"phoneme {i} ({ph.symbol}) belongs to no word")
        inter = [i for i, ph in enumerate(self.phonemes) if ph.symbol == PAU_INTER]
        if len(inter) > 1 or (inter and inter[0] != len(self.phonemes) - 1):
            raise CorpusValidationError("PAU_INTER may only appear once, at the end of a sentence")

    @property
    def symbols(self) -> list[str]:
        return [p.symbol for p in self.phonemes]

    @property
    def durations(self) -> list[int]:
        return [p.duration_frames for p in self.phonemes]

    @property
    def n_frames(self) -> int:
        return sum(p.duration_frames for p in self.phonemes)


@dataclass(eq=False)
class Utterance:
    id: str
    speaker_id: str
    sentences: tuple[Sentence, ...]
    mel: np.ndarray

    def __post_init__(self):
        self.sentences = tuple(self.sentences)
        self.mel = np.asarray(self.mel, dtype=np.float32)
        if self.mel.ndim != 2 or self.mel.shape[1] != N_MELS:
            raise CorpusValidationError(f"{self.id}: mel must be [frames x {N_MELS}], got {self.mel.shape}")
        if self.mel.shape[0] != self.n_frames:
            raise CorpusValidationError(
                f"{self.id}: mel has {self.mel.shape[0]} frames but durations sum to {self.n_frames}"
            )

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.speaker_id == other.speaker_id
            and self.sentences == other.sentences
            and np.array_equal(self.mel, other.mel)
        )

    @property
    def phonemes(self) -> list[PhonemeToken]:
        return [p for s in self.sentences for p in s.phonemes]

    @property
    def symbols(self) -> list[str]:
        return [p.symbol for s in self.sentences for p in s.phonemes]

    @property
    def durations(self) -> list[int]:
        return [p.duration_frames for s in self.sentences for p in s.phonemes]

    @property
    def n_frames(self) -> int:
        return sum(s.n_frames for s in self.sentences)

    @property
    def n_phonemes(self) -> int:
        return sum(len(s.phonemes) for s in self.sentences)

    def words(self) -> list[Word]:
        """All words with spans indexed over the whole utterance."""
        out, offset = [], 0
        for s in self.sentences:
            out.extend(w.shifted(offset) for w in s.words)
            offset += len(s.phonemes)
        return out

    def sentence_frame_bounds(self) -> list[tuple[int, int]]:
        bounds, start = [], 0
        for s in self.sentences:
            bounds.append((start, start + s.n_frames))
            start += s.n_frames
        return bounds


@dataclass
class Corpus:
    utterances: list[Utterance] = field(default_factory=list)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, idx: int) -> Utterance:
        return self.utterances[idx]

    def by_id(self, utterance_id: str) -> Utterance:
        for u in self.utterances:
            if u.id == utterance_id:
                return u
        raise KeyError(utterance_id)

    def speakers(self) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances})


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class CorpusSpec:
    num_speakers: int = 3
    num_utterances: int = 40
    sentences_per_utterance: tuple[int, int] = (3, 8)
    phoneme_inventory_size: int = 40
    seed: int = 0
    context_coupling: float = 1.0
    words_per_sentence: tuple[int, int] = (3, 7)

    def validate(self) -> None:
        if self.num_speakers < 1 or self.num_utterances < 1:
            raise ValueError("num_speakers and num_utterances must be >= 1")
        for name in ("sentences_per_utterance", "words_per_sentence"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a range with 1 <= lo <= hi, got {(lo, hi)}")
        if self.phoneme_inventory_size < 8:
            raise ValueError("phoneme_inventory_size must be >= 8")
        if not 0.0 <= self.context_coupling <= 1.0:
            raise ValueError("context_coupling must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


# Marker words open questions and topic shifts; their first phoneme is
# reserved per kind so the kind of a sentence is audible from its first phoneme.
_MARKERS = {
    SentenceKind.WH_QUESTION: ("what", "where", "when", "why", "how", "who"),
    SentenceKind.YN_QUESTION: ("is", "are", "do", "does", "can", "will"),
    SentenceKind.TOPIC_SHIFT: ("anyway", "meanwhile", "besides", "incidentally"),
}
_MARKER_ONSET = {SentenceKind.WH_QUESTION: 0, SentenceKind.YN_QUESTION: 1, SentenceKind.TOPIC_SHIFT: 2}
_KINDS = tuple(SentenceKind)
_KIND_PACE = {
    SentenceKind.DECLARATIVE: 1.0,
    SentenceKind.WH_QUESTION: 0.92,
    SentenceKind.YN_QUESTION: 1.08,
    SentenceKind.TOPIC_SHIFT: 1.04,
}
# added to the inter-sentence pause in frames, keyed by the kind of the sentence that follows
_NEXT_KIND_PAUSE_OFFSET = {
    SentenceKind.DECLARATIVE: 0.0,
    SentenceKind.WH_QUESTION: 24.0,
    SentenceKind.YN_QUESTION: -16.0,
    SentenceKind.TOPIC_SHIFT: 56.0,
}
# slows the first word of a sentence, keyed by its own kind, scaled by coupling
_ONSET_SLOWDOWN = {
    SentenceKind.DECLARATIVE: 0.0,
    SentenceKind.WH_QUESTION: 0.1,
    SentenceKind.YN_QUESTION: -0.05,
    SentenceKind.TOPIC_SHIFT: 0.25,
}
_KIND_BAND_SHIFT = {
    SentenceKind.DECLARATIVE: 0.0,
    SentenceKind.WH_QUESTION: 1.5,
    SentenceKind.YN_QUESTION: 3.0,
    SentenceKind.TOPIC_SHIFT: -1.5,
}
INTER_PAUSE_BASE = 40.0
INTRA_PAUSE_BASE = 18.0
_N_CONTENT_WORDS = 120
_LETTERS = "abcdefghijklmnoprstuvwy"


@dataclass(frozen=True)
class _World:
    lexicon: dict[str, tuple[str, ...]]
    content_words: tuple[str, ...]
    base_duration: np.ndarray
    centers: np.ndarray
    widths: np.ndarray
    amps: np.ndarray
    centers2: np.ndarray
    speakers: tuple[dict, ...]


def _make_world(spec: CorpusSpec) -> _World:
    rng = np.random.default_rng([spec.seed, 0])
    n = spec.phoneme_inventory_size
    content_pool = np.arange(3, n)
    lexicon: dict[str, tuple[str, ...]] = {}
    for kind, words in _MARKERS.items():
        for w in words:
            rest = rng.choice(content_pool, size=int(rng.integers(1, 4)))
            lexicon[w] = (f"P{_MARKER_ONSET[kind]:03d}",) + tuple(f"P{i:03d}" for i in rest)
    content: list[str] = []
    while len(content) < _N_CONTENT_WORDS:
        text = "".join(rng.choice(list(_LETTERS), size=int(rng.integers(3, 9))))
        if text in lexicon:
            continue
        phones = rng.choice(content_pool, size=int(rng.integers(2, 6)))
        lexicon[text] = tuple(f"P{i:03d}" for i in phones)
        content.append(text)
    speakers = tuple(
        {
            "id": f"spk{s}",
            "rate": float(rng.uniform(0.85, 1.15)),
            "pause_scale": float(rng.uniform(0.8, 1.2)),
            "band_shift": float(rng.uniform(-3, 3)),
            "tilt": float(rng.uniform(-0.1, 0.1)),
        }
        for s in range(spec.num_speakers)
    )
    total = n + len(PAUSES)
    return _World(
        lexicon=lexicon,
        content_words=tuple(content),
        base_duration=rng.uniform(3.0, 9.0, size=total),
        centers=rng.uniform(8, 72, size=total),
        widths=rng.uniform(3, 9, size=total),
        amps=rng.uniform(0.6, 1.0, size=total),
        centers2=rng.uniform(8, 72, size=total),
        speakers=speakers,
    )


def _symbol_index(symbol: str) -> int:
    if symbol == PAU_INTRA:
        return 0
    if symbol == PAU_INTER:
        return 1
    return 2 + int(symbol[1:])


def _mel_for(symbol: str, duration: int, speaker: dict, kind: SentenceKind, world: _World) -> np.ndarray:
    bands = np.arange(N_MELS, dtype=np.float64)
    tilt = speaker["tilt"] * (bands / (N_MELS - 1) - 0.5)
    if is_pause(symbol):
        return np.tile(0.05 + 0.2 * tilt, (duration, 1))
    i = _symbol_index(symbol)
    shift = speaker["band_shift"] + _KIND_BAND_SHIFT[kind]
    bump = world.amps[i] * np.exp(-0.5 * ((bands - world.centers[i] - shift) / world.widths[i]) ** 2)
    bump2 = 0.5 * world.amps[i] * np.exp(-0.5 * ((bands - world.centers2[i] - shift) / 4.0) ** 2)
    u = (np.arange(duration) + 0.5) / max(duration, 1)
    envelope = 0.85 + 0.15 * np.sin(np.pi * u)
    return envelope[:, None] * (bump + bump2)[None, :] + 0.1 + tilt[None, :]


def _generate_utterance(spec: CorpusSpec, world: _World, index: int) -> Utterance:
    rng = np.random.default_rng([spec.seed, 1, index])
    speaker = world.speakers[index % spec.num_speakers]
    c = spec.context_coupling
    n_sent = int(rng.integers(spec.sentences_per_utterance[0], spec.sentences_per_utterance[1] + 1))
    kinds = [_KINDS[int(rng.integers(len(_KINDS)))] for _ in range(n_sent)]
    sentences: list[Sentence] = []
    mel_parts: list[np.ndarray] = []
    for s_idx, kind in enumerate(kinds):
        n_words = int(rng.integers(spec.words_per_sentence[0], spec.words_per_sentence[1] + 1))
        texts = []
        if kind in _MARKERS:
            texts.append(str(rng.choice(_MARKERS[kind])))
        while len(texts) < n_words:
            texts.append(str(world.content_words[int(rng.integers(len(world.content_words)))]))
        phonemes: list[PhonemeToken] = []
        words: list[Word] = []
        for w_idx, text in enumerate(texts):
            start = len(phonemes)
            pace = speaker["rate"] * _KIND_PACE[kind]
            if w_idx == 0:
                pace *= 1.0 + c * _ONSET_SLOWDOWN[kind]
            for sym in world.lexicon[text]:
                d = world.base_duration[_symbol_index(sym)] * pace * np.exp(rng.normal(0, 0.1))
                phonemes.append(PhonemeToken(sym, max(1, int(round(d)))))
            shown = text.capitalize() if w_idx == 0 else text
            words.append(Word(shown, start, len(phonemes)))
            if w_idx < n_words - 1 and rng.random() < 0.2:
                d = INTRA_PAUSE_BASE * speaker["pause_scale"] * np.exp(rng.normal(0, 0.15))
                phonemes.append(PhonemeToken(PAU_INTRA, max(1, int(round(d)))))
        if s_idx < n_sent - 1:
            mean = INTER_PAUSE_BASE * speaker["pause_scale"] + c * _NEXT_KIND_PAUSE_OFFSET[kinds[s_idx + 1]]
            phonemes.append(PhonemeToken(PAU_INTER, max(1, int(round(mean + rng.normal(0, 4.0))))))
        sentence = Sentence(tuple(words), tuple(phonemes), kind)
        sentences.append(sentence)
        for ph in phonemes:
            mel_parts.append(_mel_for(ph.symbol, ph.duration_frames, speaker, kind, world))
    mel = np.concatenate(mel_parts).astype(np.float32)
    return Utterance(f"utt{index:05d}", speaker["id"], tuple(sentences), mel)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic synthetic corpus; every utterance has its own seed stream."""
    spec.validate()
    world = _make_world(spec)
    return Corpus([_generate_utterance(spec, world, i) for i in range(spec.num_utterances)])


# ---------------------------------------------------------------------------
# file I/O

_MEL_HEADER = struct.Struct("<II")


def write_mel(path: str | Path, mel: np.ndarray) -> None:
    mel = np.ascontiguousarray(mel, dtype="<f4")
    Path(path).write_bytes(_MEL_HEADER.pack(mel.shape[0], mel.shape[1]) + mel.tobytes())


def read_mel(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _MEL_HEADER.size:
        raise CorpusFormatError(f"{path}: mel file shorter than its header")
    frames, bands = _MEL_HEADER.unpack_from(buf)
    expected = _MEL_HEADER.size + 4 * frames * bands
    if len(buf) != expected:
        raise CorpusFormatError(f"{path}: expected {expected} bytes for {frames}x{bands}, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=_MEL_HEADER.size).reshape(frames, bands).astype(np.float32)


def _mel_filename(utterance_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", utterance_id) + ".mel"


def _sentence_record(sentence: Sentence) -> dict:
    words, pauses = [], []
    for i, ph in enumerate(sentence.phonemes):
        if is_pause(ph.symbol):
            after = max((k for k, w in enumerate(sentence.words) if w.stop <= i), default=-1)
            pauses.append({"after_word": after, "symbol": ph.symbol})
    for w in sentence.words:
        words.append({"text": w.text, "phonemes": [sentence.phonemes[i].symbol for i in w.span]})
    return {"kind": sentence.kind.value, "words": words, "pauses": pauses}


def utterance_record(utt: Utterance, mel_path: str) -> dict:
    return {
        "id": utt.id,
        "speaker_id": utt.speaker_id,
        "sentences": [_sentence_record(s) for s in utt.sentences],
        "durations": utt.durations,
        "mel_path": mel_path,
    }


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write ``path`` (JSON Lines) plus one binary mel file per utterance in ``<stem>.mels/``."""
    path = Path(path)
    mel_dir_name = path.stem + ".mels"
    mel_dir = path.parent / mel_dir_name
    mel_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in corpus:
        rel = f"{mel_dir_name}/{_mel_filename(utt.id)}"
        write_mel(path.parent / rel, utt.mel)
        lines.append(json.dumps(utterance_record(utt, rel), separators=(",", ":")))
    path.write_text("".join(line + "\n" for line in lines))


def _field(record: dict, name: str, line_no: int, kind):
    if name not in record:
        raise CorpusFormatError(f"line {line_no}: missing field {name!r}")
    value = record[name]
    if not isinstance(value, kind):
        raise CorpusFormatError(f"line {line_no}: field {name!r} has type {type(value).__name__}")
    return value


def _parse_sentence(rec: dict, durations: list[int], cursor: int, line_no: int) -> tuple[Sentence, int]:
    if not isinstance(rec, dict):
        raise CorpusFormatError(f"line {line_no}: field 'sentences' holds a non-object entry")
    try:
        kind = SentenceKind(_field(rec, "kind", line_no, str))
    except ValueError as exc:
        if isinstance(exc, CorpusFormatError):
            raise
        raise CorpusFormatError(f"line {line_no}: field 'kind' has unknown value {rec.get('kind')!r}") from exc
    words_rec = _field(rec, "words", line_no, list)
    pauses_rec = _field(rec, "pauses", line_no, list)
    pauses_after: dict[int, list[str]] = {}
    for p in pauses_rec:
        after = _field(p, "after_word", line_no, int)
        symbol = _field(p, "symbol", line_no, str)
        if symbol not in PAUSES:
            raise CorpusFormatError(f"line {line_no}: field 'pauses' has non-pause symbol {symbol!r}")
        pauses_after.setdefault(after, []).append(symbol)
    symbols: list[str] = list(pauses_after.get(-1, []))
    words: list[Word] = []
    for k, w in enumerate(words_rec):
        text = _field(w, "text", line_no, str)
        phones = _field(w, "phonemes", line_no, list)
        start = len(symbols)
        symbols.extend(phones)
        words.append(Word(text, start, len(symbols)))
        symbols.extend(pauses_after.get(k, []))
    if cursor + len(symbols) > len(durations):
        raise CorpusValidationError(f"line {line_no}: field 'durations' is shorter than the phoneme sequence")
    try:
        tokens = tuple(PhonemeToken(s, int(d)) for s, d in zip(symbols, durations[cursor : cursor + len(symbols)]))
        sentence = Sentence(tuple(words), tokens, kind)
    except CorpusValidationError as exc:
        raise CorpusValidationError(f"line {line_no}: {exc}") from exc
    return sentence, cursor + len(symbols)


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    utterances = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
        if not isinstance(record, dict):
            raise CorpusFormatError(f"line {line_no}: record is not an object")
        uid = _field(record, "id", line_no, str)
        speaker = _field(record, "speaker_id", line_no, str)
        durations = _field(record, "durations", line_no, list)
        if not all(isinstance(d, int) for d in durations):
            raise CorpusFormatError(f"line {line_no}: field 'durations' must hold integers")
        mel_path = _field(record, "mel_path", line_no, str)
        cursor = 0
        sentences = []
        for rec in _field(record, "sentences", line_no, list):
            sentence, cursor = _parse_sentence(rec, durations, cursor, line_no)
            sentences.append(sentence)
        if cursor != len(durations):
            raise CorpusValidationError(
                f"line {line_no}: field 'durations' has {len(durations)} entries for {cursor} phonemes"
            )
        mel = read_mel(path.parent / mel_path)
        try:
            utterances.append(Utterance(uid, speaker, tuple(sentences), mel))
        except CorpusValidationError as exc:
            raise CorpusValidationError(f"line {line_no}: field 'mel_path': {exc}") from exc
    return Corpus(utterances)
