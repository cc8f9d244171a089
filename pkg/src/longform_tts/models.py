"""Duration and acoustic models, their training loops, and synthesis."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import eval as metrics
from . import nnet
from .chunker import ChunkPolicy, chunk_corpus, materialize, sentence_chunks
from .conditioning import (
    ConditioningConfig,
    ConditioningParams,
    SpeakerTable,
    SubTokenizer,
    WordEmbeddingProvider,
    attach_conditioning,
    gather_word_rows,
    init_conditioning,
    length_regulate_batch,
)
from .corpus import FRAME_SHIFT_MS, N_MELS, Corpus, Utterance, inventory_hash, phoneme_inventory
from .encoder import EncoderConfig, encoder_forward, encoder_from_named, encoder_named, init_encoder
from .nnet import Tensor

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


class TrainSynthesisMismatchWarning(UserWarning):
    """Synthesis input was prepared differently from the training data."""


VARIANTS = {
    "baseline": dict(use_speaker=False, use_word_embeddings=False, long_context=False),
    "mt": dict(use_speaker=True, use_word_embeddings=False, long_context=False),
    "mtb": dict(use_speaker=True, use_word_embeddings=True, long_context=False),
    "mltb": dict(use_speaker=True, use_word_embeddings=True, long_context=True),
}


@dataclass(frozen=True)
class ModelConfig:
    inventory_size: int = 40
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_mels: int = N_MELS
    use_speaker: bool = False
    use_word_embeddings: bool = False
    speaker_dim: int = 256
    word_dim: int = 768
    word_mode: str = "trainable_table"
    # duration head output is multiplied by this many frames
    duration_scale: float = 10.0

    @property
    def conditioning(self) -> ConditioningConfig:
        return ConditioningConfig(
            self.use_speaker, self.use_word_embeddings, self.encoder.d_model, self.speaker_dim, self.word_dim
        )

    @property
    def conditioned(self) -> bool:
        return self.use_speaker or self.use_word_embeddings

    @property
    def vocabulary_size(self) -> int:
        return len(phoneme_inventory(self.inventory_size))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


DESK_ENCODER = EncoderConfig(d_model=64, filter_size=128, kernel_size=9, heads=2, n_blocks=4, dropout=0.1)


def desk_model_config(inventory_size: int = 40, **flags) -> ModelConfig:
    return ModelConfig(inventory_size, DESK_ENCODER, speaker_dim=16, word_dim=32, **flags)


def paper_model_config(inventory_size: int = 40, **flags) -> ModelConfig:
    return ModelConfig(inventory_size, EncoderConfig(), **flags)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    utterance_ids: list[str]
    phoneme_ids: np.ndarray
    mask: np.ndarray
    durations: np.ndarray
    speaker_ids: list[str]
    word_texts: list[str]
    word_owner: np.ndarray
    mel: np.ndarray | None = None
    frame_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.utterance_ids)


def make_batch(utterances: Sequence[Utterance], inventory: Sequence[str], with_mel: bool = False) -> Batch:
    index = {s: i for i, s in enumerate(inventory)}
    n = max((u.n_phonemes for u in utterances), default=0)
    B = len(utterances)
    ids = np.zeros((B, n), np.int64)
    mask = np.zeros((B, n), bool)
    durations = np.zeros((B, n), np.int64)
    owner = np.full((B, n), -1, np.int64)
    texts: list[str] = []
    for b, u in enumerate(utterances):
        syms = u.symbols
        try:
            ids[b, : len(syms)] = [index[s] for s in syms]
        except KeyError as exc:
            raise ValueError(f"{u.id}: phoneme {exc.args[0]!r} is not in the model inventory") from None
        mask[b, : len(syms)] = True
        durations[b, : len(syms)] = u.durations
        for w in u.words():
            owner[b, w.start : w.stop] = len(texts)
            texts.append(w.text)
    mel = frame_mask = None
    if with_mel:
        t = max((u.n_frames for u in utterances), default=0)
        mel = np.zeros((B, t, N_MELS), np.float32)
        frame_mask = np.zeros((B, t), bool)
        for b, u in enumerate(utterances):
            mel[b, : u.n_frames] = u.mel
            frame_mask[b, : u.n_frames] = True
    return Batch([u.id for u in utterances], ids, mask, durations, [u.speaker_id for u in utterances], texts, owner, mel, frame_mask)


# ---------------------------------------------------------------------------
# models


class _PhonemeFrontEnd:
    """Phoneme embedding, phoneme FFT encoder and the optional conditioning projection."""

    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, Tensor],
        speakers: SpeakerTable | None = None,
        words: WordEmbeddingProvider | None = None,
    ):
        self.config = config
        self.params = params
        self.speakers = speakers
        self.words = words
        self.inventory = phoneme_inventory(config.inventory_size)
        if config.use_speaker and speakers is None:
            raise ValueError("speaker conditioning needs a speaker table")
        if config.use_speaker and speakers.dim != config.speaker_dim:
            raise ValueError(f"speaker table dim {speakers.dim} != configured {config.speaker_dim}")
        if config.use_word_embeddings:
            if words is None:
                raise ValueError("word conditioning needs a word-embedding provider")
            if words.table is not None:
                self.params["word_table"] = words.table

    @staticmethod
    def _init_front(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
        d = config.encoder.d_model
        params = {"phoneme_embedding": Tensor(rng.normal(0, 1, (config.vocabulary_size, d)).astype(np.float32), requires_grad=True)}
        params.update(encoder_named(init_encoder(config.encoder, rng), "phoneme_encoder."))
        if config.conditioned:
            params.update(init_conditioning(config.conditioning, rng).named("conditioning."))
        return params

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, v in self.params.items():
            if arrays[k].shape != v.shape:
                raise ValueError(f"checkpoint parameter {k} has shape {arrays[k].shape}, model expects {v.shape}")
            v.data = np.array(arrays[k], dtype=np.float32)

    def encode(self, batch: Batch, train: bool, rng: np.random.Generator | None) -> Tensor:
        cfg = self.config
        if batch.phoneme_ids.shape[1] == 0:
            return Tensor(np.zeros((len(batch), 0, cfg.encoder.d_model), np.float32))
        x = nnet.embedding(self.params["phoneme_embedding"], batch.phoneme_ids)
        blocks = encoder_from_named(self.params, "phoneme_encoder.", cfg.encoder.n_blocks)
        h = encoder_forward(x, blocks, cfg.encoder, batch.mask, train, rng)
        if not cfg.conditioned:
            return h
        speaker = None
        if cfg.use_speaker:
            speaker = np.stack([self.speakers[s] for s in batch.speaker_ids])
        word_rows = None
        if cfg.use_word_embeddings:
            word_rows = gather_word_rows(self.words.matrix(batch.word_texts), batch.word_owner)
        cond = ConditioningParams(self.params["conditioning.weight"], self.params["conditioning.bias"])
        return nnet.mask_rows(attach_conditioning(h, speaker, word_rows, cfg.conditioning, cond), batch.mask)


class DurationModel(_PhonemeFrontEnd):
    """Regressor on top of the phoneme encoder: one frame count per phoneme."""

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, speakers=None, words=None) -> DurationModel:
        rng = np.random.default_rng([seed, 101])
        params = cls._init_front(config, rng)
        d = config.encoder.d_model
        params["regressor.weight"] = Tensor(rng.normal(0, 1 / math.sqrt(d), (d, 1)).astype(np.float32), requires_grad=True)
        params["regressor.bias"] = Tensor(np.zeros(1, np.float32), requires_grad=True)
        return cls(config, params, speakers, words)

    def forward(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """``[B, n]`` unclamped durations in frames."""
        h = self.encode(batch, train, rng)
        out = nnet.linear(h, self.params["regressor.weight"], self.params["regressor.bias"])
        out = nnet.reshape(out, out.shape[:-1])
        return nnet.mul(out, np.float32(self.config.duration_scale))

    def predict(self, utterances: Sequence[Utterance]) -> list[np.ndarray]:
        with nnet.no_grad():
            batch = make_batch(utterances, self.inventory)
            out = self.forward(batch).data
        return [out[b, : u.n_phonemes].astype(np.float64) for b, u in enumerate(utterances)]


class AcousticModel(_PhonemeFrontEnd):
    """Phoneme encoder, upsampling by durations, frame encoder, linear mel head."""

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, speakers=None, words=None) -> AcousticModel:
        rng = np.random.default_rng([seed, 202])
        params = cls._init_front(config, rng)
        params.update(encoder_named(init_encoder(config.encoder, rng), "frame_encoder."))
        d = config.encoder.d_model
        params["mel_head.weight"] = Tensor(rng.normal(0, 1 / math.sqrt(d), (d, config.n_mels)).astype(np.float32), requires_grad=True)
        params["mel_head.bias"] = Tensor(np.zeros(config.n_mels, np.float32), requires_grad=True)
        return cls(config, params, speakers, words)

    def forward(
        self,
        batch: Batch,
        durations: np.ndarray | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, np.ndarray]:
        """``[B, T, n_mels]`` frames and the frame mask; ``durations`` defaults to the batch targets."""
        cfg = self.config
        durations = batch.durations if durations is None else np.asarray(durations)
        if durations.shape != batch.phoneme_ids.shape:
            raise ValueError(f"durations {durations.shape} do not match phonemes {batch.phoneme_ids.shape}")
        durations = np.where(batch.mask, durations, 0)
        h = self.encode(batch, train, rng)
        frames, frame_mask = length_regulate_batch(h, durations)
        if frames.shape[1] == 0:
            return Tensor(np.zeros((len(batch), 0, cfg.n_mels), np.float32)), frame_mask
        blocks = encoder_from_named(self.params, "frame_encoder.", cfg.encoder.n_blocks)
        y = encoder_forward(frames, blocks, cfg.encoder, frame_mask, train, rng)
        mel = nnet.linear(y, self.params["mel_head.weight"], self.params["mel_head.bias"])
        return nnet.mask_rows(mel, frame_mask), frame_mask

    def predict(self, utterances: Sequence[Utterance], durations: Sequence[Sequence[int]] | None = None) -> list[np.ndarray]:
        with nnet.no_grad():
            batch = make_batch(utterances, self.inventory)
            d = batch.durations.copy()
            if durations is not None:
                d[:] = 0
                for b, row in enumerate(durations):
                    d[b, : len(row)] = row
            mel, _ = self.forward(batch, d)
        totals = d.sum(axis=1)
        return [mel.data[b, : totals[b]] for b in range(len(utterances))]


def duration_forward(model: DurationModel, utterance: Utterance) -> np.ndarray:
    return model.predict([utterance])[0]


def acoustic_forward(model: AcousticModel, utterance: Utterance, durations: Sequence[int]) -> np.ndarray:
    if len(durations) != utterance.n_phonemes:
        raise ValueError(f"{len(durations)} durations for {utterance.n_phonemes} phonemes")
    if any(int(d) < 0 for d in durations):
        raise ValueError("durations must be non-negative")
    return model.predict([utterance], [list(durations)])[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    max_steps: int = 2000
    seed: int = 0
    preset: str = "desk"
    validation_fraction: float = 0.1
    eval_every: int = 100
    # "best": lowest validation metric; "last": final step
    selection: str = "best"
    # stop as soon as the validation metric is at or below this value
    stop_below: float | None = None

    @classmethod
    def paper(cls, model: str, long_context: bool, seed: int = 0) -> TrainConfig:
        """Published batch sizes, learning rates and checkpoint steps."""
        if model == "acoustic":
            steps = 120_000 if long_context else 200_000
            return cls(45 if long_context else 60, 2e-5, steps, seed, "paper", 0.1, 1000, "last")
        if model == "duration":
            return cls(24 if long_context else 48, 1e-5, 2_000_000, seed, "paper", 0.1, 1000, "best")
        raise ValueError(f"unknown model kind {model!r}")

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        return cls(**overrides)


@dataclass(frozen=True)
class HistoryEntry:
    step: int
    train_loss: float
    validation: float


@dataclass
class TrainResult:
    history: list[HistoryEntry]
    selected_step: int


def select_checkpoint(history: Sequence[HistoryEntry | tuple]) -> int:
    """Step with the lowest validation metric; the earliest step wins ties."""
    if not history:
        raise ValueError("cannot select a checkpoint from an empty history")
    best_step, best_value = None, math.inf
    for entry in history:
        step, value = (entry.step, entry.validation) if isinstance(entry, HistoryEntry) else (entry[0], entry[-1])
        if best_step is None or value < best_value:
            best_step, best_value = step, value
    return best_step


def split_corpus(corpus: Corpus, validation_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Split by recording so held-out sentences never share an utterance with training ones."""
    n = len(corpus)
    n_val = int(round(n * validation_fraction))
    if validation_fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    order = np.random.default_rng([seed, 7]).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = Corpus([u for i, u in enumerate(corpus) if i not in val_idx])
    val = Corpus([u for i, u in enumerate(corpus) if i in val_idx])
    return train, val


def training_items(corpus: Corpus | Sequence[Utterance], policy: ChunkPolicy | None) -> list[Utterance]:
    """Chunks under ``policy`` (long context) or single sentences when ``policy`` is None."""
    corpus = corpus if isinstance(corpus, Corpus) else Corpus(list(corpus))
    chunks = sentence_chunks(corpus) if policy is None else chunk_corpus(corpus, policy)
    return materialize(corpus, chunks)


def _batches(items: Sequence[Utterance], size: int) -> list[list[Utterance]]:
    return [list(items[i : i + size]) for i in range(0, len(items), size)]


class _BatchSampler:
    """Seeded epoch-wise shuffling; each batch holds items of similar length."""

    def __init__(self, items: Sequence[Utterance], batch_size: int, seed: int):
        self.items = list(items)
        self.batch_size = min(batch_size, len(self.items))
        self.rng = np.random.default_rng([seed, 31])
        self.queue: list[list[int]] = []

    def _refill(self) -> None:
        order = self.rng.permutation(len(self.items))
        # sort within windows of 8 batches to limit padding
        window = self.batch_size * 8
        groups = []
        for i in range(0, len(order), window):
            part = sorted(order[i : i + window].tolist(), key=lambda k: self.items[k].n_phonemes)
            groups.extend(part[j : j + self.batch_size] for j in range(0, len(part), self.batch_size))
        self.queue = [groups[i] for i in self.rng.permutation(len(groups))]

    def next(self) -> list[Utterance]:
        if not self.queue:
            self._refill()
        return [self.items[k] for k in self.queue.pop()]


def duration_validation_mae(model: DurationModel, items: Sequence[Utterance], batch_size: int = 16) -> float:
    pred, ref = [], []
    for group in _batches(items, batch_size):
        for u, p in zip(group, model.predict(group)):
            pred.append(p)
            ref.append(u.durations)
    return metrics.mae(np.concatenate(pred), np.concatenate(ref))


def acoustic_validation_mse(model: AcousticModel, items: Sequence[Utterance], batch_size: int = 8) -> float:
    pred, ref = [], []
    for group in _batches(items, batch_size):
        for u, m in zip(group, model.predict(group)):
            pred.append(m.ravel())
            ref.append(u.mel.ravel())
    return metrics.mse(np.concatenate(pred), np.concatenate(ref))


def _train(
    model: _PhonemeFrontEnd,
    train_items: Sequence[Utterance],
    val_items: Sequence[Utterance],
    config: TrainConfig,
    loss_fn: Callable[[Batch, bool, np.random.Generator | None], Tensor],
    validate: Callable[[Sequence[Utterance]], float],
    with_mel: bool,
    progress: Callable[[HistoryEntry], None] | None,
) -> TrainResult:
    if not train_items:
        raise ValueError("training split is empty")
    val_items = list(val_items) or list(train_items)
    sampler = _BatchSampler(train_items, config.batch_size, config.seed)
    opt = nnet.Adam(model.parameters(), lr=config.learning_rate)
    history: list[HistoryEntry] = []
    best_value, best_state = math.inf, None

    def record(step: int, loss: float) -> None:
        nonlocal best_value, best_state
        entry = HistoryEntry(step, loss, validate(val_items))
        history.append(entry)
        if entry.validation < best_value:
            best_value, best_state = entry.validation, model.state_arrays()
        if progress is not None:
            progress(entry)
        log.info("step %d train %.5f validation %.5f", step, loss, entry.validation)

    first = make_batch(sampler.next(), model.inventory, with_mel)
    with nnet.no_grad():
        record(0, float(loss_fn(first, False, None).data))
    running, count = 0.0, 0
    for step in range(1, config.max_steps + 1):
        batch = first if step == 1 else make_batch(sampler.next(), model.inventory, with_mel)
        opt.zero_grad()
        loss = loss_fn(batch, True, nnet.dropout_rng(config.seed, step))
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite training loss at step {step}")
        loss.backward()
        opt.step()
        running += value
        count += 1
        if step % config.eval_every == 0 or step == config.max_steps:
            record(step, running / count)
            running, count = 0.0, 0
            if config.stop_below is not None and history[-1].validation <= config.stop_below:
                break
    if config.selection == "best":
        selected = select_checkpoint(history)
        model.load_arrays(best_state)
    else:
        selected = history[-1].step
    return TrainResult(history, selected)


def train_duration(
    model: DurationModel,
    train_items: Sequence[Utterance],
    val_items: Sequence[Utterance],
    config: TrainConfig,
    progress: Callable[[HistoryEntry], None] | None = None,
) -> TrainResult:
    """L1 on linear-domain frame counts; validation metric is MAE in frames."""
    if not train_items:
        raise ValueError("training split is empty")
    ref = np.concatenate([u.durations for u in train_items]).astype(np.float64)
    # start the regressor at the mean duration
    model.params["regressor.bias"].data[:] = ref.mean() / model.config.duration_scale

    def loss_fn(batch, train, rng):
        pred = model.forward(batch, train, rng)
        return nnet.l1_loss(pred, batch.durations.astype(np.float32), batch.mask)

    return _train(model, train_items, val_items, config, loss_fn, lambda items: duration_validation_mae(model, items), False, progress)


def train_acoustic(
    model: AcousticModel,
    train_items: Sequence[Utterance],
    val_items: Sequence[Utterance],
    config: TrainConfig,
    progress: Callable[[HistoryEntry], None] | None = None,
) -> TrainResult:
    """MSE on mel frames, upsampling with the ground-truth (teacher) durations."""

    def loss_fn(batch, train, rng):
        mel, frame_mask = model.forward(batch, None, train, rng)
        return nnet.mse_loss(mel, batch.mel, frame_mask)

    return _train(model, train_items, val_items, config, loss_fn, lambda items: acoustic_validation_mse(model, items), True, progress)


# ---------------------------------------------------------------------------
# bundles and synthesis


@dataclass
class ModelBundle:
    duration: DurationModel
    acoustic: AcousticModel | None
    chunk_policy: ChunkPolicy | None
    speakers: SpeakerTable
    tokenizer: SubTokenizer
    seed: int = 0
    variant: str = "custom"

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nnet.save_checkpoint(directory / "duration.ckpt", self.duration.parameters())
        if self.acoustic is not None:
            nnet.save_checkpoint(directory / "acoustic.ckpt", self.acoustic.parameters())
        self.speakers.save(directory / "speakers.csv")
        inventory = phoneme_inventory(self.duration.config.inventory_size)
        manifest = {
            "format": 1,
            "variant": self.variant,
            "seed": self.seed,
            "inventory_hash": inventory_hash(inventory),
            "duration": self.duration.config.to_dict(),
            "acoustic": None if self.acoustic is None else self.acoustic.config.to_dict(),
            "chunk_policy": None if self.chunk_policy is None else dataclasses.asdict(self.chunk_policy),
            "vocab": sorted(self.tokenizer.vocab),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> ModelBundle:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        speakers = SpeakerTable.load(directory / "speakers.csv")
        tokenizer = SubTokenizer(manifest["vocab"])
        seed = manifest["seed"]

        def build(kind, model_cls, path):
            cfg = ModelConfig.from_dict(manifest[kind])
            if inventory_hash(phoneme_inventory(cfg.inventory_size)) != manifest["inventory_hash"]:
                raise ValueError(f"{directory}: {kind} inventory does not match the manifest")
            words = None
            if cfg.use_word_embeddings:
                words = WordEmbeddingProvider(tokenizer, cfg.word_dim, cfg.word_mode, seed)
            model = model_cls.create(cfg, seed, speakers if cfg.use_speaker else None, words)
            model.load_arrays(nnet.load_checkpoint(path))
            return model

        duration = build("duration", DurationModel, directory / "duration.ckpt")
        acoustic = None
        if manifest.get("acoustic") is not None and (directory / "acoustic.ckpt").exists():
            acoustic = build("acoustic", AcousticModel, directory / "acoustic.ckpt")
        policy = manifest["chunk_policy"]
        return cls(
            duration,
            acoustic,
            None if policy is None else ChunkPolicy(**policy),
            speakers,
            tokenizer,
            seed,
            manifest.get("variant", "custom"),
        )


def build_models(
    corpus: Corpus,
    variant: str,
    seed: int = 0,
    inventory_size: int = 40,
    preset: str = "desk",
    max_seconds: float = 24.0,
    word_mode: str = "trainable_table",
) -> ModelBundle:
    """Fresh (untrained) duration and acoustic models for one of the named variants."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    flags = dict(VARIANTS[variant])
    long_context = flags.pop("long_context")
    make_cfg = desk_model_config if preset == "desk" else paper_model_config
    cfg = dataclasses.replace(make_cfg(inventory_size, **flags), word_mode=word_mode)
    speakers = SpeakerTable.random(corpus.speakers(), cfg.speaker_dim, seed)
    tokenizer = SubTokenizer.from_words(w.text for u in corpus for w in u.words())

    def words():
        if not cfg.use_word_embeddings:
            return None
        return WordEmbeddingProvider(tokenizer, cfg.word_dim, cfg.word_mode, seed)

    duration = DurationModel.create(cfg, seed, speakers if cfg.use_speaker else None, words())
    acoustic = AcousticModel.create(cfg, seed, speakers if cfg.use_speaker else None, words())
    policy = ChunkPolicy(max_seconds) if long_context else None
    return ModelBundle(duration, acoustic, policy, speakers, tokenizer, seed, variant)


@dataclass
class SynthesisResult:
    utterance_id: str
    symbols: list[str]
    durations: np.ndarray
    mel: np.ndarray | None


def round_durations(raw: np.ndarray) -> np.ndarray:
    """Round to whole frames and clamp to at least one frame."""
    return np.maximum(np.rint(raw), 1).astype(np.int64)


def check_policy(bundle: ModelBundle, chunk: Utterance, seconds: float | None = None) -> None:
    """Warn when the input's context length does not match what the bundle was trained on."""
    n_sent = len(chunk.sentences)
    if bundle.chunk_policy is None and n_sent > 1:
        warnings.warn(
            f"{chunk.id}: {n_sent} sentences given to a model trained on single sentences",
            TrainSynthesisMismatchWarning,
            stacklevel=3,
        )
    elif bundle.chunk_policy is not None and seconds is not None and n_sent > 1 and seconds > bundle.chunk_policy.max_seconds:
        warnings.warn(
            f"{chunk.id}: {seconds:.1f}s chunk exceeds the {bundle.chunk_policy.max_seconds}s training budget",
            TrainSynthesisMismatchWarning,
            stacklevel=3,
        )


def synthesize_many(
    bundle: ModelBundle,
    chunks: Sequence[Utterance],
    speaker_id: str | None = None,
    with_mel: bool = True,
    batch_size: int = 8,
) -> list[SynthesisResult]:
    results = []
    for group in _batches(chunks, batch_size):
        if speaker_id is not None:
            group = [Utterance(u.id, speaker_id, u.sentences, u.mel) for u in group]
        raw = bundle.duration.predict(group)
        durations = [round_durations(r) for r in raw]
        for u, d in zip(group, durations):
            check_policy(bundle, u, float(d.sum()) * FRAME_SHIFT_MS / 1000.0)
        mels: list[np.ndarray | None] = [None] * len(group)
        if with_mel:
            if bundle.acoustic is None:
                raise ValueError("bundle has no acoustic model")
            mels = bundle.acoustic.predict(group, durations)
        results.extend(SynthesisResult(u.id, u.symbols, d, m) for u, d, m in zip(group, durations, mels))
    return results


def synthesize(bundle: ModelBundle, chunk: Utterance, speaker_id: str | None = None, with_mel: bool = True) -> SynthesisResult:
    """Integer durations (>= 1 frame) from the duration model, then mel frames from the acoustic model."""
    return synthesize_many(bundle, [chunk], speaker_id, with_mel)[0]
