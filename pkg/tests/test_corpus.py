import json

import numpy as np
import pytest

from longform_tts.corpus import (
    N_MELS,
    PAU_INTER,
    PAU_INTRA,
    Corpus,
    CorpusFormatError,
    CorpusSpec,
    CorpusValidationError,
    PhonemeToken,
    Sentence,
    SentenceKind,
    Utterance,
    Word,
    generate_corpus,
    is_pause,
    load_corpus,
    read_mel,
    write_corpus,
    write_mel,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(num_speakers=3, num_utterances=30, seed=11))


def inter_pause_design(corpus):
    """(durations, one-hot of next sentence kind) for every PAU_INTER."""
    kinds = list(SentenceKind)
    y, X = [], []
    for utt in corpus:
        for i, s in enumerate(utt.sentences):
            if s.phonemes and s.phonemes[-1].symbol == PAU_INTER:
                nxt = utt.sentences[i + 1].kind
                y.append(s.phonemes[-1].duration_frames)
                X.append([1.0] + [float(nxt == k) for k in kinds[1:]])
    return np.array(y, float), np.array(X)


def ols_r2(y, X):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    return 1 - resid @ resid / np.sum((y - y.mean()) ** 2)


def test_generation_is_deterministic():
    spec = CorpusSpec(num_utterances=6, seed=5)
    a, b = generate_corpus(spec), generate_corpus(spec)
    assert a.utterances == b.utterances
    assert all(np.array_equal(x.mel, y.mel) and x.mel.tobytes() == y.mel.tobytes() for x, y in zip(a, b))


def test_different_seeds_differ():
    a = generate_corpus(CorpusSpec(num_utterances=3, seed=1))
    b = generate_corpus(CorpusSpec(num_utterances=3, seed=2))
    assert a.utterances != b.utterances


def test_frames_match_durations_and_bands(corpus):
    for utt in corpus:
        assert utt.mel.shape == (sum(utt.durations), N_MELS)
        assert utt.mel.dtype == np.float32


def test_every_phoneme_in_exactly_one_word_or_pause(corpus):
    for utt in corpus:
        for s in utt.sentences:
            owners = [0] * len(s.phonemes)
            for w in s.words:
                for i in w.span:
                    owners[i] += 1
            for i, ph in enumerate(s.phonemes):
                assert owners[i] == (0 if is_pause(ph.symbol) else 1)


def test_ground_truth_durations_are_positive(corpus):
    assert min(d for u in corpus for d in u.durations) >= 1


def test_inter_pause_only_at_sentence_end(corpus):
    for utt in corpus:
        for i, s in enumerate(utt.sentences):
            inter = [j for j, p in enumerate(s.phonemes) if p.symbol == PAU_INTER]
            if i < len(utt.sentences) - 1:
                assert inter == [len(s.phonemes) - 1]
            else:
                assert inter == []


def test_uncoupled_inter_pauses_ignore_next_sentence():
    c = generate_corpus(CorpusSpec(num_speakers=1, num_utterances=120, seed=3, context_coupling=0.0))
    y, X = inter_pause_design(c)
    assert len(y) > 300
    assert ols_r2(y, X) < 0.05


def test_coupled_inter_pauses_depend_on_next_sentence():
    c = generate_corpus(CorpusSpec(num_speakers=3, num_utterances=120, seed=3, context_coupling=1.0))
    y, X = inter_pause_design(c)
    assert ols_r2(y, X) > 0.5


def test_sentence_kind_is_visible_in_first_phoneme(corpus):
    onsets = {}
    for utt in corpus:
        for s in utt.sentences:
            onsets.setdefault(s.phonemes[0].symbol, set()).add(s.kind)
    for sym in ("P000", "P001", "P002"):
        if sym in onsets:
            assert len(onsets[sym]) == 1


@pytest.mark.parametrize(
    "bad",
    [
        dict(num_speakers=0),
        dict(num_utterances=0),
        dict(sentences_per_utterance=(3, 2)),
        dict(phoneme_inventory_size=4),
        dict(context_coupling=1.5),
        dict(seed=-1),
    ],
)
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        generate_corpus(CorpusSpec(**bad))


def test_round_trip(tmp_path, corpus):
    path = tmp_path / "corpus.jsonl"
    write_corpus(corpus, path)
    loaded = load_corpus(path)
    assert loaded.utterances == corpus.utterances
    for a, b in zip(loaded, corpus):
        assert [s.kind for s in a.sentences] == [s.kind for s in b.sentences]
        assert [w.text for w in a.words()] == [w.text for w in b.words()]


def test_write_is_byte_stable(tmp_path, corpus):
    write_corpus(corpus, tmp_path / "a.jsonl")
    write_corpus(corpus, tmp_path / "b.jsonl")
    a = (tmp_path / "a.jsonl").read_text()
    b = (tmp_path / "b.jsonl").read_text().replace("b.mels/", "a.mels/")
    assert a == b


def test_empty_file_gives_empty_corpus(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    assert len(load_corpus(tmp_path / "empty.jsonl")) == 0


def _single_record(tmp_path, corpus):
    path = tmp_path / "c.jsonl"
    write_corpus(Corpus(corpus.utterances[:2]), path)
    return path, [json.loads(line) for line in path.read_text().splitlines()]


def test_malformed_record_names_line_and_field(tmp_path, corpus):
    path, records = _single_record(tmp_path, corpus)
    del records[1]["speaker_id"]
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    with pytest.raises(CorpusFormatError, match=r"line 2.*speaker_id"):
        load_corpus(path)


def test_invalid_json_names_line(tmp_path, corpus):
    path, records = _single_record(tmp_path, corpus)
    path.write_text(json.dumps(records[0]) + "\n{not json\n")
    with pytest.raises(CorpusFormatError, match="line 2"):
        load_corpus(path)


def test_mel_length_mismatch_is_rejected(tmp_path, corpus):
    path, records = _single_record(tmp_path, corpus)
    mel_file = tmp_path / records[0]["mel_path"]
    mel = read_mel(mel_file)
    write_mel(mel_file, mel[:-1])
    with pytest.raises(CorpusValidationError, match="line 1"):
        load_corpus(path)


def test_duration_count_mismatch_is_rejected(tmp_path, corpus):
    path, records = _single_record(tmp_path, corpus)
    records[0]["durations"].append(3)
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    with pytest.raises(CorpusValidationError, match="durations"):
        load_corpus(path)


def test_sentence_invariants_enforced():
    ph = (PhonemeToken("P003", 2), PhonemeToken("P004", 1))
    with pytest.raises(CorpusValidationError):
        Sentence((Word("a", 0, 1),), ph, SentenceKind.DECLARATIVE)  # P004 owned by no word
    with pytest.raises(CorpusValidationError):
        Sentence((), (PhonemeToken(PAU_INTER, 3), PhonemeToken(PAU_INTRA, 2)), SentenceKind.DECLARATIVE)
    with pytest.raises(CorpusValidationError):
        PhonemeToken("XYZ", 2)
    with pytest.raises(CorpusValidationError):
        PhonemeToken("P001", -1)


def test_utterance_rejects_wrong_mel():
    s = Sentence((Word("a", 0, 1),), (PhonemeToken("P003", 2),), SentenceKind.DECLARATIVE)
    with pytest.raises(CorpusValidationError):
        Utterance("u", "s", (s,), np.zeros((3, N_MELS)))
    with pytest.raises(CorpusValidationError):
        Utterance("u", "s", (s,), np.zeros((2, 40)))
