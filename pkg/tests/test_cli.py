import json
from pathlib import Path

import pytest

from longform_tts import eval as ev
from longform_tts.chunker import read_manifest
from longform_tts.cli import run
from longform_tts.corpus import load_corpus, read_mel

FIXTURES = Path(__file__).parent / "fixtures"


def test_gen_corpus_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run(["gen-corpus", "--seed", "7", "--num-utterances", "4", "--out", str(tmp_path / name / "c.jsonl")]) == 0
    assert (tmp_path / "a" / "c.jsonl").read_bytes() == (tmp_path / "b" / "c.jsonl").read_bytes()
    a_mels = sorted((tmp_path / "a" / "c.mels").iterdir())
    b_mels = sorted((tmp_path / "b" / "c.mels").iterdir())
    assert [p.read_bytes() for p in a_mels] == [p.read_bytes() for p in b_mels]
    record = json.loads((tmp_path / "a" / "c.jsonl.run.json").read_text())
    assert record["seed"] == 7


def test_chunk_manifest_respects_budget(tmp_path):
    corpus = tmp_path / "c.jsonl"
    run(["gen-corpus", "--seed", "1", "--num-utterances", "8", "--out", str(corpus)])
    assert run(["chunk", "--corpus", str(corpus), "--max-seconds", "24", "--out", str(tmp_path / "m.csv")]) == 0
    for c in read_manifest(tmp_path / "m.csv"):
        if len(c) > 1:
            assert c.total_seconds <= 24.0


def test_eval_mushra_gap_reduction(capsys):
    code = run(
        ["eval-mushra", "--input", str(FIXTURES / "mushra_mtb_row.csv"), "--system", "mltb", "--baseline", "mtb", "--reference", "reference"]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "gap reduction: 59.1%" in out
    assert "paired t-test mltb vs mtb" in out


def test_report_matches_golden(capsys, tmp_path):
    inputs = [f"mtb={FIXTURES / 'durations_mtb.csv'}", f"mltb={FIXTURES / 'durations_mltb.csv'}"]
    assert run(["report", "--input", *inputs, "--out", str(tmp_path / "r.csv")]) == 0
    assert capsys.readouterr().out == (FIXTURES / "report_golden.txt").read_text()
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == ",".join(ev.METRICS_FIELDS)


def test_eval_durations_writes_histogram(tmp_path, capsys):
    code = run(
        [
            "eval-durations",
            "--input",
            str(FIXTURES / "durations_mtb.csv"),
            "--out",
            str(tmp_path / "m.csv"),
            "--histogram",
            str(tmp_path / "h.csv"),
        ]
    )
    assert code == 0
    assert "between R2" in capsys.readouterr().out
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "category,bin_start,count"
    assert all(line.startswith("inter_pause,") for line in lines[1:])


def test_unknown_flag_is_usage_error(capsys):
    assert run(["gen-corpus", "--no-such-flag"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert run(["fly"]) == 1
    assert run([]) == 1


def test_missing_file_names_path(capsys):
    assert run(["chunk", "--corpus", "/nonexistent/corpus.jsonl"]) == 2
    assert "/nonexistent/corpus.jsonl" in capsys.readouterr().err


def test_malformed_input_is_validation_error(tmp_path):
    (tmp_path / "bad.csv").write_text("rater,sample,system,score\nr,s,x,high\n")
    assert run(["eval-mushra", "--input", str(tmp_path / "bad.csv")]) == 3


def test_config_file_supplies_defaults(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[common]\nseed = 5\n\n[gen-corpus]\nnum-utterances = 3\nout = {tmp_path / 'c.jsonl'}\n")
    assert run(["--config", str(cfg), "gen-corpus"]) == 0
    assert len(load_corpus(tmp_path / "c.jsonl")) == 3
    assert json.loads((tmp_path / "c.jsonl.run.json").read_text())["seed"] == 5
    # flags win over the file
    assert run(["--config", str(cfg), "gen-corpus", "--num-utterances", "2"]) == 0
    assert len(load_corpus(tmp_path / "c.jsonl")) == 2


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[gen-corpus]\nwarp-factor = 9\n")
    assert run(["--config", str(cfg), "gen-corpus"]) == 1


def test_train_and_synthesize_pipeline(tmp_path):
    corpus = tmp_path / "c.jsonl"
    bundle = tmp_path / "bundle"
    run(["gen-corpus", "--seed", "2", "--num-utterances", "10", "--min-sentences", "1", "--max-sentences", "2", "--out", str(corpus)])
    common = ["--corpus", str(corpus), "--bundle", str(bundle), "--variant", "mltb", "--steps", "2", "--eval-every", "1"]
    assert run(["train-duration", *common]) == 0
    assert run(["train-acoustic", *common]) == 0
    manifest = json.loads((bundle / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["chunk_policy"]["max_seconds"] == 24.0
    assert (bundle / "duration_history.csv").read_text().startswith("step,train_loss,validation")

    out = tmp_path / "synth"
    speaker = load_corpus(corpus)[0].speaker_id
    assert run(["synthesize", "--bundle", str(bundle), "--corpus", str(corpus), "--out", str(out), "--speaker", speaker]) == 0
    rows = ev.read_duration_csv(out / "durations.csv")
    assert (rows.pred >= 1).all()
    mels = sorted((out / "mels").iterdir())
    assert mels and all(read_mel(p).shape[1] == 80 for p in mels)

    out2 = tmp_path / "synth2"
    assert run(["synthesize", "--bundle", str(bundle), "--corpus", str(corpus), "--out", str(out2), "--speaker", speaker, "--jobs", "2"]) == 0
    assert (out / "durations.csv").read_bytes() == (out2 / "durations.csv").read_bytes()


def test_synthesize_unknown_speaker(tmp_path):
    corpus = tmp_path / "c.jsonl"
    bundle = tmp_path / "bundle"
    run(["gen-corpus", "--num-utterances", "2", "--min-sentences", "1", "--max-sentences", "1", "--out", str(corpus)])
    run(["train-duration", "--corpus", str(corpus), "--bundle", str(bundle), "--variant", "mt", "--steps", "1"])
    assert run(["synthesize", "--bundle", str(bundle), "--corpus", str(corpus), "--speaker", "ghost", "--out", str(tmp_path / "o")]) == 3


@pytest.mark.parametrize("command", ["gen-corpus", "chunk", "train-duration", "train-acoustic", "synthesize", "eval-durations", "eval-mushra", "report"])
def test_help_for_every_command(command, capsys):
    with pytest.raises(SystemExit) as exc:
        run([command, "--help"])
    assert exc.value.code == 0
    assert "--seed" in capsys.readouterr().out
