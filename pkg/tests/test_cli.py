import json
import subprocess
import sys

import pytest

from tempofuse.cli import build_parser, main
from tempofuse.data import SynthClass, SyntheticSpec, synth_song
from tempofuse.audio_io import write_wav


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Two well-separated tempo classes, 10 short songs each, extracted over the full clip."""
    root = tmp_path_factory.mktemp("cli")
    spec = SyntheticSpec([SynthClass("slow", 90.0), SynthClass("fast", 150.0)], 10, 8.0, seed=3)
    (root / "spec.json").write_text(spec.to_json())
    assert main(["synth", "--out", str(root / "data"), "--spec", str(root / "spec.json")]) == 0
    assert main(["split", "--manifest", str(root / "data" / "manifest.csv"), "--out",
                 str(root / "split.csv")]) == 0
    assert main(["extract", "--manifest", str(root / "data" / "manifest.csv"), "--cache",
                 str(root / "cache"), "--segment", "full"]) == 0
    return root


def test_help_lists_defaults():
    parser = build_parser()
    sub = {a.dest: a for a in parser._actions}["command"].choices
    assert set(sub) == {"synth", "split", "extract", "tempo", "train", "eval", "predict", "gradcheck"}
    extract = sub["extract"].format_help()
    for text in ("2048", "512", "128", "200", "384"):
        assert f"(default: {text})" in extract
    train = sub["train"].format_help()
    for text in ("256", "200", "0.005", "late"):
        assert f"(default: {text})" in train
    assert "(default: 50)" in sub["gradcheck"].format_help()


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "tempofuse", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "extract" in res.stdout


def test_error_line_format(capsys, tmp_path):
    code, _, err = run(capsys, "split", "--manifest", tmp_path / "missing.csv", "--out", tmp_path / "s.csv")
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("tempofuse: error: ")


def test_bad_segment_rejected_by_parser(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["extract", "--manifest", "m.csv", "--segment", "45:15"])
    assert exc.value.code != 0


def test_extract_twice_skips(capsys, workdir):
    code, out, _ = run(capsys, "extract", "--manifest", workdir / "data" / "manifest.csv",
                       "--cache", workdir / "cache", "--segment", "full")
    assert code == 0 and "computed=0 skipped=20" in out


def test_cache_config_mismatch(capsys, workdir):
    code, _, err = run(capsys, "extract", "--manifest", workdir / "data" / "manifest.csv",
                       "--cache", workdir / "cache", "--segment", "full", "--n-mels", "64")
    assert code == 1 and "different feature config" in err


def test_default_segment_rejects_short_songs(capsys, workdir, tmp_path):
    code, _, err = run(capsys, "extract", "--manifest", workdir / "data" / "manifest.csv",
                       "--cache", tmp_path / "c")
    assert code == 1 and "shorter than" in err


def test_cache_env_variable(capsys, workdir, monkeypatch, tmp_path):
    monkeypatch.setenv("TEMPOFUSE_CACHE", str(workdir / "cache"))
    code, out, _ = run(capsys, "tempo", "--manifest", workdir / "data" / "manifest.csv",
                       "--out", tmp_path / "tempo.csv")
    assert code == 0
    rows = (tmp_path / "tempo.csv").read_text().splitlines()
    assert rows[0] == "song_id,class,bpm" and len(rows) == 21
    for row in rows[1:]:
        _, cls, bpm = row.split(",")
        assert abs(float(bpm) - (90 if cls == "slow" else 150)) <= 6.73


def test_mode_flag_conflicts(capsys, workdir, tmp_path):
    base = ["train", "--manifest", workdir / "data" / "manifest.csv", "--cache", workdir / "cache",
            "--out", tmp_path / "m"]
    code, _, err = run(capsys, *base, "--mode", "mel_only", "--branch-channels", "8")
    assert code == 1 and "--branch-channels" in err
    code, _, err = run(capsys, *base, "--mode", "ftg_only", "--blocks", "2")
    assert code == 1 and "--blocks" in err


@pytest.fixture(scope="module")
def trained(workdir):
    conf = {"train": {"mode": "ftg_only", "epochs": 1, "batch_size": 4},
            "model": {"tempo": {"branch_channels": 8, "embed_channels": 8}}}
    (workdir / "train.json").write_text(json.dumps(conf))
    # The flag beats the config file: 8 epochs, not 1.
    assert main(["train", "--manifest", str(workdir / "data" / "manifest.csv"), "--split",
                 str(workdir / "split.csv"), "--cache", str(workdir / "cache"), "--out",
                 str(workdir / "model"), "--config", str(workdir / "train.json"), "--epochs", "8",
                 "--lr", "0.01", "--patience", "0", "--target-accuracy", "1.0"]) == 0
    return workdir / "model"


def test_train_outputs_and_precedence(trained):
    from tempofuse.models import load_checkpoint
    ckpt = load_checkpoint(trained / "checkpoint.tfck")
    assert ckpt.model.kind == "ftg_only"
    assert ckpt.model.cfg.tempo.branch_channels == 8
    assert ckpt.meta["train"]["batch_size"] == 4 and ckpt.meta["train"]["epochs"] == 8
    assert (trained / "epochs.csv").read_text().startswith("epoch,train_loss")


def test_eval_writes_reports(capsys, workdir, trained, tmp_path):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "checkpoint.tfck", "--manifest",
                       workdir / "data" / "manifest.csv", "--split", workdir / "split.csv",
                       "--cache", workdir / "cache", "--out", tmp_path / "r")
    assert code == 0 and "song_acc=" in out
    for name in ("confusion.csv", "confusion.pgm", "per_class.csv", "summary.json",
                 "sample_mel.pgm", "sample_fourier.pgm", "sample_autocorrelation.pgm"):
        assert (tmp_path / "r" / name).is_file()
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["songs"] == 2 and summary["song_accuracy"] == 1.0


def test_eval_empty_split(capsys, workdir, trained, tmp_path):
    (tmp_path / "split.csv").write_text("song_id,partition\nslow_0000,train\n")
    code, _, err = run(capsys, "eval", "--checkpoint", trained / "checkpoint.tfck", "--manifest",
                       workdir / "data" / "manifest.csv", "--split", tmp_path / "split.csv",
                       "--cache", workdir / "cache", "--out", tmp_path / "r")
    assert code == 1 and "empty split" in err


def test_predict_new_file(capsys, trained, tmp_path):
    wav = tmp_path / "probe.wav"
    write_wav(wav, synth_song(SynthClass("x", 150.0), 8.0, 22050, [99]))
    code, out, _ = run(capsys, "predict", "--checkpoint", trained / "checkpoint.tfck", wav)
    assert code == 0
    result = json.loads(out)
    assert result["prediction"] == "fast"
    assert set(result["scores"]) == {"slow", "fast"}
    assert abs(sum(result["scores"].values()) - 1.0) < 1e-5
    assert len(result["chunk_votes"]) == 1


def test_predict_bad_checkpoint(capsys, tmp_path):
    (tmp_path / "bad.tfck").write_bytes(b"nope")
    code, _, err = run(capsys, "predict", "--checkpoint", tmp_path / "bad.tfck", tmp_path / "x.wav")
    assert code == 1 and "CheckpointError" in err
