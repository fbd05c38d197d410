import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tempofuse.data import DatasetError
from tempofuse.evaluation import (confusion_matrix, epochs_csv, evaluate, evaluate_chunk_accuracy,
                                  export_report, pgm_bytes, vote_song_predictions)
from tempofuse.gradsuite import reduced_model_config
from tempofuse.models import load_checkpoint, save_checkpoint
from tempofuse.pipeline import ChunkDataset
from tempofuse.training import EpochReport, TrainConfig, TrainingError, fit, minibatches


def toy_dataset(n_classes=3, songs=4, chunks=3, seed=0, offset=0, sep=2.0):
    """Fourier-only chunks whose class shows up as a shift on one row."""
    rng = np.random.default_rng(seed)
    song_labels = np.repeat(np.arange(n_classes), songs)
    chunk_song = np.repeat(np.arange(song_labels.size), chunks)
    labels = song_labels[chunk_song]
    x = rng.standard_normal((labels.size, 7, 16))
    x[np.arange(labels.size), labels % 7, :] += sep
    ids = [f"s{offset + i}" for i in range(song_labels.size)]
    return ChunkDataset(ids, song_labels, chunk_song, labels, {"fourier": x})


class Oracle:
    """Reads the true class from the first cell and returns one-hot logits."""

    def __init__(self, n_classes, wrong=()):
        self.n, self.wrong = n_classes, set(wrong)

    def __call__(self, fourier):
        labels = fourier[:, 0, 0].astype(int)
        out = np.full((labels.size, self.n), -10.0)
        for i, (c, key) in enumerate(zip(labels, fourier[:, 0, 1].astype(int))):
            out[i, (c + 1) % self.n if key in self.wrong else c] = 10.0
        return out


def oracle_dataset(labels, chunk_song, n_songs):
    x = np.zeros((len(labels), 1, 2))
    x[:, 0, 0] = labels
    x[:, 0, 1] = np.arange(len(labels))
    song_labels = np.array([labels[list(chunk_song).index(s)] for s in range(n_songs)])
    return ChunkDataset([f"s{i}" for i in range(n_songs)], song_labels, np.asarray(chunk_song),
                        np.asarray(labels), {"fourier": x})


# --- voting ------------------------------------------------------------------------

def test_vote_cases():
    assert vote_song_predictions([4, 4, 2]) == 4
    assert vote_song_predictions([7]) == 7
    assert vote_song_predictions([3, 1, 3, 1]) == 1
    with pytest.raises(ValueError):
        vote_song_predictions([])


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.randoms())
def test_vote_permutation_invariant(preds, rnd):
    shuffled = list(preds)
    rnd.shuffle(shuffled)
    winner = vote_song_predictions(preds)
    assert vote_song_predictions(shuffled) == winner
    assert preds.count(winner) == max(preds.count(c) for c in set(preds))


# --- confusion and accuracy --------------------------------------------------------

def test_confusion_hand_case():
    cm = confusion_matrix([0, 0, 1], [0, 1, 1], 2, ["a", "b"])
    np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 1]])
    np.testing.assert_allclose(cm.per_class_accuracy(), [0.5, 1.0])
    assert cm.accuracy == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        confusion_matrix([0, 2], [0, 1], 2)
    with pytest.raises(ValueError):
        confusion_matrix([0], [0, 1], 2)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_confusion_rows_and_trace(pairs):
    true, pred = map(list, zip(*pairs))
    cm = confusion_matrix(true, pred, 5)
    np.testing.assert_array_equal(cm.counts.sum(axis=1), np.bincount(true, minlength=5))
    assert cm.accuracy == pytest.approx(np.mean(np.array(true) == np.array(pred)))


def test_chunk_accuracy_oracle_and_single_error():
    ds = oracle_dataset([0, 1, 2, 1], [0, 1, 2, 3], 4)
    assert evaluate_chunk_accuracy(Oracle(3), ds) == 1.0
    one = oracle_dataset([2], [0], 1)
    assert evaluate_chunk_accuracy(Oracle(3, wrong={0}), one) == 0.0


def test_uniform_random_predictor_near_chance():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 30, 6000)
    ds = ChunkDataset(["s"], np.array([0]), np.zeros(6000, int), labels,
                      {"fourier": np.zeros((6000, 1, 1))})

    def random_model(fourier):
        return rng.standard_normal((fourier.shape[0], 30))

    assert abs(evaluate_chunk_accuracy(random_model, ds) - 1 / 30) < 0.01


def test_voting_lifts_song_accuracy():
    # One wrong chunk in each three-chunk song: chunk acc 2/3, song acc 1.
    ds = oracle_dataset([0, 0, 0, 1, 1, 1], [0, 0, 0, 1, 1, 1], 2)
    ev = evaluate(Oracle(2, wrong={0, 4}), ds)
    assert ev.chunk_accuracy == pytest.approx(4 / 6)
    assert ev.song_accuracy == 1.0
    np.testing.assert_array_equal(ev.song_preds, [0, 1])
    assert ev.per_class == {0: (pytest.approx(2 / 3), 1.0), 1: (pytest.approx(2 / 3), 1.0)}


def test_empty_split_errors():
    empty = ChunkDataset([], np.zeros(0, int), np.zeros(0, int), np.zeros(0, int),
                         {"fourier": np.zeros((0, 7, 16))})
    with pytest.raises(ValueError, match="empty split"):
        evaluate(Oracle(3), empty)
    cfg = TrainConfig(kind="ftg_only", epochs=1, batch_size=4)
    with pytest.raises(DatasetError, match="empty split"):
        fit(reduced_model_config("ftg_only"), toy_dataset(), empty, cfg, ["a", "b", "c"])


# --- report files --------------------------------------------------------------

def test_pgm_layout_and_reexport(tmp_path):
    m = np.arange(6.0).reshape(2, 3)
    data = pgm_bytes(m)
    assert data.startswith(b"P5\n3 2\n255\n")
    assert data[-6:] == bytes([0, 51, 102, 153, 204, 255])
    assert pgm_bytes(np.ones((2, 2)))[-4:] == b"\x00" * 4
    with pytest.raises(ValueError):
        pgm_bytes(np.zeros((0, 3)))
    cm = confusion_matrix([0, 1, 1], [0, 1, 0], 2, ["x", "y"])
    reports = [EpochReport(1, 0.5, 0.25, 0.5, 1.0)]
    export_report(tmp_path / "a", reports, cm, [("x", 1.0, 1.0)], {"img": m})
    export_report(tmp_path / "b", reports, cm, [("x", 1.0, 1.0)], {"img": m})
    for name in ("epochs.csv", "confusion.csv", "confusion.pgm", "per_class.csv", "img.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "confusion.csv").read_text() == "x,y\n1,0\n1,1\n"
    assert epochs_csv(reports).decode().splitlines()[0] == \
        "epoch,train_loss,val_chunk_acc,val_song_acc,seconds"
    assert (tmp_path / "a" / "per_class.csv").read_text().splitlines()[0] == "class,chunk_acc,song_acc"


# --- training ----------------------------------------------------------------------

def test_minibatches_cover_and_drop_singleton():
    rng = np.random.default_rng(0)
    b = minibatches(9, 4, rng)
    assert [len(x) for x in b] == [4, 4]
    assert len(set(np.concatenate(b))) == 8
    assert [len(x) for x in minibatches(10, 4, rng)] == [4, 4, 2]
    assert sorted(np.concatenate(minibatches(10, 4, rng))) == list(range(10))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(kind="other")
    assert TrainConfig().batch_size == 256 and TrainConfig().lr == 0.005


def test_overfit_single_class():
    ds = toy_dataset(n_classes=1, songs=3)
    cfg = TrainConfig(kind="ftg_only", epochs=3, batch_size=4, lr=0.01, patience=None)
    res = fit(reduced_model_config("ftg_only"), ds, ds, cfg, ["only"])
    assert evaluate(res.checkpoint.model, ds).chunk_accuracy == 1.0


def test_overfit_two_classes():
    ds = toy_dataset(n_classes=2, songs=3, chunks=2, sep=3.0)
    cfg = TrainConfig(kind="ftg_only", epochs=40, batch_size=6, lr=0.01, dropout=0.0, patience=None,
                      target_accuracy=1.0)
    res = fit(reduced_model_config("ftg_only"), ds, ds, cfg, ["a", "b"])
    assert evaluate(res.checkpoint.model, ds).chunk_accuracy == 1.0
    assert res.reports[-1].train_loss < res.reports[0].train_loss


def test_training_is_deterministic(tmp_path):
    train_ds, valid_ds = toy_dataset(seed=1), toy_dataset(seed=2, offset=100)
    cfg = TrainConfig(kind="ftg_only", epochs=3, batch_size=5, lr=0.01, seed=4, patience=None)
    paths = []
    curves = []
    for i in range(2):
        res = fit(reduced_model_config("ftg_only", dtype="float32"), train_ds, valid_ds, cfg,
                  ["a", "b", "c"])
        curves.append([r.train_loss for r in res.reports])
        paths.append(tmp_path / f"{i}.tfck")
        save_checkpoint(res.checkpoint, paths[-1])
    assert curves[0] == curves[1]
    assert paths[0].read_bytes() == paths[1].read_bytes()
    back = load_checkpoint(paths[0])
    assert back.meta["epochs_run"] == 3 and 1 <= back.meta["best_epoch"] <= 3


def test_patience_stops_early():
    ds = toy_dataset(n_classes=1, songs=3)
    cfg = TrainConfig(kind="ftg_only", epochs=20, batch_size=4, patience=2)
    res = fit(reduced_model_config("ftg_only"), ds, ds, cfg, ["only"])
    assert len(res.reports) == 3 and res.best_epoch == 1


def test_nan_loss_aborts():
    ds = toy_dataset()
    ds.inputs["fourier"][0, 0, 0] = np.nan
    cfg = TrainConfig(kind="ftg_only", epochs=2, batch_size=64)
    with pytest.raises(TrainingError, match="non-finite loss"):
        fit(reduced_model_config("ftg_only"), ds, ds, cfg, ["a", "b", "c"])


def test_initial_loss_near_log_classes():
    ds = toy_dataset()
    cfg = TrainConfig(kind="ftg_only", epochs=1, batch_size=64, lr=1e-9, dropout=0.0)
    res = fit(reduced_model_config("ftg_only"), ds, ds, cfg, ["a", "b", "c"])
    assert abs(res.reports[0].train_loss - math.log(3)) < 0.5
