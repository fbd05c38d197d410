"""Chunk- and song-level accuracy, majority voting, confusion matrices and report files."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import atomic_write
from .nn.tensor import Tensor, softmax
from .pipeline import ChunkDataset


def predict_proba(model, dataset: ChunkDataset, batch_size: int = 64) -> np.ndarray:
    """Softmax scores ``[M, n_classes]`` for every chunk, computed in eval mode.

    ``model`` is called with the dataset's inputs as keyword arguments and may
    return logits as a Tensor or an array.
    """
    if len(dataset) == 0:
        raise ValueError("empty split: no chunks to evaluate")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        out = []
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            logits = model(**dataset.batch(idx))
            logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
            out.append(softmax(logits).data)
        return np.concatenate(out)
    finally:
        if was_training:
            model.train()


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(scores, axis=-1)


def vote_song_predictions(chunk_preds: Sequence[int]) -> int:
    """Modal class of a song's chunk predictions; ties go to the lowest class index."""
    if len(chunk_preds) == 0:
        raise ValueError("cannot vote over an empty list of chunk predictions")
    counts = Counter(int(p) for p in chunk_preds)
    top = max(counts.values())
    return min(c for c, k in counts.items() if k == top)


def song_predictions(chunk_preds: np.ndarray, chunk_song: np.ndarray, n_songs: int) -> np.ndarray:
    out = np.empty(n_songs, dtype=np.int64)
    for s in range(n_songs):
        out[s] = vote_song_predictions(chunk_preds[chunk_song == s])
    return out


def evaluate_chunk_accuracy(model, dataset: ChunkDataset, batch_size: int = 64) -> float:
    preds = argmax_lowest(predict_proba(model, dataset, batch_size))
    return float(np.mean(preds == dataset.labels))


@dataclass
class Evaluation:
    chunk_accuracy: float
    song_accuracy: float
    chunk_preds: np.ndarray
    song_preds: np.ndarray
    per_class: dict[int, tuple[float, float]]  # class -> (chunk acc, song acc)
    scores: np.ndarray


def evaluate(model, dataset: ChunkDataset, batch_size: int = 64) -> Evaluation:
    scores = predict_proba(model, dataset, batch_size)
    chunk_preds = argmax_lowest(scores)
    song_preds = song_predictions(chunk_preds, dataset.chunk_song, dataset.n_songs)
    per_class = {}
    for c in np.unique(dataset.song_labels):
        cm = dataset.labels == c
        sm = dataset.song_labels == c
        per_class[int(c)] = (float(np.mean(chunk_preds[cm] == c)), float(np.mean(song_preds[sm] == c)))
    return Evaluation(float(np.mean(chunk_preds == dataset.labels)),
                      float(np.mean(song_preds == dataset.song_labels)),
                      chunk_preds, song_preds, per_class, scores)


def evaluate_song_accuracy(model, dataset: ChunkDataset, batch_size: int = 64) -> tuple[float, dict[int, float]]:
    """Song accuracy after majority voting, plus per-class song accuracy."""
    ev = evaluate(model, dataset, batch_size)
    return ev.song_accuracy, {c: v[1] for c, v in ev.per_class.items()}


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class
    classes: list[str]

    def per_class_accuracy(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.counts.sum(), 1))


def confusion_matrix(true: Sequence[int], pred: Sequence[int], n_classes: int,
                     classes: Sequence[str] | None = None) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape or true.ndim != 1:
        raise ValueError(f"label lists differ in length: {true.shape} vs {pred.shape}")
    for name, v in (("true", true), ("predicted", pred)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ValueError(f"{name} label out of range for {n_classes} classes")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    names = list(classes) if classes is not None else [str(i) for i in range(n_classes)]
    if len(names) != n_classes:
        raise ValueError(f"{len(names)} class names for {n_classes} classes")
    return ConfusionMatrix(counts, names)


# --- report files ---------------------------------------------------------------

def pgm_bytes(m: np.ndarray) -> bytes:
    """8-bit binary PGM, one pixel per matrix cell, min-max scaled; row 0 at the top."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"PGM needs a non-empty 2-D matrix, got shape {m.shape}")
    finite = np.where(np.isfinite(m), m, np.nan)
    lo, hi = np.nanmin(finite), np.nanmax(finite)
    scaled = np.zeros_like(m) if not hi > lo else (np.nan_to_num(finite, nan=lo) - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    return f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, m: np.ndarray) -> None:
    atomic_write(path, pgm_bytes(m))


def _csv_bytes(header: Sequence[str], rows: Sequence[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, (float, np.floating)) else str(x)


def epochs_csv(reports) -> bytes:
    return _csv_bytes(["epoch", "train_loss", "val_chunk_acc", "val_song_acc", "seconds"],
                      [[r.epoch, _fmt(r.train_loss), _fmt(r.val_chunk_acc), _fmt(r.val_song_acc),
                        f"{r.seconds:.3f}"] for r in reports])


def export_report(out_dir, reports=None, confusion: ConfusionMatrix | None = None,
                  per_class: Sequence[tuple[str, float, float]] | None = None,
                  images: dict[str, np.ndarray] | None = None,
                  tempo_rows: Sequence[tuple[str, str, float]] | None = None) -> list[Path]:
    """Write whichever of epochs/confusion/per-class/tempo CSVs and PGM images are given."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create report directory ({exc.strerror})") from exc
    written = []

    def put(name: str, data: bytes):
        atomic_write(out / name, data)
        written.append(out / name)

    if reports is not None:
        put("epochs.csv", epochs_csv(reports))
    if confusion is not None:
        # Row r and column c follow the class table order given in the header.
        put("confusion.csv", _csv_bytes(confusion.classes, confusion.counts.tolist()))
        put("confusion.pgm", pgm_bytes(confusion.counts))
    if per_class is not None:
        put("per_class.csv", _csv_bytes(["class", "chunk_acc", "song_acc"],
                                        [[c, _fmt(a), _fmt(b)] for c, a, b in per_class]))
    if tempo_rows is not None:
        put("tempo_per_song.csv", _csv_bytes(["song_id", "class", "bpm"],
                                             [[s, c, f"{b:.2f}"] for s, c, b in tempo_rows]))
    for name, m in (images or {}).items():
        put(f"{name}.pgm", pgm_bytes(m))
    return written
