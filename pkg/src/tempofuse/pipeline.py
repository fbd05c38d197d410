"""Feature cache on disk and assembly of chunk datasets for training and evaluation."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import dsp
from . import features as F
from .audio_io import load_wav
from .data import DatasetError, DatasetManifest, SplitSpec

CACHE_ENV = "TEMPOFUSE_CACHE"
DEFAULT_CACHE = ".tempofuse_cache"
INPUT_NAMES = ("mel", "fourier", "autocorrelation")
_KIND_OF_INPUT = {"mel": "mel", "fourier": "fourier_tg", "autocorrelation": "ac_tg"}


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, DEFAULT_CACHE))


class FeatureCache:
    """One ``<song_id>.tfr`` file per song plus ``config.json`` describing how they were made."""

    def __init__(self, directory, cfg: F.FeatureConfig | None = None):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_path = self.dir / "config.json"
        if cfg_path.exists():
            stored = F.FeatureConfig.from_dict(json.loads(cfg_path.read_text()))
            if cfg is not None and cfg != stored:
                raise DatasetError(f"{self.dir}: cache was built with a different feature config; "
                                   f"use another cache directory")
            self.cfg = stored
        else:
            self.cfg = cfg or F.FeatureConfig()
            F.atomic_write(cfg_path, json.dumps(self.cfg.to_dict(), sort_keys=True).encode())

    def path(self, song_id: str) -> Path:
        return self.dir / f"{song_id}.tfr"

    def has(self, song_id: str) -> bool:
        return self.path(song_id).exists()

    def load(self, song_id: str, partition: str | None = None) -> F.FeatureRecord:
        p = self.path(song_id)
        if not p.exists():
            raise DatasetError(f"missing feature cache for {song_id} ({p}); run extract first")
        rec = F.read_feature_file(p, song_id)
        rec.partition = partition
        return rec


def _extract_one(job) -> str:
    audio_path, song_id, label, cfg, out_path = job
    rec = F.extract_record(load_wav(audio_path), song_id, label, cfg)
    F.write_feature_file(rec, out_path)
    return song_id


def extract_dataset(manifest: DatasetManifest, cache: FeatureCache,
                    jobs: int = 1) -> tuple[int, int]:
    """Compute missing feature files; returns ``(computed, skipped)``."""
    work = [(manifest.audio_path(e), e.song_id, manifest.label(e), cache.cfg, cache.path(e.song_id))
            for e in manifest.entries if not cache.has(e.song_id)]
    skipped = len(manifest) - len(work)
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_extract_one, work, chunksize=4))
    else:
        for job in work:
            _extract_one(job)
    return len(work), skipped


def iter_records(manifest: DatasetManifest, split: SplitSpec, partition: str,
                 cache: FeatureCache) -> Iterator[F.FeatureRecord]:
    for song_id in split.songs(partition):
        rec = cache.load(song_id, partition)
        rec.label = manifest.label(manifest.entry(song_id))
        yield rec


def fit_stats(records_factory, kinds: Iterable[str] = tuple(F.FEATURE_KINDS)) -> dict[str, F.NormalizationStats]:
    """Training-split statistics for each feature kind (one streaming pass per kind)."""
    return {k: F.fit_zscore(records_factory(), k) for k in kinds}


def song_tempo(rec: F.FeatureRecord, **kw) -> float:
    tg = dsp.Tempogram("fourier", rec.fourier.astype(np.float64), rec.fourier_bpm,
                       rec.frame_rate, rec.tempo_window)
    return dsp.estimate_global_tempo(tg, **kw)


@dataclass
class ChunkDataset:
    """All chunks of a set of songs, stacked per input kind.

    ``inputs`` holds only the kinds a model consumes, each ``[M, bins, chunk_len]``;
    ``chunk_song[i]`` indexes ``song_ids`` for chunk ``i``.
    """

    song_ids: list[str]
    song_labels: np.ndarray
    chunk_song: np.ndarray
    labels: np.ndarray
    inputs: dict[str, np.ndarray] = field(default_factory=dict)
    partition: str | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_songs(self) -> int:
        return len(self.song_ids)

    def batch(self, idx) -> dict[str, np.ndarray]:
        return {k: v[idx] for k, v in self.inputs.items()}


def chunk_dataset(records: Iterable[F.FeatureRecord], stats: dict[str, F.NormalizationStats] | None,
                  inputs: Sequence[str] = INPUT_NAMES, chunk_len: int = F.CHUNK_LEN,
                  partition: str | None = None) -> ChunkDataset:
    for name in inputs:
        if name not in INPUT_NAMES:
            raise ValueError(f"unknown input {name!r}; expected one of {INPUT_NAMES}")
    parts: dict[str, list[np.ndarray]] = {k: [] for k in inputs}
    song_ids, song_labels, chunk_song, labels = [], [], [], []
    for rec in records:
        cs = F.make_chunk_set(rec, stats, chunk_len)
        if len(cs) == 0:
            raise DatasetError(f"{rec.song_id}: shorter than one {chunk_len}-frame chunk")
        for k in inputs:
            parts[k].append(getattr(cs, k))
        chunk_song += [len(song_ids)] * len(cs)
        labels += [rec.label] * len(cs)
        song_ids.append(rec.song_id)
        song_labels.append(rec.label)
    arrays = {k: (np.concatenate(v) if v else np.zeros((0, 0, chunk_len), np.float32))
              for k, v in parts.items()}
    return ChunkDataset(song_ids, np.asarray(song_labels, dtype=np.int64),
                        np.asarray(chunk_song, dtype=np.int64), np.asarray(labels, dtype=np.int64),
                        arrays, partition)


def model_inputs(kind: str) -> tuple[str, ...]:
    return {
        "mel_only": ("mel",),
        "ftg_only": ("fourier",),
        "actg_only": ("autocorrelation",),
        "early_fusion": INPUT_NAMES,
        "late_fusion": INPUT_NAMES,
    }[kind]


def stats_kinds(inputs: Sequence[str]) -> tuple[str, ...]:
    return tuple(_KIND_OF_INPUT[i] for i in inputs)


def load_partition(manifest: DatasetManifest, split: SplitSpec, partition: str, cache: FeatureCache,
                   stats: dict[str, F.NormalizationStats], inputs: Sequence[str]) -> ChunkDataset:
    return chunk_dataset(iter_records(manifest, split, partition, cache), stats, inputs,
                         cache.cfg.chunk_len, partition)
