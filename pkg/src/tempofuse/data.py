"""Dataset manifests, stratified splits and the synthetic click-track corpus."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_io import AudioClip, WavFormatError, wav_info, write_wav

PARTITIONS = ("train", "valid", "test")
TIMBRES = ("click", "noise-burst", "tone-burst")
MAX_JITTER = 0.2


class DatasetError(ValueError):
    """Malformed dataset tree, manifest or split."""


# --- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    song_id: str
    path: str  # relative to the manifest root, '/'-separated
    class_name: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    classes: list[str]

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [e.song_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate song_id: {', '.join(dup)}")
        table = set(self.classes)
        for e in self.entries:
            if e.class_name not in table:
                raise DatasetError(f"song {e.song_id} has unknown class {e.class_name!r}")
        empty = [c for c in self.classes if not any(e.class_name == c for e in self.entries)]
        if empty:
            raise DatasetError(f"class without songs: {', '.join(empty)}")

    def __len__(self) -> int:
        return len(self.entries)

    def label(self, entry: ManifestEntry) -> int:
        return self.classes.index(entry.class_name)

    def audio_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def entry(self, song_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.song_id == song_id:
                return e
        raise KeyError(song_id)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["song_id", "relative_path", "class_name"])
            for e in self.entries:
                w.writerow([e.song_id, e.path, e.class_name])

    @classmethod
    def read_csv(cls, path, root=None) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and set(rows[0]) != {"song_id", "relative_path", "class_name"}:
            raise DatasetError(f"{path}: expected columns song_id,relative_path,class_name")
        entries = [ManifestEntry(r["song_id"], r["relative_path"], r["class_name"]) for r in rows]
        classes = sorted({e.class_name for e in entries})
        return cls(Path(root) if root is not None else path.parent, entries, classes)


def build_manifest(root, min_duration: float | None = None) -> DatasetManifest:
    """Scan ``root/<class_name>/<song>.wav``; class indices follow lexicographic order.

    Files shorter than ``min_duration`` seconds are rejected with an error
    naming every offending file.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no class directories")
    entries, empty, short = [], [], []
    for c in classes:
        files = sorted(p for p in (root / c).iterdir() if p.is_file() and p.suffix.lower() == ".wav")
        if not files:
            empty.append(c)
        for f in files:
            if min_duration is not None:
                try:
                    dur = wav_info(f).duration
                except WavFormatError as exc:
                    raise DatasetError(str(exc)) from exc
                if dur < min_duration:
                    short.append(f"{c}/{f.name} ({dur:.2f}s)")
            entries.append(ManifestEntry(f.stem, f"{c}/{f.name}", c))
    if empty:
        raise DatasetError(f"empty class directory: {', '.join(empty)}")
    if short:
        raise DatasetError(f"shorter than the {min_duration:g}s analysis window: {', '.join(short)}")
    return DatasetManifest(root, entries, classes)


# --- splits ----------------------------------------------------------------

@dataclass
class SplitSpec:
    ratios: tuple[int, ...] = (8, 1, 1)
    seed: int = 0
    assignment: dict[str, str] = field(default_factory=dict)

    def songs(self, partition: str) -> list[str]:
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        return [s for s, p in self.assignment.items() if p == partition]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["song_id", "partition"])
            for song, part in self.assignment.items():
                w.writerow([song, part])

    @classmethod
    def read_csv(cls, path) -> "SplitSpec":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assignment = {}
        for r in rows:
            if r.get("partition") not in PARTITIONS:
                raise DatasetError(f"{path}: bad partition {r.get('partition')!r} for {r.get('song_id')}")
            assignment[r["song_id"]] = r["partition"]
        return cls(assignment=assignment)


def partition_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; every part gets at least one."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) == 0 or (ratios <= 0).any():
        raise ValueError(f"split ratios must be positive, got {list(ratios)}")
    if n < len(ratios):
        raise DatasetError(f"{n} songs cannot fill {len(ratios)} partitions")
    exact = n * ratios / ratios.sum()
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:n - counts.sum()]] += 1
    for i in np.flatnonzero(counts == 0):
        counts[np.argmax(counts)] -= 1
        counts[i] = 1
    return counts.tolist()


def split_dataset(manifest: DatasetManifest, ratios: Sequence[int] = (8, 1, 1),
                  seed: int = 0) -> SplitSpec:
    """Per-class seeded shuffle, then a contiguous cut into train/valid/test."""
    if len(ratios) != len(PARTITIONS):
        raise ValueError(f"need {len(PARTITIONS)} ratios, got {len(ratios)}")
    assignment = {}
    for ci, c in enumerate(manifest.classes):
        songs = [e.song_id for e in manifest.entries if e.class_name == c]
        try:
            counts = partition_counts(len(songs), ratios)
        except DatasetError as exc:
            raise DatasetError(f"class {c}: {exc}") from exc
        order = np.random.default_rng([seed, ci]).permutation(len(songs))
        start = 0
        for part, k in zip(PARTITIONS, counts):
            for idx in order[start:start + k]:
                assignment[songs[idx]] = part
            start += k
    # Keep manifest order so the CSV is stable.
    assignment = {e.song_id: assignment[e.song_id] for e in manifest.entries}
    return SplitSpec(tuple(ratios), seed, assignment)


# --- synthetic corpus -------------------------------------------------------

@dataclass(frozen=True)
class SynthClass:
    name: str
    bpm: float
    timbre: str = "click"
    jitter: float = 0.0

    def __post_init__(self):
        if not self.bpm > 0:
            raise ValueError(f"class {self.name}: bpm must be positive, got {self.bpm}")
        if self.timbre not in TIMBRES:
            raise ValueError(f"class {self.name}: timbre must be one of {TIMBRES}")
        if not 0.0 <= self.jitter <= MAX_JITTER:
            raise ValueError(f"class {self.name}: jitter must be in [0, {MAX_JITTER}]")


def default_classes() -> list[SynthClass]:
    bpms = (90, 110, 128, 140, 170)
    return [SynthClass(f"bpm{b:03d}", float(b), TIMBRES[i % 3], 0.02) for i, b in enumerate(bpms)]


@dataclass
class SyntheticSpec:
    classes: list[SynthClass] = field(default_factory=default_classes)
    songs_per_class: int = 100
    duration: float = 30.0
    sample_rate: int = 22050
    seed: int = 0
    noise_floor: float = 1e-3

    def __post_init__(self):
        self.classes = [c if isinstance(c, SynthClass) else SynthClass(**c) for c in self.classes]
        if not self.classes:
            raise ValueError("synthetic spec needs at least one class")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")
        if self.songs_per_class < 1 or self.duration <= 0 or self.sample_rate < 1:
            raise ValueError(f"invalid synthetic spec {self}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        return cls(**json.loads(text))


def _event(timbre: str, sr: int, rng: np.random.Generator) -> np.ndarray:
    if timbre == "click":
        n = int(0.005 * sr)
        return rng.uniform(-1, 1, n) * np.exp(-np.arange(n) / (0.001 * sr))
    if timbre == "noise-burst":
        n = int(0.04 * sr)
        return 0.6 * rng.uniform(-1, 1, n) * np.exp(-np.arange(n) / (0.01 * sr))
    n = int(0.06 * sr)
    t = np.arange(n) / sr
    return 0.8 * np.sin(2 * np.pi * 880.0 * t) * np.hanning(n)


def event_times(bpm: float, duration: float, phase: float, jitter: float,
                rng: np.random.Generator) -> np.ndarray:
    """Onsets ``phase + k * period``, each displaced by up to ``jitter * period / 2``."""
    period = 60.0 / bpm
    base = phase + period * np.arange(int(np.ceil((duration - phase) / period)))
    t = base + period * jitter * rng.uniform(-0.5, 0.5, base.size)
    return t[(t >= 0) & (t < duration)]


def synth_song(cls: SynthClass, duration: float, sample_rate: int, seed,
               noise_floor: float = 1e-3) -> AudioClip:
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    y = noise_floor * rng.standard_normal(n)
    phase = rng.uniform(0.0, 60.0 / cls.bpm)
    for t in event_times(cls.bpm, duration, phase, cls.jitter, rng):
        ev = _event(cls.timbre, sample_rate, rng)
        start = int(round(t * sample_rate))
        stop = min(n, start + ev.size)
        y[start:stop] += 0.5 * ev[:stop - start]
    return AudioClip(np.clip(y, -1.0, 1.0), sample_rate)


def _synth_one(job) -> None:
    cls, spec, seed, path = job
    write_wav(path, synth_song(cls, spec.duration, spec.sample_rate, seed, spec.noise_floor))


def synth_click_dataset(spec: SyntheticSpec, out_dir, jobs: int = 1) -> DatasetManifest:
    """Write ``out_dir/<class>/<class>_<k>.wav`` for every class and return the manifest.

    Each song draws its phase offset, event jitter and noise from a generator
    seeded by ``(spec.seed, class index, song index)``, so output bytes depend
    only on the spec.
    """
    out = Path(out_dir)
    work = []
    try:
        for ci, cls in enumerate(spec.classes):
            (out / cls.name).mkdir(parents=True, exist_ok=True)
            for k in range(spec.songs_per_class):
                work.append((cls, spec, [spec.seed, ci, k], out / cls.name / f"{cls.name}_{k:04d}.wav"))
    except OSError as exc:
        raise DatasetError(f"{out}: cannot create output directory ({exc.strerror})") from exc
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_synth_one, work, chunksize=8))
    else:
        for job in work:
            _synth_one(job)
    return build_manifest(out)


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"{path}: cannot create directory ({exc.strerror})") from exc
    if not os.access(path, os.W_OK):
        raise DatasetError(f"{path}: directory is not writable")
    return path
