"""Feature records, z-score normalization, 200-frame chunking and the binary cache.

Cache layout (little-endian)::

    b"TFR1" | u32 version | u32 label | u32 n_matrices
    n_matrices x ( u8 kind tag | u32 rows | u32 cols | rows*cols float32, row-major )
    u32 CRC32 of every preceding byte

Normalization stats use the same framing: the label field carries the feature
kind tag and the single matrix (tag ``STATS``) holds mean and std as four rows,
each value split into a float32 high part and a float32 residual.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import dsp
from .audio_io import AudioClip, slice_segment

MAGIC = b"TFR1"
VERSION = 1
CHUNK_LEN = 200
STD_FLOOR = 1e-8

# Matrix kind tags.
MEL = 1
FOURIER_TG = 2
AC_TG = 3
STATS = 4
META = 5

FEATURE_KINDS = {"mel": MEL, "fourier_tg": FOURIER_TG, "ac_tg": AC_TG}
KIND_NAMES = {tag: name for name, tag in FEATURE_KINDS.items()}

_HEADER = struct.Struct("<4sIII")
_MATRIX = struct.Struct("<BII")


class FeatureFileError(ValueError):
    """Malformed feature or stats file."""


class ChecksumError(FeatureFileError):
    """Stored CRC32 does not match the file contents (corruption or truncation)."""


# --- binary framing -------------------------------------------------------

def encode_matrix(tag: int, m: np.ndarray) -> bytes:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    data = np.ascontiguousarray(m, dtype="<f4")
    return _MATRIX.pack(tag, m.shape[0], m.shape[1]) + data.tobytes()


def decode_matrices(buf: bytes, offset: int, count: int) -> tuple[list[tuple[int, np.ndarray]], int]:
    out = []
    for _ in range(count):
        if offset + _MATRIX.size > len(buf):
            raise FeatureFileError("truncated matrix header")
        tag, rows, cols = _MATRIX.unpack_from(buf, offset)
        offset += _MATRIX.size
        nbytes = rows * cols * 4
        if offset + nbytes > len(buf):
            raise FeatureFileError(f"truncated matrix payload (tag {tag}, {rows}x{cols})")
        m = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset)
        out.append((tag, m.reshape(rows, cols).astype(np.float32)))
        offset += nbytes
    return out, offset


def seal(body: bytes) -> bytes:
    """Append the CRC32 trailer."""
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unseal(buf: bytes, magic: bytes, what: str) -> bytes:
    """Check magic and CRC32; return the body without the trailer."""
    if len(buf) < len(magic) or buf[:len(magic)] != magic:
        raise FeatureFileError(f"bad magic in {what}: expected {magic!r}, got {buf[:len(magic)]!r}")
    if len(buf) < len(magic) + 8:
        raise ChecksumError(f"{what} is truncated ({len(buf)} bytes)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"CRC32 mismatch in {what} (file corrupt or truncated)")
    return body


def pack_file(label: int, matrices: Sequence[tuple[int, np.ndarray]]) -> bytes:
    body = _HEADER.pack(MAGIC, VERSION, label, len(matrices))
    body += b"".join(encode_matrix(tag, m) for tag, m in matrices)
    return seal(body)


def unpack_file(buf: bytes, what: str = "feature file") -> tuple[int, list[tuple[int, np.ndarray]]]:
    body = unseal(buf, MAGIC, what)
    if len(body) < _HEADER.size:
        raise FeatureFileError(f"{what}: header truncated")
    _, version, label, count = _HEADER.unpack_from(body, 0)
    if version != VERSION:
        raise FeatureFileError(f"{what}: unsupported version {version}")
    matrices, end = decode_matrices(body, _HEADER.size, count)
    if end != len(body):
        raise FeatureFileError(f"{what}: {len(body) - end} trailing bytes")
    return label, matrices


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- records --------------------------------------------------------------

@dataclass
class FeatureRecord:
    """The three feature matrices of one song.

    Matrices are float32 so that the cache round trip is lossless. ``partition``
    is set once a record has been assigned to a split; normalization refuses
    anything that is not training data.
    """

    song_id: str
    label: int
    mel: np.ndarray
    fourier: np.ndarray
    autocorrelation: np.ndarray
    sample_rate: int = 22050
    hop: int = 512
    tempo_window: int = dsp.TEMPO_WINDOW
    partition: str | None = None

    def __post_init__(self):
        for name in ("mel", "fourier", "autocorrelation"):
            m = np.asarray(getattr(self, name), dtype=np.float32)
            if m.ndim != 2 or m.size == 0:
                raise ValueError(f"{self.song_id}: {name} matrix must be non-empty 2-D, "
                                 f"got shape {m.shape}")
            setattr(self, name, m)

    def matrix(self, kind: str) -> np.ndarray:
        return {"mel": self.mel, "fourier_tg": self.fourier, "ac_tg": self.autocorrelation}[kind]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def fourier_bpm(self) -> np.ndarray:
        return 60.0 * np.arange(self.fourier.shape[0]) * self.frame_rate / self.tempo_window

    @property
    def autocorrelation_bpm(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 60.0 * self.frame_rate / np.arange(self.autocorrelation.shape[0])


def write_feature_file(rec: FeatureRecord, path) -> None:
    meta = np.array([[rec.sample_rate, rec.hop, rec.tempo_window]], dtype=np.float32)
    data = pack_file(rec.label, [(MEL, rec.mel), (FOURIER_TG, rec.fourier),
                                 (AC_TG, rec.autocorrelation), (META, meta)])
    atomic_write(path, data)


def read_feature_file(path, song_id: str | None = None) -> FeatureRecord:
    with open(path, "rb") as fh:
        buf = fh.read()
    label, matrices = unpack_file(buf, what=os.fspath(path))
    by_tag = dict(matrices)
    missing = {MEL, FOURIER_TG, AC_TG, META} - by_tag.keys()
    if missing:
        raise FeatureFileError(f"{path}: missing matrix tags {sorted(missing)}")
    sr, hop, window = (int(v) for v in by_tag[META][0])
    if song_id is None:
        song_id = os.path.splitext(os.path.basename(path))[0]
    return FeatureRecord(song_id, label, by_tag[MEL], by_tag[FOURIER_TG], by_tag[AC_TG],
                         sample_rate=sr, hop=hop, tempo_window=window)


# --- extraction -----------------------------------------------------------

@dataclass(frozen=True)
class FeatureConfig:
    """How a song is turned into feature matrices.

    ``segment`` is the analysis window in seconds (``None`` = whole clip).
    With ``mel_full`` the Mel-spectrogram covers the whole clip while the
    tempograms still use ``segment``.
    """

    segment: tuple[float, float] | None = (15.0, 45.0)
    mel_full: bool = False
    sample_rate: int = 22050
    window_len: int = 2048
    hop: int = 512
    n_mels: int = dsp.N_MELS
    tempo_window: int = dsp.TEMPO_WINDOW
    chunk_len: int = CHUNK_LEN

    @property
    def stft(self) -> dsp.StftConfig:
        return dsp.StftConfig(self.window_len, self.hop)

    @property
    def min_duration(self) -> float:
        return self.segment[1] if self.segment else 0.0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["segment"] = list(self.segment) if self.segment else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        d = dict(d)
        if d.get("segment") is not None:
            d["segment"] = tuple(d["segment"])
        return cls(**d)


def extract_record(clip: AudioClip, song_id: str, label: int,
                   cfg: FeatureConfig = FeatureConfig()) -> FeatureRecord:
    if clip.sample_rate != cfg.sample_rate:
        from .audio_io import resample
        clip = resample(clip, cfg.sample_rate)
    seg = slice_segment(clip, *cfg.segment) if cfg.segment else clip
    feats = dsp.compute_features(seg, cfg.stft, cfg.n_mels, cfg.tempo_window)
    mel = dsp.mel_spectrogram(clip, cfg.stft, cfg.n_mels) if cfg.mel_full else feats.mel
    return FeatureRecord(song_id, label, mel.values, feats.fourier.values,
                         feats.autocorrelation.values, sample_rate=cfg.sample_rate,
                         hop=cfg.hop, tempo_window=cfg.tempo_window)


# --- normalization --------------------------------------------------------

def split_float32(a) -> tuple[np.ndarray, np.ndarray]:
    """``a`` as float32 parts with ``hi + lo`` exact in float64 and ``float32(hi + lo) == hi``."""
    a = np.asarray(a, dtype=np.float64) + 0.0  # -0.0 -> +0.0
    hi = a.astype(np.float32)
    lo = (a - hi).astype(np.float32)
    # A residual of exactly half an ulp would round hi + lo away from hi.
    tie = (hi.astype(np.float64) + lo).astype(np.float32) != hi
    lo = np.where(tie, np.nextafter(lo, np.float32(0)), lo).astype(np.float32)
    return hi, lo


def join_float32(hi, lo) -> np.ndarray:
    return np.asarray(hi, dtype=np.float64) + np.asarray(lo, dtype=np.float64)


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    feature_kind: str

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")
        # Held at the precision they are stored at (about 48 bits), so files round-trip exactly.
        self.mean = join_float32(*split_float32(self.mean))
        self.std = join_float32(*split_float32(self.std))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length")

    def __len__(self) -> int:
        return self.mean.shape[0]

    def to_matrix(self) -> np.ndarray:
        return np.stack([*split_float32(self.mean), *split_float32(self.std)])

    @classmethod
    def from_matrix(cls, m: np.ndarray, feature_kind: str) -> "NormalizationStats":
        if m.ndim != 2 or m.shape[0] != 4:
            raise FeatureFileError(f"stats matrix must have 4 rows, got shape {m.shape}")
        return cls(join_float32(m[0], m[1]), join_float32(m[2], m[3]), feature_kind)


def fit_zscore(records: Iterable[FeatureRecord], feature_kind: str) -> NormalizationStats:
    """Per-bin mean and population std pooled over every frame of every record."""
    mean = m2 = None
    n = 0
    for rec in records:
        if rec.partition not in (None, "train"):
            raise ValueError(f"{rec.song_id}: normalization stats may only be fit on "
                             f"training records, got partition {rec.partition!r}")
        m = rec.matrix(feature_kind).astype(np.float64)
        if mean is None:
            mean = np.zeros(m.shape[0])
            m2 = np.zeros(m.shape[0])
        elif m.shape[0] != mean.shape[0]:
            raise ValueError(f"{rec.song_id}: {feature_kind} has {m.shape[0]} bins, "
                             f"expected {mean.shape[0]}")
        # Pairwise merge of (count, mean, M2), one record at a time.
        k = m.shape[1]
        rec_mean = m.mean(axis=1)
        rec_m2 = ((m - rec_mean[:, None]) ** 2).sum(axis=1)
        delta = rec_mean - mean
        total = n + k
        mean = mean + delta * (k / total)
        m2 = m2 + rec_m2 + delta ** 2 * (n * k / total)
        n = total
    if mean is None:
        raise ValueError("fit_zscore needs at least one record")
    std = np.maximum(np.sqrt(m2 / n), STD_FLOOR)
    return NormalizationStats(mean, std, feature_kind)


def apply_zscore(m: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != len(stats):
        raise ValueError(f"matrix with {m.shape[0] if m.ndim else 0} rows does not match "
                         f"{len(stats)}-bin {stats.feature_kind} stats")
    return (m - stats.mean[:, None]) / stats.std[:, None]


def invert_zscore(z: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std[:, None] + stats.mean[:, None]


def write_stats_file(stats: NormalizationStats, path) -> None:
    atomic_write(path, pack_file(FEATURE_KINDS[stats.feature_kind],
                                 [(STATS, stats.to_matrix())]))


def read_stats_file(path) -> NormalizationStats:
    with open(path, "rb") as fh:
        label, matrices = unpack_file(fh.read(), what=os.fspath(path))
    if len(matrices) != 1 or matrices[0][0] != STATS or label not in KIND_NAMES:
        raise FeatureFileError(f"{path}: not a normalization stats file")
    return NormalizationStats.from_matrix(matrices[0][1], KIND_NAMES[label])


# --- chunking -------------------------------------------------------------

def chunk_time_axis(m: np.ndarray, chunk_len: int = CHUNK_LEN) -> list[np.ndarray]:
    """Non-overlapping ``chunk_len``-frame slices; the remainder is dropped."""
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    n = m.shape[1] // chunk_len
    return [m[:, i * chunk_len:(i + 1) * chunk_len] for i in range(n)]


@dataclass
class ChunkSet:
    """Aligned model inputs for one song: ``[n_chunks, n_bins, chunk_len]`` per kind."""

    source_id: str
    label: int
    mel: np.ndarray
    fourier: np.ndarray
    autocorrelation: np.ndarray
    partition: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = {self.mel.shape[0], self.fourier.shape[0], self.autocorrelation.shape[0]}
        if len(counts) != 1:
            raise ValueError(f"{self.source_id}: chunk counts differ across kinds: {counts}")
        lens = {self.mel.shape[2], self.fourier.shape[2], self.autocorrelation.shape[2]}
        if len(lens) != 1:
            raise ValueError(f"{self.source_id}: chunk lengths differ across kinds: {lens}")

    def __len__(self) -> int:
        return self.mel.shape[0]


def _stack(chunks: list[np.ndarray], bins: int, chunk_len: int) -> np.ndarray:
    if not chunks:
        return np.zeros((0, bins, chunk_len), dtype=np.float32)
    return np.stack(chunks).astype(np.float32)


def make_chunk_set(rec: FeatureRecord, stats: dict[str, NormalizationStats] | None = None,
                   chunk_len: int = CHUNK_LEN) -> ChunkSet:
    """Normalize (if ``stats`` is given) and cut a record into paired chunks.

    Chunk ``i`` of the Mel-spectrogram is paired with chunk ``i`` of both
    tempograms. When the Mel-spectrogram has more chunks than the tempograms
    (full-length Mel), tempogram chunk ``i mod n_tempo_chunks`` is reused.
    """
    mats = {}
    for kind in FEATURE_KINDS:
        m = rec.matrix(kind)
        if stats is not None:
            m = apply_zscore(m, stats[kind])
        mats[kind] = chunk_time_axis(m, chunk_len)
    n_mel = len(mats["mel"])
    n_tg = min(len(mats["fourier_tg"]), len(mats["ac_tg"]))
    if n_mel == 0 or n_tg == 0:
        n_mel = n_tg = 0
    if n_mel > n_tg:
        pick = [i % n_tg for i in range(n_mel)]
    else:
        n_mel = n_tg = min(n_mel, n_tg)
        pick = list(range(n_mel))
    return ChunkSet(
        rec.song_id, rec.label,
        _stack(mats["mel"][:n_mel], rec.mel.shape[0], chunk_len),
        _stack([mats["fourier_tg"][i] for i in pick], rec.fourier.shape[0], chunk_len),
        _stack([mats["ac_tg"][i] for i in pick], rec.autocorrelation.shape[0], chunk_len),
        partition=rec.partition,
    )
