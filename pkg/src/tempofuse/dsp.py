"""Spectral and rhythmic features: Mel-spectrogram, novelty curve, tempograms.

All three network inputs live on one frame grid (hop 512 at 22,050 Hz, about
43.07 frames per second):

* ``mel_spectrogram``: 128-band power Mel-spectrogram.
* ``fourier_tempogram``: magnitude STFT of the novelty curve, bins labelled in
  BPM. A 384-frame window gives 193 bins.
* ``autocorrelation_tempogram``: windowed local autocorrelation of the
  novelty curve, 384 lags, each lag labelled with its BPM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .audio_io import AudioClip

N_MELS = 128
TEMPO_WINDOW = 384
LOG_COMPRESSION = 1000.0
LOCAL_MEAN_SECONDS = 0.37
DEFAULT_BPM_RANGE = (60.0, 200.0)
SUBHARMONIC_RATIO = 0.5


class NoTempoError(ValueError):
    """Raised when a tempogram carries no energy in the requested BPM range."""


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 2048
    hop: int = 512
    window: str = "hamming"

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len:
            raise ValueError(f"need 0 < hop <= window_len, got hop={self.hop}, "
                             f"window_len={self.window_len}")
        if self.window != "hamming":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames], power
    sample_rate: int
    hop: int

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class NoveltyCurve:
    values: np.ndarray  # [n_frames], >= 0
    frame_rate: float


@dataclass
class Tempogram:
    kind: str  # "fourier" | "autocorrelation"
    values: np.ndarray  # [n_bins, n_frames]
    bpm: np.ndarray  # per-bin tempo label; inf for the zero lag
    frame_rate: float
    tempo_window: int = TEMPO_WINDOW
    lags: np.ndarray | None = field(default=None)

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def bin_width_bpm(self) -> float:
        """Spacing of the Fourier BPM grid."""
        return 60.0 * self.frame_rate / self.tempo_window


def hamming(n: int) -> np.ndarray:
    """Periodic Hamming window (the DFT-even form used for spectral analysis)."""
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frame(x: np.ndarray, length: int, hop: int) -> np.ndarray:
    # [n_frames, length] read-only view
    return np.lib.stride_tricks.sliding_window_view(x, length)[::hop]


def stft(clip: AudioClip, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Centered STFT, shape ``[window_len//2 + 1, 1 + n // hop]``.

    The signal is reflect-padded by half a window on both sides, so frame ``t``
    is centered on sample ``t * hop``.
    """
    x = clip.samples
    if x.size == 0:
        raise ValueError("cannot take the STFT of an empty clip")
    return _stft(x, cfg.window_len, cfg.hop, pad_mode="reflect")


def _stft(x: np.ndarray, n_fft: int, hop: int, pad_mode: str) -> np.ndarray:
    half = n_fft // 2
    if pad_mode == "reflect" and x.size > 1:
        padded = np.pad(x, half, mode="reflect")
    else:
        padded = np.pad(x, half, mode="constant")
    n_frames = 1 + x.size // hop
    frames = _frame(padded, n_fft, hop)[:n_frames]
    return np.fft.rfft(frames * hamming(n_fft), axis=1).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, sample_rate: int) -> np.ndarray:
    """``n_mels + 2`` edge frequencies in Hz, equally spaced in HTK Mel."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


@lru_cache(maxsize=8)
def _mel_filterbank(n_mels: int, n_fft_bins: int, sample_rate: int) -> np.ndarray:
    n_fft = 2 * (n_fft_bins - 1)
    freqs = np.arange(n_fft_bins) * sample_rate / n_fft
    edges = mel_band_edges(n_mels, sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # Slaney-style area normalization: each triangle integrates to the same value.
    fb *= (2.0 / (upper - lower))
    fb.setflags(write=False)
    return fb


def mel_filterbank(n_mels: int = N_MELS, n_fft_bins: int = 1025,
                   sample_rate: int = 22050) -> np.ndarray:
    """Triangular HTK-Mel filterbank, ``[n_mels, n_fft_bins]``."""
    if n_mels < 1:
        raise ValueError(f"n_mels must be >= 1, got {n_mels}")
    if n_fft_bins < 2:
        raise ValueError(f"n_fft_bins must be >= 2, got {n_fft_bins}")
    return _mel_filterbank(int(n_mels), int(n_fft_bins), int(sample_rate))


def mel_spectrogram(clip: AudioClip, cfg: StftConfig = StftConfig(),
                    n_mels: int = N_MELS) -> MelSpectrogram:
    spec = stft(clip, cfg)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(n_mels, cfg.n_bins, clip.sample_rate)
    return MelSpectrogram(fb @ power, clip.sample_rate, cfg.hop)


def _centered_mean(x: np.ndarray, width: int) -> np.ndarray:
    # Moving average over the valid part of the window only (no zero bias at the edges).
    n, half = x.shape[0], width // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(n)
    lo, hi = np.maximum(i - half, 0), np.minimum(i + half + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def novelty_curve(mel: MelSpectrogram, gamma: float = LOG_COMPRESSION,
                  local_mean_s: float = LOCAL_MEAN_SECONDS) -> NoveltyCurve:
    """Spectral-flux onset strength on the Mel frame grid.

    Log compression ``log(1 + gamma * S)``, positive time differences averaged
    over bands, then a centered local mean is subtracted and the result is
    half-wave rectified. The first frame has no predecessor and is 0.
    """
    compressed = np.log1p(gamma * mel.values)
    flux = np.maximum(0.0, np.diff(compressed, axis=1)).mean(axis=0)
    flux = np.concatenate([[0.0], flux])
    width = max(1, int(round(local_mean_s * mel.frame_rate)) | 1)
    nov = np.maximum(0.0, flux - _centered_mean(flux, width))
    nov[0] = 0.0
    return NoveltyCurve(nov, mel.frame_rate)


def _check_novelty(nov: NoveltyCurve, tempo_window: int) -> None:
    if nov.values.shape[0] < 2:
        raise ValueError(f"novelty curve needs at least 2 frames, got {nov.values.shape[0]}")
    if tempo_window < 2:
        raise ValueError(f"tempo_window must be >= 2, got {tempo_window}")


def fourier_tempogram(nov: NoveltyCurve, tempo_window: int = TEMPO_WINDOW) -> Tempogram:
    """Magnitude STFT of the novelty curve (hop 1, zero-padded, centered).

    Bin ``k`` corresponds to ``60 * k * frame_rate / tempo_window`` BPM. With
    hop 1 and half-window padding on both sides the result has one more
    column than the novelty curve.
    """
    _check_novelty(nov, tempo_window)
    if tempo_window % 2:
        raise ValueError(f"tempo_window must be even, got {tempo_window}")
    mag = np.abs(_stft(nov.values, tempo_window, 1, pad_mode="constant"))
    bpm = 60.0 * np.arange(tempo_window // 2 + 1) * nov.frame_rate / tempo_window
    return Tempogram("fourier", mag, bpm, nov.frame_rate, tempo_window)


def autocorrelation_tempogram(nov: NoveltyCurve,
                              tempo_window: int = TEMPO_WINDOW) -> Tempogram:
    """Local autocorrelation of the windowed novelty curve, one column per frame.

    Rows are lags ``0 .. tempo_window-1``; each column is divided by its lag-0
    value unless that value is zero. Lag ``l`` is labelled ``60 * frame_rate / l``
    BPM (``inf`` for lag 0).
    """
    _check_novelty(nov, tempo_window)
    x = nov.values
    n = x.shape[0]
    half = tempo_window // 2
    padded = np.pad(x, (half, tempo_window), mode="constant")
    frames = _frame(padded, tempo_window, 1)[:n] * hamming(tempo_window)
    n_fft = 1 << int(np.ceil(np.log2(2 * tempo_window)))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    ac = np.fft.irfft(spec.real ** 2 + spec.imag ** 2, n=n_fft, axis=1)[:, :tempo_window]
    # Inverse FFT leaves roundoff where the exact autocorrelation is zero.
    ac[np.abs(ac) < 1e-12 * max(1.0, float(np.abs(ac).max(initial=0.0)))] = 0.0
    energy = ac[:, :1]
    np.divide(ac, energy, out=ac, where=energy > 0)
    lags = np.arange(tempo_window)
    with np.errstate(divide="ignore"):
        bpm = 60.0 * nov.frame_rate / lags.astype(np.float64)
    return Tempogram("autocorrelation", ac.T.copy(), bpm, nov.frame_rate,
                     tempo_window, lags=lags)


def estimate_global_tempo(tg: Tempogram, bpm_min: float = DEFAULT_BPM_RANGE[0],
                          bpm_max: float = DEFAULT_BPM_RANGE[1],
                          octave_correction: bool = True) -> float:
    """Global tempo from the time-averaged Fourier tempogram.

    Picks the strongest bin in ``[bpm_min, bpm_max]``. A periodic pulse train
    puts near-equal energy on every multiple of its tempo, so with
    ``octave_correction`` the estimate then falls back to the slowest in-range
    sub-multiple (1/2 or 1/3 of the peak tempo) whose bin still holds at least
    ``SUBHARMONIC_RATIO`` of the peak energy. A Fourier tempogram has no energy
    at sub-multiples of the true tempo, so genuine fast tempi are unaffected.
    """
    if tg.kind != "fourier":
        raise ValueError(f"global tempo needs a Fourier tempogram, got {tg.kind!r}")
    if not bpm_min < bpm_max:
        raise ValueError(f"need bpm_min < bpm_max, got {bpm_min}, {bpm_max}")
    in_range = (tg.bpm >= bpm_min) & (tg.bpm <= bpm_max)
    if not np.any(in_range):
        raise NoTempoError(f"no tempogram bins between {bpm_min} and {bpm_max} BPM")
    profile = np.where(in_range, tg.values.mean(axis=1), 0.0)
    if not np.any(profile > 0):
        raise NoTempoError("tempogram has no energy in the requested BPM range")
    best = int(np.argmax(profile))
    if octave_correction:
        for divisor in (3, 2):
            lo = int(np.floor(best / divisor))
            candidates = [k for k in (lo, lo + 1) if k > 0 and in_range[k]]
            if not candidates:
                continue
            k = max(candidates, key=lambda c: profile[c])
            if profile[k] >= SUBHARMONIC_RATIO * profile[best]:
                best = k
                break
    return float(tg.bpm[best])


@dataclass
class Features:
    """The three aligned representations of one clip."""

    mel: MelSpectrogram
    novelty: NoveltyCurve
    fourier: Tempogram
    autocorrelation: Tempogram


def compute_features(clip: AudioClip, cfg: StftConfig = StftConfig(),
                     n_mels: int = N_MELS, tempo_window: int = TEMPO_WINDOW) -> Features:
    mel = mel_spectrogram(clip, cfg, n_mels)
    nov = novelty_curve(mel)
    return Features(mel, nov, fourier_tempogram(nov, tempo_window),
                    autocorrelation_tempogram(nov, tempo_window))
