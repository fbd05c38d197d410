"""WAV decoding, band-limited resampling and time slicing.

Everything downstream assumes mono audio at 22,050 Hz; this module is where
arbitrary RIFF/WAVE input is brought into that form.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

TARGET_SAMPLE_RATE = 22050

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE

# Resampler kernel: Kaiser-windowed sinc.
KAISER_BETA = 12.0
ZERO_CROSSINGS = 64


class WavFormatError(ValueError):
    """Raised when a file is not a WAV we know how to decode."""


@dataclass(frozen=True)
class AudioClip:
    """Mono PCM signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"AudioClip must be mono, got shape {samples.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class WavInfo:
    format_tag: int
    channels: int
    sample_rate: int
    bits_per_sample: int
    n_frames: int
    data_offset: int

    @property
    def duration(self) -> float:
        return self.n_frames / self.sample_rate


def _read_chunks(buf: bytes, path) -> tuple[dict, int, int]:
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file (bad header magic)")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(buf):
        cid = buf[pos:pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        body = pos + 8
        if cid == b"fmt ":
            fmt = buf[body:body + size]
        elif cid == b"data":
            data = (body, size)
            break
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavFormatError(f"{path}: missing 'fmt ' chunk")
    if data is None:
        raise WavFormatError(f"{path}: missing 'data' chunk")
    if len(fmt) < 16:
        raise WavFormatError(f"{path}: 'fmt ' chunk too short ({len(fmt)} bytes)")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise WavFormatError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE header")
        (tag,) = struct.unpack_from("<H", fmt, 24)
    header = dict(tag=tag, channels=channels, rate=rate, block_align=block_align, bits=bits)
    return header, data[0], data[1]


def _validate(header: dict, path) -> None:
    tag, bits = header["tag"], header["bits"]
    if tag == _WAVE_FORMAT_PCM:
        if bits != 16:
            raise WavFormatError(f"{path}: unsupported bits_per_sample={bits} for PCM (need 16)")
    elif tag == _WAVE_FORMAT_IEEE_FLOAT:
        if bits != 32:
            raise WavFormatError(f"{path}: unsupported bits_per_sample={bits} for IEEE float (need 32)")
    else:
        raise WavFormatError(f"{path}: unsupported format_tag=0x{tag:04x} (need PCM or IEEE float)")
    if header["channels"] not in (1, 2):
        raise WavFormatError(f"{path}: unsupported channels={header['channels']} (need 1 or 2)")
    if header["rate"] <= 0:
        raise WavFormatError(f"{path}: invalid sample_rate={header['rate']}")


def wav_info(path) -> WavInfo:
    """Parse just the header of a WAV file."""
    with open(path, "rb") as fh:
        # Headers are small; 64 KiB covers any sane chunk layout before 'data'.
        head = fh.read(65536)
        total = os.fstat(fh.fileno()).st_size
    header, offset, size = _read_chunks(head, path)
    _validate(header, path)
    frame_bytes = header["channels"] * header["bits"] // 8
    # Streaming writers may leave the size at 0 or overstate it.
    size = min(size, total - offset) if size else total - offset
    return WavInfo(header["tag"], header["channels"], header["rate"], header["bits"],
                   size // frame_bytes, offset)


def load_wav(path) -> AudioClip:
    """Decode a 16-bit PCM or 32-bit float WAV into a mono clip.

    Integer samples are divided by 32768, so -32768 maps to exactly -1.0.
    Stereo input is mixed down by averaging the two channels.
    """
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise WavFormatError(f"{path}: unreadable file ({exc.strerror})") from exc
    header, offset, size = _read_chunks(buf, path)
    _validate(header, path)
    size = min(size, len(buf) - offset) if size else len(buf) - offset
    channels = header["channels"]
    frame_bytes = channels * header["bits"] // 8
    n_frames = size // frame_bytes
    raw = buf[offset:offset + n_frames * frame_bytes]
    if header["tag"] == _WAVE_FORMAT_PCM:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    else:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    x = x.reshape(n_frames, channels)
    mono = x[:, 0] if channels == 1 else x.mean(axis=1)
    return AudioClip(mono, header["rate"])


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as mono 16-bit PCM (values clipped to [-1, 1))."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _WAVE_FORMAT_PCM, 1, clip.sample_rate,
                                    clip.sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    with open(path, "wb") as fh:
        fh.write(header + data)


def _kaiser_sinc(t: np.ndarray, cutoff: float, half_width: float) -> np.ndarray:
    # t is in input-sample units; cutoff is a fraction of the input Nyquist.
    window = np.zeros_like(t)
    inside = np.abs(t) < half_width
    window[inside] = np.i0(KAISER_BETA * np.sqrt(1.0 - (t[inside] / half_width) ** 2))
    window /= np.i0(KAISER_BETA)
    return cutoff * np.sinc(cutoff * t) * window


def resample(clip: AudioClip, target_rate: int, block: int = 8192) -> AudioClip:
    """Band-limited resampling with a Kaiser-windowed sinc kernel.

    The output has ``round(len * target / source)`` samples. When downsampling
    the kernel is stretched so its cutoff sits at the new Nyquist frequency.
    Integer rates make the ratio rational, so the kernel is tabulated once per
    distinct fractional phase.
    """
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise ValueError(f"target_rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    src = clip.sample_rate
    if target_rate == src:
        return clip
    x = clip.samples
    n_out = int(round(len(x) * target_rate / src))
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    cutoff = min(1.0, target_rate / src)
    half_width = ZERO_CROSSINGS / cutoff
    reach = int(np.ceil(half_width))
    taps = np.arange(-reach, reach + 2)
    # Output j sits at input position j*down/up = base + phase/up.
    phases = (np.arange(up) * down) % up
    table = _kaiser_sinc(taps[None, :] - phases[:, None] / up, cutoff, half_width)
    padded = np.concatenate([np.zeros(reach), x, np.zeros(reach + 2)])
    out = np.empty(n_out)
    for start in range(0, n_out, block):
        j = np.arange(start, min(start + block, n_out))
        base = (j * down) // up
        idx = base[:, None] + taps[None, :] + reach
        out[start:start + len(j)] = np.einsum("ij,ij->i", padded[idx], table[j % up])
    return AudioClip(out, target_rate)


def slice_segment(clip: AudioClip, start_s: float, end_s: float) -> AudioClip:
    """Cut ``[start_s, end_s)`` out of a clip, exactly ``round((end-start)*rate)`` samples."""
    duration = clip.duration
    eps = 0.5 / clip.sample_rate
    if not (0.0 <= start_s < end_s) or end_s > duration + eps:
        raise ValueError(
            f"segment [{start_s}, {end_s}] s out of range for a {duration:.3f} s clip")
    first = int(round(start_s * clip.sample_rate))
    n = int(round((end_s - start_s) * clip.sample_rate))
    if first + n > len(clip):
        raise ValueError(
            f"segment [{start_s}, {end_s}] s needs {first + n} samples, clip has {len(clip)}")
    return AudioClip(clip.samples[first:first + n], clip.sample_rate)
