"""PCM WAV decoding, mono standardization and a small reference encoder.

The reference encoder is a log band-energy front end. It stands in for the
large pretrained encoders so that real audio can be pushed through the whole
pipeline without external checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import AggregatedEmbedding
from .errors import FormatError, UnsupportedFormatError, ValidationError

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
LOG_FLOOR_DB = -80.0


class WavParseError(FormatError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValidationError(f"AudioClip holds mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("audio contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


# ---------------------------------------------------------------------------
# RIFF/WAVE
# ---------------------------------------------------------------------------


def decode_wav(buf: bytes):
    """Return ``(frames, sample_rate)`` with frames shaped (n, channels) in [-1, 1]."""
    if len(buf) < 12:
        raise WavParseError("file too short for a RIFF header", 0)
    riff, _, wave = struct.unpack_from("<4sI4s", buf, 0)
    if riff != b"RIFF":
        raise WavParseError(f"expected 'RIFF', found {riff!r}", 0)
    if wave != b"WAVE":
        raise WavParseError(f"expected 'WAVE', found {wave!r}", 8)
    offset = 12
    fmt = None
    data = None
    while offset + 8 <= len(buf):
        cid, size = struct.unpack_from("<4sI", buf, offset)
        body = offset + 8
        if body + size > len(buf):
            if cid == b"data":
                raise WavParseError(f"data chunk declares {size} bytes but only {len(buf) - body} remain", offset)
            raise WavParseError(f"chunk {cid!r} overruns the file", offset)
        if cid == b"fmt ":
            if size < 16:
                raise WavParseError(f"fmt chunk too small ({size} bytes)", offset)
            fmt = _parse_fmt(buf, body, size)
        elif cid == b"data":
            data = (body, size)
        offset = body + size + (size & 1)
    if fmt is None:
        raise WavParseError("missing fmt chunk", len(buf))
    if data is None:
        raise WavParseError("missing data chunk", len(buf))
    tag, channels, rate, bits = fmt
    if not 1 <= channels <= 8:
        raise UnsupportedFormatError(f"{channels} channels; only 1..8 are supported")
    if rate <= 0:
        raise WavParseError("sample rate is zero", 24)
    if tag == WAVE_FORMAT_PCM and bits in (16, 32):
        dtype = np.dtype("<i2") if bits == 16 else np.dtype("<i4")
        scale = float(1 << (bits - 1))
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormatError(f"format tag 0x{tag:04x} with {bits}-bit samples is not supported")
    start, size = data
    frame_bytes = dtype.itemsize * channels
    n = size // frame_bytes
    raw = np.frombuffer(buf, dtype=dtype, count=n * channels, offset=start).reshape(n, channels)
    frames = raw.astype(np.float64) / scale
    if tag == WAVE_FORMAT_IEEE_FLOAT:
        if not np.all(np.isfinite(frames)):
            raise ValidationError("float WAV contains non-finite samples")
        frames = np.clip(frames, -1.0, 1.0)
    return frames, rate


def _parse_fmt(buf, body, size):
    tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", buf, body)
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if size < 40:
            raise WavParseError("WAVE_FORMAT_EXTENSIBLE fmt chunk shorter than 40 bytes", body)
        # first two bytes of the SubFormat GUID carry the real format tag
        tag = struct.unpack_from("<H", buf, body + 24)[0]
    return tag, channels, rate, bits


def downmix(frames: np.ndarray) -> np.ndarray:
    """Arithmetic mean across channels, per frame."""
    return frames.mean(axis=1) if frames.ndim == 2 else frames


def load_wav(path) -> AudioClip:
    frames, rate = decode_wav(Path(path).read_bytes())
    return AudioClip(downmix(frames), rate)


def encode_wav(samples: np.ndarray, sample_rate: int, sample_format: str = "pcm16") -> bytes:
    """Serialize (n,) or (n, channels) samples in [-1, 1]."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if sample_format == "pcm16":
        tag, bits = WAVE_FORMAT_PCM, 16
        payload = np.clip(np.floor(x * 32768.0 + 0.5), -32768, 32767).astype("<i2").tobytes()
    elif sample_format == "pcm32":
        tag, bits = WAVE_FORMAT_PCM, 32
        payload = np.clip(np.floor(x * 2147483648.0 + 0.5), -2147483648, 2147483647).astype("<i4").tobytes()
    elif sample_format == "float32":
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = x.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\0"
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def write_wav(path, samples, sample_rate: int, sample_format: str = "pcm16") -> None:
    Path(path).write_bytes(encode_wav(samples, sample_rate, sample_format))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def resampled_length(n: int, source_rate: int, target_rate: int) -> int:
    """round(n * target / source), halves rounded up, in exact integer arithmetic."""
    return (2 * n * target_rate + source_rate) // (2 * source_rate)


def resample_array(x: np.ndarray, source_rate: int, target_rate: int) -> np.ndarray:
    """Linear interpolation along axis 0; works for (n,) and (n, channels)."""
    if target_rate <= 0:
        raise ValidationError(f"target rate must be positive, got {target_rate}")
    x = np.asarray(x, dtype=np.float64)
    if source_rate == target_rate:
        return x.copy()
    n = x.shape[0]
    m = resampled_length(n, source_rate, target_rate)
    pos = np.arange(m) * (source_rate / target_rate)
    src = np.arange(n)
    if x.ndim == 1:
        return np.interp(pos, src, x)
    return np.stack([np.interp(pos, src, x[:, c]) for c in range(x.shape[1])], axis=1)


def resample_linear(clip: AudioClip, target_rate: int) -> AudioClip:
    return AudioClip(resample_array(clip.samples, clip.sample_rate, target_rate), target_rate)


# ---------------------------------------------------------------------------
# Reference encoder
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def band_edges(n_bands: int, sample_rate: int) -> np.ndarray:
    """n_bands + 2 mel-spaced frequencies from 0 Hz to Nyquist; band k peaks at edges[k + 1]."""
    return _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_bands + 2))


def triangular_filterbank(n_bands: int, n_fft: int, sample_rate: int) -> np.ndarray:
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = band_edges(n_bands, sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def default_frame_length(sample_rate: int) -> int:
    """Power of two closest to 64 ms."""
    return int(2 ** round(np.log2(0.064 * sample_rate)))


def reference_encode(
    clip: AudioClip, n_bands: int = 32, n_frames: int = 64, frame_length: int | None = None
) -> AggregatedEmbedding:
    """Log band energies on a fixed (n_frames, n_bands) grid.

    Frames use a Hann window with 50% overlap; band energies are floored at
    -80 dB. The frame axis is linearly resampled to ``n_frames`` so the
    output shape does not depend on clip duration.
    """
    if clip.duration_s < 0.1:
        raise ValidationError(f"clip lasts {clip.duration_s:.4f} s; the reference encoder needs at least 0.1 s")
    if n_bands < 1 or n_frames < 1:
        raise ValidationError("n_bands and n_frames must be positive")
    n_fft = frame_length or default_frame_length(clip.sample_rate)
    hop = n_fft // 2
    x = clip.samples
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    count = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(count)[:, None]
    window = np.hanning(n_fft)
    spec = np.abs(np.fft.rfft(x[idx] * window, axis=1)) ** 2
    # full-scale sine at a bin centre maps to about -6 dB
    spec /= window.sum() ** 2
    energy = spec @ triangular_filterbank(n_bands, n_fft, clip.sample_rate).T
    floor = 10.0 ** (LOG_FLOOR_DB / 10.0)
    logs = 10.0 * np.log10(np.maximum(energy, floor))
    if count != n_frames:
        grid = np.linspace(0.0, count - 1, n_frames)
        logs = np.stack([np.interp(grid, np.arange(count), logs[:, b]) for b in range(n_bands)], axis=1)
    return AggregatedEmbedding(logs, "reference")
