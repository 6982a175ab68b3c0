"""Audio preprocessing pipeline: WAV ingestion, resampling to 16 kHz,
fixed-duration segmentation, Hamming-window STFT magnitudes and dataset-level
normalization.

The reference geometry: 1 s at 16 kHz with a 16 ms window (256 samples) and
50% overlap (hop 128) yields a 126 x 129 spectrogram. Framing is centered
(the signal is zero-padded by half a window on both ends), so the frame count
is floor(N / hop) + 1.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import resample_poly


@dataclass
class AudioClip:
    samples: np.ndarray            # mono, float64, nominally within [-1, 1]
    sample_rate: int
    target_label: Optional[str] = None
    orth_labels: Tuple[str, ...] = ()

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray             # (frames, bins), nonnegative magnitudes
    sample_rate: int
    window: int
    hop: int

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("normalization std must be > 0")


# ---------------------------------------------------------------------------
# WAV ingestion (PCM16 / PCM24 / float32; stereo is averaged to mono)
# ---------------------------------------------------------------------------

class WavFormatError(ValueError):
    """WAV file is malformed or uses an unsupported encoding."""


def read_wav(path) -> AudioClip:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    off = 12
    fmt = None
    data = None
    while off + 8 <= len(buf):
        cid = buf[off:off + 4]
        size = struct.unpack("<I", buf[off + 4:off + 8])[0]
        body = buf[off + 8:off + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        off += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate = struct.unpack("<HHI", fmt[:8])
    bits = struct.unpack("<H", fmt[14:16])[0]
    if channels < 1:
        raise WavFormatError(f"{path}: zero channels")
    if audio_format == 1 and bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 1 and bits == 24:
        raw = np.frombuffer(data, dtype=np.uint8)
        raw = raw[:len(raw) - len(raw) % 3].reshape(-1, 3)
        vals = (raw[:, 0].astype(np.int32)
                | raw[:, 1].astype(np.int32) << 8
                | raw[:, 2].astype(np.int32) << 16)
        vals = np.where(vals >= 1 << 23, vals - (1 << 24), vals)
        x = vals.astype(np.float64) / float(1 << 23)
    elif audio_format == 3 and bits == 32:
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(
            f"{path}: unsupported encoding (format {audio_format}, {bits}-bit); "
            "only PCM16, PCM24 and float32 are handled")
    if channels > 1:
        x = x[:len(x) - len(x) % channels].reshape(-1, channels).mean(axis=1)
    return AudioClip(samples=x, sample_rate=rate)


def write_wav(path, clip: AudioClip, encoding: str = "pcm16") -> None:
    """Write a mono WAV; encodings: pcm16, pcm24, float32."""
    x = np.clip(clip.samples, -1.0, 1.0)
    if encoding == "pcm16":
        payload = (np.round(x * 32767.0).astype("<i2")).tobytes()
        audio_format, bits = 1, 16
    elif encoding == "pcm24":
        vals = np.round(x * float((1 << 23) - 1)).astype(np.int32)
        raw = np.empty((len(vals), 3), dtype=np.uint8)
        raw[:, 0] = vals & 0xFF
        raw[:, 1] = (vals >> 8) & 0xFF
        raw[:, 2] = (vals >> 16) & 0xFF
        payload = raw.tobytes()
        audio_format, bits = 1, 24
    elif encoding == "float32":
        payload = clip.samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", audio_format, 1, clip.sample_rate,
                      clip.sample_rate * block, block, bits)
    data_chunk = b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        data_chunk += b"\x00"
    fmt_chunk = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    riff = b"WAVE" + fmt_chunk + data_chunk
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(riff)) + riff)


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

TARGET_RATE = 16000


def resample(clip: AudioClip, target_rate: int = TARGET_RATE) -> AudioClip:
    """Polyphase (linear-phase) resample; pass-through when already at rate."""
    if len(clip.samples) == 0:
        raise ValueError("cannot resample an empty clip")
    if clip.sample_rate == target_rate:
        return clip
    g = math.gcd(clip.sample_rate, target_rate)
    y = resample_poly(clip.samples, target_rate // g, clip.sample_rate // g)
    return AudioClip(samples=y, sample_rate=target_rate,
                     target_label=clip.target_label, orth_labels=clip.orth_labels)


def segment_or_pad(clip: AudioClip, duration_s: float) -> List[AudioClip]:
    """Cut into non-overlapping fixed-duration fragments; the final remainder
    (or a short clip) is right-padded with zeros."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    n = int(round(duration_s * clip.sample_rate))
    x = clip.samples
    pieces = []
    if len(x) <= n:
        pieces.append(np.concatenate([x, np.zeros(n - len(x))]))
    else:
        for start in range(0, len(x), n):
            chunk = x[start:start + n]
            if len(chunk) < n:
                chunk = np.concatenate([chunk, np.zeros(n - len(chunk))])
            pieces.append(chunk)
    return [AudioClip(samples=p, sample_rate=clip.sample_rate,
                      target_label=clip.target_label, orth_labels=clip.orth_labels)
            for p in pieces]


def hamming_periodic(n: int) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(clip: AudioClip, window_s: float = 0.016,
                   overlap: float = 0.5, log: bool = False) -> Spectrogram:
    """Hamming-windowed DFT magnitudes, phase discarded.

    Centered framing: the signal is zero-padded by window//2 on both ends, so
    frames = floor(N / hop) + 1 and bins = window/2 + 1. With log=True the
    magnitudes are compressed to dB (20 log10); the default is linear.
    """
    win = int(round(window_s * clip.sample_rate))
    hop = int(round(win * (1.0 - overlap)))
    if hop < 1:
        raise ValueError("overlap too large: hop collapses to zero")
    x = clip.samples
    if len(x) < win:
        raise ValueError(f"clip ({len(x)} samples) shorter than one window ({win})")
    half = win // 2
    xp = np.concatenate([np.zeros(half), x, np.zeros(half)])
    n_frames = (len(xp) - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(xp, win)[::hop][:n_frames]
    mags = np.abs(np.fft.rfft(frames * hamming_periodic(win), axis=1))
    if log:
        mags = 20.0 * np.log10(mags + 1e-10)
    return Spectrogram(values=mags, sample_rate=clip.sample_rate,
                       window=win, hop=hop)


def compute_norm_stats(spectrograms: Sequence[np.ndarray]) -> NormStats:
    """Global mean/std over every value of the (training) split."""
    if not len(spectrograms):
        raise ValueError("no spectrograms to compute stats from")
    total = sum(int(np.asarray(s).size) for s in spectrograms)
    mean = sum(float(np.asarray(s, dtype=np.float64).sum()) for s in spectrograms) / total
    sq = sum(float(((np.asarray(s, dtype=np.float64) - mean) ** 2).sum())
             for s in spectrograms) / total
    std = math.sqrt(sq)
    if std < 1e-12:
        raise ValueError("training split is constant-valued (std = 0)")
    return NormStats(mean=mean, std=std)


def normalize(spectrograms: Sequence[np.ndarray], stats: NormStats
              ) -> List[np.ndarray]:
    """(v - mean) / std elementwise, using training-split stats for any split."""
    return [(np.asarray(s, dtype=np.float64) - stats.mean) / stats.std
            for s in spectrograms]


def denormalize(spectrograms: Sequence[np.ndarray], stats: NormStats
                ) -> List[np.ndarray]:
    return [np.asarray(s, dtype=np.float64) * stats.std + stats.mean
            for s in spectrograms]


def preprocess_clip(clip: AudioClip, duration_s: float = 1.0,
                    target_rate: int = TARGET_RATE, window_s: float = 0.016,
                    overlap: float = 0.5, log: bool = False) -> List[Spectrogram]:
    """resample -> segment/zero-pad -> STFT magnitude, for one clip.

    Normalization happens at the dataset level once training-split stats
    exist; see compute_norm_stats / normalize.
    """
    clip = resample(clip, target_rate)
    return [stft_magnitude(piece, window_s=window_s, overlap=overlap, log=log)
            for piece in segment_or_pad(clip, duration_s)]
