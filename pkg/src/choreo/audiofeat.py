"""Audio ingest and per-frame multi-timescale log-Mel features.

The pipeline: WAV -> mono 44.1 kHz -> STFT magnitudes at three window
lengths (1024/2048/4096 samples, about 23/46/93 ms) on a shared 10 ms
stride -> 80-band Mel filterbank -> log compression -> per-band/channel
normalization -> 15-frame context windows (7 past + self + 7 future).

Frames are centered at k*stride with zero-padded edges, so every window
length yields the same frame count T = ceil(N / stride) and identical
frame times.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 44100
STRIDE_SAMPLES = 441  # 10 ms
WINDOW_SIZES = (1024, 2048, 4096)
N_MEL_BANDS = 80
MEL_F_LO = 27.5
MEL_F_HI = 16000.0
LOG_EPS = 1e-6
CONTEXT_FRAMES = 7  # each side
CONTEXT_WIDTH = 2 * CONTEXT_FRAMES + 1

CACHE_MAGIC = b"MELF"
CACHE_VERSION = 1


@dataclass
class AudioBuffer:
    samples: np.ndarray  # mono float, -1..1
    sample_rate: int


@dataclass
class NormalizationStats:
    mean: np.ndarray  # (bands, channels)
    std: np.ndarray  # (bands, channels), floored > 0


# ---------------------------------------------------------------------------
# ingest

def downmix(channels: np.ndarray) -> np.ndarray:
    """Average stereo channels to mono; mono passes through unchanged."""
    arr = np.asarray(channels, dtype=np.float64)
    if arr.ndim == 1:
        return arr
    if arr.ndim == 2:
        if arr.shape[0] == 2 and arr.shape[1] != 2:
            arr = arr.T
        if arr.shape[1] == 1:
            return arr[:, 0]
        if arr.shape[1] == 2:
            return arr.mean(axis=1)
    raise ValueError(f"expected mono or stereo, got shape {channels.shape}")


def resample_linear(samples: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return samples
    n_out = int(round(len(samples) * sr_out / sr_in))
    t_out = np.arange(n_out) * (sr_in / sr_out)
    return np.interp(t_out, np.arange(len(samples)), samples)


_PCM_SCALE = {np.dtype(np.int16): 32768.0, np.dtype(np.int32): 2147483648.0}


def load_wav(path) -> AudioBuffer:
    """Read a PCM WAV (16/32-bit int, uint8, or IEEE float; 1-2 channels).

    Output is mono float at 44.1 kHz; other rates are linearly resampled
    and flagged in the log.
    """
    sr, data = wavfile.read(path)
    if data.dtype in _PCM_SCALE:
        samples = data.astype(np.float64) / _PCM_SCALE[data.dtype]
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    samples = downmix(samples)
    if not np.all(np.isfinite(samples)):
        raise ValueError(f"non-finite samples in {path}")
    if sr != SAMPLE_RATE:
        log.warning("resampling %s from %d Hz to %d Hz (linear)", path, sr,
                    SAMPLE_RATE)
        samples = resample_linear(samples, sr, SAMPLE_RATE)
    return AudioBuffer(samples=samples, sample_rate=SAMPLE_RATE)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    wavfile.write(path, sample_rate, samples.astype(np.float32))


# ---------------------------------------------------------------------------
# STFT

def hann_window(n: int) -> np.ndarray:
    # periodic form, the STFT convention
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def num_frames(n_samples: int, stride: int = STRIDE_SAMPLES) -> int:
    return -(-n_samples // stride)


def stft_magnitude(samples: np.ndarray, window_samples: int,
                   stride: int = STRIDE_SAMPLES) -> np.ndarray:
    """Magnitude spectrogram, shape (T, window/2 + 1), T = ceil(N/stride).

    Frame k is centered on sample k*stride; edges are zero-padded so T is
    independent of the window length.
    """
    samples = np.asarray(samples, dtype=np.float64)
    t_frames = num_frames(len(samples), stride)
    if t_frames == 0:
        return np.zeros((0, window_samples // 2 + 1))
    half = window_samples // 2
    padded = np.concatenate([
        np.zeros(half),
        samples,
        np.zeros(max(0, (t_frames - 1) * stride + half - len(samples) + 1)),
    ])
    view = np.lib.stride_tricks.sliding_window_view(padded, window_samples)
    frames = view[::stride][:t_frames] * hann_window(window_samples)
    return np.abs(np.fft.rfft(frames, axis=1))


def frame_times(t_frames: int, stride: int = STRIDE_SAMPLES,
                sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return np.arange(t_frames) * (stride / sample_rate)


# ---------------------------------------------------------------------------
# Mel filterbank

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(bins: int, n_mels: int = N_MEL_BANDS, f_lo: float = MEL_F_LO,
                   f_hi: float = MEL_F_HI,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters, shape (n_mels, bins), centers uniform in mel."""
    nyquist = sample_rate / 2.0
    if not 0 <= f_lo < f_hi <= nyquist:
        raise ValueError(f"bad Mel range [{f_lo}, {f_hi}] for Nyquist {nyquist}")
    window = 2 * (bins - 1)
    bin_hz = np.arange(bins) * (sample_rate / window)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    up = (bin_hz[None, :] - lower[:, None]) / (center - lower)[:, None]
    down = (upper[:, None] - bin_hz[None, :]) / (upper - center)[:, None]
    weights = np.maximum(0.0, np.minimum(up, down))
    weights.setflags(write=False)
    return weights


def log_compress(x: np.ndarray) -> np.ndarray:
    return np.log(x + LOG_EPS)


def compute_features(samples: np.ndarray) -> np.ndarray:
    """Unnormalized log-Mel features, shape (T, 80, 3), float32.

    Channel order follows WINDOW_SIZES (shortest window first).
    """
    channels = []
    for window in WINDOW_SIZES:
        mag = stft_magnitude(samples, window)
        mel = mag @ mel_filterbank(window // 2 + 1).T
        channels.append(log_compress(mel))
    return np.stack(channels, axis=2).astype(np.float32)


# ---------------------------------------------------------------------------
# normalization

def fit_normalization(specs: list[np.ndarray]) -> NormalizationStats:
    """Per-band/channel mean and std over all frames of the training specs."""
    total = sum(s.shape[0] for s in specs)
    if total < 2:
        raise ValueError("need at least 2 training frames to fit normalization")
    shape = specs[0].shape[1:]
    acc = np.zeros(shape)
    acc2 = np.zeros(shape)
    for s in specs:
        s64 = s.astype(np.float64)
        acc += s64.sum(axis=0)
        acc2 += (s64 * s64).sum(axis=0)
    mean = acc / total
    var = np.maximum(acc2 / total - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    return NormalizationStats(mean=mean, std=std)


def apply_normalization(spec: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    out = (spec.astype(np.float64) - stats.mean) / stats.std
    return out.astype(np.float32)


def stats_digest(stats: NormalizationStats) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(stats.mean, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(stats.std, dtype=np.float64).tobytes())
    return h.hexdigest()


def stats_to_dict(stats: NormalizationStats) -> dict:
    return {"mean": stats.mean.tolist(), "std": stats.std.tolist(),
            "digest": stats_digest(stats)}


def stats_from_dict(d: dict) -> NormalizationStats:
    stats = NormalizationStats(mean=np.asarray(d["mean"], dtype=np.float64),
                               std=np.asarray(d["std"], dtype=np.float64))
    if "digest" in d and d["digest"] != stats_digest(stats):
        raise ValueError("normalization stats digest mismatch")
    return stats


def save_normalization(path, stats: NormalizationStats) -> None:
    with open(path, "w") as f:
        json.dump(stats_to_dict(stats), f)


def load_normalization(path) -> NormalizationStats:
    with open(path) as f:
        return stats_from_dict(json.load(f))


# ---------------------------------------------------------------------------
# context windows

def pad_context(spec: np.ndarray) -> np.ndarray:
    """Zero-pad 7 frames on each side; frame t sits at padded index t + 7."""
    t, bands, chans = spec.shape
    out = np.zeros((t + 2 * CONTEXT_FRAMES, bands, chans), dtype=spec.dtype)
    out[CONTEXT_FRAMES:CONTEXT_FRAMES + t] = spec
    return out


def gather_context(padded: np.ndarray, frame_indices: np.ndarray) -> np.ndarray:
    """Context tensors (B, 15, bands, chans) for frames of a padded spec."""
    idx = np.asarray(frame_indices)[:, None] + np.arange(CONTEXT_WIDTH)[None, :]
    return padded[idx]


def context_windows(spec: np.ndarray) -> np.ndarray:
    """All context tensors, shape (T, 15, bands, chans)."""
    return gather_context(pad_context(spec), np.arange(spec.shape[0]))


# ---------------------------------------------------------------------------
# feature cache

def write_feature_cache(path, spec: np.ndarray) -> None:
    """Binary cache of an unnormalized (T, bands, channels) float32 spec."""
    t, bands, chans = spec.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIIII", CACHE_MAGIC, CACHE_VERSION, t, bands, chans))
        f.write(np.ascontiguousarray(spec, dtype="<f4").tobytes())


def read_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(struct.calcsize("<4sIIII"))
        if len(header) < struct.calcsize("<4sIIII"):
            raise ValueError(f"truncated feature cache {path}")
        magic, version, t, bands, chans = struct.unpack("<4sIIII", header)
        if magic != CACHE_MAGIC:
            raise ValueError(f"not a feature cache: {path}")
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported feature cache version {version}")
        payload = f.read(4 * t * bands * chans + 1)
    if len(payload) != 4 * t * bands * chans:
        raise ValueError(f"feature cache payload size mismatch in {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, bands, chans).copy()


def feature_frame_count(n_samples: int) -> int:
    return num_frames(n_samples)


def time_to_frame(seconds: float) -> int:
    """Nearest 10 ms frame index for an event time; ties round up."""
    return int(math.floor(seconds * SAMPLE_RATE / STRIDE_SAMPLES + 0.5))
