"""Waveform and tensor I/O, STFT front end, synthetic corpus and teachers."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

SAMPLE_RATE = 16000
HOP = 320
FFT_SIZE = 1024
N_MELS = 64


class FormatError(ValueError):
    """A file does not follow its binary layout."""


@dataclass(frozen=True)
class Waveform:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).reshape(-1))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size and not np.max(np.abs(self.samples)) <= 1.0 + 1e-6:
            raise ValueError("samples must be finite and within [-1, 1]")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FeatureFrames:
    data: np.ndarray
    frame_rate: float = SAMPLE_RATE / HOP

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TeacherEmbeddings:
    semantic: np.ndarray  # (T, P)
    acoustic: np.ndarray  # (A,)


def frame_count(n_samples: int, hop: int = HOP) -> int:
    return -(-n_samples // hop)


def align_frames(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Truncate two frame-major arrays to their common length."""
    n = min(a.shape[0], b.shape[0])
    return a[:n], b[:n]


# --------------------------------------------------------------------------
# FTZ1 tensors
# --------------------------------------------------------------------------

_FTZ_MAGIC = b"FTZ1"


def encode_tensor(m) -> bytes:
    a = np.asarray(m)
    if a.ndim > 255:
        raise FormatError("rank exceeds 255")
    if any(d > 0xFFFFFFFF for d in a.shape):
        raise FormatError("dimension exceeds u32")
    head = _FTZ_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 5:
        raise FormatError(f"truncated header at offset {len(buf)}")
    if buf[:4] != _FTZ_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at offset 0")
    rank = buf[4]
    head = 5 + 4 * rank
    if len(buf) < head:
        raise FormatError(f"truncated dims at offset {len(buf)}")
    dims = struct.unpack(f"<{rank}I", buf[5:head])
    count = 1
    for d in dims:
        count *= d
    expected = head + 4 * count
    if expected > (1 << 40):
        raise FormatError(f"dimension overflow at offset 5: {dims}")
    if len(buf) != expected:
        raise FormatError(f"payload length mismatch at offset {head}: "
                          f"expected {expected - head} bytes, found {len(buf) - head}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=head)
    return data.astype(np.float64).reshape(dims)


def save_tensor(path, m) -> None:
    Path(path).write_bytes(encode_tensor(m))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            if f.getcomptype() != "NONE":
                raise FormatError(f"{path}: compressed WAV not supported")
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise FormatError(f"{path}: {e}") from e
    if channels != 1 or width != 2 or rate != SAMPLE_RATE:
        raise FormatError(f"{path}: need 16-bit mono {SAMPLE_RATE} Hz PCM, got "
                          f"{channels} ch / {8 * width} bit / {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(rate, pcm / 32768.0)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# STFT
# --------------------------------------------------------------------------


def _reflect_index(n: int, pad: int, total: int) -> np.ndarray:
    j = np.arange(total) - pad
    if n == 1:
        return np.zeros(total, dtype=np.int64)
    period = 2 * (n - 1)
    j = np.mod(j, period)
    return np.where(j < n, j, period - j)


def stft_index(n_samples: int, fft_size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """Sample index for each (frame, tap); -1 marks zero padding.

    Centered framing with reflect padding of ``fft_size // 2``; a signal
    shorter than one window becomes a single zero-padded frame.
    """
    if fft_size & (fft_size - 1) or fft_size <= 0:
        raise ValueError("fft_size must be a power of two")
    if not 0 < hop <= fft_size:
        raise ValueError("hop must be in (0, fft_size]")
    if n_samples < fft_size:
        idx = -np.ones((1, fft_size), dtype=np.int64)
        idx[0, :n_samples] = np.arange(n_samples)
        return idx
    pad = fft_size // 2
    frames = 1 + n_samples // hop
    src = _reflect_index(n_samples, pad, (frames - 1) * hop + fft_size)
    starts = np.arange(frames)[:, None] * hop
    return src[starts + np.arange(fft_size)[None, :]]


def hann(fft_size: int) -> np.ndarray:
    return get_window("hann", fft_size, fftbins=True)


def stft(x, fft_size: int = FFT_SIZE, hop: int = HOP, window: np.ndarray | None = None) -> np.ndarray:
    """Complex spectrogram of shape (frames, fft_size // 2 + 1)."""
    x = np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)
    window = hann(fft_size) if window is None else window
    idx = stft_index(len(x), fft_size, hop)
    frames = np.where(idx >= 0, x[np.maximum(idx, 0)] if len(x) else 0.0, 0.0)
    return np.fft.rfft(frames * window, axis=1)


def stft_backward(grad: np.ndarray, n_samples: int, fft_size: int = FFT_SIZE, hop: int = HOP,
                  window: np.ndarray | None = None) -> np.ndarray:
    """Adjoint of :func:`stft` for a real loss.

    ``grad`` holds dL/dRe + i dL/dIm per bin; returns dL/dx.
    """
    window = hann(fft_size) if window is None else window
    y = grad.astype(np.complex128).copy()
    y[:, 1:fft_size // 2] *= 0.5
    dframes = np.fft.irfft(y, n=fft_size, axis=1) * fft_size * window
    idx = stft_index(n_samples, fft_size, hop)
    dx = np.zeros(n_samples)
    keep = idx >= 0
    np.add.at(dx, idx[keep], dframes[keep])
    return dx


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, fft_size: int = FFT_SIZE, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, fft_size // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel(x, n_mels: int = N_MELS, fft_size: int = FFT_SIZE, hop: int = HOP,
            floor: float = 1e-10) -> np.ndarray:
    """Natural-log mel power frames, shape (frames, n_mels)."""
    spec = np.abs(stft(x, fft_size, hop)) ** 2
    return np.log(spec @ mel_filterbank(n_mels, fft_size).T + floor)


# --------------------------------------------------------------------------
# F0 tracking
# --------------------------------------------------------------------------

F0_FRAME = 400  # 25 ms
F0_HOP = 160


def track_f0(x, sample_rate: int = SAMPLE_RATE, frame: int = F0_FRAME, hop: int = F0_HOP,
             fmin: float = 60.0, fmax: float = 400.0, threshold: float = 0.5) -> np.ndarray:
    """Per-frame F0 in Hz from the normalized autocorrelation peak; NaN when unvoiced."""
    x = np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)
    lag_min = int(np.floor(sample_rate / fmax))
    lag_max = min(int(np.ceil(sample_rate / fmin)), frame - 1)
    if len(x) < frame:
        return np.full(0, np.nan)
    n_frames = 1 + (len(x) - frame) // hop
    frames = sliding_window_view(x, frame)[::hop][:n_frames]
    frames = frames - frames.mean(axis=1, keepdims=True)
    f0 = np.full(n_frames, np.nan)
    lags = np.arange(lag_min - 1, lag_max + 2)
    for i, seg in enumerate(frames):
        e = seg * seg
        if e.sum() < 1e-10:
            continue
        cum = np.concatenate([[0.0], np.cumsum(e)])
        r = np.empty(lags.size)
        for j, lag in enumerate(lags):
            a, b = seg[:frame - lag], seg[lag:]
            den = np.sqrt(cum[frame - lag] * (cum[frame] - cum[lag]))
            r[j] = a @ b / den if den > 0 else 0.0
        inner = r[1:-1]
        peak = inner.max()
        if peak < threshold:
            continue
        # shortest lag whose local peak is close to the global one avoids octave errors
        is_peak = (inner >= r[:-2]) & (inner >= r[2:]) & (inner >= 0.9 * peak)
        hits = np.flatnonzero(is_peak)
        j = int(hits[0] if hits.size else np.argmax(inner)) + 1
        lm, l0, lp = r[j - 1], r[j], r[j + 1]
        den = lm - 2 * l0 + lp
        shift = 0.5 * (lm - lp) / den if den < 0 else 0.0
        f0[i] = sample_rate / (lags[j] + np.clip(shift, -0.5, 0.5))
    return f0


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------


def synth_utterance(rng: np.random.Generator, n_samples: int, sample_rate: int = SAMPLE_RATE,
                    f0_range: tuple[float, float] = (80.0, 300.0),
                    f0_contour: np.ndarray | None = None,
                    n_partials: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One harmonic utterance; returns (samples, per-sample F0 in Hz).

    ``f0_contour`` overrides the random contour; it is resampled to the
    utterance length.
    """
    t = np.arange(n_samples) / sample_rate
    lo, hi = f0_range
    if f0_contour is None:
        base = rng.uniform(lo, hi)
        depth = rng.uniform(0.03, 0.12)
        rate = rng.uniform(0.8, 3.0)
        f0 = np.clip(base * (1.0 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))), lo, hi)
    else:
        c = np.asarray(f0_contour, dtype=np.float64)
        f0 = np.interp(np.linspace(0, len(c) - 1, n_samples), np.arange(len(c)), c)
    partials = int(rng.integers(2, 5)) if n_partials is None else n_partials
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    tone = np.zeros(n_samples)
    for k in range(1, partials + 1):
        tone += rng.uniform(0.5, 1.0) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    # syllable-like envelope: slow modulation under a raised-cosine fade
    syll = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    fade = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.02) if n_samples > 1 else np.ones(1)
    tone *= syll * (0.5 - 0.5 * np.cos(np.pi * np.clip(fade, 0, 1)))
    rms = np.sqrt(np.mean(tone ** 2)) or 1.0
    noise = rng.normal(0.0, rms * 10 ** (-30 / 20), n_samples)
    y = tone + noise
    y *= rng.uniform(0.3, 0.9) / max(np.abs(y).max(), 1e-12)
    return y, f0


def synth_corpus(seed: int, n_utts: int, dur_range: tuple[float, float] = (1.0, 2.0),
                 sample_rate: int = SAMPLE_RATE) -> list[Waveform]:
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    rng = np.random.default_rng([seed, 0xC0])
    out = []
    for _ in range(n_utts):
        n = int(round(rng.uniform(*dur_range) * sample_rate))
        samples, _ = synth_utterance(rng, max(n, 1), sample_rate)
        out.append(Waveform(sample_rate, samples))
    return out


# --------------------------------------------------------------------------
# Synthetic teachers
# --------------------------------------------------------------------------

_F0_STATS = 3


def _teacher_projections(seed: int, sem_dim: int, ac_dim: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 0x7E])
    sem = rng.normal(0.0, 1.0 / np.sqrt(N_MELS), (N_MELS, sem_dim))
    ac = rng.normal(0.0, 1.0 / np.sqrt(N_MELS + _F0_STATS), (N_MELS + _F0_STATS, ac_dim))
    return sem, ac


def f0_statistics(x) -> np.ndarray:
    """(mean log2 F0 re 150 Hz, std of log2 F0, voiced fraction)."""
    f0 = track_f0(x)
    voiced = f0[np.isfinite(f0)]
    if voiced.size == 0:
        return np.zeros(_F0_STATS)
    lf = np.log2(voiced / 150.0)
    return np.array([lf.mean(), lf.std(), voiced.size / f0.size])


def synth_teachers(w: Waveform, sem_dim: int, ac_dim: int, seed: int) -> TeacherEmbeddings:
    """Stand-in teacher features derived from a fixed random projection of log-mel frames.

    Semantic frames follow the log-mel sequence frame by frame; the acoustic
    vector summarizes spectral shape and F0 over the whole utterance.
    """
    if sem_dim < 2 or ac_dim < 2:
        raise ValueError("teacher dimensions must be >= 2")
    sem_proj, ac_proj = _teacher_projections(seed, sem_dim, ac_dim)
    lm = log_mel(w)
    # drop the per-frame level so the features describe spectral shape
    shape = lm - lm.mean(axis=1, keepdims=True)
    semantic = shape @ sem_proj
    mean_shape = shape.mean(axis=0)
    stats = f0_statistics(w) * np.array([8.0, 8.0, 2.0])
    acoustic = np.concatenate([mean_shape, stats]) @ ac_proj
    if not np.linalg.norm(acoustic) > 0:
        acoustic = acoustic + 1e-6
    return TeacherEmbeddings(semantic, acoustic)
