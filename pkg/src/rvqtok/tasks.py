"""Voice conversion by token swap, token export and objective metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.fft import dct

from .codecnet import Tokenizer, decode, encode
from .features import FFT_SIZE, HOP, SAMPLE_RATE, Waveform, log_mel, stft, track_f0
from .rvq import TokenStream, pack_bitstream, rvq_decode, rvq_encode

SNR_CAP_DB = 99.0
LSD_FLOOR = 1e-7
MCD_COEFFS = 13
MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)
MIN_PITCH_FRAMES = 10


def _samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        if w.sample_rate != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate}")
        return w.samples
    return np.asarray(w, dtype=np.float64)


# --------------------------------------------------------------------------
# Tokenization helpers
# --------------------------------------------------------------------------


def tokenize(tok: Tokenizer, w, levels: int | None = None) -> TokenStream:
    return rvq_encode(tok.stack, encode(tok.model, _samples(w)), levels).tokens


def detokenize(tok: Tokenizer, tokens: TokenStream, out_len: int | None = None) -> np.ndarray:
    return decode(tok.model, rvq_decode(tok.stack, tokens), out_len)


# --------------------------------------------------------------------------
# Voice conversion
# --------------------------------------------------------------------------


@dataclass
class ConversionRequest:
    source: Waveform
    target: Waveform
    levels: int = 8

    def __post_init__(self):
        for name in ("source", "target"):
            w = getattr(self, name)
            if not isinstance(w, Waveform):
                raise TypeError(f"{name} must be a Waveform")
            if w.sample_rate != SAMPLE_RATE:
                raise ValueError(f"{name} must be {SAMPLE_RATE} Hz mono, got {w.sample_rate} Hz")


def fit_length(column: np.ndarray, frames: int) -> tuple[np.ndarray, str]:
    """Truncate or tile a token column to ``frames``; returns it with the rule applied."""
    if len(column) == 0:
        raise ValueError("target has no frames")
    if len(column) >= frames:
        return column[:frames], "truncate" if len(column) > frames else "exact"
    return np.resize(column, frames), "tile"


def convert_tokens(tok: Tokenizer, source, target, levels: int = 8) -> tuple[TokenStream, str]:
    """Source tokens with level 1 replaced by the target's level-1 sequence."""
    levels = min(levels, tok.stack.n_levels)
    if levels < 2:
        raise ValueError("conversion needs at least 2 levels")
    tgt = _samples(target)
    if len(tgt) == 0:
        raise ValueError("target shorter than one frame")
    src_tokens = tokenize(tok, source, levels)
    tgt_tokens = tokenize(tok, tgt, 2)
    swapped = src_tokens.indices.copy()
    swapped[:, 1], rule = fit_length(tgt_tokens.indices[:, 1], src_tokens.frames)
    stream = TokenStream(swapped, src_tokens.bits, src_tokens.sample_rate, src_tokens.hop)
    return stream, rule


def voice_convert(tok: Tokenizer, req: ConversionRequest) -> Waveform:
    """Decode source tokens with the target's level-1 tokens, clamped to [-1, 1]."""
    stream, _ = convert_tokens(tok, req.source, req.target, req.levels)
    return Waveform(SAMPLE_RATE, np.clip(detokenize(tok, stream, len(req.source)), -1.0, 1.0))


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = _samples(x), _samples(y)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.shape} vs {y.shape}")
    return x, y


def snr(x, x_hat) -> float:
    """Signal-to-noise ratio in dB, capped at 99 for an exact match."""
    x, x_hat = _pair(x, x_hat)
    ref = float(np.sum(x * x))
    if ref == 0.0:
        raise ValueError("reference has zero energy")
    err = float(np.sum((x - x_hat) ** 2))
    if err == 0.0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(ref / err))


def lsd(x, x_hat, fft_size: int = FFT_SIZE, hop: int = HOP) -> float:
    """Mean over frames of the RMS log-magnitude difference in dB."""
    x, x_hat = _pair(x, x_hat)
    if not np.any(x):
        raise ValueError("reference has zero energy")
    a = 20.0 * np.log10(np.maximum(np.abs(stft(x, fft_size, hop)), LSD_FLOOR))
    b = 20.0 * np.log10(np.maximum(np.abs(stft(x_hat, fft_size, hop)), LSD_FLOOR))
    return float(np.mean(np.sqrt(np.mean((a - b) ** 2, axis=1))))


def mel_cepstrum(x, n_coeffs: int = MCD_COEFFS) -> np.ndarray:
    """(frames, n_coeffs) coefficients c1..cN of the log-amplitude mel spectrum."""
    log_amp = 0.5 * log_mel(_samples(x))
    return dct(log_amp, type=2, norm="ortho", axis=1)[:, 1:n_coeffs + 1]


def mcd(x, x_hat) -> float:
    """Mel-cepstral distortion over index-paired frames."""
    a, b = mel_cepstrum(x), mel_cepstrum(x_hat)
    n = min(len(a), len(b))
    if n < 2:
        raise ValueError(f"MCD needs at least 2 frames, got {n}")
    d = a[:n] - b[:n]
    return float(MCD_SCALE * np.mean(np.sqrt(np.sum(d * d, axis=1))))


def pitch_correlation(x, x_hat) -> float | None:
    """Pearson correlation of F0 over frames voiced in both; None if fewer than 10."""
    fa, fb = track_f0(_samples(x)), track_f0(_samples(x_hat))
    n = min(len(fa), len(fb))
    fa, fb = fa[:n], fb[:n]
    both = np.isfinite(fa) & np.isfinite(fb)
    if both.sum() < MIN_PITCH_FRAMES:
        return None
    a, b = fa[both] - fa[both].mean(), fb[both] - fb[both].mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        return None
    return float(np.clip((a @ b) / den, -1.0, 1.0))


METRICS = ("snr", "lsd", "mcd", "pitch")


@dataclass
class MetricReport:
    snr_db: float | None = None
    lsd_db: float | None = None
    mcd: float | None = None
    pitch_correlation: float | None = None
    frames_compared: int = 0

    def to_keyvalue(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k}={'absent' if v is None else _fmt(v)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True) + "\n"


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def evaluate(x, x_hat, metrics: Sequence[str] = METRICS) -> MetricReport:
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {', '.join(sorted(unknown))}")
    x, x_hat = _pair(x, x_hat)
    report = MetricReport(frames_compared=-(-len(x) // HOP))
    if "snr" in metrics:
        report.snr_db = snr(x, x_hat)
    if "lsd" in metrics:
        report.lsd_db = lsd(x, x_hat)
    if "mcd" in metrics:
        report.mcd = mcd(x, x_hat)
    if "pitch" in metrics:
        report.pitch_correlation = pitch_correlation(x, x_hat)
    return report


# --------------------------------------------------------------------------
# Token export
# --------------------------------------------------------------------------


def select_levels(tokens: TokenStream, levels: Sequence[int] | None) -> TokenStream:
    if levels is None:
        return tokens
    levels = list(levels)
    if not levels or min(levels) < 0 or max(levels) >= tokens.levels_used:
        raise ValueError(f"level filter {levels} outside 0..{tokens.levels_used - 1}")
    return TokenStream(tokens.indices[:, levels], tokens.bits, tokens.sample_rate, tokens.hop)


def export_tokens(tokens: TokenStream, fmt: str, levels: Sequence[int] | None = None) -> bytes:
    """Serialize as ``rvqb`` (packed bitstream) or ``txt`` (one frame per line)."""
    tokens = select_levels(tokens, levels)
    if fmt == "rvqb":
        return pack_bitstream(tokens)
    if fmt == "txt":
        return "".join(" ".join(str(int(i)) for i in row) + "\n" for row in tokens.indices).encode("ascii")
    raise ValueError(f"unknown token format {fmt!r}")


def read_txt_tokens(data: bytes | str, bits: int = 10) -> TokenStream:
    text = data.decode("ascii") if isinstance(data, bytes) else data
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows:
        return TokenStream(np.zeros((0, 1), np.int64), bits)
    if len({len(r) for r in rows}) != 1:
        raise ValueError("txt token rows have differing level counts")
    indices = np.array([[int(v) for v in r] for r in rows], dtype=np.int64)
    if indices.min() < 0 or indices.max() >= (1 << bits):
        raise ValueError(f"token index outside [0, 2^{bits})")
    return TokenStream(indices, bits)
