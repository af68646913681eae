"""Residual vector quantization stack and the RVQB token bitstream."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .features import HOP, SAMPLE_RATE, FormatError
from .tensorcore import DimensionError
from .vq import Codebook, assign, dequantize, kmeans_init

RVQB_MAGIC = b"RVQB"
RVQB_VERSION = 1
_HEADER = struct.Struct("<4sBIIBBI")


@dataclass
class RvqStack:
    levels: list[Codebook]

    def __post_init__(self):
        if not 1 <= len(self.levels) <= 255:
            raise ValueError("an RVQ stack has between 1 and 255 levels")
        shapes = {cb.entries.shape for cb in self.levels}
        if len(shapes) != 1:
            raise ValueError(f"all levels must share size and dim, got {sorted(shapes)}")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].dim

    @property
    def bits(self) -> int:
        return self.levels[0].bits

    @classmethod
    def zeros(cls, n_levels: int, bits: int, dim: int, decay: float = 0.99) -> "RvqStack":
        return cls([Codebook.zeros(bits, dim, decay=decay) for _ in range(n_levels)])

    @classmethod
    def random(cls, n_levels: int, bits: int, dim: int, rng: np.random.Generator,
               decay: float = 0.99) -> "RvqStack":
        # deeper levels get smaller entries, as residual energy shrinks
        return cls([Codebook(rng.normal(0.0, 0.5 ** i, (1 << bits, dim)), decay=decay)
                    for i in range(n_levels)])


@dataclass
class TokenStream:
    indices: np.ndarray  # (frames, levels_used)
    bits: int
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ValueError("indices must be (frames, levels)")

    @property
    def frames(self) -> int:
        return self.indices.shape[0]

    @property
    def levels_used(self) -> int:
        return self.indices.shape[1]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def tokens_per_second(self) -> float:
        return self.frame_rate * self.levels_used

    @property
    def bandwidth_bps(self) -> float:
        return self.frame_rate * self.levels_used * self.bits

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenStream):
            return NotImplemented
        return (self.bits, self.sample_rate, self.hop) == (other.bits, other.sample_rate, other.hop) \
            and np.array_equal(self.indices, other.indices)


@dataclass
class RvqResult:
    tokens: TokenStream
    quantized: list[np.ndarray]  # per-level ẑ_i
    quantized_sum: np.ndarray
    residual: np.ndarray  # z_L
    residuals: list[np.ndarray] = field(default_factory=list)  # z_0 .. z_{L-1}


def bandwidth_bps(frame_rate: float, levels: int, bits: int) -> float:
    return frame_rate * levels * bits


def rvq_encode(stack: RvqStack, z0, levels_used: int | None = None,
               sample_rate: int = SAMPLE_RATE, hop: int = HOP) -> RvqResult:
    z0 = np.asarray(z0, dtype=np.float64)
    levels_used = stack.n_levels if levels_used is None else levels_used
    if not 1 <= levels_used <= stack.n_levels:
        raise ValueError(f"levels_used must be in [1, {stack.n_levels}], got {levels_used}")
    if z0.ndim != 2 or z0.shape[1] != stack.dim:
        raise DimensionError(f"features {z0.shape} vs stack dim {stack.dim}")
    residual = z0
    cols, quantized, residuals = [], [], []
    total = np.zeros_like(z0)
    for cb in stack.levels[:levels_used]:
        residuals.append(residual)
        idx = assign(cb, residual)
        q = dequantize(cb, idx)
        cols.append(idx)
        quantized.append(q)
        total = total + q
        residual = residual - q
    indices = np.stack(cols, axis=1) if z0.shape[0] else np.zeros((0, levels_used), np.int64)
    tokens = TokenStream(indices, stack.bits, sample_rate, hop)
    return RvqResult(tokens, quantized, total, residual, residuals)


def rvq_decode(stack: RvqStack, tokens: TokenStream) -> np.ndarray:
    if tokens.levels_used > stack.n_levels:
        raise ValueError(f"stream uses {tokens.levels_used} levels, stack has {stack.n_levels}")
    out = np.zeros((tokens.frames, stack.dim))
    for level in range(tokens.levels_used):
        out += dequantize(stack.levels[level], tokens.indices[:, level])
    return out


def quantizer_dropout(levels_total: int, rng: np.random.Generator) -> int:
    if levels_total < 1:
        raise ValueError("levels_total must be >= 1")
    return int(rng.integers(1, levels_total + 1))


def init_stack(z0, n_levels: int, bits: int, iters: int = 10, seed: int = 0,
               decay: float = 0.99) -> RvqStack:
    """k-means each level on the residual left by the already-initialized levels."""
    residual = np.asarray(z0, dtype=np.float64)
    levels = []
    for level in range(n_levels):
        cb = kmeans_init(residual, 1 << bits, iters, seed=seed + level, decay=decay)
        residual = residual - dequantize(cb, assign(cb, residual))
        levels.append(cb)
    return RvqStack(levels)


# --------------------------------------------------------------------------
# RVQB bitstream
# --------------------------------------------------------------------------


def payload_bits(tokens: TokenStream) -> int:
    return tokens.frames * tokens.levels_used * tokens.bits


def pack_bitstream(tokens: TokenStream) -> bytes:
    """Header plus MSB-first payload, frame-major then level-major."""
    bits = tokens.bits
    if not 1 <= bits <= 32:
        raise FormatError(f"bits per index must be in [1, 32], got {bits}")
    if not 1 <= tokens.levels_used <= 255:
        raise FormatError(f"levels_used must be in [1, 255], got {tokens.levels_used}")
    flat = tokens.indices.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= (1 << bits)):
        raise FormatError(f"index outside [0, 2^{bits})")
    head = _HEADER.pack(RVQB_MAGIC, RVQB_VERSION, tokens.sample_rate, tokens.hop,
                        tokens.levels_used, bits, tokens.frames)
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint64)
    bitmat = (flat.astype(np.uint64)[:, None] >> shifts[None, :]) & np.uint64(1)
    return head + np.packbits(bitmat.astype(np.uint8).reshape(-1)).tobytes()


def unpack_bitstream(buf: bytes) -> TokenStream:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes at offset 0")
    magic, version, sr, hop, levels, bits, frames = _HEADER.unpack_from(buf)
    if magic != RVQB_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != RVQB_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if levels < 1 or not 1 <= bits <= 32:
        raise FormatError(f"invalid levels={levels} bits={bits} at offset 13")
    n_bits = frames * levels * bits
    payload = buf[_HEADER.size:]
    if len(payload) != -(-n_bits // 8):
        raise FormatError(f"declared {frames} frames need {-(-n_bits // 8)} payload bytes, "
                          f"found {len(payload)} at offset {_HEADER.size}")
    allbits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if allbits[n_bits:].any():
        raise FormatError("non-zero padding bits after payload")
    bitmat = allbits[:n_bits].reshape(-1, bits).astype(np.uint64)
    weights = np.uint64(1) << np.arange(bits - 1, -1, -1, dtype=np.uint64)
    flat = (bitmat * weights[None, :]).sum(axis=1) if bits else np.zeros(0)
    return TokenStream(flat.astype(np.int64).reshape(frames, levels), bits, sr, hop)
