"""Single-level vector quantizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensorcore import DimensionError

LAPLACE_EPS = 1e-5
DEAD_CODE_STEPS = 200
_CHUNK_ELEMS = 1 << 22


@dataclass
class Codebook:
    """K x D table of code vectors with the EMA statistics that train it."""

    entries: np.ndarray
    ema_counts: np.ndarray = None
    ema_sums: np.ndarray = None
    decay: float = 0.99
    idle_steps: np.ndarray = None
    dead_after: int = DEAD_CODE_STEPS

    def __post_init__(self):
        self.entries = np.array(self.entries, dtype=np.float64)
        k = self.entries.shape[0]
        if k < 1 or k & (k - 1):
            raise ValueError(f"codebook size must be a power of two, got {k}")
        if self.ema_counts is None:
            self.ema_counts = np.ones(k)
        if self.ema_sums is None:
            self.ema_sums = self.entries * self.ema_counts[:, None]
        if self.idle_steps is None:
            self.idle_steps = np.zeros(k, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def bits(self) -> int:
        return self.size.bit_length() - 1

    @classmethod
    def zeros(cls, bits: int, dim: int, **kw) -> "Codebook":
        return cls(np.zeros((1 << bits, dim)), **kw)

    def copy(self) -> "Codebook":
        return Codebook(self.entries.copy(), self.ema_counts.copy(), self.ema_sums.copy(),
                        self.decay, self.idle_steps.copy(), self.dead_after)


def squared_distances(frames: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Exact (T, K) squared Euclidean distances, evaluated in row chunks."""
    t, d = frames.shape
    k = entries.shape[0]
    out = np.empty((t, k))
    step = max(1, _CHUNK_ELEMS // max(1, k * d))
    for i in range(0, t, step):
        diff = frames[i:i + step, None, :] - entries[None, :, :]
        out[i:i + step] = np.einsum("tkd,tkd->tk", diff, diff)
    return out


def _fast_distances(data: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Expanded-form distances via one matrix product; may differ from exact in the last bits."""
    d2 = (data * data).sum(axis=1)[:, None] - 2.0 * data @ centers.T + (centers * centers).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def assign(cb: Codebook, frames) -> np.ndarray:
    """Nearest entry per frame; ties resolve to the lowest index."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cb.dim:
        raise DimensionError(f"frames of shape {frames.shape} vs codebook dim {cb.dim}")
    if frames.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    entries = cb.entries
    fast = _fast_distances(frames, entries)
    best = fast.min(axis=1)
    # rounding bound of the expanded form; anything inside it is re-checked exactly
    scale = (frames * frames).sum(axis=1) + (entries * entries).sum(axis=1).max()
    tol = 64 * np.finfo(np.float64).eps * scale + 1e-300
    near = fast <= (best + tol)[:, None]
    out = np.argmax(near, axis=1)
    for row in np.flatnonzero(near.sum(axis=1) > 1):
        cand = np.flatnonzero(near[row])
        diff = entries[cand] - frames[row]
        out[row] = cand[np.argmin(np.einsum("kd,kd->k", diff, diff))]
    return out.astype(np.int64)


def dequantize(cb: Codebook, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= cb.size):
        raise IndexError(f"token index out of range [0, {cb.size})")
    return cb.entries[idx]


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------


def _kmeans_pp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        j = rng.choice(n, p=d2 / total) if total > 0 else int(rng.integers(n))
        centers[i] = data[j]
        np.minimum(d2, np.sum((data - centers[i]) ** 2, axis=1), out=d2)
    return centers


def kmeans(data, k: int, iters: int = 10, seed: int = 0) -> tuple[np.ndarray, list[float]]:
    """k-means++ seeding plus Lloyd iterations.

    Returns the centroids and the mean distortion measured after seeding and
    after every iteration.  An empty cluster takes over the point farthest
    from its current centroid.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError("k-means data must be (N, D)")
    if data.shape[0] < k:
        raise ValueError(f"need at least {k} frames for {k} centroids, got {data.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(data, k, rng)
    labels = np.argmin(_fast_distances(data, centers), axis=1)
    best = np.sum((data - centers[labels]) ** 2, axis=1)
    history = [float(best.mean())]
    for _ in range(iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, data)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        best = np.sum((data - centers[labels]) ** 2, axis=1)
        for c in np.flatnonzero(~nonempty):
            far = int(np.argmax(best))
            centers[c] = data[far]
            labels[far] = c
            best[far] = 0.0
        labels = np.argmin(_fast_distances(data, centers), axis=1)
        best = np.sum((data - centers[labels]) ** 2, axis=1)
        history.append(float(best.mean()))
    return centers, history


def kmeans_init(data, k: int, iters: int = 10, seed: int = 0, decay: float = 0.99) -> Codebook:
    centers, _ = kmeans(data, k, iters, seed)
    return Codebook(centers, decay=decay)


# --------------------------------------------------------------------------
# EMA training
# --------------------------------------------------------------------------


def ema_update(cb: Codebook, frames, indices, decay: float | None = None,
               rng: np.random.Generator | None = None) -> Codebook:
    """Exponential-moving-average re-estimation of the entries, in place.

    Entries that go ``cb.dead_after`` consecutive updates without an
    assignment are re-seeded to a random frame of the current batch when
    ``rng`` is given.
    """
    decay = cb.decay if decay is None else decay
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must lie in (0, 1)")
    frames = np.asarray(frames, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    counts = np.bincount(indices, minlength=cb.size).astype(np.float64)
    sums = np.zeros_like(cb.entries)
    np.add.at(sums, indices, frames)
    cb.ema_counts *= decay
    cb.ema_counts += (1.0 - decay) * counts
    cb.ema_sums *= decay
    cb.ema_sums += (1.0 - decay) * sums
    cb.entries = cb.ema_sums / np.maximum(cb.ema_counts, LAPLACE_EPS)[:, None]

    used = counts > 0
    cb.idle_steps[used] = 0
    cb.idle_steps[~used] += 1
    if rng is not None and len(frames):
        for c in np.flatnonzero(cb.idle_steps >= cb.dead_after):
            cb.entries[c] = frames[rng.integers(len(frames))]
            cb.ema_counts[c] = 1.0
            cb.ema_sums[c] = cb.entries[c]
            cb.idle_steps[c] = 0
    return cb


def commitment_loss(frames, quantized, beta: float = 0.25) -> tuple[float, np.ndarray]:
    """beta * mean((frames - sg(quantized))**2) and its gradient w.r.t. frames."""
    frames = np.asarray(frames, dtype=np.float64)
    quantized = np.asarray(quantized, dtype=np.float64)
    if frames.shape != quantized.shape:
        raise DimensionError(f"{frames.shape} vs {quantized.shape}")
    if frames.size == 0:
        return 0.0, np.zeros_like(frames)
    diff = frames - quantized
    return float(beta * np.mean(diff ** 2)), 2.0 * beta * diff / diff.size
