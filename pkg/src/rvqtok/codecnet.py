"""Toy strided-convolution codec, reconstruction losses and the training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import features
from .distill import AlignLayer, LossWeights, SemanticProjection, acoustic_loss, generator_loss, semantic_loss
from .features import FFT_SIZE, HOP, SAMPLE_RATE, TeacherEmbeddings, Waveform, stft, stft_backward
from .rvq import RvqStack, init_stack, quantizer_dropout, rvq_decode, rvq_encode
from .tensorcore import ELU, AdamWState, Conv1d, ConvTranspose1d, NumericError, Sequential, adamw_step
from .vq import commitment_loss, ema_update

log = logging.getLogger(__name__)

STRIDES = (4, 4, 4, 5)
CHANNELS = (16, 32, 32, 32)
MAG_FLOOR = 1e-7


class TrainingAborted(NumericError):
    """Raised on a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message: str, checkpoint=None, step: int = -1):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------


class EncoderDecoder:
    """Strided conv encoder (total stride 320) and its mirrored decoder."""

    def __init__(self, channels=CHANNELS, strides=STRIDES, seed: int = 0, init: str = "lapped"):
        self.channels = tuple(channels)
        self.strides = tuple(strides)
        rng = np.random.default_rng([seed, 0x1E])
        enc, dec = [], []
        in_ch = 1
        for i, (c, s) in enumerate(zip(self.channels, self.strides)):
            enc.append(Conv1d(in_ch, c, 2 * s, s, rng))
            if i < len(self.channels) - 1:
                enc.append(ELU())
            in_ch = c
        outs = (1,) + self.channels[:-1]
        for i in reversed(range(len(self.channels))):
            dec.append(ConvTranspose1d(self.channels[i], outs[i], 2 * self.strides[i], self.strides[i], rng))
            if i > 0:
                dec.append(ELU())
        self.encoder = Sequential(*enc)
        self.decoder = Sequential(*dec)
        if init == "lapped":
            lapped_init(self, rng)
        elif init == "zero_bias":
            pass
        else:
            raise ValueError(f"unknown init {init!r}")

    @property
    def hop(self) -> int:
        return reduce(lambda a, b: a * b, self.strides)

    @property
    def dim(self) -> int:
        return self.channels[-1]

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder.")
        yield from self.decoder.named_parameters("decoder.")

    def named_grads(self):
        yield from self.encoder.named_grads("encoder.")
        yield from self.decoder.named_grads("decoder.")


def encode(model: EncoderDecoder, w) -> np.ndarray:
    """Waveform -> (ceil(len / hop), D) latent frames."""
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    if isinstance(w, Waveform) and w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"codec runs at {SAMPLE_RATE} Hz, got {w.sample_rate}")
    if x.size == 0:
        raise ValueError("cannot encode an empty waveform")
    return model.encoder.forward(x[None, :]).T


def decode(model: EncoderDecoder, zq, out_len: int | None = None) -> np.ndarray:
    """(T, D) latents -> T * hop samples, trimmed to ``out_len`` when given."""
    y = model.decoder.forward(np.asarray(zq, dtype=np.float64).T)[0]
    return y if out_len is None else y[:out_len]


# --------------------------------------------------------------------------
# Lapped-transform initialization
# --------------------------------------------------------------------------


def mdct_basis(m: int) -> np.ndarray:
    """(m, 2m) orthonormal MDCT analysis rows with a sine window."""
    n = np.arange(2 * m)
    k = np.arange(m)[:, None]
    win = np.sin(np.pi * (n + 0.5) / (2 * m))
    return np.sqrt(2.0 / m) * win * np.cos(np.pi / m * (n + 0.5 + m / 2) * (k + 0.5))


def _peak_frequency(analysis: list[np.ndarray], strides, channel: int) -> float:
    """Frequency where the composite analysis filter of ``channel`` peaks."""
    h = np.zeros((analysis[-1].shape[0], 9))
    h[channel, 4] = 1.0
    for w, s in zip(reversed(analysis), reversed(strides)):
        t = ConvTranspose1d(w.shape[0], w.shape[1], w.shape[2], s)
        t.params["weight"] = w
        h = t.forward(h)
    spec = np.abs(np.fft.rfft(h[0], 1 << 15))
    return float(np.fft.rfftfreq(1 << 15, 1.0 / SAMPLE_RATE)[np.argmax(spec)])


def _lapped_analysis(channels, strides) -> tuple[list[np.ndarray], list[float]]:
    """Unscaled MDCT-tree analysis weights per layer and each layer's worst-case gain."""
    n_layers = len(channels)
    in_chs = (1,) + tuple(channels[:-1])
    analysis: list[np.ndarray] = []
    src = [0]
    for li, (out_ch, in_ch, s) in enumerate(zip(channels, in_chs, strides)):
        last = li == n_layers - 1
        room = out_ch
        basis = mdct_basis(s)
        w = np.zeros((out_ch, in_ch, 2 * s))
        cand = [(c, k) for c in src for k in range(s)]
        if len(cand) > room:
            probe = []
            for c, k in cand:
                tmp = np.zeros((1, in_ch, 2 * s))
                tmp[0, c] = basis[k]
                probe.append(_peak_frequency(analysis + [tmp], strides[:li + 1], 0))
            order = np.argsort(probe, kind="stable")
            if not last:
                # keep whole parent channels so the next split stays orthogonal
                whole = []
                for i in order:
                    if cand[i][0] not in whole:
                        whole.append(cand[i][0])
                src = whole[:room // s]
                cand = [(c, k) for c in src for k in range(s)]
            else:
                cand = [cand[i] for i in order[:room]]
        for o, (c, k) in enumerate(cand):
            w[o, c] = basis[k]
        analysis.append(w)
        src = list(range(len(cand)))

    bounds = []
    for li in range(n_layers):
        worst = 0.0
        for c in np.flatnonzero(analysis[li].any(axis=(1, 2))):
            h = np.zeros((analysis[li].shape[0], 9))
            h[c, 4] = 1.0
            for w, s in zip(reversed(analysis[:li + 1]), reversed(strides[:li + 1])):
                t = ConvTranspose1d(w.shape[0], w.shape[1], w.shape[2], s)
                t.params["weight"] = w
                h = t.forward(h)
            worst = max(worst, float(np.abs(h).sum()))
        bounds.append(worst)
    return analysis, bounds


_ANALYSIS_CACHE: dict = {}


def lapped_init(model: EncoderDecoder, rng: np.random.Generator, amp: float = 1.5,
                noise: float = 1e-3) -> None:
    """Set encoder/decoder weights to a pruned tree of MDCT filterbanks.

    Each encoder layer splits the lowest-frequency channels of the previous
    layer into ``stride`` sub-bands; the last layer keeps the lowest ``D``
    sub-bands.  The decoder gets the matching synthesis filters, so up to the
    ELUs the initial codec is a low-pass projection.  Hidden activations are
    scaled so their worst case for inputs in [-1, 1] is ``amp``; at that scale
    the ELUs bend the negative half-waves a little, which gives the decoder
    some broadband content to train from.  Spare channels get small noise.
    """
    key = (model.channels, model.strides)
    if key not in _ANALYSIS_CACHE:
        _ANALYSIS_CACHE[key] = _lapped_analysis(*key)
    analysis, bounds = _ANALYSIS_CACHE[key]
    convs = [m for m in model.encoder.layers if isinstance(m, Conv1d)]
    tconvs = [m for m in model.decoder.layers if isinstance(m, ConvTranspose1d)][::-1]
    scale = [amp / b for b in bounds]
    for li, (conv, tconv) in enumerate(zip(convs, tconvs)):
        prev = scale[li - 1] if li else 1.0
        spare = ~analysis[li].any(axis=(1, 2))
        w = analysis[li] * scale[li] / prev
        w[spare] = rng.normal(0.0, noise, w[spare].shape)
        conv.params["weight"], conv.params["bias"] = w, np.zeros(w.shape[0])
        # transposed conv weights are (in, out, k): the same array read as the adjoint
        w = analysis[li] * prev / scale[li]
        w[spare] = rng.normal(0.0, noise, w[spare].shape)
        tconv.params["weight"], tconv.params["bias"] = w, np.zeros(w.shape[1])


# --------------------------------------------------------------------------
# Reconstruction losses
# --------------------------------------------------------------------------


def time_loss(x, x_hat) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch {x.shape} vs {x_hat.shape}")
    d = x_hat - x
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def freq_loss(x, x_hat, fft_size: int = FFT_SIZE, hop: int = HOP,
              floor: float = MAG_FLOOR) -> tuple[float, np.ndarray]:
    """L1 + L2 (mean absolute plus mean squared) log-magnitude STFT distance."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch {x.shape} vs {x_hat.shape}")
    ref = np.log(np.maximum(np.abs(stft(x, fft_size, hop)), floor))
    spec = stft(x_hat, fft_size, hop)
    mag = np.abs(spec)
    diff = np.log(np.maximum(mag, floor)) - ref
    n = diff.size
    loss = float(np.mean(np.abs(diff)) + np.mean(diff ** 2))
    live = mag > floor
    d_mag = np.where(live, (np.sign(diff) + 2.0 * diff) / n / np.where(live, mag, 1.0), 0.0)
    d_spec = d_mag * np.where(live, spec / np.where(live, mag, 1.0), 0.0)
    return loss, stft_backward(d_spec, len(x), fft_size, hop)


# --------------------------------------------------------------------------
# Tokenizer bundle and training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    epochs: int = 10
    steps: int = 0  # 0 -> epochs * corpus size
    seed: int = 0
    levels: int = 8
    bits: int = 10
    codebook_decay: float = 0.99
    commitment_beta: float = 0.25
    kmeans_iters: int = 10
    dead_code_steps: int = 200
    semantic_dim: int = 32
    acoustic_dim: int = 16
    align_heads: int = 8
    align_width: int = 32
    align_slots: int = 1
    semantic_axis: str = "time"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 1 <= self.levels <= 255:
            raise ValueError("levels must be in [1, 255]")


@dataclass
class Tokenizer:
    """Everything a trained model consists of."""

    model: EncoderDecoder
    stack: RvqStack
    align: AlignLayer
    semantic_proj: SemanticProjection
    config: TrainConfig

    def trainable(self):
        yield from self.model.named_parameters()
        yield from self.align.named_parameters("align.")
        yield from self.semantic_proj.named_parameters("semantic_proj.")

    def grads(self):
        yield from self.model.named_grads()
        yield from self.align.named_grads("align.")
        yield from self.semantic_proj.named_grads("semantic_proj.")


def sub_rng(seed: int, stream: str) -> np.random.Generator:
    """Named, independently seeded random stream."""
    return np.random.default_rng([seed, sum(ord(c) << (8 * i) for i, c in enumerate(stream)) & 0xFFFFFFFF])


def build_tokenizer(cfg: TrainConfig, corpus: list[Waveform], model: EncoderDecoder | None = None) -> Tokenizer:
    """Construct the network and k-means-initialize the RVQ stack on its latents."""
    model = model or EncoderDecoder(seed=cfg.seed)
    z = np.concatenate([encode(model, w) for w in corpus])
    stack = init_stack(z, cfg.levels, cfg.bits, cfg.kmeans_iters, seed=cfg.seed, decay=cfg.codebook_decay)
    for cb in stack.levels:
        cb.dead_after = cfg.dead_code_steps
    rng = sub_rng(cfg.seed, "init")
    align = AlignLayer(model.dim, cfg.acoustic_dim, cfg.align_heads, cfg.align_width, cfg.align_slots, rng)
    proj = SemanticProjection(model.dim, cfg.semantic_dim, rng)
    return Tokenizer(model, stack, align, proj, cfg)


@dataclass
class StepResult:
    total: float
    parts: dict[str, float]
    levels_used: int


def _forward_backward(tok: Tokenizer, x: np.ndarray, teacher: TeacherEmbeddings, levels_used: int) -> tuple[StepResult, object]:
    cfg = tok.config
    weights = cfg.weights
    model = tok.model
    z0 = encode(model, x)
    res = rvq_encode(tok.stack, z0, tok.stack.n_levels)
    zq = np.sum(res.quantized[:levels_used], axis=0)
    x_hat = decode(model, zq)
    y = x_hat[:len(x)]

    l_time, g_time = time_loss(x, y)
    l_freq, g_freq = freq_loss(x, y)
    l_vq, g_vq = commitment_loss(z0, zq, cfg.commitment_beta)

    zs, sem = features.align_frames(res.quantized[0], teacher.semantic)
    sem_in = tok.semantic_proj.forward(zs)
    l_sem, g_sem = semantic_loss(sem_in, sem, cfg.semantic_axis)

    z1 = res.quantized[1] if tok.stack.n_levels > 1 else res.quantized[0]
    a_out = tok.align.forward(z1, teacher.acoustic)
    l_ac, g_ac_z, g_ac_a = acoustic_loss(z1, a_out)

    total, parts = generator_loss(
        {"time": l_time, "freq": l_freq, "vq": l_vq, "semantic": l_sem, "acoustic": l_ac}, weights)

    dy = np.zeros_like(x_hat)
    dy[:len(x)] = weights.lambda_time * g_time + weights.lambda_freq * g_freq
    d_zq = model.decoder.backward(dy[None, :]).T
    # straight-through: decoder and distillation gradients land on z0 unchanged
    d_z0 = d_zq + weights.lambda_vq * g_vq
    d_sem_in = tok.semantic_proj.backward(weights.lambda_semantic * g_sem)
    d_z0[:len(d_sem_in)] += d_sem_in
    d_z1_align, _ = tok.align.backward(weights.lambda_acoustic * g_ac_a)
    d_z0 += weights.lambda_acoustic * g_ac_z + d_z1_align
    model.encoder.backward(d_z0.T)
    return StepResult(total, parts, levels_used), res


def train(tok: Tokenizer, corpus: list[Waveform], teachers: list[TeacherEmbeddings],
          cfg: TrainConfig | None = None, steps: int | None = None) -> list[dict[str, float]]:
    """Train in place; returns one loss breakdown per step.

    One step is one whole utterance.  Raises :class:`TrainingAborted` (with
    the last finite checkpoint) if any loss part goes non-finite.
    """
    cfg = cfg or tok.config
    tok.config = cfg
    if not corpus:
        raise ValueError("corpus is empty")
    if len(teachers) != len(corpus):
        raise ValueError("need one teacher set per utterance")
    steps = steps or cfg.steps or cfg.epochs * len(corpus)
    order_rng = sub_rng(cfg.seed, "order")
    drop_rng = sub_rng(cfg.seed, "dropout")
    code_rng = sub_rng(cfg.seed, "codes")
    opt = AdamWState()
    history: list[dict[str, float]] = []
    order: list[int] = []
    for step in range(steps):
        if not order:
            order = list(order_rng.permutation(len(corpus)))
        i = int(order.pop(0))
        x = corpus[i].samples
        levels_used = quantizer_dropout(tok.stack.n_levels, drop_rng)
        try:
            result, res = _forward_backward(tok, x, teachers[i], levels_used)
        except NumericError as e:
            raise TrainingAborted(str(e), checkpoint=copy.deepcopy(tok), step=step) from e
        params = dict(tok.trainable())
        grads = dict(tok.grads())
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingAborted(f"non-finite gradient at step {step}", copy.deepcopy(tok), step)
        adamw_step(params, grads, opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps)
        for level, cb in enumerate(tok.stack.levels):
            ema_update(cb, res.residuals[level], res.tokens.indices[:, level], cfg.codebook_decay, code_rng)
        row = dict(result.parts)
        row.update(step=step, utterance=i, levels_used=levels_used)
        history.append(row)
        if step % 50 == 0:
            log.info("step %d total %.4f", step, result.total)
    return history


def epoch_summary(history: list[dict[str, float]], steps_per_epoch: int) -> list[dict[str, float]]:
    keys = [k for k in history[0] if k not in ("step", "utterance", "levels_used")] if history else []
    out = []
    for e in range(0, len(history), steps_per_epoch):
        chunk = history[e:e + steps_per_epoch]
        out.append({k: float(np.mean([r[k] for r in chunk])) for k in keys})
    return out


def reconstruct(tok: Tokenizer, w, levels: int | None = None) -> np.ndarray:
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    res = rvq_encode(tok.stack, encode(tok.model, x), levels)
    return decode(tok.model, rvq_decode(tok.stack, res.tokens), len(x))


def snr_db(x, y) -> float:
    x = np.asarray(x)
    err = np.sum((x - np.asarray(y)) ** 2)
    return 99.0 if err == 0 else min(99.0, 10 * math.log10(np.sum(x ** 2) / err))
