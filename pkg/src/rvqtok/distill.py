"""Teacher distillation losses for the first two RVQ levels."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from .tensorcore import (DimensionError, Linear, Module, NumericError, softmax_rows,
                         softmax_rows_backward)

PROB_FLOOR = 1e-12
_NORM_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_semantic: float = 0.5
    lambda_acoustic: float = 0.5
    lambda_time: float = 1.0
    lambda_freq: float = 1.0
    lambda_vq: float = 1.0
    # adversarial terms are not trained here; kept so configs can state them
    lambda_feature: float = 0.0
    lambda_adversarial: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        for name in ("lambda_feature", "lambda_adversarial"):
            if getattr(self, name) != 0:
                raise ValueError(f"{name} must be 0: discriminator training is not supported")


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def semantic_loss(z0_q, teacher, axis: str = "time") -> tuple[float, np.ndarray]:
    """-(1/P) sum_d log sigmoid(cos_d) and its gradient w.r.t. ``z0_q``.

    With ``axis="time"`` cosine similarity is taken along time for each
    feature channel; ``axis="frame"`` compares whole frames instead and
    averages over frames.  A zero-norm slice counts as cos = 0.
    """
    z = np.asarray(z0_q, dtype=np.float64)
    s = np.asarray(teacher, dtype=np.float64)
    if z.shape != s.shape:
        raise DimensionError(f"student {z.shape} vs teacher {s.shape}")
    if axis == "frame":
        loss, g = semantic_loss(z.T, s.T, "time")
        return loss, g.T
    if axis != "time":
        raise ValueError(f"unknown semantic axis {axis!r}")
    p = z.shape[1]
    if p == 0:
        return 0.0, np.zeros_like(z)
    nz = np.linalg.norm(z, axis=0)
    ns = np.linalg.norm(s, axis=0)
    ok = (nz > _NORM_EPS) & (ns > _NORM_EPS)
    dot = (z * s).sum(axis=0)
    cos = np.where(ok, dot / np.where(ok, nz * ns, 1.0), 0.0)
    loss = float(-np.mean(_log_sigmoid(cos)))
    dcos = -(1.0 - 1.0 / (1.0 + np.exp(-cos))) / p
    safe_nz = np.where(ok, nz, 1.0)
    safe_ns = np.where(ok, ns, 1.0)
    dz = s / (safe_nz * safe_ns) - cos * z / safe_nz ** 2
    return loss, np.where(ok, dcos, 0.0) * dz


def acoustic_loss(z1_q, align_out) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean-over-frames KL(softmax(z1_q) || A); gradients for both operands."""
    z = np.asarray(z1_q, dtype=np.float64)
    a = np.asarray(align_out, dtype=np.float64)
    if z.shape != a.shape:
        raise DimensionError(f"{z.shape} vs {a.shape}")
    t = z.shape[0]
    if t == 0:
        return 0.0, np.zeros_like(z), np.zeros_like(a)
    p = softmax_rows(z)
    pf = np.maximum(p, PROB_FLOOR)
    af = np.maximum(a, PROB_FLOOR)
    log_ratio = np.log(pf) - np.log(af)
    loss = float(np.sum(p * log_ratio) / t)
    dp = np.where(p > PROB_FLOOR, log_ratio + 1.0, log_ratio) / t
    dz = softmax_rows_backward(p, dp)
    da = np.where(a > PROB_FLOOR, -p / af, 0.0) / t
    return loss, dz, da


def encodec_loss(time: float, freq: float, vq: float, weights: LossWeights) -> float:
    return weights.lambda_time * time + weights.lambda_freq * freq + weights.lambda_vq * vq


def generator_loss(parts: Mapping[str, float], weights: LossWeights) -> tuple[float, dict[str, float]]:
    """Weighted generator objective.

    ``parts`` carries either ``encodec`` directly or its ``time``/``freq``/``vq``
    components, plus ``semantic`` and ``acoustic``.  Missing parts count as 0.
    """
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericError(f"loss part {name!r} is not finite ({value})")
    if "encodec" in parts:
        enc = float(parts["encodec"])
    else:
        enc = encodec_loss(parts.get("time", 0.0), parts.get("freq", 0.0), parts.get("vq", 0.0), weights)
    sem = weights.lambda_semantic * parts.get("semantic", 0.0)
    ac = weights.lambda_acoustic * parts.get("acoustic", 0.0)
    breakdown = {k: float(v) for k, v in parts.items()}
    breakdown["encodec"] = enc
    total = enc + sem + ac
    breakdown["total"] = total
    return total, breakdown


class SemanticProjection(Linear):
    """Maps codec latents (D) to the semantic teacher width (P)."""

    def __init__(self, dim: int, teacher_dim: int, rng: np.random.Generator | None = None):
        super().__init__(dim, teacher_dim, rng=rng, bias=False)
        if dim == teacher_dim:
            self.params["weight"] = np.eye(dim)


class AlignLayer(Module):
    """Multi-head attention from residual frames onto the acoustic teacher.

    The teacher vector is projected into ``slots`` key/value tokens; each frame
    of ẑ₁ queries them with ``heads`` scaled dot-product heads.  The merged
    head output is projected to the codec width and row-softmaxed, so every
    output row is a distribution over the D latent channels.
    """

    def __init__(self, dim: int, teacher_dim: int, heads: int = 8, width: int = 32,
                 slots: int = 1, rng: np.random.Generator | None = None):
        super().__init__()
        if width % heads:
            raise ValueError(f"heads ({heads}) must divide width ({width})")
        rng = rng or np.random.default_rng(0)
        self.dim, self.teacher_dim = dim, teacher_dim
        self.heads, self.width, self.slots = heads, width, slots

        def w(i, o):
            return rng.normal(0.0, 1.0 / np.sqrt(i), (i, o))

        self.params.update(
            teacher_w=w(teacher_dim, slots * width), teacher_b=np.zeros(slots * width),
            q_w=w(dim, width), q_b=np.zeros(width),
            k_w=w(width, width), k_b=np.zeros(width),
            v_w=w(width, width), v_b=np.zeros(width),
            o_w=w(width, dim), o_b=np.zeros(dim),
        )

    def forward(self, z1_q, teacher):
        z = np.asarray(z1_q, dtype=np.float64)
        a = np.asarray(teacher, dtype=np.float64).reshape(-1)
        P = self.params
        for name, v in P.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"align layer parameter {name} is not finite")
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise DimensionError(f"align layer expects (T, {self.dim}), got {z.shape}")
        if a.shape[0] != self.teacher_dim:
            raise DimensionError(f"teacher dim {a.shape[0]} != {self.teacher_dim}")
        h, dh = self.heads, self.width // self.heads
        tok = (a @ P["teacher_w"] + P["teacher_b"]).reshape(self.slots, self.width)
        q = z @ P["q_w"] + P["q_b"]
        k = tok @ P["k_w"] + P["k_b"]
        v = tok @ P["v_w"] + P["v_b"]
        qh = q.reshape(-1, h, dh).transpose(1, 0, 2)  # (h, T, dh)
        kh = k.reshape(-1, h, dh).transpose(1, 0, 2)  # (h, S, dh)
        vh = v.reshape(-1, h, dh).transpose(1, 0, 2)
        scale = 1.0 / np.sqrt(dh)
        att = softmax_rows(qh @ kh.transpose(0, 2, 1) * scale)  # (h, T, S)
        oh = att @ vh
        merged = oh.transpose(1, 0, 2).reshape(z.shape[0], self.width)
        out = softmax_rows(merged @ P["o_w"] + P["o_b"])
        self._cache = (z, a, tok, qh, kh, vh, att, merged, out, scale)
        return out

    def backward(self, d_out):
        z, a, tok, qh, kh, vh, att, merged, out, scale = self._cache
        P, G = self.params, {}
        h, dh = self.heads, self.width // self.heads
        d_logits = softmax_rows_backward(out, d_out)
        G["o_w"] = merged.T @ d_logits
        G["o_b"] = d_logits.sum(axis=0)
        d_merged = d_logits @ P["o_w"].T
        d_oh = d_merged.reshape(-1, h, dh).transpose(1, 0, 2)
        d_att = d_oh @ vh.transpose(0, 2, 1)
        d_vh = att.transpose(0, 2, 1) @ d_oh
        d_scores = softmax_rows_backward(att, d_att) * scale
        d_qh = d_scores @ kh
        d_kh = d_scores.transpose(0, 2, 1) @ qh

        def merge(x):
            return x.transpose(1, 0, 2).reshape(x.shape[1], self.width)

        d_q, d_k, d_v = merge(d_qh), merge(d_kh), merge(d_vh)
        G["q_w"] = z.T @ d_q
        G["q_b"] = d_q.sum(axis=0)
        G["k_w"] = tok.T @ d_k
        G["k_b"] = d_k.sum(axis=0)
        G["v_w"] = tok.T @ d_v
        G["v_b"] = d_v.sum(axis=0)
        d_tok = (d_k @ P["k_w"].T + d_v @ P["v_w"].T).reshape(-1)
        G["teacher_w"] = np.outer(a, d_tok)
        G["teacher_b"] = d_tok
        self.grads = G
        return d_q @ P["q_w"].T, P["teacher_w"] @ d_tok


def align_forward(layer: AlignLayer, z1_q, acoustic_teacher) -> np.ndarray:
    return layer.forward(z1_q, acoustic_teacher)
