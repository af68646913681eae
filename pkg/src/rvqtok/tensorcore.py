"""Dense math kernel and hand-written differentiable modules.

Every module caches what it needs on ``forward`` and returns input gradients
from ``backward``; parameter gradients land in ``module.grads``.  There is no
tape: callers chain ``backward`` calls in reverse order themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return m.copy()
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (p * dp).sum(axis=-1, keepdims=True))


def require_finite(name: str, a) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {name}")


# --------------------------------------------------------------------------
# Modules
# --------------------------------------------------------------------------


class Module:
    """Base differentiable module.

    ``params`` maps names to float64 arrays that the optimizer updates in
    place; ``grads`` holds matching gradients after ``backward``.
    """

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, *inputs):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def __call__(self, *inputs):
        return self.forward(*inputs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, self.grads.get(name, np.zeros_like(p))

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Linear(Module):
    """Row-wise affine map: ``y = x @ weight + bias`` for x of shape (N, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 bias: bool = True, scale: float | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        scale = 1.0 / np.sqrt(in_dim) if scale is None else scale
        self.params["weight"] = rng.normal(0.0, scale, (in_dim, out_dim))
        if bias:
            self.params["bias"] = np.zeros(out_dim)
        self._x = None

    def forward(self, x):
        x = as_matrix(x)
        w = self.params["weight"]
        if x.shape[1] != w.shape[0]:
            raise DimensionError(f"Linear expects {w.shape[0]} columns, got {x.shape[1]}")
        self._x = x
        y = x @ w
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        x = self._x
        self.grads["weight"] = x.T @ dy
        if "bias" in self.params:
            self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"].T


class ELU(Module):
    def forward(self, x):
        self._x = x
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))

    def backward(self, dy):
        x = self._x
        return dy * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


class Softmax(Module):
    """Row softmax as a module (last axis)."""

    def forward(self, x):
        self._p = softmax_rows(x)
        return self._p

    def backward(self, dy):
        return softmax_rows_backward(self._p, dy)


def _same_pad(length: int, stride: int, kernel: int) -> tuple[int, int, int]:
    frames = -(-length // stride)
    left = (kernel - stride) // 2
    right = (frames - 1) * stride + kernel - length - left
    return frames, left, right


class Conv1d(Module):
    """Strided 1-D convolution on channel-major input (C_in, L).

    Output has ``ceil(L / stride)`` frames.  The input is zero padded by
    ``(kernel - stride) // 2`` on the left and as much as needed on the right.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.kernel, self.stride = kernel, stride
        self.params["weight"] = rng.normal(0.0, 1.0 / np.sqrt(in_ch * kernel), (out_ch, in_ch, kernel))
        self.params["bias"] = np.zeros(out_ch)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[0] != w.shape[1]:
            raise DimensionError(f"Conv1d expects ({w.shape[1]}, L), got {x.shape}")
        length = x.shape[1]
        frames, left, right = _same_pad(length, self.stride, self.kernel)
        xp = np.pad(x, ((0, 0), (left, right)))
        cols = sliding_window_view(xp, self.kernel, axis=1)[:, ::self.stride][:, :frames]
        self._cache = (cols, length, left, xp.shape[1])
        return np.einsum("oik,itk->ot", w, cols, optimize=True) + self.params["bias"][:, None]

    def backward(self, dy):
        cols, length, left, padded = self._cache
        w = self.params["weight"]
        s = self.stride
        frames = dy.shape[1]
        self.grads["weight"] = np.einsum("ot,itk->oik", dy, cols, optimize=True)
        self.grads["bias"] = dy.sum(axis=1)
        dcols = np.einsum("oik,ot->itk", w, dy, optimize=True)
        dxp = np.zeros((w.shape[1], padded))
        for k in range(self.kernel):
            dxp[:, k:k + s * frames:s] += dcols[:, :, k]
        return dxp[:, left:left + length]


class ConvTranspose1d(Module):
    """Transposed counterpart of :class:`Conv1d`: (C_in, T) -> (C_out, T*stride).

    With shared weights this is exactly the adjoint of the matching Conv1d on
    inputs whose length is a multiple of the stride.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.kernel, self.stride = kernel, stride
        self.params["weight"] = rng.normal(0.0, 1.0 / np.sqrt(in_ch * kernel / stride), (in_ch, out_ch, kernel))
        self.params["bias"] = np.zeros(out_ch)

    def forward(self, h):
        h = np.asarray(h, dtype=np.float64)
        w = self.params["weight"]
        if h.ndim != 2 or h.shape[0] != w.shape[0]:
            raise DimensionError(f"ConvTranspose1d expects ({w.shape[0]}, T), got {h.shape}")
        s, k_len = self.stride, self.kernel
        frames = h.shape[1]
        left = (k_len - s) // 2
        full = np.zeros((w.shape[1], (frames - 1) * s + k_len if frames else 0))
        for k in range(k_len):
            full[:, k:k + s * frames:s] += w[:, :, k].T @ h
        self._cache = (h, left, full.shape[1])
        out = full[:, left:left + frames * s]
        return out + self.params["bias"][:, None]

    def backward(self, dy):
        h, left, full_len = self._cache
        w = self.params["weight"]
        s, k_len = self.stride, self.kernel
        frames = h.shape[1]
        dfull = np.zeros((w.shape[1], full_len))
        dfull[:, left:left + frames * s] = dy
        self.grads["bias"] = dy.sum(axis=1)
        dw = np.empty_like(w)
        dh = np.zeros_like(h)
        for k in range(k_len):
            g = dfull[:, k:k + s * frames:s]
            dw[:, :, k] = h @ g.T
            dh += w[:, :, k] @ g
        self.grads["weight"] = dw
        return dh


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")

    def named_grads(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_grads(f"{prefix}{i}.")

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst: str = ""
    per_tensor: dict[str, float] = field(default_factory=dict)
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error <= self.tol


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, int]:
    if analytic.size == 0:
        return 0.0, -1
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    # entries far below the tensor's own scale (or below 1e-6) are compared
    # against that floor instead of their own magnitude
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(1e-3 * scale, 1e-6))
    rel = np.abs(analytic - numeric) / denom
    i = int(np.argmax(rel))
    return float(rel.flat[i]), i


def grad_check(module: Module, inputs, eps: float = 1e-5, tol: float = 1e-4,
               seed: int = 0, check_inputs: Sequence[bool] | None = None) -> GradCheckReport:
    """Compare ``module.backward`` against central finite differences.

    ``inputs`` is an array or a tuple of arrays passed positionally to
    ``forward``.  A random projection reduces non-scalar outputs to a scalar,
    so every input and parameter entry is checked.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    if not isinstance(inputs, tuple):
        inputs = (inputs,)
    inputs = tuple(np.array(x, dtype=np.float64) for x in inputs)
    check_inputs = check_inputs or [True] * len(inputs)

    out = np.asarray(module.forward(*inputs), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        return GradCheckReport(np.inf, tol, failure="forward output is non-finite")
    proj = np.random.default_rng(seed).normal(size=out.shape)

    def objective() -> float:
        return float(np.sum(proj * np.asarray(module.forward(*inputs))))

    objective()
    dxs = module.backward(proj)
    if not isinstance(dxs, tuple):
        dxs = (dxs,)
    analytic: dict[str, np.ndarray] = {}
    targets: dict[str, np.ndarray] = {}
    for i, (x, dx, chk) in enumerate(zip(inputs, dxs, check_inputs)):
        if chk:
            analytic[f"input{i}"] = np.asarray(dx, dtype=np.float64).reshape(x.shape)
            targets[f"input{i}"] = x
    for name, g in module.named_grads():
        analytic[name] = np.array(g, dtype=np.float64)
    for name, p in module.named_parameters():
        targets[name] = p

    report = GradCheckReport(0.0, tol)
    for name, arr in targets.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = objective()
            flat[j] = orig - eps
            fm = objective()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.failure = f"non-finite objective perturbing {name}[{j}]"
                report.max_rel_error = np.inf
                return report
            numeric.flat[j] = (fp - fm) / (2 * eps)
        a = analytic[name]
        if a.shape != arr.shape:
            report.failure = f"gradient shape {a.shape} != {arr.shape} for {name}"
            report.max_rel_error = np.inf
            return report
        err, idx = _rel_error(a, numeric)
        report.per_tensor[name] = err
        if err > report.max_rel_error or not report.worst:
            report.max_rel_error = max(err, report.max_rel_error)
            report.worst = f"{name}[{idx}]"
    objective()
    return report


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.99,
               weight_decay: float = 0.0, eps: float = 1e-8) -> AdamWState:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function (test helper)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in range(x.size):
        orig = x.flat[j]
        x.flat[j] = orig + eps
        fp = f(x)
        x.flat[j] = orig - eps
        fm = f(x)
        x.flat[j] = orig
        g.flat[j] = (fp - fm) / (2 * eps)
    return g
