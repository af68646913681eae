"""Shared test fixtures: grad_check adapters and a cached smoke-trained model."""

import functools
import time

import numpy as np

from rvqtok.codecnet import TrainConfig, build_tokenizer, train
from rvqtok.features import synth_corpus, synth_teachers
from rvqtok.tensorcore import Module


class LossModule(Module):
    """Wraps ``fn(*inputs) -> (loss, grad_0, grad_1, ...)`` as a scalar-output module."""

    def __init__(self, fn, n_grads=None):
        super().__init__()
        self.fn = fn
        self.n_grads = n_grads

    def forward(self, *inputs):
        out = self.fn(*inputs)
        self._grads = out[1:]
        return np.array([out[0]])

    def backward(self, d_out):
        scale = float(np.asarray(d_out).reshape(-1)[0])
        grads = tuple(scale * g for g in self._grads)
        return grads if len(grads) > 1 else grads[0]


class BrokenLinear(Module):
    """Linear map whose backward is off by a factor of two."""

    def __init__(self, w):
        super().__init__()
        self.params["weight"] = np.array(w, dtype=np.float64)

    def forward(self, x):
        self._x = x
        return x @ self.params["weight"]

    def backward(self, dy):
        self.grads = {"weight": 2.0 * self._x.T @ dy}
        return dy @ self.params["weight"].T


SMOKE_UTTS = 20
SMOKE_STEPS = 200
SMOKE_DUR = (1.5, 2.0)
HELDOUT_SEED = 1000
SMOKE_SECONDS = {}


@functools.lru_cache(maxsize=None)
def smoke_run(seed=0):
    """Train the default configuration on 20 synthetic utterances for 200 steps."""
    start = time.perf_counter()
    cfg = TrainConfig(seed=seed)
    corpus = synth_corpus(seed, SMOKE_UTTS, SMOKE_DUR)
    teachers = [synth_teachers(w, cfg.semantic_dim, cfg.acoustic_dim, seed) for w in corpus]
    tok = build_tokenizer(cfg, corpus)
    history = train(tok, corpus, teachers, steps=SMOKE_STEPS)
    SMOKE_SECONDS[seed] = time.perf_counter() - start
    return tok, history, corpus


@functools.lru_cache(maxsize=None)
def heldout_corpus(n=10):
    return synth_corpus(HELDOUT_SEED, n, SMOKE_DUR)
