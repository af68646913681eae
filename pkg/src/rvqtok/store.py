"""Model manifest directories: a key=value ``manifest`` file plus one FTZ1 file per tensor."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .codecnet import EncoderDecoder, Tokenizer, TrainConfig
from .distill import AlignLayer, LossWeights, SemanticProjection
from .features import FormatError, load_tensor, save_tensor
from .rvq import RvqStack

MANIFEST = "manifest"
FORMAT_NAME = "rvqtok-model"
FORMAT_VERSION = 1
_LIST_KEYS = ("channels", "strides")


class ManifestError(FormatError):
    """Manifest is malformed or disagrees with the tensors on disk."""


def _tensors(tok: Tokenizer) -> dict[str, np.ndarray]:
    out = {name: value for name, value in tok.trainable()}
    for level, cb in enumerate(tok.stack.levels):
        out[f"stack.{level}.entries"] = cb.entries
        out[f"stack.{level}.ema_counts"] = cb.ema_counts
        out[f"stack.{level}.ema_sums"] = cb.ema_sums
    return out


def _header(tok: Tokenizer) -> dict[str, str]:
    cfg = tok.config
    head = {
        "format": FORMAT_NAME,
        "version": str(FORMAT_VERSION),
        "channels": ",".join(map(str, tok.model.channels)),
        "strides": ",".join(map(str, tok.model.strides)),
        "dim": str(tok.model.dim),
        "levels": str(tok.stack.n_levels),
        "bits": str(tok.stack.bits),
    }
    for key, value in vars(cfg).items():
        if key in ("weights", "levels", "bits"):
            continue
        head[f"train.{key}"] = repr(value) if isinstance(value, float) else str(value)
    for key, value in vars(cfg.weights).items():
        head[key] = repr(float(value))
    return head


def save_model(tok: Tokenizer, directory, extra: dict[str, str] | None = None) -> Path:
    """Write ``tok`` to ``directory`` (created if needed); tensors are stored as float32."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in _header(tok).items()]
    lines += [f"{k}={v}" for k, v in (extra or {}).items()]
    for name, value in _tensors(tok).items():
        fname = f"{name}.ftz"
        save_tensor(directory / fname, value)
        lines.append(f"tensor.{name}={'x'.join(map(str, value.shape))}")
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, directory / MANIFEST)
    return directory


def read_manifest(directory) -> dict[str, str]:
    path = Path(directory) / MANIFEST
    text = path.read_text()
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    if out.get("format") != FORMAT_NAME:
        raise ManifestError(f"{path}: not a model manifest")
    if out.get("version") != str(FORMAT_VERSION):
        raise ManifestError(f"{path}: unsupported version {out.get('version')!r}")
    return out


def _config_from(head: dict[str, str]) -> TrainConfig:
    defaults = TrainConfig()
    kwargs = {}
    for key, default in vars(defaults).items():
        if key == "weights":
            continue
        raw = head.get(f"train.{key}")
        if raw is not None:
            kwargs[key] = type(default)(raw)
    kwargs["levels"] = int(head["levels"])
    kwargs["bits"] = int(head["bits"])
    weights = {k: float(head[k]) for k in vars(LossWeights()) if k in head}
    return TrainConfig(weights=LossWeights(**weights), **kwargs)


def load_model(directory) -> Tokenizer:
    """Rebuild a tokenizer, checking every tensor shape against the manifest."""
    directory = Path(directory)
    head = read_manifest(directory)
    try:
        channels = tuple(int(v) for v in head["channels"].split(","))
        strides = tuple(int(v) for v in head["strides"].split(","))
        cfg = _config_from(head)
    except (KeyError, ValueError) as e:
        raise ManifestError(f"{directory / MANIFEST}: bad or missing field ({e})") from e
    if int(head.get("dim", channels[-1])) != channels[-1]:
        raise ManifestError("manifest dim disagrees with channels")

    model = EncoderDecoder(channels, strides, init="zero_bias")
    stack = RvqStack.zeros(cfg.levels, cfg.bits, model.dim, cfg.codebook_decay)
    align = AlignLayer(model.dim, cfg.acoustic_dim, cfg.align_heads, cfg.align_width, cfg.align_slots)
    proj = SemanticProjection(model.dim, cfg.semantic_dim)
    tok = Tokenizer(model, stack, align, proj, cfg)

    expected = _tensors(tok)
    for name, value in expected.items():
        declared = head.get(f"tensor.{name}")
        want = "x".join(map(str, value.shape))
        if declared != want:
            raise ManifestError(f"tensor {name}: manifest declares {declared}, model needs {want}")
        loaded = load_tensor(directory / f"{name}.ftz")
        if loaded.shape != value.shape:
            raise ManifestError(f"tensor {name}: file holds {loaded.shape}, manifest declares {value.shape}")
        value[...] = loaded
    for cb in stack.levels:
        cb.dead_after = cfg.dead_code_steps
    return tok
