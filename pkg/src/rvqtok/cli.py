"""rvqtok command-line interface.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 format, 5 numeric failure.
``RVQTOK_THREADS`` caps the worker threads used for batch preparation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import codecnet, tasks
from .config import ConfigError, RunConfig, load_config, render_config
from .features import (FormatError, TeacherEmbeddings, Waveform, load_tensor, read_wav, save_tensor,
                       synth_corpus, synth_teachers, write_wav)
from .rvq import pack_bitstream, unpack_bitstream
from .store import load_model, save_model
from .tensorcore import DimensionError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("rvqtok")


class UsageError(Exception):
    pass


def worker_count() -> int:
    raw = os.environ.get("RVQTOK_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RVQTOK_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"RVQTOK_THREADS must be a positive integer, got {raw!r}")
    return n


def parallel_map(fn, items):
    items = list(items)
    workers = min(worker_count(), max(1, len(items)))
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: getattr(args, k, None) for k in ("seed", "steps", "epochs", "lr")}
    if getattr(args, "corpus", None):
        overrides["corpus_dir"] = args.corpus
    return cfg.updated(**overrides)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg = _run_config(args)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = synth_corpus(args.seed, args.n, (args.min_dur, args.max_dur))

    def one(item):
        i, w = item
        stem = out / f"utt_{i:04d}"
        write_wav(stem.with_suffix(".wav"), w)
        # teachers see exactly what training will read back
        stored = read_wav(stem.with_suffix(".wav"))
        t = synth_teachers(stored, cfg.semantic_dim, cfg.acoustic_dim, args.seed)
        save_tensor(f"{stem}.semantic.ftz", t.semantic)
        save_tensor(f"{stem}.acoustic.ftz", t.acoustic[None, :])

    parallel_map(one, enumerate(corpus))
    print(f"wrote {len(corpus)} utterances to {out}")
    return EXIT_OK


def load_corpus(corpus_dir, teacher_dir) -> tuple[list[Waveform], list[TeacherEmbeddings]]:
    wavs = sorted(Path(corpus_dir).glob("*.wav"))
    if not wavs:
        raise FileNotFoundError(f"no .wav files in {corpus_dir}")

    def one(path):
        stem = Path(teacher_dir) / path.stem
        sem = load_tensor(f"{stem}.semantic.ftz")
        ac = load_tensor(f"{stem}.acoustic.ftz").reshape(-1)
        return read_wav(path), TeacherEmbeddings(sem, ac)

    pairs = parallel_map(one, wavs)
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _write_history(path: Path, history) -> None:
    keys = ["step", "utterance", "levels_used", "total", "encodec", "time", "freq", "vq", "semantic", "acoustic"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in history:
            fh.write("\t".join(str(row[k]) if isinstance(row[k], int) else f"{row[k]:.8g}" for k in keys) + "\n")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out_model or cfg.model_dir)
    corpus, teachers = load_corpus(cfg.corpus_dir, cfg.teachers)
    tcfg = cfg.train_config()
    for w, t in zip(corpus, teachers):
        if t.semantic.shape[1] != tcfg.semantic_dim or t.acoustic.shape[0] != tcfg.acoustic_dim:
            raise DimensionError("teacher dimensions disagree with the config")
    tok = codecnet.build_tokenizer(tcfg, corpus)
    try:
        history = codecnet.train(tok, corpus, teachers)
    except codecnet.TrainingAborted as e:
        if e.checkpoint is not None:
            save_model(e.checkpoint, out, {"status": "aborted", "aborted_step": str(e.step)})
        raise
    save_model(tok, out)
    (out / "config").write_text(render_config(cfg))
    _write_history(Path(args.history) if args.history else out / "history.tsv", history)
    first, last = history[0]["total"], history[-1]["total"]
    print(f"trained {len(history)} steps: total loss {first:.4f} -> {last:.4f}; model in {out}")
    return EXIT_OK


def _levels(tok, args) -> int:
    levels = args.levels
    if levels is None and getattr(args, "config", None):
        levels = load_config(args.config).levels_used or None
    levels = tok.stack.n_levels if levels is None else levels
    if not 1 <= levels <= tok.stack.n_levels:
        raise UsageError(f"--levels must be in [1, {tok.stack.n_levels}]")
    return levels


def cmd_encode(args) -> int:
    tok = load_model(args.model)
    w = read_wav(args.inp)
    tokens = tasks.tokenize(tok, w, _levels(tok, args))
    only = [int(v) for v in args.only_levels.split(",")] if args.only_levels else None
    try:
        data = tasks.export_tokens(tokens, args.format, only)
    except ValueError as e:
        raise UsageError(str(e)) from e
    Path(args.out).write_bytes(data)
    return EXIT_OK


def _clamped(samples) -> Waveform:
    return Waveform(16000, np.clip(samples, -1.0, 1.0))


def cmd_decode(args) -> int:
    tok = load_model(args.model)
    tokens = unpack_bitstream(Path(args.inp).read_bytes())
    if tokens.bits != tok.stack.bits:
        raise FormatError(f"stream has {tokens.bits}-bit indices, model uses {tok.stack.bits}")
    if tokens.hop != tok.model.hop or tokens.sample_rate != 16000:
        raise FormatError(f"stream framing {tokens.sample_rate} Hz / hop {tokens.hop} does not match the model")
    if tokens.levels_used > tok.stack.n_levels:
        raise FormatError(f"stream uses {tokens.levels_used} levels, model has {tok.stack.n_levels}")
    if tokens.frames == 0:
        raise FormatError("stream has no frames")
    write_wav(args.out, _clamped(tasks.detokenize(tok, tokens)))
    return EXIT_OK


def cmd_convert(args) -> int:
    tok = load_model(args.model)
    src, tgt = read_wav(args.source), read_wav(args.target)
    stream, rule = tasks.convert_tokens(tok, src, tgt, _levels(tok, args))
    write_wav(args.out, _clamped(tasks.detokenize(tok, stream, len(src))))
    print(f"alignment={rule} source_frames={stream.frames} levels={stream.levels_used}")
    return EXIT_OK


def cmd_eval(args) -> int:
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    unknown = set(metrics) - set(tasks.METRICS)
    if unknown or not metrics:
        raise UsageError(f"--metrics takes a subset of {','.join(tasks.METRICS)}")
    w = read_wav(args.inp)
    if args.ref:
        ref = read_wav(args.ref).samples
        cand = w.samples
        n = min(len(ref), len(cand))
        ref, cand = ref[:n], cand[:n]
    else:
        tok = load_model(args.model)
        ref = w.samples
        cand = codecnet.reconstruct(tok, w, _levels(tok, args))
    report = tasks.evaluate(ref, cand, metrics)
    sys.stdout.write(report.to_json() if args.json else report.to_keyvalue())
    return EXIT_OK


def cmd_inspect(args) -> int:
    tokens = unpack_bitstream(Path(args.inp).read_bytes())
    print("magic=RVQB")
    print(f"sample_rate={tokens.sample_rate}")
    print(f"hop={tokens.hop}")
    print(f"frames={tokens.frames}")
    print(f"levels={tokens.levels_used}")
    print(f"bits={tokens.bits}")
    print(f"frame_rate={tokens.frame_rate:g}")
    print(f"bandwidth_bps={tokens.bandwidth_bps:g}")
    size = 1 << tokens.bits
    edges = np.linspace(0, size, args.bins + 1)
    for level in range(tokens.levels_used):
        col = tokens.indices[:, level]
        counts, _ = np.histogram(col, bins=edges)
        distinct = len(np.unique(col))
        print(f"level{level}.distinct={distinct}")
        print(f"level{level}.histogram={' '.join(map(str, counts))}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rvqtok", description="Residual-VQ speech tokenizer at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write synthetic utterances and teacher features")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--min-dur", type=float, default=1.0)
    g.add_argument("--max-dur", type=float, default=2.0)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a tokenizer on a corpus directory")
    t.add_argument("--config")
    t.add_argument("--out-model")
    t.add_argument("--corpus")
    t.add_argument("--history", help="loss history file (default: <out-model>/history.tsv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="wav -> token stream")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--levels", type=int, help="levels to use (default: config levels_used, else all)")
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=("rvqb", "txt"), default="rvqb")
    e.add_argument("--only-levels", help="comma-separated level indices to export, e.g. 0")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="token stream -> wav")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("convert", help="swap the level-1 tokens of source for those of target")
    c.add_argument("--model", required=True)
    c.add_argument("--source", required=True)
    c.add_argument("--target", required=True)
    c.add_argument("--levels", type=int, help="levels to use (default: config levels_used, else all)")
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)

    v = sub.add_parser("eval", help="objective metrics")
    v.add_argument("--model")
    v.add_argument("--in", dest="inp", required=True)
    v.add_argument("--ref")
    v.add_argument("--levels", type=int, help="levels to use (default: config levels_used, else all)")
    v.add_argument("--config")
    v.add_argument("--metrics", default=",".join(tasks.METRICS))
    v.add_argument("--json", action="store_true", help="emit one JSON object instead of key=value lines")
    v.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="dump an RVQB header and per-level index histograms")
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--bins", type=int, default=16)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.ref and not args.model:
        parser.error("eval needs --model (reconstruct --in) or --ref (compare --in against it)")
    if args.command == "inspect" and args.bins < 1:
        parser.error("--bins must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        _diag(e)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as e:
        _diag(e)
        return EXIT_NUMERIC
    except (FormatError, DimensionError) as e:
        _diag(e)
        return EXIT_FORMAT
    except OSError as e:
        _diag(e)
        return EXIT_IO
    except ValueError as e:
        _diag(e)
        return EXIT_USAGE


def _diag(e: BaseException) -> None:
    msg = str(e).splitlines()[0] if str(e) else type(e).__name__
    print(f"rvqtok: error: {msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
