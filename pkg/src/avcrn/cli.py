"""Command-line entry point: ``avcrn <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails (missing files, bad checkpoints, divergence and so on).
"""

from __future__ import annotations

import argparse
import ast
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import datagen, dsp, gradcheck, metrics
from .checkpoint import read_checkpoint, write_atomic
from .model import ModelConfig
from .train import TrainConfig, enhance_waveform, train

log = logging.getLogger("avcrn")

TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"model"}
MODEL_KEYS = {f.name for f in fields(ModelConfig)}
SPEC_KEYS = {f.name for f in fields(datagen.SynthSpec)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _value(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path: str | Path, allowed: set[str]) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        if key not in allowed:
            raise ValueError(f"{path}:{n}: unknown config key '{key}'")
        out[key] = _value(val)
    return out


def train_config(args) -> TrainConfig:
    raw = read_config(args.config, TRAIN_KEYS | MODEL_KEYS) if args.config else {}
    model = {k: v for k, v in raw.items() if k in MODEL_KEYS and k != "seed"}
    top = {k: v for k, v in raw.items() if k in TRAIN_KEYS}
    if args.seed is not None:
        top["seed"] = args.seed
    if getattr(args, "no_sta", False):
        model["sta_enabled"] = False
    model.setdefault("seed", top.get("seed", 0))
    if args.corpus:
        top["corpus"] = args.corpus
    return TrainConfig(model=ModelConfig.from_dict(model), **top)


def cmd_synth_data(args) -> None:
    raw = read_config(args.config, SPEC_KEYS) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = datagen.SynthSpec.from_dict(raw)
    root = datagen.save_corpus(datagen.build_corpus(spec), args.out, spec)
    log.info("corpus written to %s", root)


def cmd_train(args) -> None:
    cfg = train_config(args)
    if cfg.corpus is None:
        raise UsageError("train needs --corpus (or 'corpus' in --config)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, out_dir=out)
    if args.checkpoint:
        write_atomic(args.checkpoint, (out / "best.ckpt").read_bytes())
    print(f"best validation loss {result.best_val:.6f} after {result.trace[-1][0]} steps; "
          f"checkpoint {out / 'best.ckpt'}")


def cmd_enhance(args) -> None:
    ckpt = read_checkpoint(args.checkpoint)
    noisy = dsp.read_wav(args.noisy)
    video = datagen.read_video(args.video)
    dsp.write_wav(args.out, enhance_waveform(ckpt.model, noisy, video))


def cmd_evaluate(args) -> None:
    report = metrics.evaluate_corpus(read_checkpoint(args.checkpoint).model, args.corpus)
    print(report.to_table(), end="")
    if args.out:
        write_atomic(args.out, report.to_jsonl().encode("utf-8"))


def cmd_grad_check(args) -> None:
    results = gradcheck.run_suite(args.seed or 0)
    for r in results:
        if not args.quiet:
            print(f"{r.name:<26} rel_err {r.rel_err:.3e}  tol {r.tol:.0e}  {'ok' if r.ok else 'FAIL'}")
    print(f"max rel err {max(r.rel_err for r in results):.3e}")
    if not all(r.ok for r in results):
        raise RuntimeError("gradient check failed: " + ", ".join(r.name for r in results if not r.ok))


def ablation_table(scores: dict[str, dict[float, tuple[float, float]]], snrs: list[float]) -> str:
    """Rows are arms; per test SNR, columns are mean STOI and SI-SDR."""
    head = f"{'model':<12}" + "".join(f"  {'STOI@' + metrics.snr_label(s):>11}  {'SI-SDR@' + metrics.snr_label(s):>13}"
                                      for s in snrs)
    lines = [head]
    for arm, by_snr in scores.items():
        lines.append(f"{arm:<12}" + "".join(f"  {by_snr[s][0]:11.4f}  {by_snr[s][1]:13.3f}" for s in snrs))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> None:
    if not args.corpus:
        raise UsageError("ablate needs --corpus")
    test = datagen.load_split(args.corpus, "test")
    snrs = sorted({ex.snr_db for ex in test}, reverse=True)
    scores: dict[str, dict[float, tuple[float, float]]] = {
        "Unprocessed": {s: (float(np.mean([metrics.stoi(e.clean, e.noisy) for e in test if e.snr_db == s])),
                            float(np.mean([metrics.si_sdr(e.clean, e.noisy) for e in test if e.snr_db == s])))
                        for s in snrs}}
    for arm, sta in (("AV-CRN", False), ("AV-CRN+STA", True)):
        args.no_sta = not sta
        cfg = train_config(args)
        out = Path(args.out) / arm if args.out else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        model = train(cfg, out_dir=out).checkpoint.model
        report = metrics.evaluate_corpus(model, test)
        scores[arm] = {s: (report.row(f"{metrics.snr_label(s)}/all").stoi_enh,
                           report.row(f"{metrics.snr_label(s)}/all").sisdr_enh) for s in snrs}
        log.info("arm %s done", arm)
    print(ablation_table(scores, snrs), end="")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--quiet", action="store_true", help="only print results")

    parser = _Parser(prog="avcrn", description="Audio-visual speech enhancement on synthetic data.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--corpus")
    p.add_argument("--out", required=True, help="run directory for checkpoint and traces")
    p.add_argument("--checkpoint", help="also copy the best checkpoint here")
    p.add_argument("--no-sta", action="store_true", help="disable soft-threshold attention")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", parents=[common], help="enhance one noisy WAV file")
    p.add_argument("noisy", help="16 kHz mono 16-bit WAV")
    p.add_argument("video", help="video feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output WAV")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="write JSON lines here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", parents=[common], help="train with and without STA and compare")
    p.add_argument("--corpus")
    p.add_argument("--out", help="directory for per-arm runs")
    p.set_defaults(func=cmd_ablate, no_sta=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(asctime)s %(name)s %(message)s", force=True)
        args.func(args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"avcrn: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
