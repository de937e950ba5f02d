"""Command-line entry point: ``shufflefac <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import profiler as prof
from .complexity import model_cost
from .frontend import MelConfig, read_wav, resample_to_16k, segment, log_mel
from .model import ShuffleFACConfig, build, format_summary, load, save, summary
from .tensor import FormatError, save_tensor
from .trainer import (Manifest, ManifestRow, TrainConfig, evaluate, split_recordings, train,
                      write_epoch_log)


EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=int, default=16, help="channel scaling factor (default: 16)")
    p.add_argument("--kernel-first", type=int, default=3, help="first conv kernel size (default: 3)")
    p.add_argument("--kernel-dw", type=int, default=3, help="depthwise kernel size (default: 3)")
    p.add_argument("--fa-gate", choices=("shared", "channel_mix"), default="shared",
                   help="FA gate wiring (default: shared)")
    p.add_argument("--no-bias", action="store_true", help="build conv/linear layers without biases")
    p.add_argument("--bn-before-act", action="store_true", help="BN then ReLU instead of ReLU then BN")


def _config(args) -> ShuffleFACConfig:
    return ShuffleFACConfig(gamma=args.gamma, k_first=args.kernel_first, k_dw=args.kernel_dw,
                            fa_gate=args.fa_gate, bias=not args.no_bias, bn_before_act=args.bn_before_act)


def _write_text(dest: str, text: str) -> None:
    if dest == "-":
        sys.stdout.write(text + "\n")
    else:
        Path(dest).write_text(text + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_features(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        sources = list(Manifest.read_csv(args.manifest))
    elif args.wav:
        sources = [ManifestRow(w, args.label, Path(w).stem) for w in args.wav]
    else:
        raise UsageError("features needs --wav or --manifest")
    rows = []
    for src in sources:
        samples, rate = read_wav(src.path)
        for clip in segment(resample_to_16k(samples, rate), src.recording_id):
            dest = out_dir / f"{src.recording_id}_{clip.index:05d}.sft"
            save_tensor(log_mel(clip), dest)
            rows.append(ManifestRow(str(dest.resolve()), src.label, src.recording_id))
    manifest_path = Path(args.out_manifest) if args.out_manifest else out_dir / "manifest.csv"
    Manifest(rows).write_csv(manifest_path)
    print(f"wrote {len(rows)} clips from {len(sources)} recordings to {out_dir} (manifest {manifest_path})")
    return EXIT_OK


def cmd_summary(args) -> int:
    m = load(args.model) if args.model else build(_config(args), seed=args.seed)
    rows, report = summary(m)
    print(f"ShuffleFAC(gamma={m.config.gamma}) k_first={m.config.k_first} k_dw={m.config.k_dw} "
          f"fa_gate={m.config.fa_gate}")
    print(format_summary(rows, report))
    return EXIT_OK


def cmd_count(args) -> int:
    m = load(args.model) if args.model else build(_config(args), seed=args.seed)
    report = model_cost(m)
    if args.json:
        _write_text(args.json, report.to_json())
    if args.json != "-":
        print(report.to_table())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig(batch_size=args.batch_size, lr=args.lr, max_epochs=args.epochs, seed=args.seed,
                      patience=args.patience)
    model = build(_config(args), seed=args.seed)
    train_m = Manifest.read_csv(args.manifest)
    val_m = Manifest.read_csv(args.val_manifest) if args.val_manifest else None
    model, logs = train(model, train_m, val_m, cfg)
    save(model, args.out)
    if args.log:
        write_epoch_log(logs, args.log)
    last = logs[-1]
    print(f"trained {len(logs)} epochs; final train_loss {last.train_loss:.6f}; "
          f"epoch-1 train_loss {logs[0].train_loss!r}; model -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load(args.model)
    metrics = evaluate(model, Manifest.read_csv(args.manifest))
    if args.json:
        _write_text(args.json, json.dumps(metrics.to_dict(), indent=2))
    if args.json != "-":
        print(f"accuracy {metrics.accuracy:.4f}  macro F1 {metrics.macro_f1:.4f}")
        for c, (p, r, f) in enumerate(zip(metrics.precision, metrics.recall, metrics.f1)):
            print(f"  class {c}: precision {p:.4f} recall {r:.4f} f1 {f:.4f}")
        print("confusion (rows = true):")
        for row in metrics.confusion:
            print("  " + " ".join(f"{v:6d}" for v in row))
    return EXIT_OK


def cmd_classify(args) -> int:
    model = load(args.model).eval()
    samples, rate = read_wav(args.wav)
    clips = segment(resample_to_16k(samples, rate), Path(args.wav).stem)
    if not clips:
        raise FormatError(f"{args.wav}: shorter than one {MelConfig().clip_seconds:g}-s clip")
    for clip in clips:
        logits = model.forward(log_mel(clip), mode="infer").data
        print(",".join([str(clip.index), str(int(np.argmax(logits)))] + [repr(float(v)) for v in logits]))
    return EXIT_OK


def cmd_profile(args) -> int:
    model = load(args.model) if args.model else build(_config(args), seed=args.seed)
    model.eval()
    energy = prof.EnergyParams(p_cpu_watts=args.power_watts)
    report = prof.profile(model, runs=args.runs, warmup=args.warmup, energy=energy,
                          threshold=args.threshold, end_to_end=args.end_to_end, seed=args.seed)
    if args.json:
        _write_text(args.json, report.to_json())
    if args.json != "-":
        print(prof.format_report(report))
    return EXIT_OK


def cmd_split(args) -> int:
    try:
        ratio = [float(v) for v in args.ratio.split(":")]
    except ValueError:
        raise UsageError(f"--ratio must look like 7:1:2, got {args.ratio!r}") from None
    if len(ratio) != 3 or min(ratio) < 0 or sum(ratio) <= 0:
        raise UsageError(f"--ratio must be three non-negative numbers, got {args.ratio!r}")
    parts = split_recordings(Manifest.read_csv(args.manifest), ratio, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        part.write_csv(out / f"{name}.csv")
        print(f"{name}: {len(part.recording_ids)} recordings, {len(part)} rows -> {out / (name + '.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shufflefac", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    parser.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    # the same flags after the subcommand; SUPPRESS keeps them from clobbering the global value
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default: 0)")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("features", parents=[common], formatter_class=fmt,
                       help="WAV -> log-Mel SFT1 clip files plus manifest")
    p.add_argument("--wav", action="append", help="input WAV (repeatable)")
    p.add_argument("--label", type=int, default=0, help="label for --wav inputs")
    p.add_argument("--manifest", help="recording manifest CSV (path,label,recording_id)")
    p.add_argument("--out-dir", required=True, help="directory for .sft files")
    p.add_argument("--out-manifest", help="clip manifest path (default: OUT_DIR/manifest.csv)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("summary", parents=[common], formatter_class=fmt, help="per-stage architecture table")
    _arch_flags(p)
    p.add_argument("--model", help="summarize a saved SFAC model instead")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("count", parents=[common], formatter_class=fmt, help="parameter / MAC report")
    _arch_flags(p)
    p.add_argument("--model", help="count a saved SFAC model instead")
    p.add_argument("--json", help="write JSON report to this path ('-' for stdout)")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train with CE loss and Adam")
    _arch_flags(p)
    p.add_argument("--manifest", required=True, help="training manifest CSV")
    p.add_argument("--val-manifest", help="validation manifest CSV (checkpoint selection)")
    p.add_argument("--epochs", type=int, default=200, help="maximum epochs")
    p.add_argument("--batch-size", type=int, default=48, help="mini-batch size")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--patience", type=int, default=None, help="early-stop patience in epochs (default: off)")
    p.add_argument("--out", default="model.sfac", help="output model path")
    p.add_argument("--log", help="epoch log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="clip-level accuracy and macro F1")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", help="write metrics JSON to this path ('-' for stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", parents=[common], formatter_class=fmt, help="per-clip predictions for a WAV")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("profile", parents=[common], formatter_class=fmt, help="latency, attribution, energy")
    _arch_flags(p)
    p.add_argument("--model", help="saved SFAC model (default: freshly built from flags)")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--power-watts", type=float, default=10.0, help="assumed CPU peak power P_cpu")
    p.add_argument("--threshold", type=float, default=prof.DEFAULT_THRESHOLD,
                   help="tensor-manipulation share that flags MACs as unreliable")
    p.add_argument("--end-to-end", action="store_true", help="include log-Mel extraction in the timed region")
    p.add_argument("--json", help="write the report as JSON ('-' for stdout)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("split", parents=[common], formatter_class=fmt, help="recording-level train/val/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratio", default="7:1:2")
    p.set_defaults(func=cmd_split)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"shufflefac {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValueError, OSError, KeyError) as exc:
        print(f"shufflefac {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
