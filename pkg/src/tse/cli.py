"""Command-line surface: corpus synthesis, training, evaluation, inference,
parameter accounting, and histogram export."""

import argparse
import json
import pathlib
import sys

import numpy as np

from . import datagen, evaluation, models, training
from .dsp import DspError, read_wav, write_wav


PRESETS = {
    "full_time": models.full_time_config,
    "full_time_cmha1": lambda: models.full_time_config(cmha_layers=1),
    "full_tf": models.full_tf_config,
    "full_tf_k4": lambda: models.full_tf_config(unfold_kernel=4, attn_channels=32),
    "tiny_time": models.tiny_time_config,
    "tiny_tf": models.tiny_tf_config,
    "baseline": models.baseline_config,
}


def _load_config(args) -> models.ModelConfig:
    if getattr(args, "preset", None):
        return PRESETS[args.preset]()
    if getattr(args, "config", None):
        return models.ModelConfig.from_json(pathlib.Path(args.config).read_text())
    raise ValueError("provide --config FILE or --preset NAME")


def _add_config_flags(parser):
    parser.add_argument("--config", help="model config JSON file")
    parser.add_argument("--preset", choices=sorted(PRESETS),
                        help="named built-in config")


def _load_model(args):
    config = _load_config(args)
    model = models.build(config)
    if getattr(args, "checkpoint", None):
        models.load_checkpoint(args.checkpoint, model)
    return model


def cmd_synth(args) -> int:
    spec = datagen.CorpusSpec(
        counts={"train": args.train, "dev": args.dev, "test": args.test},
        train_speakers=args.train_speakers,
        test_speakers=args.test_speakers,
        utterances_per_speaker=args.utterances,
        duration_low=args.duration_low,
        duration_high=args.duration_high,
        seed=args.seed,
    )
    records = datagen.build_corpus(args.root, spec)
    print(f"wrote {len(records)} examples under {args.root}")
    return 0


def cmd_train(args) -> int:
    model = _load_model(args)
    cfg = training.TrainConfig(
        lr=args.lr,
        plateau_patience=args.patience,
        segment_seconds=args.segment_seconds,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        grad_clip=args.grad_clip,
        seed=args.seed,
    )
    history = training.train(model, args.corpus, cfg, args.out, resume_from=args.resume)
    if history:
        last = history[-1]
        print(f"epoch {last['epoch']}: train {last['train_loss']:.3f}"
              f" val {last['val_loss']:.3f}")
    print(f"checkpoints and metrics under {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args)

    def extract_fn(mixture, reference):
        return models.extract(model, mixture, reference)

    report = evaluation.evaluate(extract_fn, args.corpus, split=args.split,
                                 both_speakers=args.both_speakers)
    print(f"{len(report.records)} records | mean SI-SDRi"
          f" {report.mean_si_sdri:.2f} dB | mean SDRi {report.mean_sdri:.2f} dB")
    if args.report:
        evaluation.save_report(report, args.report)
        print(f"report written to {args.report}")
    if args.hist_csv:
        evaluation.export_histogram(report, args.hist_csv)
        print(f"histogram written to {args.hist_csv}")
    return 0


def cmd_infer(args) -> int:
    model = _load_model(args)
    mixture = read_wav(args.mixture)
    reference = read_wav(args.reference)
    estimate = models.extract(model, mixture, reference)
    write_wav(args.out, estimate)
    print(f"wrote {args.out} ({len(estimate)} samples @ {estimate.sample_rate} Hz)")
    return 0


def cmd_params(args) -> int:
    model = _load_model(args)
    count = models.count_parameters(model)
    print(f"{count} parameters ({count / 1e6:.2f}M)")
    return 0


def cmd_hist(args) -> int:
    report = evaluation.load_report(args.report)
    evaluation.export_histogram(report, args.csv, png_path=args.png)
    print(f"histogram written to {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tse", description="target speaker extraction toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-speaker corpus")
    p.add_argument("root", help="output directory")
    p.add_argument("--train", type=int, default=32)
    p.add_argument("--dev", type=int, default=8)
    p.add_argument("--test", type=int, default=8)
    p.add_argument("--train-speakers", type=int, default=12)
    p.add_argument("--test-speakers", type=int, default=4)
    p.add_argument("--utterances", type=int, default=3)
    p.add_argument("--duration-low", type=float, default=2.0)
    p.add_argument("--duration-high", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus")
    _add_config_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--segment-seconds", type=float, default=4.0)
    p.add_argument("--grad-clip", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--both-speakers", action="store_true")
    p.add_argument("--report", help="write the full report JSON here")
    p.add_argument("--hist-csv", help="write the SI-SDRi histogram CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="extract one speaker from one mixture")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("mixture", help="mixture WAV")
    p.add_argument("reference", help="reference WAV of the target speaker")
    p.add_argument("out", help="output WAV")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("params", help="print the parameter count of a config")
    _add_config_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("hist", help="export a histogram from a saved report")
    p.add_argument("--report", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--png")
    p.set_defaults(func=cmd_hist)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DspError, datagen.DatagenError, models.CheckpointError,
            training.TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
