"""Command line: ``fingerspell {train,evaluate,predict,synth}``.

Exit codes: 0 on success, 2 on configuration errors, 3 on data errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import build_configs, build_synth_config, desk_preset, dump_config, full_preset, read_config
from .errors import ConfigError, DataError
from .preprocessing import AugmentSpec
from .synthgen import generate_dataset

log = logging.getLogger("fingerspell")


def _base(raw: dict, preset: str):
    modality = raw.get("model.modality", "kp")
    model, train = (desk_preset if preset == "desk" else full_preset)(modality)
    return model, train, AugmentSpec()


def cmd_train(args) -> int:
    from .plotting import plot_history
    from .training import build_and_train, load_samples

    raw = read_config(args.config) if args.config else {}
    if "model.alphabet" not in raw:
        alpha = Path(args.train_manifest).parent / "alphabet.txt"
        if alpha.is_file():
            raw["model.alphabet"] = alpha.read_text(encoding="utf-8").strip()
    model_cfg, train_cfg, aug = build_configs(raw, _base(raw, args.preset))
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    train_samples = load_samples(args.train_manifest, model_cfg)
    val_samples = load_samples(args.val_manifest, model_cfg) if args.val_manifest else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(model_cfg, train_cfg, aug), encoding="utf-8")

    def report(rec):
        val = f"{rec['val_accuracy']:.4f}" if "val_accuracy" in rec else "-"
        print(f"epoch {rec['epoch']}\tlr {rec['lr']:.3g}\tloss {rec['train_loss']:.4f}\tval {val}", flush=True)

    ckpt = build_and_train(model_cfg, train_cfg, train_samples, val_samples, aug, out, report)
    lines = ["epoch\tlr\ttrain_loss\tval_accuracy"]
    for h in ckpt.history:
        lines.append(f"{h['epoch']}\t{h['lr']:.6g}\t{h['train_loss']:.6f}\t{h.get('val_accuracy', '')}")
    (out / "history.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if ckpt.history:
        plot_history(ckpt.history, out / "curves.png")
    print(f"best epoch {ckpt.epoch}; checkpoints in {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .plotting import plot_evaluation
    from .training import evaluate, load_model, load_samples

    ckpt = load_model(args.checkpoint)
    samples = load_samples(args.manifest, ckpt.model.cfg)
    report = evaluate(ckpt.model, samples, beam=args.beam)
    tsv = report.to_tsv()
    sys.stdout.write(tsv)
    print(f"# letter_accuracy\t{report.accuracy:.6f}")
    if args.report_dir:
        out = Path(args.report_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "predictions.tsv").write_text(tsv, encoding="utf-8")
        (out / "summary.tsv").write_text(
            f"metric\tvalue\nletter_accuracy\t{report.accuracy:.6f}\n"
            f"sample_mean_accuracy\t{report.mean_accuracy():.6f}\nsamples\t{len(report.rows)}\n",
            encoding="utf-8")
        plot_evaluation(report.rows, out / "accuracy_by_length.png")
        if ckpt.history:
            from .plotting import plot_history
            plot_history(ckpt.history, out / "curves.png")
    return 0


def cmd_predict(args) -> int:
    from .training import load_model, load_sample, predict

    ckpt = load_model(args.checkpoint)
    path = Path(args.input)
    if not path.is_file() and not path.with_suffix(".kpc").is_file() and not path.with_suffix(".frc").is_file():
        raise DataError(f"input clip not found: {path}")
    text = predict(ckpt.model, load_sample(path, ckpt.model.cfg, sample_id=str(path)), beam=args.beam)
    print(text if text else '""')
    return 0


def cmd_synth(args) -> int:
    raw = read_config(args.config) if args.config else {}
    extra = {k for k in raw if not k.startswith("synth.")}
    if extra:
        raise ConfigError(f"synth config only accepts synth.* keys, got {sorted(extra)}")
    cfg = build_synth_config(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    manifests = generate_dataset(cfg, args.out, render=not args.no_frames)
    for split, path in manifests.items():
        print(f"{split}\t{path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fingerspell", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("full", "desk"), default="full",
                   help="starting configuration before the config file is applied")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="letter accuracy over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, help="prefix beam width (default: greedy)")
    p.add_argument("--report-dir", help="also write TSV files and figures here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="decode one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="clip path (.kpc / .frc companions share a stem)")
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--no-frames", action="store_true", help="skip rendering frame clips")
    p.set_defaults(func=cmd_synth)

    for p in sub.choices.values():
        p.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "beam", None) is not None and args.beam < 1:
        print("error: --beam must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
