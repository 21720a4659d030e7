"""``uniflow`` command line: train, reconstruct, evaluate, ablate, probe.

Exit codes: 0 success, 1 usage error (bad flags, missing inputs, invalid
config), 2 runtime failure (training abort, non-finite sampling, interrupt).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .ablation import AXES, format_table, run_ablation
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import ingest_dataset, ingest_directory, load_split, to_uint8
from .evaluate import evaluate_model, probe_accuracy, reconstruct_split
from .metrics import psnr, seam_energy, ssim
from .trainer import TrainingAborted, fit, model_from_checkpoint

log = logging.getLogger("uniflow")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig()
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _checkpoint(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    return ckpt, model_from_checkpoint(ckpt)


def _dataset(args, cfg: RunConfig, split: str):
    if getattr(args, "data", None):
        try:
            return ingest_dataset(args.data, split, cfg)
        except (FileNotFoundError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    return load_split(cfg, split)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _plot_history(metrics_csv: Path, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(metrics_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return []
    step = np.array([int(r["step"]) for r in rows])
    written = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("loss_total", "loss_dist", "loss_flow"):
        ax.plot(step, [float(r[key]) for r in rows], label=key)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    written.append(out / "loss_curves.png")
    plt.close(fig)
    wkeys = [k for k in rows[0] if k.startswith("w_")]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in wkeys:
        ax.plot(step, [float(r[key]) for r in rows], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("layer weight")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "layer_weights.png", dpi=120)
    written.append(out / "layer_weights.png")
    plt.close(fig)
    return written


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> list[Path]:
    cfg = _config(args)
    out = Path(args.out)
    data = _dataset(args, cfg, "train")
    state = fit(cfg, out, resume=args.resume, data=data)
    artifacts = [out / "metrics.csv"] + sorted(out.glob("ckpt_step*.uflw"))
    if args.plot:
        artifacts += _plot_history(out / "metrics.csv", out)
    print(f"trained {state.step} steps; last checkpoint {state.last_checkpoint}")
    return artifacts


def cmd_reconstruct(args) -> list[Path]:
    ckpt, model = _checkpoint(args)
    try:
        data = ingest_directory(args.images, ckpt.config)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    seed = args.seed if args.seed is not None else ckpt.config.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    refs, recs = reconstruct_split(model, data, args.steps, seed)
    per_psnr = psnr(refs, recs, per_image=True)
    per_ssim = ssim(refs, recs, per_image=True)
    artifacts = []
    left, right = to_uint8(refs), to_uint8(recs)
    per_image = []
    for i in range(len(refs)):
        path = out / f"recon_{i:05d}.png"
        Image.fromarray(np.concatenate([left[i], right[i]], axis=1)).save(path)
        artifacts.append(path)
        per_image.append({"index": i, "file": path.name, "psnr": _finite(per_psnr[i]), "ssim": float(per_ssim[i]),
                          "seam_energy": seam_energy(recs[i:i + 1], model.decoder.patch_size)})
    record = {"psnr": _finite(psnr(refs, recs)), "ssim": ssim(refs, recs),
              "seam_energy": seam_energy(recs, model.decoder.patch_size), "steps": args.steps,
              "images": per_image}
    artifacts.append(_write_json(out / "reconstruction.json", record))
    print(f"psnr {record['psnr']}  ssim {record['ssim']:.4f}  seam {record['seam_energy']:.4f}")
    return artifacts


def _finite(x: float):
    return "inf" if x == float("inf") else float(x)


def cmd_evaluate(args) -> list[Path]:
    ckpt, model = _checkpoint(args)
    cfg = ckpt.config
    data = _dataset(args, cfg, args.split)
    reference = _dataset(args, cfg, args.reference_split) if args.reference_split else None
    probe_train = _dataset(args, cfg, args.probe_split) if args.probe_split else None
    seed = args.seed if args.seed is not None else cfg.seed
    report = evaluate_model(model, data, args.steps, seed, args.limit, probe_train=probe_train,
                            reference=reference, gen_source=args.gen_source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    row = report.to_dict()
    js = _write_json(out / "metrics.json", {**row, "frechet_is_proxy": True, "steps": args.steps})
    with open(out / "metrics_row.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
    print(json.dumps(row))
    return [js, out / "metrics_row.csv"]


def cmd_ablate(args) -> list[Path]:
    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace(max_steps=args.steps)
    out = Path(args.out)
    rows = run_ablation(args.axis, cfg, out, eval_limit=args.limit)
    print(format_table(rows))
    artifacts = [out / f"ablation_{args.axis}.csv", out / f"ablation_{args.axis}.json"]
    if args.plot:
        for i in range(len(rows)):
            run_dir = out / f"run{i}"
            if (run_dir / "metrics.csv").exists():
                artifacts += _plot_history(run_dir / "metrics.csv", run_dir)
    return artifacts


def cmd_probe(args) -> list[Path]:
    ckpt, model = _checkpoint(args)
    cfg = ckpt.config
    train = _dataset(args, cfg, args.train_split)
    test = _dataset(args, cfg, args.split)
    acc = probe_accuracy(model, train, test, limit=args.limit)
    if acc is None:
        raise UsageError("linear probing needs labeled splits (class subdirectories)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = _write_json(out / "probe.json", {"probe_accuracy": acc, "train_split": args.train_split,
                                            "eval_split": args.split})
    print(f"probe accuracy {acc:.4f}")
    return [path]


def build_parser() -> Parser:
    parser = Parser(prog="uniflow", description="Unified tokenizer: self-distilled encoder + pixel flow decoder.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("--seed", type=int, help="overrides every random seed")
        p.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")

    p = sub.add_parser("train", help="train a tokenizer")
    common(p)
    p.add_argument("--data", help="dataset root with train/ and eval/ splits (default: config data_root)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--plot", action="store_true", help="also write loss / layer-weight plots")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="encode and decode a directory of images")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of .png/.jpg images")
    p.add_argument("--steps", type=int, default=1, help="Euler steps (default 1)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="reconstruction and alignment metrics on a split")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (default: the checkpoint's data source)")
    p.add_argument("--split", default="eval")
    p.add_argument("--reference-split", help="real split for the Fréchet proxy (default: --split)")
    p.add_argument("--gen-source", choices=("reconstruction", "real"), default="reconstruction",
                   help="compare the reference against reconstructions or against real --split images")
    p.add_argument("--probe-split", help="also report linear-probe accuracy, fitting on this split")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--limit", type=int, default=512, help="max images evaluated")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare one model per setting on an ablation axis")
    common(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--steps", type=int, help="training steps per setting (overrides max_steps)")
    p.add_argument("--limit", type=int, default=512, help="max evaluation images per setting")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="linear probe on frozen student features")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (default: the checkpoint's data source)")
    p.add_argument("--train-split", default="train")
    p.add_argument("--split", default="eval")
    p.add_argument("--limit", type=int, default=2048)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "steps", None) is not None and args.steps < 1:
        print(f"uniflow {args.command}: error: --steps must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        artifacts = args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"uniflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, FloatingPointError, CheckpointError) as exc:
        print(f"uniflow {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print(f"uniflow {args.command}: interrupted; checkpoints on disk are complete", file=sys.stderr)
        return EXIT_RUNTIME
    for path in artifacts:
        log.info("wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
