"""``madclip`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import config as cfgmod
from .data import load_manifest, make_synthetic_dataset
from .engine import ABLATIONS, Checkpoint, cross_evaluate, evaluate, model_from_checkpoint, predict, run_ablation, train
from .errors import MadCLIPError
from .report import append_csv, format_table, read_csv

CHECKPOINT_NAME = "checkpoint.safetensors"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' run config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madclip", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train adapters and prompts on a manifest")
    _common(p)
    p.add_argument("--manifest", help="dataset manifest CSV (overrides data.manifest)")

    for verb, help_ in (("eval", "evaluate on the test split"), ("cross-eval", "evaluate on another dataset")):
        p = sub.add_parser(verb, help=help_)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--report", help="CSV report to append to (default: OUT/report.csv)")

    p = sub.add_parser("predict", help="anomaly map and score for one image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("ablate", help="train/evaluate the base run and one ablation toggle")
    _common(p)
    p.add_argument("--which", required=True, choices=sorted(ABLATIONS))
    p.add_argument("--manifest", help="dataset manifest CSV (overrides data.manifest)")

    p = sub.add_parser("make-synthetic", help="write a synthetic blob dataset")
    _common(p)
    p.add_argument("--n-normal", type=int, default=24)
    p.add_argument("--n-abnormal", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--blob-intensity", type=float, default=0.45)
    p.add_argument("--modality", default="synthetic")
    p.add_argument("--name", default="synthetic")

    p = sub.add_parser("describe", help="print a checkpoint's contents")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("table", help="aggregate report CSVs into a per-dataset table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="write the table to this file as well")
    return parser


def _resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    cfgmod.apply_overrides(cfg, [cfgmod.parse_override(s) for s in args.set])
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "manifest", None) and args.verb in ("train", "ablate"):
        cfg.data.manifest = str(Path(args.manifest).resolve())
    return cfg.validate()


def _write_resolved(cfg: cfgmod.RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(cfgmod.dumps(cfg))


def _manifest_for(cfg: cfgmod.RunConfig):
    if not cfg.data.manifest:
        raise MadCLIPError("no dataset manifest given (use --manifest or data.manifest)")
    return load_manifest(cfg.data.manifest)


def _cmd_train(args) -> None:
    cfg = _resolve_config(args)
    out = Path(args.out)
    manifest = _manifest_for(cfg)
    _write_resolved(cfg, out)
    ck = train(cfg, manifest, log_path=out / "train_log.csv")
    ck.save(out / CHECKPOINT_NAME)
    print(f"saved {out / CHECKPOINT_NAME} after {ck.step} steps")


def _cmd_eval(args, cross: bool) -> None:
    ck = Checkpoint.load(args.checkpoint)
    manifest = load_manifest(args.manifest)
    rep = cross_evaluate(ck, manifest) if cross else evaluate(ck, manifest)
    out = Path(args.out)
    _write_resolved(ck.config, out)
    path = append_csv([rep], args.report or out / "report.csv")
    row = rep.row()
    print(f"{row['dataset']} AC={row['AC_AUC']} AS={row['AS_AUC'] or '-'} ({rep.protocol}) -> {path}")


def _cmd_predict(args) -> None:
    ck = Checkpoint.load(args.checkpoint)
    img_path = Path(args.image)
    if not img_path.exists():
        raise MadCLIPError(f"image not found: {img_path}")
    with Image.open(img_path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    res = predict(model_from_checkpoint(ck), image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pix = np.round(255.0 * res.map.numpy().clip(0, 1)).astype(np.uint8)
    Image.fromarray(pix).save(out / f"{img_path.stem}_map.png")
    (out / f"{img_path.stem}_score.txt").write_text(f"image = {img_path.name}\nscore = {res.score:.6f}\n")
    print(f"{img_path.name} score={res.score:.6f}")


def _cmd_ablate(args) -> None:
    cfg = _resolve_config(args)
    out = Path(args.out)
    manifest = _manifest_for(cfg)
    _write_resolved(cfg, out)
    rep = run_ablation(cfg, args.which, manifest)
    rep.base_checkpoint.save(out / "base" / CHECKPOINT_NAME)
    rep.toggled_checkpoint.save(out / f"ablation_{args.which}" / CHECKPOINT_NAME)
    rep.base.protocol = "base"
    rep.toggled.protocol = f"ablation_{args.which}"
    append_csv([rep.base, rep.toggled], out / "ablation.csv")
    (out / f"ablation_{args.which}.txt").write_text(rep.text())
    print(rep.text(), end="")


def _cmd_make_synthetic(args) -> None:
    seed = args.seed if args.seed is not None else 0
    m = make_synthetic_dataset(
        args.out,
        n_normal=args.n_normal,
        n_abnormal=args.n_abnormal,
        size=args.size,
        seed=seed,
        blob_intensity=args.blob_intensity,
        modality=args.modality,
        name=args.name,
    )
    print(f"wrote {len(m.entries)} samples to {Path(args.out) / 'manifest.csv'}")


def _cmd_describe(args) -> None:
    print(Checkpoint.load(args.checkpoint).describe(), end="")


def _cmd_table(args) -> None:
    for p in args.reports:
        if not Path(p).exists():
            raise MadCLIPError(f"report not found: {p}")
    text = format_table(read_csv(args.reports))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {
        "train": _cmd_train,
        "eval": lambda a: _cmd_eval(a, cross=False),
        "cross-eval": lambda a: _cmd_eval(a, cross=True),
        "predict": _cmd_predict,
        "ablate": _cmd_ablate,
        "make-synthetic": _cmd_make_synthetic,
        "describe": _cmd_describe,
        "table": _cmd_table,
    }
    try:
        handlers[args.verb](args)
    except (MadCLIPError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"madclip {args.verb}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
