"""Command-line entry point: ``echosdm <subcommand> [--config PATH] [--preset P] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .. import plotting
from ..errors import ConfigError, DataError, EchoSDMError, NumericError
from ..labelmaps import read_label, write_image
from ..metrics import format_table
from . import stages
from .config import ALL, DATASETS, VIEWS, load_config
from .toy import generate_toy_dataset

log = logging.getLogger("echosdm")


def _common(p):
    p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    p.add_argument("--preset", choices=("toy", "paper"), default=None)
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echosdm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-data", help="write analytic phantom pairs")
    _common(p)
    p.add_argument("--patients", type=int, default=None)

    p = sub.add_parser("prepare-data", help="split, derive sectors, resample")
    _common(p)
    p.add_argument("--raw", type=Path, default=None, help="raw pair directory (overrides paths.raw)")

    p = sub.add_parser("train-sdm", help="train one view's diffusion model")
    _common(p)
    p.add_argument("--view", choices=VIEWS, required=True)

    p = sub.add_parser("sample", help="synthesize images for label maps")
    _common(p)
    p.add_argument("--view", choices=VIEWS, default=None, help="use <out>/sdm/<view>/checkpoint.pt")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--label", type=Path, action="append", required=True, help="label map (repeatable)")
    p.add_argument("--dest", type=Path, default=None, help="output folder (default <out>/samples)")

    p = sub.add_parser("build-datasets", help="augment and synthesize the five datasets")
    _common(p)

    p = sub.add_parser("train-seg", help="train a segmenter on one synthetic dataset")
    _common(p)
    p.add_argument("--dataset", choices=DATASETS + (ALL,), required=True)

    p = sub.add_parser("evaluate", help="score segmenters on the real test split")
    _common(p)
    p.add_argument("--dataset", choices=DATASETS + (ALL,), action="append", default=None)

    p = sub.add_parser("run-all", help="every stage, end to end")
    _common(p)
    return parser


def _config(args):
    cfg = load_config(args.config, args.preset, args.seed)
    if getattr(args, "raw", None) is not None:
        cfg.paths.raw = str(args.raw)
    return cfg


def _run(args) -> int:
    cfg = _config(args)
    out = args.out
    cmd = args.command
    if cmd == "toy-data":
        n = args.patients or cfg.data.toy_patients
        d = generate_toy_dataset(out / "toy_raw", n, tuple(cfg.data.resolution), cfg.stage_seed("toy"))
        print(f"wrote {n} phantom patients to {d}")
    elif cmd == "prepare-data":
        raw = cfg.paths.raw or (out / "toy_raw")
        if not Path(raw).exists():
            raise DataError(f"raw directory {raw} does not exist (run toy-data or set paths.raw)")
        cfg.dump(out / "config.yaml")
        recs = stages.prepare_data(raw, out, cfg)
        print("split,patients,pairs")
        for s in ("train", "val", "test"):
            sub = [r for r in recs if r.split == s]
            print(f"{s},{len({r.patient for r in sub})},{len(sub)}")
    elif cmd == "train-sdm":
        ckpt = stages.train_sdm_stage(out, cfg, args.view)
        print(f"checkpoint,{ckpt}")
    elif cmd == "sample":
        ckpt = args.checkpoint or (out / "sdm" / (args.view or "") / "checkpoint.pt")
        if args.checkpoint is None and args.view is None:
            raise ConfigError("sample needs --view or --checkpoint")
        model, _ = stages.load_denoiser(ckpt)
        lms = [read_label(p) for p in args.label]
        seeds = [stages.synth_seed(cfg.stage_seed("sample"), Path(p).stem, 0) for p in args.label]
        images = stages.synthesize(model, lms, seeds, cfg)
        dest = args.dest or (out / "samples")
        print("label,image,seed")
        for p, img, s in zip(args.label, images, seeds):
            ip = dest / f"{Path(p).stem.removesuffix('_gt')}_synth.png"
            write_image(ip, img)
            print(f"{p},{ip},{s}")
        plotting.plot_samples(lms, images, dest / "samples.png")
    elif cmd == "build-datasets":
        manifests = stages.build_synthetic_datasets(out, cfg)
        print("dataset,train,val")
        for name, recs in manifests.items():
            print(f"{name},{sum(r.split == 'train' for r in recs)},{sum(r.split == 'val' for r in recs)}")
    elif cmd == "train-seg":
        ckpt = stages.train_seg_stage(out, cfg, args.dataset)
        print(f"checkpoint,{ckpt}")
    elif cmd == "evaluate":
        names = args.dataset or list(DATASETS + (ALL,))
        reports = [stages.evaluate_stage(out, cfg, n) for n in names]
        if len(reports) == len(DATASETS) + 1:
            stages.write_summary(out, reports)
        print(format_table(reports), end="")
    elif cmd == "run-all":
        reports = stages.run_end_to_end(cfg, out)
        print(format_table(reports), end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _run(args)
    except stages.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except EchoSDMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())
