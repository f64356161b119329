"""
Pipeline stages. Each stage reads and writes under one run directory::

    <out>/config.yaml                 frozen copy of the run configuration
    <out>/toy_raw/                    phantom pairs (toy preset without raw data)
    <out>/prepared/                   resampled real pairs with sector labels + manifest.csv
    <out>/sdm/<view>/                 diffusion checkpoint, loss.csv, loss.png
    <out>/datasets/<name>/            synthesized pairs, manifest.csv, transforms.csv
    <out>/seg/<name>/                 segmenter checkpoint, metrics.csv, curves.png
    <out>/reports/<name>/             report.txt, report.csv, dice.png
    <out>/reports/summary.{txt,csv,png}
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .. import plotting
from ..augment import derive_seed, expand_dataset
from ..checkpoint import load_checkpoint, save_checkpoint, write_trace
from ..diffusion import sample, train_sdm
from ..errors import ConfigError, DataError, EchoSDMError
from ..labelmaps import (derive_sector_label, parse_pair_name, read_image, read_label,
                         read_pair, write_pair)
from ..metrics import STRUCTURES, evaluate as evaluate_model, format_table
from ..sdm_net import DenoiserConfig, build_denoiser
from ..segmenter import SegTrainConfig, UNetConfig, build_unet, train_segmenter
from .config import ALL, DATASETS, PHASES, VIEWS, RunConfig, dataset_name, dataset_view_phase
from .manifest import Record, read_manifest, select, validate_manifest, write_manifest
from .toy import generate_toy_dataset

log = logging.getLogger(__name__)


class StageError(EchoSDMError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


def _paths(out):
    out = Path(out)
    return {
        "prepared": out / "prepared",
        "sdm": out / "sdm",
        "datasets": out / "datasets",
        "seg": out / "seg",
        "reports": out / "reports",
        "toy_raw": out / "toy_raw",
    }


# ---------------------------------------------------------------- data prep

def split_patients(patients, cfg: RunConfig) -> dict[str, str]:
    """Patient id -> split, drawn with the ``split`` stage seed."""
    patients = sorted(set(patients))
    n = len(patients)
    d = cfg.data
    test_fixed = sorted(set(d.test_patients or []))
    missing = set(test_fixed) - set(patients)
    if missing:
        raise DataError(f"test patients not found in raw data: {sorted(missing)}")
    if d.split_counts is not None:
        n_train, n_val, n_test = d.split_counts
        if n_train + n_val + n_test != n:
            raise ConfigError(f"split counts {tuple(d.split_counts)} do not sum to {n} patients")
    else:
        n_train = int(round(d.split_ratios[0] * n))
        n_val = int(round(d.split_ratios[1] * n))
        n_test = n - n_train - n_val
    rng = np.random.default_rng(cfg.stage_seed("split"))
    if test_fixed:
        if len(test_fixed) != n_test:
            raise ConfigError(f"{len(test_fixed)} fixed test patients but split asks for {n_test}")
        rest = [p for p in patients if p not in set(test_fixed)]
        order = [rest[i] for i in rng.permutation(len(rest))]
        assign = {p: "test" for p in test_fixed}
    else:
        order = [patients[i] for i in rng.permutation(n)]
        assign = {p: "test" for p in order[n_train + n_val:]}
    for p in order[:n_train]:
        assign[p] = "train"
    for p in order[n_train:n_train + n_val]:
        assign[p] = "val"
    return assign


def find_pairs(raw_dir) -> list[dict]:
    raw_dir = Path(raw_dir)
    images, labels = {}, {}
    for path in sorted(raw_dir.rglob("*")):
        if path.suffix.lower() not in (".png", ".mhd"):
            continue
        info = parse_pair_name(path)
        if info is None:
            continue
        key = (info["patient"], info["view"], info["phase"])
        (labels if info["is_label"] else images)[key] = path
    missing = sorted(set(images) ^ set(labels))
    if missing:
        raise DataError(f"missing pair member for {'_'.join(missing[0])}")
    if not images:
        raise DataError(f"no <id>_<view>_<phase> pairs found under {raw_dir}")
    return [{"patient": k[0], "view": k[1], "phase": k[2], "image": images[k], "label": labels[k]}
            for k in sorted(images)]


def prepare_data(raw_dir, out, cfg: RunConfig) -> list[Record]:
    """Split patients, derive sector labels, resample, write prepared pairs and manifest."""
    p = _paths(out)["prepared"]
    pairs = find_pairs(raw_dir)
    assign = split_patients([x["patient"] for x in pairs], cfg)
    res = tuple(cfg.data.resolution)
    records = []
    for x in pairs:
        img, lm = read_pair(x["image"], x["label"], resolution=res)
        lm = derive_sector_label(img, lm, cfg.data.sector_tau)
        stem = f"{x['patient']}_{x['view']}_{x['phase']}"
        ip, lp = p / "images" / f"{stem}.png", p / "labels" / f"{stem}_gt.png"
        ip.parent.mkdir(parents=True, exist_ok=True)
        lp.parent.mkdir(parents=True, exist_ok=True)
        write_pair(ip, lp, img, lm)
        records.append(Record(image=str(ip), label=str(lp), patient=x["patient"], view=x["view"],
                              phase=x["phase"], split=assign[x["patient"]], source="real",
                              map_id=stem))
    validate_manifest(records)
    write_manifest(p / "manifest.csv", records)
    log.info("prepared %d pairs: %s", len(records),
             {s: len({r.patient for r in records if r.split == s}) for s in ("train", "val", "test")})
    return records


def load_prepared(out) -> list[Record]:
    return read_manifest(_paths(out)["prepared"] / "manifest.csv")


# ---------------------------------------------------------------- diffusion

def checkpoint_id(path) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
    return f"{Path(path).parent.name}@{digest}"


def train_sdm_stage(out, cfg: RunConfig, view: str) -> Path:
    if view not in VIEWS:
        raise ConfigError(f"unknown view {view!r}")
    records = [r for r in load_prepared(out)
               if r.split == "train" and r.view == view and r.phase in cfg.diffusion.train_phases]
    if not records:
        raise DataError(f"no training pairs for view {view}")
    pairs = [(read_label(r.label), read_image(r.image)) for r in records]
    seed = cfg.stage_seed(f"sdm-{view}")
    denoiser = build_denoiser(cfg.denoiser, seed)
    tcfg = cfg.diffusion_train_config()
    d = _paths(out)["sdm"] / view
    ckpt = d / "checkpoint.pt"
    header = {"denoiser": cfg.denoiser.to_dict(), "schedule": tcfg.schedule.to_config(),
              "diffusion": cfg.to_dict()["diffusion"], "view": view}

    def on_abort(step, opt):
        save_checkpoint(d / "aborted.pt", "sdm", header, step, denoiser, opt)

    t0 = time.time()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        denoiser, result, opt = train_sdm(denoiser, pairs, tcfg, seed=seed, on_abort=on_abort)
    log.info("trained %s SDM on %d pairs in %.0fs", view, len(pairs), time.time() - t0)
    save_checkpoint(ckpt, "sdm", header, result.steps_done, denoiser, opt,
                    extra={"null_count": result.null_count})
    write_trace(d / "loss.csv", [(i + 1, v) for i, v in enumerate(result.losses)])
    write_trace(d / "loss_terms.csv", [(i + 1, m, v) for i, (m, v) in
                                       enumerate(zip(result.mse, result.vlb))],
                header=("step", "mse", "vlb"))
    plotting.plot_loss_trace(result.losses, d / "loss.png", title=f"{view} diffusion training")
    return ckpt


def load_denoiser(path):
    payload = load_checkpoint(path, "sdm")
    cfg = DenoiserConfig(**payload["config"]["denoiser"])
    model = build_denoiser(cfg, 0)
    model.load_state_dict(payload["weights"])
    model.eval()
    return model, payload


def synth_seed(master: int, map_id: str, copy: int) -> int:
    return derive_seed("synth", master, map_id, copy) % 2**63


def synthesize(model, label_maps, seeds, cfg: RunConfig) -> np.ndarray:
    """Images in [0, 1] for label maps, in fixed-size chunks of ``sampler.batch_size``."""
    sched = cfg.schedule.build()
    bs = cfg.sampler.batch_size
    out = []
    for i in range(0, len(label_maps), bs):
        chunk = np.stack(label_maps[i:i + bs])
        imgs = sample(model, chunk, sched, cfg.sampler_config(), seeds=seeds[i:i + bs])
        out.append(imgs[:, 0].numpy())
    return np.concatenate(out)


def build_synthetic_datasets(out, cfg: RunConfig, checkpoints: dict | None = None) -> dict[str, list[Record]]:
    """Augment each view/phase's train+val maps and synthesize one image per augmented map."""
    paths = _paths(out)
    checkpoints = checkpoints or {v: paths["sdm"] / v / "checkpoint.pt" for v in VIEWS}
    for v in VIEWS:
        if not Path(checkpoints.get(v, "")).exists():
            raise DataError(f"missing diffusion checkpoint for view {v}")
    prepared = load_prepared(out)
    master = cfg.stage_seed("augment")
    synth_master = cfg.stage_seed("synthesize")
    manifests = {}
    for view in VIEWS:
        model, _ = load_denoiser(checkpoints[view])
        ck_id = checkpoint_id(checkpoints[view])
        for phase in PHASES:
            name = dataset_name(view, phase)
            src = [r for r in prepared if r.view == view and r.phase == phase
                   and r.split in ("train", "val")]
            maps = [(r.map_id, read_label(r.label), r) for r in src]
            expanded = expand_dataset(maps, cfg.augment, master_seed=master, workers=cfg.workers)
            lms = [lm for lm, _, _ in expanded]
            seeds = [synth_seed(synth_master, rec.map_id, rec.copy) for _, rec, _ in expanded]
            t0 = time.time()
            images = synthesize(model, lms, seeds, cfg)
            log.info("synthesized %d images for %s in %.0fs", len(images), name, time.time() - t0)
            d = paths["datasets"] / name
            (d / "images").mkdir(parents=True, exist_ok=True)
            (d / "labels").mkdir(parents=True, exist_ok=True)
            records, rows = [], []
            for (lm, rec, parent), img, sseed in zip(expanded, images, seeds):
                stem = f"{rec.map_id}_aug{rec.copy}"
                ip, lp = d / "images" / f"{stem}.png", d / "labels" / f"{stem}_gt.png"
                write_pair(ip, lp, img, lm)
                records.append(Record(image=str(ip), label=str(lp), patient=parent.patient,
                                      view=view, phase=phase, split=parent.split,
                                      source="synthesized", transform_seed=str(rec.seed),
                                      sdm_checkpoint=ck_id, map_id=stem))
                rows.append({**rec.row(), "synth_seed": sseed})
            validate_manifest(records)
            write_manifest(d / "manifest.csv", records)
            with (d / "transforms.csv").open("w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
            plotting.plot_samples(lms, images, d / "samples.png",
                                  titles=[r.map_id for r in records])
            manifests[name] = records
    everything = [r for n in DATASETS for r in manifests[n]]
    write_manifest(paths["datasets"] / ALL / "manifest.csv", everything)
    manifests[ALL] = everything
    return manifests


def load_dataset(out, name: str) -> list[Record]:
    if name != ALL:
        dataset_view_phase(name)
    return read_manifest(_paths(out)["datasets"] / name / "manifest.csv")


# ---------------------------------------------------------------- segmentation

def _arrays(records):
    if not records:
        return np.zeros((0, 1, 1), np.float32), np.zeros((0, 1, 1), np.uint8)
    imgs = np.stack([read_image(r.image) for r in records])
    lms = np.stack([read_label(r.label) for r in records])
    return imgs, lms


def train_seg_stage(out, cfg: RunConfig, name: str) -> Path:
    records = load_dataset(out, name)
    train = _arrays(select(records, split="train"))
    val = _arrays(select(records, split="val"))
    seed = cfg.stage_seed(f"seg-{name}")
    scfg = SegTrainConfig(**{**cfg.segmenter.to_dict(), "seed": seed})
    model = build_unet(cfg.unet, seed, resolution=scfg.input_resolution)
    d = _paths(out)["seg"] / name
    header = {"unet": cfg.to_dict()["unet"], "segmenter": scfg.to_dict(), "dataset": name}

    def on_abort(epoch, m, opt):
        save_checkpoint(d / "aborted.pt", "seg", header, epoch, m, opt)

    t0 = time.time()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        best, history, state = train_segmenter(model, train, val, scfg, on_abort=on_abort)
    log.info("trained segmenter %s (%d train / %d val) in %.0fs; best val dice %.4f",
             name, len(train[0]), len(val[0]), time.time() - t0, state["best_dice"])
    ckpt = save_checkpoint(d / "checkpoint.pt", "seg", header, len(history), best,
                           extra={"best_val_dice": state["best_dice"]})
    write_trace(d / "metrics.csv", [(h.epoch, h.train_loss, h.val_dice) for h in history],
                header=("epoch", "train_loss", "val_mean_dice"))
    plotting.plot_seg_history(history, d / "curves.png", title=f"segmenter {name}")
    return ckpt


def load_segmenter(path):
    payload = load_checkpoint(path, "seg")
    ucfg = UNetConfig(**payload["config"]["unet"])
    model = build_unet(ucfg, 0)
    model.load_state_dict(payload["weights"])
    model.eval()
    return model, payload


def held_out_items(out, name: str):
    """Real test pairs; single view/phase datasets are scored on their own view/phase."""
    recs = [r for r in load_prepared(out) if r.split == "test"]
    if name != ALL:
        view, phase = dataset_view_phase(name)
        recs = [r for r in recs if r.view == view and r.phase == phase]
    if not recs:
        raise DataError(f"no test pairs for {name}")
    return [(r.map_id, read_image(r.image), read_label(r.label)) for r in recs]


def evaluate_stage(out, cfg: RunConfig, name: str):
    model, _ = load_segmenter(_paths(out)["seg"] / name / "checkpoint.pt")
    report = evaluate_model(model, held_out_items(out, name), dataset=name)
    d = _paths(out)["reports"] / name
    report.write(d)
    plotting.plot_dice_report(report, d / "dice.png")
    return report


def write_summary(out, reports):
    d = _paths(out)["reports"]
    d.mkdir(parents=True, exist_ok=True)
    (d / "summary.txt").write_text(format_table(reports))
    with (d / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset"] + [f"{s}_{k}" for s in STRUCTURES for k in ("mean", "std")]
                   + ["row_mean", "row_std", "n_images"])
        for r in reports:
            w.writerow([r.dataset] + [repr(getattr(r, k)[s]) for s in STRUCTURES for k in ("mean", "std")]
                       + [repr(r.row_mean), repr(r.row_std), len(r.image_ids)])
    plotting.plot_summary(reports, d / "summary.png")


# ---------------------------------------------------------------- end to end

def _stage(name, fn, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except EchoSDMError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, exc) from exc
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        raise StageError(name, exc) from exc


def lineage_check(out):
    """The real test patients never appear in any training or synthesis manifest."""
    test_patients = {r.patient for r in load_prepared(out) if r.split == "test"}
    for name in DATASETS + (ALL,):
        leaked = {r.patient for r in load_dataset(out, name)} & test_patients
        if leaked:
            raise DataError(f"test patients {sorted(leaked)} leaked into dataset {name}")


def run_end_to_end(cfg: RunConfig, out):
    """prepare -> 2 SDMs -> 5 synthetic datasets -> 5 segmenters -> 5 reports + summary."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    raw = cfg.paths.raw
    if raw is None:
        if cfg.preset != "toy":
            raise StageError("prepare-data", ConfigError("paths.raw is required outside the toy preset"))
        raw = _stage("toy-data", generate_toy_dataset, _paths(out)["toy_raw"],
                     cfg.data.toy_patients, tuple(cfg.data.resolution), cfg.stage_seed("toy"))
    _stage("prepare-data", prepare_data, raw, out, cfg)
    ckpts = {v: _stage(f"train-sdm[{v}]", train_sdm_stage, out, cfg, v) for v in VIEWS}
    _stage("build-datasets", build_synthetic_datasets, out, cfg, ckpts)
    _stage("lineage", lineage_check, out)
    reports = []
    for name in DATASETS + (ALL,):
        _stage(f"train-seg[{name}]", train_seg_stage, out, cfg, name)
        reports.append(_stage(f"evaluate[{name}]", evaluate_stage, out, cfg, name))
    write_summary(out, reports)
    return reports
