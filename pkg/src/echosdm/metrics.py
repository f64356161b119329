"""Dice scores per cardiac structure and Table-1 style aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labelmaps import LA, LV_ENDO, LV_MYO

STRUCTURES = ("lv_endo", "lv_epi", "la")
STRUCTURE_LABELS = {"lv_endo": "LV_endo", "lv_epi": "LV_epi", "la": "LA"}


def structure_masks(lm: np.ndarray) -> dict[str, np.ndarray]:
    lm = np.asarray(lm)
    return {
        "lv_endo": lm == LV_ENDO,
        "lv_epi": (lm == LV_ENDO) | (lm == LV_MYO),
        "la": lm == LA,
    }


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a & b| / (|a| + |b|); two empty masks score 1.0."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class DiceReport:
    dataset: str
    image_ids: list[str]
    per_image: dict[str, list[float]]
    mean: dict[str, float] = field(init=False)
    std: dict[str, float] = field(init=False)
    row_mean: float = field(init=False)
    row_std: float = field(init=False)

    def __post_init__(self):
        self.mean = {s: float(np.mean(self.per_image[s])) for s in STRUCTURES}
        self.std = {s: float(np.std(self.per_image[s])) for s in STRUCTURES}
        means = np.array([self.mean[s] for s in STRUCTURES])
        self.row_mean = float(means.mean())
        self.row_std = float(means.std())

    def table_row(self) -> str:
        cells = [f"{100 * self.mean[s]:5.1f} ± {100 * self.std[s]:4.1f}" for s in STRUCTURES]
        cells.append(f"{100 * self.row_mean:5.1f} ± {100 * self.row_std:4.1f}")
        return f"{self.dataset:<12}" + "".join(f"  {c:>14}" for c in cells)

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        txt, dump = out_dir / "report.txt", out_dir / "report.csv"
        txt.write_text(format_table([self]))
        with dump.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "structure", "dice"])
            for s in STRUCTURES:
                for image_id, v in zip(self.image_ids, self.per_image[s]):
                    w.writerow([image_id, s, repr(v)])
        return txt, dump


def format_table(reports) -> str:
    header = f"{'Train/Val':<12}" + "".join(
        f"  {h:>14}" for h in [STRUCTURE_LABELS[s] for s in STRUCTURES] + ["Mean"])
    lines = ["Dice score (%), mean ± population std", header, "-" * len(header)]
    lines += [r.table_row() for r in reports]
    return "\n".join(lines) + "\n"


def read_report_csv(path) -> dict[str, dict[str, float]]:
    """Per-image dump -> {structure: {image_id: dice}}."""
    out: dict[str, dict[str, float]] = {s: {} for s in STRUCTURES}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["structure"]][row["image_id"]] = float(row["dice"])
    return out


def score_pairs(dataset: str, pairs) -> DiceReport:
    """Build a report from ``(image_id, predicted lm, ground-truth lm)`` triples.

    Images are sorted by id so the aggregation is order independent.
    """
    pairs = sorted(pairs, key=lambda p: p[0])
    if not pairs:
        raise ValueError("cannot evaluate an empty manifest")
    per_image = {s: [] for s in STRUCTURES}
    for _, pred, gt in pairs:
        pm, gm = structure_masks(pred), structure_masks(gt)
        for s in STRUCTURES:
            per_image[s].append(dice(pm[s], gm[s]))
    return DiceReport(dataset, [p[0] for p in pairs], per_image)


def evaluate(model, items, dataset: str = "model", predict=None) -> DiceReport:
    """Score ``model`` on ``items`` = ``(image_id, image, gt lm)`` triples.

    ``predict(model, image)`` defaults to the segmenter's argmax prediction.
    """
    if predict is None:
        from .segmenter import predict_mask as predict
    items = list(items)
    if not items:
        raise ValueError("cannot evaluate an empty manifest")
    return score_pairs(dataset, [(iid, predict(model, img), gt) for iid, img, gt in items])
