"""Dataset manifests: delimited text, one record per (image, label) pair."""

from __future__ import annotations

import csv
import os
from collections import defaultdict
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path

from ..errors import DataError

SPLITS = ("train", "val", "test")
SOURCES = ("real", "augmented", "synthesized")


@dataclass(frozen=True)
class Record:
    image: str
    label: str
    patient: str
    view: str
    phase: str
    split: str
    source: str = "real"
    transform_seed: str = ""
    sdm_checkpoint: str = ""
    map_id: str = ""

    @property
    def key(self) -> str:
        return f"{self.patient}_{self.view}_{self.phase}"


COLUMNS = [f.name for f in fields(Record)]


def write_manifest(path, records, base=None):
    """Write records; image/label paths are stored relative to the manifest's folder."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(base) if base is not None else None
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for r in records:
            row = asdict(r)
            for col in ("image", "label"):
                if row[col]:
                    p = Path(row[col]) if base is None else base / row[col]
                    row[col] = Path(os.path.relpath(p.resolve(), path.parent.resolve())).as_posix()
            w.writerow(row)
    return path


def read_manifest(path) -> list[Record]:
    """Read records with image/label paths resolved to absolute paths."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COLUMNS:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            for col in ("image", "label"):
                if row[col]:
                    row[col] = str((path.parent / row[col]).resolve())
            out.append(Record(**row))
    return out


def validate_manifest(records):
    seen = set()
    patient_splits = defaultdict(set)
    for r in records:
        if r.split not in SPLITS:
            raise DataError(f"unknown split {r.split!r} for {r.key}")
        if r.source not in SOURCES:
            raise DataError(f"unknown source {r.source!r} for {r.key}")
        k = (r.label, r.transform_seed)
        if k in seen:
            raise DataError(f"duplicate record for label {r.label} seed {r.transform_seed!r}")
        seen.add(k)
        patient_splits[r.patient].add(r.split)
        if r.split == "test" and r.source != "real":
            raise DataError(f"test split holds non-real record {r.key} ({r.source})")
    mixed = {p: s for p, s in patient_splits.items() if len(s) > 1}
    if mixed:
        p, s = next(iter(sorted(mixed.items())))
        raise DataError(f"patient {p} appears in several splits: {sorted(s)}")
    return records


def select(records, **criteria):
    return [r for r in records if all(getattr(r, k) == v for k, v in criteria.items())]


def with_paths(r: Record, image: str, label: str) -> Record:
    return replace(r, image=image, label=label)
