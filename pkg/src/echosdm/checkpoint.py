"""Versioned checkpoint container shared by the diffusion model and the segmenter."""

from __future__ import annotations

import csv
from pathlib import Path

import torch

from .errors import DataError

FORMAT = "echosdm-checkpoint"
VERSION = 1
KINDS = ("sdm", "seg")


def save_checkpoint(path, kind: str, config: dict, step: int, model, optimizer=None, extra=None):
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "step": int(step),
        "weights": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise DataError(f"{path} is not an {FORMAT} file")
    if payload.get("version") != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload["kind"] != kind:
        raise DataError(f"{path}: expected a {kind!r} checkpoint, found {payload['kind']!r}")
    return payload


def write_trace(path, rows, header=("step", "loss")):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
