"""
Analytic echo phantoms for desk-scale runs.

Each phantom has a cone-shaped sector, an elliptical LV cavity inside a
myocardial ring, and an elliptical atrium below it. End-systole shrinks the
cavity area by about 20%. Images get per-class base intensities times a
smoothed multiplicative speckle field, and are exactly zero outside the cone.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..augment import derive_seed
from ..labelmaps import BACKGROUND, LA, LV_ENDO, LV_MYO, SECTOR, write_pair
from .config import PHASES, VIEWS

BASE_INTENSITY = {BACKGROUND: 0.0, SECTOR: 0.38, LV_ENDO: 0.06, LV_MYO: 0.78, LA: 0.18}
SPECKLE = 0.25
MIN_SECTOR_INTENSITY = 2.0 / 255.0

VIEW_SHAPE = {
    # cone half-angle (deg), LV tilt (deg), LV half-axes (x, y), LA half-axes (x, y)
    "4CH": dict(half_angle=40.0, tilt=-6.0, lv=(0.12, 0.18), la=(0.11, 0.075)),
    "2CH": dict(half_angle=36.0, tilt=3.0, lv=(0.10, 0.19), la=(0.095, 0.07)),
}
MYO_THICKNESS = 0.055


def cone_mask(H: int, W: int, half_angle_deg: float, depth: float = 0.95) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ay, ax = 0.02 * H, (W - 1) / 2
    dy, dx = yy - ay, xx - ax
    r = np.hypot(dx, dy)
    ang = np.degrees(np.arctan2(np.abs(dx), dy))
    return (dy >= 0) & (r <= depth * H) & (ang <= half_angle_deg)


def _ellipse(H, W, cy, cx, ry, rx, tilt_deg):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    t = math.radians(tilt_deg)
    u = (xx - cx) * math.cos(t) + (yy - cy) * math.sin(t)
    v = -(xx - cx) * math.sin(t) + (yy - cy) * math.cos(t)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def phantom_geometry(patient: int | str, view: str, seed: int) -> dict:
    rng = np.random.default_rng(derive_seed("toy-geometry", seed, patient, view))
    shape = VIEW_SHAPE[view]
    return {
        "half_angle": shape["half_angle"] + rng.uniform(-2, 2),
        "tilt": shape["tilt"] + rng.uniform(-3, 3),
        # keeps every structure a few percent inside the cone so the sector stays in one piece
        "lv_center": (0.47 + rng.uniform(-0.02, 0.02), 0.5 + rng.uniform(-0.03, 0.03)),
        "lv": tuple(a * rng.uniform(0.9, 1.1) for a in shape["lv"]),
        "la": tuple(a * rng.uniform(0.9, 1.1) for a in shape["la"]),
        "myo": MYO_THICKNESS * rng.uniform(0.9, 1.15),
    }


def phantom_labels(geom: dict, phase: str, resolution: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Label map with sector, and the analytic cone mask."""
    H, W = resolution
    cone = cone_mask(H, W, geom["half_angle"])
    cy, cx = geom["lv_center"][0] * H, geom["lv_center"][1] * W
    lv_x, lv_y = geom["lv"]
    outer = _ellipse(H, W, cy, cx, (lv_y + geom["myo"]) * H, (lv_x + geom["myo"]) * W, geom["tilt"])
    shrink = math.sqrt(0.8) if phase == "ES" else 1.0
    cavity = _ellipse(H, W, cy, cx, lv_y * shrink * H, lv_x * shrink * W, geom["tilt"])
    la_x, la_y = geom["la"]
    la_scale = 1.1 if phase == "ES" else 1.0
    t = math.radians(geom["tilt"])
    # atrium sits below the LV base along the long axis
    d = (lv_y + geom["myo"] + la_y * la_scale + 0.015) * H
    la = _ellipse(H, W, cy + d * math.cos(t), cx - d * math.sin(t),
                  la_y * la_scale * H, la_x * la_scale * W, geom["tilt"]) & ~outer

    lm = np.zeros((H, W), dtype=np.uint8)
    lm[cone] = SECTOR
    lm[outer] = LV_MYO
    lm[cavity] = LV_ENDO
    lm[la] = LA
    lm[~cone] = BACKGROUND
    return lm, cone


def speckle_image(lm: np.ndarray, rng: np.random.Generator, amount: float = SPECKLE) -> np.ndarray:
    base = np.zeros(lm.shape, dtype=np.float64)
    for cls, value in BASE_INTENSITY.items():
        base[lm == cls] = value
    noise = ndimage.gaussian_filter(rng.standard_normal(lm.shape), sigma=0.8)
    noise /= noise.std() + 1e-12
    img = base * np.clip(1.0 + amount * noise, 0.3, 1.7)
    # soften class boundaries a little, as a real acquisition would
    img = ndimage.gaussian_filter(img, sigma=0.5)
    inside = lm != BACKGROUND
    img = np.where(inside, np.clip(img, MIN_SECTOR_INTENSITY, 1.0), 0.0)
    return img.astype(np.float32)


def make_phantom(patient, view: str, phase: str, resolution=(64, 64), seed: int = 0):
    """Returns ``(image, label map, cone mask)``."""
    if min(resolution) < 32:
        raise ValueError(f"resolution {resolution} too small for phantom structures (< 32)")
    geom = phantom_geometry(patient, view, seed)
    lm, cone = phantom_labels(geom, phase, resolution)
    rng = np.random.default_rng(derive_seed("toy-speckle", seed, patient, view, phase))
    return speckle_image(lm, rng), lm, cone


def generate_toy_dataset(out_dir, n_patients: int, resolution=(64, 64), seed: int = 0) -> Path:
    """Write ``patientNNNN_<view>_<phase>.png`` / ``..._gt.png`` pairs for every patient."""
    if n_patients < 1:
        raise ValueError("need at least one patient")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in range(1, n_patients + 1):
        pid = f"patient{p:04d}"
        for view in VIEWS:
            for phase in PHASES:
                img, lm, _ = make_phantom(pid, view, phase, resolution, seed)
                stem = f"{pid}_{view}_{phase}"
                write_pair(out_dir / f"{stem}.png", out_dir / f"{stem}_gt.png", img, lm)
    return out_dir
