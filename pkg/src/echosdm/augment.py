"""
Random affine + elastic transforms for label maps, and dataset expansion.

Only label maps are warped; images are synthesised from the warped maps
afterwards. Every draw is seeded from (master seed, map id, copy index), so
results do not depend on processing order or worker count.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage
from scipy.interpolate import BSpline

log = logging.getLogger(__name__)


@dataclass
class AugmentationSpec:
    rotation_deg: tuple[float, float] = (-5.0, 5.0)
    translate_frac: tuple[float, float] = (0.0, 0.05)
    scale: tuple[float, float] = (0.8, 1.05)
    shear_deg: float = 5.0
    elastic_control_points: tuple[int, int, int] = (10, 10, 4)
    elastic_max_displacement_px: tuple[float, float, float] = (0.0, 30.0, 30.0)
    copies_per_map: int = 5

    def __post_init__(self):
        for name in ("rotation_deg", "translate_frac", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval ({lo}, {hi}) is not ordered")
            setattr(self, name, (float(lo), float(hi)))
        if self.shear_deg < 0:
            raise ValueError("shear_deg must be non-negative")
        if self.copies_per_map < 1:
            raise ValueError("copies_per_map must be >= 1")
        self.elastic_control_points = tuple(int(v) for v in self.elastic_control_points)
        self.elastic_max_displacement_px = tuple(float(v) for v in self.elastic_max_displacement_px)
        if min(self.elastic_control_points[:2]) < 4:
            raise ValueError("cubic B-spline needs at least 4 control points per axis")

    @property
    def control_grid(self) -> tuple[int, int]:
        # (rows, cols, depth): the depth entry is unused in 2D
        return self.elastic_control_points[:2]

    @property
    def max_displacement(self) -> tuple[float, float]:
        # (depth, rows, cols): the depth entry is unused in 2D
        return self.elastic_max_displacement_px[-2:]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class AffineParams:
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    shear: float = 0.0


@dataclass
class TransformRecord:
    map_id: str
    copy: int
    seed: int
    affine: AffineParams
    elastic_seed: int
    off_canvas: bool = False

    def row(self) -> dict:
        return {"map_id": self.map_id, "copy": self.copy, "seed": self.seed,
                **{k: repr(v) for k, v in asdict(self.affine).items()},
                "elastic_seed": self.elastic_seed, "off_canvas": int(self.off_canvas)}


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def sample_affine(spec: AugmentationSpec, rng: np.random.Generator) -> AffineParams:
    return AffineParams(
        rotation=float(rng.uniform(*spec.rotation_deg)),
        tx=float(rng.uniform(*spec.translate_frac)),
        ty=float(rng.uniform(*spec.translate_frac)),
        scale=float(rng.uniform(*spec.scale)),
        shear=float(rng.uniform(-spec.shear_deg, spec.shear_deg)),
    )


def affine_matrix(params: AffineParams) -> np.ndarray:
    """Forward 2x2 map in (x, y) coordinates: rotation @ shear(x) @ scale."""
    if params.scale == 0:
        raise ValueError("singular affine transform (scale 0)")
    r, sh = math.radians(params.rotation), math.radians(params.shear)
    rot = np.array([[math.cos(r), -math.sin(r)], [math.sin(r), math.cos(r)]])
    shear = np.array([[1.0, math.tan(sh)], [0.0, 1.0]])
    return rot @ shear * params.scale


def apply_affine(lm: np.ndarray, params: AffineParams) -> np.ndarray:
    """Nearest-neighbour affine warp about the image centre; uncovered pixels become 0."""
    H, W = lm.shape
    if abs(np.linalg.det(affine_matrix(params))) < 1e-12:
        raise ValueError("singular affine transform")
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pts = np.stack([rows.ravel(), cols.ravel()]).astype(np.float64)
    src = _affine_source_coords((H, W), params, pts).reshape(2, H, W)
    return ndimage.map_coordinates(lm, src, order=0, mode="constant", cval=0, output=lm.dtype)


def _bspline_basis(n_ctrl: int, n_px: int) -> np.ndarray:
    """(n_px, n_ctrl) cubic B-spline weights on a uniform knot grid.

    The image spans the central ``n_ctrl - 3`` knot intervals, so the lattice
    reaches past the border as in the usual registration-toolkit transform.
    Rows are non-negative and sum to one, so the dense field is a convex
    combination of control displacements.
    """
    k = 3
    knots = (np.arange(n_ctrl + k + 1) - k) / (n_ctrl - k)
    x = np.linspace(0.0, 1.0, n_px)
    return BSpline.design_matrix(x, knots, k).toarray()


def elastic_field(shape: tuple[int, int], spec: AugmentationSpec, seed: int) -> np.ndarray:
    """Dense displacement field (2, H, W) in pixels: [dy, dx]."""
    H, W = shape
    ny, nx = spec.control_grid
    my, mx = spec.max_displacement
    rng = np.random.default_rng(seed)
    ctrl = rng.uniform(-1.0, 1.0, size=(2, ny, nx)) * np.array([my, mx])[:, None, None]
    By, Bx = _bspline_basis(ny, H), _bspline_basis(nx, W)
    return np.stack([By @ ctrl[i] @ Bx.T for i in range(2)])


def apply_elastic(lm: np.ndarray, spec: AugmentationSpec, seed: int, return_flag: bool = False):
    H, W = lm.shape
    if max(spec.max_displacement) == 0:
        out = lm.copy()
    else:
        disp = elastic_field((H, W), spec, seed)
        rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        coords = np.stack([rows + disp[0], cols + disp[1]])
        out = ndimage.map_coordinates(lm, coords, order=0, mode="constant", cval=0,
                                      output=lm.dtype)
    off_canvas = bool(lm.any() and not out.any())
    if off_canvas:
        log.warning("elastic transform (seed %d) pushed all content off canvas", seed)
    return (out, off_canvas) if return_flag else out


def _affine_source_coords(shape, params: AffineParams, points: np.ndarray) -> np.ndarray:
    """Map output (row, col) points (2, N) back to input coordinates of the affine warp."""
    H, W = shape
    A = affine_matrix(params)
    P = np.array([[0, 1], [1, 0]])
    inv = np.linalg.inv(P @ A @ P)
    center = np.array([(H - 1) / 2, (W - 1) / 2])
    shift = np.array([params.ty * H, params.tx * W])
    return inv @ (points - (center + shift)[:, None]) + center[:, None]


def warp(lm: np.ndarray, spec: AugmentationSpec, params: AffineParams, elastic_seed: int):
    """Affine then elastic, resampled once (nearest) from the input map.

    Same geometry as ``apply_elastic(apply_affine(lm))`` without the second
    round of nearest-neighbour aliasing. Returns ``(map, off_canvas)``.
    """
    H, W = lm.shape
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pts = np.stack([rows, cols]).astype(np.float64)
    if max(spec.max_displacement) > 0:
        pts = pts + elastic_field((H, W), spec, elastic_seed)
    src = _affine_source_coords((H, W), params, pts.reshape(2, -1)).reshape(2, H, W)
    out = ndimage.map_coordinates(lm, src, order=0, mode="constant", cval=0, output=lm.dtype)
    off_canvas = bool(lm.any() and not out.any())
    if off_canvas:
        log.warning("transform (elastic seed %d) pushed all content off canvas", elastic_seed)
    return out, off_canvas


def augment_one(lm: np.ndarray, spec: AugmentationSpec, map_id: str, copy: int,
                master_seed: int) -> tuple[np.ndarray, TransformRecord]:
    seed = derive_seed("augment", master_seed, map_id, copy)
    rng = np.random.default_rng(seed)
    params = sample_affine(spec, rng)
    elastic_seed = int(rng.integers(0, 2**63 - 1))
    out, flag = warp(lm, spec, params, elastic_seed)
    return out, TransformRecord(map_id, copy, seed, params, elastic_seed, flag)


def replay(lm: np.ndarray, spec: AugmentationSpec, record: TransformRecord) -> np.ndarray:
    """Re-apply a recorded transform."""
    return warp(lm, spec, record.affine, record.elastic_seed)[0]


def _augment_job(args):
    lm, spec, map_id, copy, master_seed = args
    return augment_one(lm, spec, map_id, copy, master_seed)


def expand_dataset(maps, spec: AugmentationSpec, master_seed: int = 0, workers: int = 1):
    """Emit ``copies_per_map`` augmented copies of every map.

    ``maps`` is a sequence of ``(map_id, lm, meta)``; ``meta`` is carried
    through unchanged. Returns a list of ``(lm, record, meta)`` in input order.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("no label maps to expand")
    jobs = [(lm, spec, map_id, c, master_seed)
            for map_id, lm, _ in maps for c in range(spec.copies_per_map)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_augment_job, jobs, chunksize=8))
    else:
        results = [_augment_job(j) for j in jobs]
    metas = [meta for _, _, meta in maps for _ in range(spec.copies_per_map)]
    return [(lm, rec, meta) for (lm, rec), meta in zip(results, metas)]
