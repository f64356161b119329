"""
Label maps, echo images and their file formats.

Label maps are ``uint8`` arrays over five classes::

    0  background outside the ultrasound sector
    1  ultrasound sector
    2  LV endocardium (cavity)
    3  LV myocardium
    4  left atrium

Images are float arrays in [0, 1] on disk and in [-1, 1] inside the diffusion
model.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import DataError

BACKGROUND, SECTOR, LV_ENDO, LV_MYO, LA = range(5)
NUM_CLASSES = 5
CLASS_NAMES = ("background", "sector", "lv_endo", "lv_myo", "la")
ANATOMY = (LV_ENDO, LV_MYO, LA)

# CAMUS ground truth uses 0 bg, 1 endo, 2 myo, 3 atrium
CAMUS_TO_CLASSES = np.array([BACKGROUND, LV_ENDO, LV_MYO, LA], dtype=np.uint8)

PAIR_RE = re.compile(r"^(?P<id>.+)_(?P<view>2CH|4CH)_(?P<phase>ED|ES)(?P<gt>_gt)?$")


def check_labelmap(lm: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    lm = np.asarray(lm)
    if lm.ndim != 2:
        raise DataError(f"label map must be 2D, got shape {lm.shape}")
    present = np.unique(lm)
    bad = present[(present < 0) | (present >= num_classes)]
    if bad.size:
        raise DataError(f"label map holds classes {bad.tolist()} outside 0..{num_classes - 1}; "
                        f"inventory {present.tolist()}")
    return lm.astype(np.uint8, copy=False)


def to_symmetric(img):
    return img * 2.0 - 1.0


def to_unit(img):
    return (img + 1.0) / 2.0


def encode_onehot(lm, C: int = NUM_CLASSES):
    """One-hot encode a label map (H, W) -> (C, H, W), or a batch (B, H, W) -> (B, C, H, W).

    Works on numpy arrays and on torch tensors, returning the same kind.
    """
    if isinstance(lm, torch.Tensor):
        if lm.numel() and (lm.min() < 0 or lm.max() >= C):
            raise DataError(f"class index outside 0..{C - 1}")
        oh = F.one_hot(lm.long(), C)
        return oh.movedim(-1, -3).to(torch.float32)
    lm = np.asarray(lm)
    if lm.size and (lm.min() < 0 or lm.max() >= C):
        raise DataError(f"class index {int(lm.max())} outside 0..{C - 1}")
    oh = (lm[..., None, :, :] == np.arange(C).reshape(C, 1, 1)).astype(np.float32)
    return oh


def decode_onehot(oh):
    if isinstance(oh, torch.Tensor):
        return oh.argmax(dim=-3).to(torch.uint8)
    return np.asarray(oh).argmax(axis=-3).astype(np.uint8)


def derive_sector_label(img: np.ndarray, lm: np.ndarray, tau: float = 0.0) -> np.ndarray:
    """Mark background pixels brighter than ``tau`` as sector, then close the mask.

    The closing uses a 3x3 square on an edge-padded mask so the image border
    is not eroded. Anatomy pixels are never overwritten, so the operation is
    idempotent.
    """
    img = np.asarray(img)
    lm = check_labelmap(lm)
    if img.shape != lm.shape:
        raise DataError(f"image {img.shape} and label {lm.shape} shapes differ")
    sector = ((img > tau) & (lm == BACKGROUND)) | (lm == SECTOR)
    padded = np.pad(sector, 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((3, 3), bool))[1:-1, 1:-1]
    out = lm.copy()
    out[closed & ((lm == BACKGROUND) | (lm == SECTOR))] = SECTOR
    return out


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape == tuple(size):
        return img.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0, 0].clamp(0, 1).numpy()


def resize_labels(lm: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if lm.shape == tuple(size):
        return lm
    t = torch.from_numpy(np.ascontiguousarray(lm, dtype=np.uint8))[None, None].float()
    return F.interpolate(t, size=tuple(size), mode="nearest")[0, 0].to(torch.uint8).numpy()


def write_image(path, img: np.ndarray):
    img = np.asarray(img, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise DataError(f"image values outside [0, 1] when writing {path}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(img * 255).astype(np.uint8), mode="L").save(path)


def write_label(path, lm: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(check_labelmap(lm), mode="L").save(path)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".mhd":
        arr, _ = read_metaimage(path)
        arr = arr.astype(np.float64)
        hi = 255.0 if arr.max() > 1 else 1.0
        return (arr / hi).clip(0, 1).astype(np.float32)
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I;16", "I"):
            im = im.convert("L")
        arr = np.array(im)
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: expected 8-bit grayscale, got {arr.dtype}")
    return arr.astype(np.float32) / 255.0


def read_label(path, camus: bool | None = None) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".mhd":
        arr, _ = read_metaimage(path)
        camus = True if camus is None else camus
    else:
        with Image.open(path) as im:
            arr = np.array(im)
    arr = np.asarray(arr)
    if camus:
        if arr.min() < 0 or arr.max() > 3:
            raise DataError(f"{path}: CAMUS labels must be 0..3, got {np.unique(arr).tolist()}")
        arr = CAMUS_TO_CLASSES[arr.astype(np.intp)]
    try:
        return check_labelmap(arr)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def read_pair(image_path, label_path, resolution: tuple[int, int] | None = None):
    """Read an (image, label map) pair, optionally resampling both to ``resolution``."""
    img = read_image(image_path)
    lm = read_label(label_path)
    if img.shape != lm.shape:
        raise DataError(f"pair dimension mismatch: {image_path} {img.shape} vs "
                        f"{label_path} {lm.shape}")
    if resolution is not None:
        img, lm = resize_image(img, resolution), resize_labels(lm, resolution)
    return img, lm


def write_pair(image_path, label_path, img: np.ndarray, lm: np.ndarray):
    if np.shape(img) != np.shape(lm):
        raise DataError(f"pair dimension mismatch: {np.shape(img)} vs {np.shape(lm)}")
    write_image(image_path, img)
    write_label(label_path, lm)


def parse_pair_name(path) -> dict | None:
    m = PAIR_RE.match(Path(path).stem)
    if m is None:
        return None
    return {"patient": m["id"], "view": m["view"], "phase": m["phase"], "is_label": bool(m["gt"])}


_MET_TYPES = {"MET_UCHAR": np.uint8, "MET_SHORT": np.int16, "MET_FLOAT": np.float32}


def read_metaimage(header_path):
    """Read an uncompressed 2D/3D MetaImage. Returns ``(array, spacing)``.

    Arrays come back in row-major (y, x) order; a 3D image with a singleton
    axis is squeezed to 2D.
    """
    header_path = Path(header_path)
    fields = {}
    for line in header_path.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    try:
        ndims = int(fields["NDims"])
        dims = [int(v) for v in fields["DimSize"].split()]
        etype = fields["ElementType"]
        data_file = fields["ElementDataFile"]
    except KeyError as exc:
        raise DataError(f"{header_path}: missing MetaImage field {exc}") from None
    if ndims not in (2, 3) or len(dims) != ndims:
        raise DataError(f"{header_path}: unsupported NDims={ndims} / DimSize={dims}")
    if fields.get("CompressedData", "False").lower() == "true":
        raise DataError(f"{header_path}: compressed MetaImage payloads are not supported")
    if etype not in _MET_TYPES:
        raise DataError(f"{header_path}: unsupported ElementType {etype}")
    if data_file == "LOCAL" or os.path.dirname(data_file):
        raise DataError(f"{header_path}: ElementDataFile must be a sibling file")
    big = any(fields.get(k, "False").lower() == "true"
              for k in ("BinaryDataByteOrderMSB", "ElementByteOrderMSB"))
    dtype = np.dtype(_MET_TYPES[etype]).newbyteorder(">" if big else "<")
    raw = (header_path.parent / data_file).read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise DataError(f"{header_path}: payload has {len(raw)} bytes, DimSize implies {expected}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims[::-1]).astype(dtype.newbyteorder("="))
    spacing = tuple(float(v) for v in fields.get("ElementSpacing", " ".join(["1"] * ndims)).split())
    if arr.ndim == 3 and 1 in arr.shape:
        keep = [i for i, n in enumerate(arr.shape) if n != 1]
        sp_rev = spacing[::-1]
        arr = arr.reshape([arr.shape[i] for i in keep])
        spacing = tuple(sp_rev[i] for i in keep)[::-1]
    return arr, spacing
