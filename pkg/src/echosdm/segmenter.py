"""
Multi-class U-Net segmenter and its training loop.

Encoder level ``l`` (1-based) has ``base_channels * 2**(l - 1)`` channels, so
the default ``base_channels=2`` gives 2, 4, ..., 256 over eight levels.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, NumericError
from .labelmaps import NUM_CLASSES
from . import metrics

log = logging.getLogger(__name__)


@dataclass
class UNetConfig:
    depth: int = 8
    base_channels: int = 2
    num_classes: int = NUM_CLASSES
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("U-Net depth must be >= 2")

    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** l for l in range(self.depth)]


@dataclass
class SegTrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    input_resolution: tuple[int, int] = (256, 256)
    num_classes: int = NUM_CLASSES
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_resolution"] = list(self.input_resolution)
        return d


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels()
        self.enc = nn.ModuleList()
        cin = cfg.in_channels
        for c in chs:
            self.enc.append(_double_conv(cin, c))
            cin = c
        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c_low, c_skip in zip(chs[:0:-1], chs[-2::-1]):
            self.ups.append(nn.ConvTranspose2d(c_low, c_skip, 2, stride=2))
            self.dec.append(_double_conv(2 * c_skip, c_skip))
        self.head = nn.Conv2d(chs[0], cfg.num_classes, 1)

    def forward(self, x):
        factor = 2 ** (self.cfg.depth - 1)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(f"input {tuple(x.shape[-2:])} not divisible by {factor} "
                             f"for depth {self.cfg.depth}")
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, block in zip(self.ups, self.dec):
            x = block(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def build_unet(cfg: UNetConfig, seed: int, resolution: tuple[int, int] | None = None) -> UNet:
    if resolution is not None:
        factor = 2 ** (cfg.depth - 1)
        if resolution[0] % factor or resolution[1] % factor:
            raise ValueError(f"resolution {resolution} incompatible with depth {cfg.depth}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(cfg)


@torch.no_grad()
def predict_logits(model, images: np.ndarray, batch_size: int = 16) -> torch.Tensor:
    was_training = model.training
    model.eval()
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    out = torch.cat([model(x[i:i + batch_size, None]) for i in range(0, len(x), batch_size)])
    model.train(was_training)
    return out


def argmax_lowest(logits: torch.Tensor) -> torch.Tensor:
    """Class argmax over dim 1; ties resolve to the lowest class index."""
    best = logits[:, 0].clone()
    idx = torch.zeros_like(best, dtype=torch.uint8)
    for c in range(1, logits.shape[1]):
        better = logits[:, c] > best
        best = torch.where(better, logits[:, c], best)
        idx[better] = c
    return idx


def predict_mask(model, img: np.ndarray, resolution: tuple[int, int] | None = None) -> np.ndarray:
    """Label map(s) for an image (H, W) or a stack (N, H, W) in [0, 1]."""
    img = np.asarray(img)
    if resolution is not None and tuple(img.shape[-2:]) != tuple(resolution):
        raise DataError(f"image resolution {img.shape[-2:]} != model input {tuple(resolution)}")
    masks = argmax_lowest(predict_logits(model, img)).numpy()
    return masks[0] if img.ndim == 2 else masks


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_dice: float


def mean_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    scores = [metrics.dice(a, b) for p, g in zip(pred, gt)
              for a, b in zip(metrics.structure_masks(p).values(),
                              metrics.structure_masks(g).values())]
    return float(np.mean(scores))


def train_segmenter(model, train, val, cfg: SegTrainConfig, on_abort=None, state=None):
    """Train on ``train`` = (images (N, H, W), labels (N, H, W)); select on ``val``.

    Returns ``(best_model, history, state)`` where ``state`` holds the final
    model/optimizer so training can resume with more epochs.
    """
    images, labels = (np.asarray(a) for a in train)
    val_images, val_labels = (np.asarray(a) for a in val)
    if len(images) == 0 or len(val_images) == 0:
        raise DataError("segmenter needs non-empty train and validation sets")
    if tuple(images.shape[-2:]) != cfg.input_resolution:
        raise DataError(f"training images {images.shape[-2:]} != {cfg.input_resolution}")
    x_all = torch.from_numpy(images.astype(np.float32))[:, None]
    y_all = torch.from_numpy(labels.astype(np.int64))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    gen = torch.Generator().manual_seed(cfg.seed)
    start = 0
    history: list[EpochStats] = []
    best_state, best_dice = copy.deepcopy(model.state_dict()), -1.0
    if state is not None:
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        gen.set_state(state["generator"])
        start, history = state["epoch"], list(state["history"])
        best_state, best_dice = state["best_model"], state["best_dice"]

    for epoch in range(start, cfg.epochs):
        model.train()
        perm = torch.randperm(len(x_all), generator=gen)
        losses = []
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2 and len(perm) > 1:
                continue  # batch norm needs more than one sample
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                if on_abort is not None:
                    on_abort(epoch, model, opt)
                raise NumericError(f"non-finite segmentation loss at epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_dice = mean_dice(predict_mask(model, val_images), val_labels)
        history.append(EpochStats(epoch + 1, float(np.mean(losses)), val_dice))
        if val_dice > best_dice:
            best_dice, best_state = val_dice, copy.deepcopy(model.state_dict())
        log.info("seg epoch %d/%d loss %.4f val dice %.4f", epoch + 1, cfg.epochs,
                 history[-1].train_loss, val_dice)

    state = {"model": copy.deepcopy(model.state_dict()), "optimizer": copy.deepcopy(opt.state_dict()),
             "generator": gen.get_state(), "epoch": max(start, cfg.epochs), "history": history,
             "best_model": best_state, "best_dice": best_dice}
    best = copy.deepcopy(model)
    best.load_state_dict(best_state)
    return best, history, state
