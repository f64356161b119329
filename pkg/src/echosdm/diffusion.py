"""
Forward noising, the hybrid training objective and ancestral sampling.

Timesteps ``t`` are 1-based and may be a python int or a per-sample long
tensor of shape (B,). Images live in [-1, 1] throughout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError
from .labelmaps import encode_onehot
from .schedules import NoiseSchedule
from .sdm_net import DenoiserOutput, denoise

log = logging.getLogger(__name__)


@dataclass
class DiffusionTrainConfig:
    schedule: NoiseSchedule
    lambda_vlb: float = 0.001
    p_uncond: float = 0.0
    steps: int = 2000
    batch_size: int = 8
    lr_base: float = 1e-4
    lr_anneal: str = "linear-to-zero"

    def __post_init__(self):
        if self.lambda_vlb < 0:
            raise ValueError("lambda_vlb must be non-negative")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")
        if self.lr_anneal not in ("none", "linear-to-zero"):
            raise ValueError(f"unknown lr_anneal {self.lr_anneal!r}")


@dataclass
class SamplerConfig:
    guidance_scale: float = 0.0
    use_guidance: bool = False
    seed: int = 0


def _steps(t, batch: int, device=None) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long, device=device).reshape(-1)
    return t.expand(batch) if t.numel() == 1 else t


def _gather(s: NoiseSchedule, name: str, idx: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    vals = s.tensor(name)[idx.cpu()]
    return vals.to(device=like.device, dtype=like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def _check_t(t: torch.Tensor, s: NoiseSchedule):
    if (t < 1).any() or (t > s.T).any():
        raise IndexError(f"timestep outside [1, {s.T}]: {t.tolist()}")


def q_sample(y0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    if eps.shape != y0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(y0.shape)}")
    t = _steps(t, y0.shape[0] if y0.ndim == 4 else 1)
    _check_t(t, s)
    ab = _gather(s, "alpha_bar", t, y0) if y0.ndim == 4 else float(s.alpha_bar[int(t[0])])
    if y0.ndim == 4:
        return ab.sqrt() * y0 + (1 - ab).sqrt() * eps
    return math.sqrt(ab) * y0 + math.sqrt(1 - ab) * eps


def predict_y0_from_eps(y_t, t, eps_hat, s: NoiseSchedule, clip: bool = True):
    t = _steps(t, y_t.shape[0])
    _check_t(t, s)
    ab = _gather(s, "alpha_bar", t, y_t)
    y0 = (y_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()
    return y0.clamp(-1, 1) if clip else y0


def guided_eps(eps_cond, eps_uncond, s: float):
    """Classifier-free guidance combination of conditional and null-condition noise."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return eps_cond + s * (eps_cond - eps_uncond)


def q_posterior(y0, y_t, t, s: NoiseSchedule):
    """Mean and log-variance of q(y_{t-1} | y_t, y0). log-variance is clipped at t=1."""
    t = _steps(t, y_t.shape[0])
    ab = _gather(s, "alpha_bar", t, y_t)
    ab_prev = _gather(s, "alpha_bar", t - 1, y_t)
    beta = _gather(s, "betas", t - 1, y_t)
    alpha = _gather(s, "alphas", t - 1, y_t)
    mean = (ab_prev.sqrt() * beta / (1 - ab)) * y0 + (alpha.sqrt() * (1 - ab_prev) / (1 - ab)) * y_t
    logvar = _gather(s, "posterior_log_variance_clipped", t - 1, y_t)
    return mean, logvar.expand_as(y_t)


def model_log_variance(v, t, s: NoiseSchedule):
    """Interpolate between log beta_t (v=1) and log beta_tilde_t (v=0)."""
    t = _steps(t, v.shape[0])
    max_log = _gather(s, "log_betas", t - 1, v)
    min_log = _gather(s, "posterior_log_variance_clipped", t - 1, v)
    return v * max_log + (1 - v) * min_log


def p_mean_variance(out: DenoiserOutput, y_t, t, s: NoiseSchedule, clip: bool = True):
    y0_hat = predict_y0_from_eps(y_t, t, out.eps_hat, s, clip=clip)
    mean, _ = q_posterior(y0_hat, y_t, t, s)
    return mean, model_log_variance(out.v, t, s), y0_hat


def normal_kl(mean1, logvar1, mean2, logvar2):
    """KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))), elementwise, in nats."""
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
                  + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def _std_normal_cdf(x):
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def discretized_gaussian_log_likelihood(x, means, log_scales, bin_halfwidth=1.0 / 255.0):
    """Log-probability of 8-bit data (rescaled to [-1, 1]) under a binned Gaussian."""
    centered = x - means
    inv_std = torch.exp(-log_scales)
    cdf_plus = _std_normal_cdf(inv_std * (centered + bin_halfwidth))
    cdf_min = _std_normal_cdf(inv_std * (centered - bin_halfwidth))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    log_delta = torch.log((cdf_plus - cdf_min).clamp(min=1e-12))
    return torch.where(x < -0.999, log_cdf_plus,
                       torch.where(x > 0.999, log_one_minus_cdf_min, log_delta))


def vlb_terms(out: DenoiserOutput, y0, y_t, t, s: NoiseSchedule) -> torch.Tensor:
    """Per-sample variational bound term in nats, averaged over pixels.

    The model mean is built from a detached noise estimate, so only the
    variance channel is trained by this term.
    """
    t = _steps(t, y_t.shape[0], y_t.device)
    _check_t(t, s)
    for name, x in (("eps_hat", out.eps_hat), ("v", out.v), ("y0", y0), ("y_t", y_t)):
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite {name} in variational bound")
    frozen = DenoiserOutput(eps_hat=out.eps_hat.detach(), v=out.v)
    true_mean, true_logvar = q_posterior(y0, y_t, t, s)
    mean, logvar, _ = p_mean_variance(frozen, y_t, t, s)
    dims = tuple(range(1, y_t.ndim))
    kl = normal_kl(true_mean, true_logvar, mean, logvar).mean(dim=dims)
    nll = -discretized_gaussian_log_likelihood(y0, mean, 0.5 * logvar).mean(dim=dims)
    return torch.where(t == 1, nll, kl)


def vlb_term(out: DenoiserOutput, y0, y_t, t, s: NoiseSchedule) -> torch.Tensor:
    return vlb_terms(out, y0, y_t, t, s).mean()


def hybrid_loss(denoiser, y0, x, t, eps, cfg: DiffusionTrainConfig):
    """Noise-prediction MSE plus the weighted variational bound.

    ``x`` is a one-hot condition batch, or None for the null condition.
    Returns ``(total, mse, vlb)`` as scalar tensors.
    """
    s = cfg.schedule
    y_t = q_sample(y0, t, eps, s)
    out = denoise(denoiser, y_t, t, x, T=s.T)
    mse = F.mse_loss(out.eps_hat, eps)
    vlb = vlb_term(out, y0, y_t, t, s)
    total = mse + cfg.lambda_vlb * vlb
    if not torch.isfinite(total):
        raise NumericError(f"non-finite hybrid loss (mse={mse.item()}, vlb={vlb.item()})")
    return total, mse, vlb


def _condition(d, x, device=None):
    """Label map(s) -> one-hot batch at the denoiser's class count."""
    x = torch.as_tensor(np.asarray(x)) if not isinstance(x, torch.Tensor) else x
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = encode_onehot(x, d.cfg.num_condition_classes)
    return x.to(device=device, dtype=torch.float32)


def _generators(seed, batch):
    seeds = list(seed) if isinstance(seed, (list, tuple, np.ndarray)) else [seed + i for i in range(batch)]
    if len(seeds) != batch:
        raise ValueError(f"{len(seeds)} seeds for a batch of {batch}")
    return [torch.Generator().manual_seed(int(sd)) for sd in seeds]


def _randn_like(y, gens):
    return torch.stack([torch.randn(y.shape[1:], generator=g, dtype=y.dtype) for g in gens])


@torch.no_grad()
def p_sample_step(denoiser, y_t, x, t: int, s: NoiseSchedule, sc: SamplerConfig, rng):
    """One ancestral step y_t -> y_{t-1}.

    ``x`` is a one-hot condition batch; ``rng`` is a torch.Generator or a list
    with one generator per sample.
    """
    if not 1 <= t <= s.T:
        raise IndexError(f"timestep {t} outside [1, {s.T}]")
    out = denoise(denoiser, y_t, t, x, T=s.T)
    if sc.use_guidance:
        out_null = denoise(denoiser, y_t, t, None, T=s.T)
        out = DenoiserOutput(guided_eps(out.eps_hat, out_null.eps_hat, sc.guidance_scale), out.v)
    if not (torch.isfinite(out.eps_hat).all() and torch.isfinite(out.v).all()):
        raise NumericError(f"non-finite denoiser output at t={t}")
    mean, logvar, _ = p_mean_variance(out, y_t, t, s)
    if t == 1:
        return mean
    gens = rng if isinstance(rng, (list, tuple)) else [rng] * y_t.shape[0]
    return mean + torch.exp(0.5 * logvar) * _randn_like(y_t, gens)


@torch.no_grad()
def sample(denoiser, x, s: NoiseSchedule, sc: SamplerConfig, seeds=None) -> torch.Tensor:
    """Generate images for label map(s) ``x`` ((H, W) or (B, H, W) classes).

    Each sample draws its noise from its own generator, seeded by
    ``seeds[i]`` (default ``sc.seed + i``). Returns (B, 1, H, W) in [0, 1].
    """
    was_training = denoiser.training
    denoiser.eval()
    try:
        cond = _condition(denoiser, x)
        B, _, H, W = cond.shape
        gens = _generators(sc.seed if seeds is None else seeds, B)
        y = _randn_like(torch.empty(B, 1, H, W), gens)
        for t in range(s.T, 0, -1):
            y = p_sample_step(denoiser, y, cond, t, s, sc, gens)
    finally:
        denoiser.train(was_training)
    return ((y.clamp(-1, 1) + 1) / 2)


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    vlb: list = field(default_factory=list)
    null_count: int = 0
    steps_done: int = 0


def lr_at(step: int, cfg: DiffusionTrainConfig) -> float:
    if cfg.lr_anneal == "none" or cfg.steps == 0:
        return cfg.lr_base
    return cfg.lr_base * (1.0 - step / cfg.steps)


def train_sdm(denoiser, dataset, cfg: DiffusionTrainConfig, seed: int = 0,
              on_abort=None, log_every: int = 100):
    """Optimise ``denoiser`` on paired (label map, unit image) arrays.

    ``dataset`` is a sequence of ``(lm, img)`` with ``lm`` uint8 (H, W) and
    ``img`` float in [0, 1]. ``on_abort(step, optimizer)`` is called before a
    non-finite loss is raised, so the caller can checkpoint.
    Returns ``(denoiser, TrainResult, optimizer)``.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    s = cfg.schedule
    labels = torch.from_numpy(np.stack([np.asarray(lm, dtype=np.uint8) for lm, _ in dataset]))
    images = torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for _, im in dataset]))
    images = (images * 2 - 1)[:, None]
    C = denoiser.cfg.num_condition_classes
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(denoiser.parameters(), lr=cfg.lr_base, weight_decay=0.0)
    result = TrainResult()
    denoiser.train()
    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(step, cfg)
        idx = torch.randint(len(dataset), (cfg.batch_size,), generator=gen)
        t = torch.randint(1, s.T + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn((cfg.batch_size, 1) + tuple(images.shape[-2:]), generator=gen)
        keep = torch.rand(cfg.batch_size, generator=gen) >= cfg.p_uncond
        result.null_count += int((~keep).sum())
        cond = encode_onehot(labels[idx], C) * keep[:, None, None, None]
        try:
            total, mse, vlb = hybrid_loss(denoiser, images[idx], cond, t, eps, cfg)
        except NumericError:
            if on_abort is not None:
                on_abort(step, opt)
            raise
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        result.losses.append(total.item())
        result.mse.append(mse.item())
        result.vlb.append(vlb.item())
        result.steps_done = step + 1
        if log_every and (step + 1) % log_every == 0:
            log.info("sdm step %d/%d loss %.4f", step + 1, cfg.steps,
                     float(np.mean(result.losses[-log_every:])))
    return denoiser, result, opt
