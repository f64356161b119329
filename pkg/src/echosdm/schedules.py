"""
Diffusion noise schedules.

Timesteps are 1-based: ``beta[t - 1]`` is the variance added at step ``t`` and
``alpha_bar[t]`` is the cumulative signal fraction after ``t`` steps, with
``alpha_bar[0] == 1``. Everything is computed once in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BETA_CLIP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray
    offset: float | None = None
    beta_start: float | None = None
    beta_end: float | None = None
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    posterior_variance: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise ValueError(f"expected {self.T} betas, got shape {betas.shape}")
        if not np.all((betas > 0) & (betas <= BETA_CLIP)):
            raise ValueError("betas must lie in (0, 0.999]")
        alphas = 1.0 - betas
        alpha_bar = np.empty(self.T + 1, dtype=np.float64)
        alpha_bar[0] = 1.0
        # sequential product so alpha_bar[t] == alpha_bar[t-1] * alpha[t] exactly
        for t in range(1, self.T + 1):
            alpha_bar[t] = alpha_bar[t - 1] * alphas[t - 1]
        post = betas * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        for name, arr in (("betas", betas), ("alphas", alphas),
                          ("alpha_bar", alpha_bar), ("posterior_variance", post)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def beta_tilde(self, t: int) -> float:
        self._check_step(t)
        return float(self.posterior_variance[t - 1])

    @property
    def log_betas(self) -> np.ndarray:
        return np.log(self.betas)

    @property
    def posterior_log_variance_clipped(self) -> np.ndarray:
        """log(beta_tilde) with the t=1 entry (where beta_tilde is 0) replaced by t=2's."""
        if self.T == 1:
            return np.log(self.betas.copy())
        v = self.posterior_variance.copy()
        v[0] = v[1]
        return np.log(v)

    def tensor(self, name: str):
        """Cached float64 torch copy of a schedule array."""
        import torch

        cache = self.__dict__.setdefault("_tensors", {})
        if name not in cache:
            cache[name] = torch.from_numpy(np.array(getattr(self, name), dtype=np.float64))
        return cache[name]

    def _check_step(self, t: int):
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")

    def to_config(self) -> dict:
        if self.kind == "cosine":
            return {"kind": "cosine", "T": self.T, "offset": self.offset}
        return {"kind": "linear", "T": self.T,
                "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule("linear", int(T), betas, beta_start=beta_start, beta_end=beta_end)


def cosine_alpha_bar(u, offset: float = 0.008):
    """Continuous-time cumulative signal fraction f(u)/f(0) for u in [0, 1]."""
    f = lambda s: np.cos((s + offset) / (1.0 + offset) * math.pi / 2) ** 2
    return f(np.asarray(u, dtype=np.float64)) / f(0.0)


def make_cosine_schedule(T: int, offset: float = 0.008) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not offset > 0:
        raise ValueError(f"offset must be positive, got {offset}")
    ab = cosine_alpha_bar(np.arange(T + 1) / T, offset)
    betas = np.minimum(1.0 - ab[1:] / ab[:-1], BETA_CLIP)
    return NoiseSchedule("cosine", int(T), betas, offset=offset)


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    kind = cfg.get("kind")
    if kind == "cosine":
        return make_cosine_schedule(int(cfg["T"]), float(cfg.get("offset", 0.008)))
    if kind == "linear":
        return make_linear_schedule(int(cfg["T"]), float(cfg.get("beta_start", 1e-4)),
                                    float(cfg.get("beta_end", 0.02)))
    raise ValueError(f"unknown schedule kind {kind!r}")


def alpha_bar_at(s: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= s.T:
        raise IndexError(f"timestep {t} outside [0, {s.T}]")
    return float(s.alpha_bar[t])


def posterior_coefficients(s: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Mean coefficients on (y0, y_t) and variance of q(y_{t-1} | y_t, y0)."""
    s._check_step(t)
    ab_t, ab_prev = s.alpha_bar[t], s.alpha_bar[t - 1]
    denom = 1.0 - ab_t
    if denom <= 0.0:
        raise FloatingPointError(f"1 - alpha_bar underflows to 0 at t={t}")
    beta = s.betas[t - 1]
    coef_y0 = math.sqrt(ab_prev) * beta / denom
    coef_yt = math.sqrt(s.alphas[t - 1]) * (1.0 - ab_prev) / denom
    return float(coef_y0), float(coef_yt), float(s.posterior_variance[t - 1])
