"""Diffusion mathematics: noise schedule, forward process, loss, guidance and sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Denoiser = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance schedule with cumulative signal rates.

    ``alpha_bars[t]`` is the running product of ``1 - betas[i]`` for ``i <= t``.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise ValueError("betas must be non-decreasing")
        betas.setflags(write=False)
        alpha_bars = np.cumprod(1.0 - betas)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t, like: torch.Tensor) -> torch.Tensor:
        """Gather alpha_bar at integer timestep(s) ``t`` broadcastable against ``like``."""
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 0) or torch.any(t >= self.T):
            raise ValueError(f"timestep out of range [0, {self.T})")
        ab = torch.tensor(self.alpha_bars, dtype=like.dtype)[t]
        if ab.ndim == 1:
            ab = ab.reshape(-1, *([1] * (like.ndim - 1)))
        return ab


def make_noise_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule between ``beta_start`` and ``beta_end``."""
    if int(T) != T or T < 1:
        raise ValueError("T must be a positive integer")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("require 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def diffuse_with_alpha_bar(z0: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    alpha_bar = torch.as_tensor(alpha_bar, dtype=z0.dtype)
    return alpha_bar.sqrt() * z0 + (1 - alpha_bar).sqrt() * eps


def diffuse(z0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward process q(z_t | z_0)."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    return diffuse_with_alpha_bar(z0, eps, sched.alpha_bar(t, z0))


def prior_noise_estimate(z_t: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """E[eps | z_t] when z_0 ~ N(0, I): ``sqrt(1 - alpha_bar_t) * z_t``.

    The denoiser adds its network output to this term, so an untrained network
    already predicts the noise of a unit-Gaussian latent and the high-noise end of
    sampling stays bounded.
    """
    coeff = (1 - sched.alpha_bar(t, z_t.double())).sqrt()
    return coeff.to(z_t.dtype) * z_t


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return F.mse_loss(eps_hat, eps)


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, g: float) -> torch.Tensor:
    """Classifier-free guidance. ``g == 1`` and ``g == 0`` return the branches unchanged."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    if g < 0:
        raise ValueError("guidance scale must be >= 0")
    if g == 1:
        return eps_cond
    if g == 0:
        return eps_uncond
    return eps_uncond + g * (eps_cond - eps_uncond)


@dataclass
class GuidanceConfig:
    scale: float = 3.0
    null_conditioning: Any = None

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced timesteps from ``T - 1`` down to ``0``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps ({steps}) exceeds schedule length ({T})")
    return np.round(np.linspace(T - 1, 0, steps)).astype(np.int64)


def initial_latent(shape: Sequence[int], seed: int | Sequence[int], dtype=torch.float32) -> torch.Tensor:
    """Seeded standard-normal latent. A scalar seed gives every batch item the same draw."""
    batch, *rest = shape
    seeds = [seed] * batch if np.isscalar(seed) else list(seed)
    if len(seeds) != batch:
        raise ValueError("need one seed per batch item")
    draws = []
    for s in seeds:
        gen = torch.Generator().manual_seed(int(s))
        draws.append(torch.randn(rest, generator=gen, dtype=dtype))
    return torch.stack(draws)


@torch.no_grad()
def sample(
    denoiser: Denoiser,
    cond: Any,
    sched: NoiseSchedule,
    steps: int,
    guidance: GuidanceConfig | None,
    seed: int | Sequence[int],
    shape: Sequence[int],
    second_order: bool = False,
) -> torch.Tensor:
    """Deterministic probability-flow sampling with classifier-free guidance.

    The default update is first order (DDIM with zero stochasticity). With
    ``second_order=True`` a DPM-Solver++(2M) multistep update is used instead;
    the first and last steps of that variant stay first order.
    """
    timesteps = sampling_timesteps(sched.T, steps)
    z = initial_latent(shape, seed)
    ab = torch.tensor(sched.alpha_bars, dtype=torch.float64)

    def predict(z_t, t):
        t_batch = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
        eps_c = denoiser(z_t, t_batch, cond)
        if eps_c.shape != z_t.shape:
            raise ValueError(f"denoiser returned {tuple(eps_c.shape)}, expected {tuple(z_t.shape)}")
        if guidance is None or guidance.scale == 1:
            return eps_c
        eps_u = denoiser(z_t, t_batch, guidance.null_conditioning)
        if eps_u.shape != z_t.shape:
            raise ValueError(f"denoiser returned {tuple(eps_u.shape)}, expected {tuple(z_t.shape)}")
        return cfg_combine(eps_u, eps_c, guidance.scale)

    prev_x0 = None
    prev_h = None
    for i, t in enumerate(timesteps):
        a_cur = ab[t]
        a_next = ab[timesteps[i + 1]] if i + 1 < len(timesteps) else torch.tensor(1.0, dtype=torch.float64)
        eps = predict(z, t)
        alpha_c, sigma_c = a_cur.sqrt().item(), (1 - a_cur).sqrt().item()
        alpha_n, sigma_n = a_next.sqrt().item(), (1 - a_next).sqrt().item()
        x0 = (z - sigma_c * eps) / alpha_c
        last = i + 1 == len(timesteps)
        if last:
            z = x0
            break
        if not second_order:
            z = alpha_n * x0 + sigma_n * eps
            continue
        h = float(np.log(alpha_n / sigma_n) - np.log(alpha_c / sigma_c))
        if prev_x0 is None:
            d = x0
        else:
            r = prev_h / h
            d = (1 + 1 / (2 * r)) * x0 - (1 / (2 * r)) * prev_x0
        z = (sigma_n / sigma_c) * z - alpha_n * float(np.expm1(-h)) * d
        prev_x0, prev_h = x0, h
    return z
