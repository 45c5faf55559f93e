"""Noise schedule, forward process, multi-condition loss, classifier-free guidance, samplers.

Timesteps are 1-based: t in {1..T} are noisy steps and t = 0 is the clean image
(alpha_bar(0) = 1). Diffusion runs directly in pixel space on images scaled to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Conditions


class ScheduleError(ValueError):
    """Invalid schedule parameters or out-of-range / misordered timesteps."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray  # (T,), betas[t - 1] is beta_t
    alpha_bars_: np.ndarray  # (T,), cumulative products

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alpha_bars(self) -> np.ndarray:
        return self.alpha_bars_

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at (array of) timesteps in [0, T]; alpha_bar(0) = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ScheduleError(f"timestep outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bars_])
        return padded[t]

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return float(self.betas[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ScheduleError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0 < beta_start < 1 and 0 < beta_end < 1) or beta_end < beta_start:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    if T > 1 and not np.all(np.diff(alpha_bars) < 0) or alpha_bars[-1] <= 0:
        raise ScheduleError("alpha_bar underflows to zero; shorten T or lower the betas")
    return NoiseSchedule(betas, alpha_bars)


def _coef(values: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    """Per-sample coefficients broadcast against a (B, ...) tensor."""
    c = torch.as_tensor(values, dtype=like.dtype, device=like.device).reshape(-1)
    return c.view(-1, *([1] * (like.dim() - 1))) if c.numel() > 1 else c.reshape(())


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` is a scalar or one step per leading-dim sample."""
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ScheduleError(f"timestep outside [1, {schedule.T}]")
    ab = schedule.alpha_bar(t_arr)
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * eps


def training_loss(model, x0: torch.Tensor, cond: Conditions, schedule: NoiseSchedule,
                  generator: torch.Generator, gamma_s: float = 0.2, return_details: bool = False):
    """Multi-view noise-prediction MSE.

    One timestep per scene, independent noise per view, and with probability ``gamma_s`` the
    scene-level tokens (camera + text) of a sample are replaced by their null. Box and map
    conditions are always kept.
    """
    b = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    drop = torch.rand(b, generator=generator) < gamma_s
    x_t = q_sample(x0, t.numpy(), eps, schedule)
    cond = cond.replace(scene_null=cond.scene_null | drop.to(cond.scene_null.device))
    pred = model(x_t, t, cond)
    loss = F.mse_loss(pred, eps)
    if return_details:
        return loss, {"t": t, "eps": eps, "drop": drop}
    return loss


@dataclass(frozen=True)
class CFGConfig:
    scale: float = 2.0
    map_null_mode: str = "zero_map"  # or "shared_map"

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.scale}")
        if self.map_null_mode not in ("zero_map", "shared_map"):
            raise ValueError(f"unknown map_null_mode {self.map_null_mode!r}")


def cfg_predict(model, x_t: torch.Tensor, t: torch.Tensor, cond: Conditions, cfg: CFGConfig) -> torch.Tensor:
    """eps_u + scale * (eps_c - eps_u); scale 1 and 0 skip the unused branch."""
    if cfg.scale == 1:
        return model(x_t, t, cond)
    uncond = cond.null(cfg.map_null_mode)
    if cfg.scale == 0:
        return model(x_t, t, uncond)
    b = x_t.shape[0]
    both = model(torch.cat([x_t, x_t]), torch.cat([t, t]), Conditions.cat([cond, uncond]))
    eps_c, eps_u = both[:b], both[b:]
    return eps_u + cfg.scale * (eps_c - eps_u)


def ddpm_step(x_t: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Ancestral step t -> t-1 with posterior variance; t = 1 returns the mean (no noise)."""
    if not 1 <= t <= schedule.T:
        raise ScheduleError(f"ddpm_step needs 1 <= t <= {schedule.T}, got {t}")
    beta = schedule.beta(t)
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t - 1))
    mean = (x_t - beta / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + np.sqrt(var) * noise


def ddim_step(x_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule,
              eta: float = 0.0, generator: torch.Generator | None = None, clip_x0: bool = False) -> torch.Tensor:
    if not 0 <= t_prev < t <= schedule.T:
        raise ScheduleError(f"ddim_step needs 0 <= t_prev < t <= {schedule.T}, got t={t}, t_prev={t_prev}")
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t_prev))
    x0 = (x_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    if clip_x0:
        x0 = x0.clamp(-1.0, 1.0)
        eps = (x_t - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
    x_prev = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
    if sigma > 0:
        x_prev = x_prev + sigma * torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return x_prev


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Strictly decreasing [T, ..., 0] with ``steps`` transitions."""
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps must be in [1, {T}]")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int).tolist()
    return ts


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """[-1, 1] (..., 3, H, W) -> uint8 (..., H, W, 3)."""
    x = ((x.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.movedim(-3, -1).cpu().numpy()


@torch.no_grad()
def sample(model, cond: Conditions, schedule: NoiseSchedule, steps: int = 50, cfg: CFGConfig = CFGConfig(),
           seed: int = 0, shared_noise: bool = False, eta: float = 0.0, clip_x0: bool = True) -> np.ndarray:
    """DDIM sampling with classifier-free guidance -> uint8 images (B, V, H, W, 3).

    Initial noise is drawn independently per view unless ``shared_noise``.
    """
    mcfg = model.cfg
    b, v = cond.batch_size, cond.num_views
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    shape = (b, 1 if shared_noise else v, 3, mcfg.image_h, mcfg.image_w)
    x = torch.randn(shape, generator=gen, dtype=dtype).expand(b, v, *shape[2:]).contiguous()
    ts = ddim_timesteps(schedule.T, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        t_batch = torch.full((b,), t, dtype=torch.long)
        eps = cfg_predict(model, x, t_batch, cond, cfg)
        x = ddim_step(x, eps, t, t_prev, schedule, eta, gen, clip_x0)
    return to_uint8(x)
