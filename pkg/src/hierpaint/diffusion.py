"""
DDPM machinery: noise schedule, forward corruption, context images,
the noise-prediction loss and the mask-conditioned ancestral sampler.

Slice stacks are numpy arrays of shape (b, h, w). Denoisers are called as
``denoiser(x_t, x_m, m, t)`` with float32 tensors of shape (b, 1, h, w) and
an int64 timestep tensor of shape (b,), and must return a noise estimate
shaped like ``x_t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigurationError, NumericalError

INPAINT = "inpaint"
REFINE = "refine"


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed variance tables for ``T`` diffusion steps (float64)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start < 1:
        raise ConfigurationError(f"beta_start must lie in (0, 1), got {beta_start}")
    if not 0 < beta_end < 1:
        raise ConfigurationError(f"beta_end must lie in (0, 1), got {beta_end}")
    if beta_start > beta_end:
        raise ConfigurationError(f"beta_start ({beta_start}) exceeds beta_end ({beta_end})")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_t(t, schedule: NoiseSchedule) -> int:
    if int(t) != t or not 0 <= t < schedule.T:
        raise ConfigurationError(f"timestep {t} outside [0, {schedule.T})")
    return int(t)


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Sample x_t from q(x_t | x_0) using the closed-form marginal.

    Works on numpy arrays and torch tensors alike.
    """
    t = _check_t(t, schedule)
    if tuple(x0.shape) != tuple(eps.shape):
        raise ConfigurationError(f"noise shape {tuple(eps.shape)} does not match x0 shape {tuple(x0.shape)}")
    ab = schedule.alpha_bar[t]
    return float(np.sqrt(ab)) * x0 + float(np.sqrt(1.0 - ab)) * eps


def _check_mask(x0: np.ndarray, m: np.ndarray) -> None:
    if x0.shape != m.shape:
        raise ConfigurationError(f"mask shape {m.shape} does not match image shape {x0.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ConfigurationError("mask must be binary with values in {0, 1}")


def build_context_inpaint(x0: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Context for inpainting: the clean image with the masked region zeroed."""
    x0 = np.asarray(x0)
    m = np.asarray(m)
    _check_mask(x0, m)
    return np.where(m > 0, np.zeros((), dtype=x0.dtype), x0)


def build_context_refine(x0: np.ndarray, m: np.ndarray, blur_sigma: float = 1.0) -> np.ndarray:
    """Context for refinement: in-plane Gaussian blur of x0 inside the mask.

    The blur acts on the last two axes (each slice independently), truncated
    at 4 sigma with reflect boundaries.
    """
    x0 = np.asarray(x0)
    m = np.asarray(m)
    _check_mask(x0, m)
    if not blur_sigma > 0:
        raise ConfigurationError(f"blur_sigma must be positive, got {blur_sigma}")
    sigma = (0.0,) * (x0.ndim - 2) + (blur_sigma, blur_sigma)
    blurred = ndimage.gaussian_filter(x0, sigma=sigma, mode="reflect", truncate=4.0)
    return np.where(m > 0, blurred.astype(x0.dtype, copy=False), x0)


def build_context(x0: np.ndarray, m: np.ndarray, mode: str, blur_sigma: float = 1.0) -> np.ndarray:
    if mode == INPAINT:
        return build_context_inpaint(x0, m)
    if mode == REFINE:
        return build_context_refine(x0, m, blur_sigma)
    raise ConfigurationError(f"unknown context mode {mode!r}; expected {INPAINT!r} or {REFINE!r}")


def _device_of(denoiser) -> torch.device:
    if isinstance(denoiser, torch.nn.Module):
        for p in denoiser.parameters():
            return p.device
    return torch.device("cpu")


def _as_input(a: np.ndarray, device) -> torch.Tensor:
    # (b, h, w) -> (b, 1, h, w)
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)).unsqueeze(1).to(device)


def training_loss(denoiser, x0, m, context_mode, schedule, rng, blur_sigma=1.0, t=None):
    """Masked noise-prediction MSE for one slice stack.

    A single timestep is drawn for the whole stack (the slices of a stack
    are denoised jointly at sampling time). The squared error is averaged
    over voxels with m=1.

    Returns a scalar torch tensor attached to the denoiser's graph.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    m = np.asarray(m, dtype=np.float32)
    x_m = build_context(x0, m, context_mode, blur_sigma)
    if m.sum() == 0:
        raise ConfigurationError("training_loss needs a nonempty mask")
    if t is None:
        t = int(rng.integers(schedule.T))
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    x_t = forward_diffuse(x0, t, eps, schedule)

    device = _device_of(denoiser)
    m_t = _as_input(m, device)
    eps_t = _as_input(eps, device)
    t_vec = torch.full((x0.shape[0],), t, dtype=torch.long, device=device)
    pred = denoiser(_as_input(x_t, device), _as_input(x_m, device), m_t, t_vec)
    if not torch.isfinite(pred).all():
        raise NumericalError(f"non-finite noise prediction at timestep {t}", stage="train")
    return ((pred - eps_t) ** 2 * m_t).sum() / m_t.sum()


def respaced_timesteps(T: int, steps: int | None) -> np.ndarray:
    """Evenly spaced subset of [0, T) used by the sampler, ascending.

    ``steps=T`` (or None) gives every step; ``steps=1`` gives only T-1.
    """
    if steps is None:
        steps = T
    if int(steps) != steps or not 1 <= steps <= T:
        raise ConfigurationError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T - 1])
    return np.unique(np.round(np.linspace(0, T - 1, int(steps))).astype(np.int64))


@torch.no_grad()
def sample_inpaint(denoiser, x0, m, schedule, rng, steps=None, context=None, clip=True):
    """Ancestral DDPM sampling of the masked region.

    Starts from pure noise and runs the reverse process over the (possibly
    respaced) timesteps, with posterior variance fixed to beta. ``context``
    defaults to the inpainting context of ``x0``; the refinement stage
    passes its own. The result is composited so voxels with m=0 are copied
    from ``x0`` unchanged.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    m = np.asarray(m, dtype=np.float32)
    _check_mask(x0, m)
    if not m.any():
        return x0.copy()
    x_m = build_context_inpaint(x0, m) if context is None else np.asarray(context, dtype=np.float32)
    if x_m.shape != x0.shape:
        raise ConfigurationError(f"context shape {x_m.shape} does not match image shape {x0.shape}")

    device = _device_of(denoiser)
    x_m_t = _as_input(x_m, device)
    m_t = _as_input(m, device)
    timesteps = respaced_timesteps(schedule.T, steps)
    ab = schedule.alpha_bar

    x = _as_input(rng.standard_normal(x0.shape, dtype=np.float32), device)
    for i in range(len(timesteps) - 1, -1, -1):
        t = int(timesteps[i])
        ab_t = ab[t]
        ab_prev = ab[timesteps[i - 1]] if i > 0 else 1.0
        beta = 1.0 - ab_t / ab_prev

        t_vec = torch.full((x0.shape[0],), t, dtype=torch.long, device=device)
        eps_hat = denoiser(x, x_m_t, m_t, t_vec)
        if not torch.isfinite(eps_hat).all():
            raise NumericalError("non-finite noise prediction", stage="sample", step=t)

        x0_hat = (x - float(np.sqrt(1.0 - ab_t)) * eps_hat) / float(np.sqrt(ab_t))
        if clip:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
        coef_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
        coef_xt = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
        x = float(coef_x0) * x0_hat + float(coef_xt) * x
        if i > 0:
            z = _as_input(rng.standard_normal(x0.shape, dtype=np.float32), device)
            x = x + float(np.sqrt(beta)) * z

    out = x.squeeze(1).cpu().numpy()
    if not np.isfinite(out).all():
        raise NumericalError("non-finite sample", stage="sample", step=0)
    return np.where(m > 0, out, x0)
