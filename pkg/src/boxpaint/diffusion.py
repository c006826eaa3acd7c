"""Noise schedule, v-parameterization, DDIM sampling and the training losses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .nn import DTYPE, ShapeError

BETA_START = 0.00085
BETA_END = 0.012


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Scaled-linear betas; ``alpha_bars[0] == 1`` and ``alpha_bars[t] = prod(1 - beta_s, s <= t)``."""

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = BETA_START
    beta_end: float = BETA_END

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int = 1000, beta_start: float = BETA_START, beta_end: float = BETA_END) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    betas[0], betas[-1] = beta_start, beta_end
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    betas.flags.writeable = False
    alpha_bars.flags.writeable = False
    return NoiseSchedule(T, betas, alpha_bars, beta_start, beta_end)


@dataclass(frozen=True)
class DdimPlan:
    taus: tuple[int, ...]
    eta: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.taus)

    def pairs(self) -> list[tuple[int, int]]:
        """``(tau, tau_prev)`` from the noisiest step down to 0."""
        seq = (0,) + self.taus
        return [(seq[i], seq[i - 1]) for i in range(len(seq) - 1, 0, -1)]

    def to_json(self) -> dict:
        return {"S": self.steps, "eta": self.eta, "taus": list(self.taus)}


def make_plan(T: int = 1000, S: int = 50, eta: float = 0.0) -> DdimPlan:
    """Uniform re-spacing ``tau_i = round(i*T/S)``, ``i = 1..S``, deduplicated."""
    if not 1 <= S <= T:
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    taus = sorted({math.floor(i * T / S + 0.5) for i in range(1, S + 1)})
    return DdimPlan(tuple(taus), eta)


def save_run_schedule(path, sched: NoiseSchedule, plan: DdimPlan) -> None:
    with open(path, "w") as fh:
        json.dump({**sched.to_json(), "S": plan.steps, "eta": plan.eta}, fh, indent=2)


# --------------------------------------------------------------------------
# latent codec


class IdentityCodec:
    """Pixel-space latents: uint8 ``(H, W, 3)`` <-> float ``(3, H, W)`` in [-1, 1]."""

    channels = 3

    def encode(self, image: np.ndarray) -> torch.Tensor:
        arr = torch.from_numpy(np.ascontiguousarray(image)).to(DTYPE)
        return arr.permute(2, 0, 1) / 127.5 - 1.0

    def decode(self, z: torch.Tensor) -> np.ndarray:
        z = z.detach().to(torch.float32).clamp(-1.0, 1.0)
        img = torch.round((z + 1.0) * 127.5).clamp(0, 255).to(torch.uint8)
        return img.permute(1, 2, 0).contiguous().numpy()


# --------------------------------------------------------------------------
# v-parameterization


def _coef(sched: NoiseSchedule, t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``(sqrt(abar_t), sqrt(1 - abar_t))`` broadcastable against a batch like ``like``."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        idx = t.to(torch.long).cpu().numpy()
        if (idx < 0).any() or (idx > sched.T).any():
            raise ValueError(f"timesteps must lie in [0, {sched.T}]")
        ab = sched.alpha_bars[idx]
        shape = (-1, *([1] * (like.dim() - 1)))
        a = torch.as_tensor(np.sqrt(ab), dtype=like.dtype).reshape(shape)
        s = torch.as_tensor(np.sqrt(1 - ab), dtype=like.dtype).reshape(shape)
        return a, s
    t = int(t)
    if not 0 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T}]")
    ab = float(sched.alpha_bars[t])
    return torch.tensor(math.sqrt(ab), dtype=like.dtype), torch.tensor(math.sqrt(1 - ab), dtype=like.dtype)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _same_shape(z0, eps, "forward_diffuse")
    a, s = _coef(sched, t, z0)
    return a * z0 + s * eps


def v_target(z0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    _same_shape(z0, eps, "v_target")
    a, s = _coef(sched, t, z0)
    return a * eps - s * z0


def predict_z0_from_v(z_t: torch.Tensor, v: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    _same_shape(z_t, v, "predict_z0_from_v")
    a, s = _coef(sched, t, z_t)
    return a * z_t - s * v


def predict_eps_from_v(z_t: torch.Tensor, v: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    _same_shape(z_t, v, "predict_eps_from_v")
    a, s = _coef(sched, t, z_t)
    return s * z_t + a * v


def ddim_sigma(sched: NoiseSchedule, tau: int, tau_prev: int, eta: float) -> float:
    ab, ab_prev = float(sched.alpha_bars[tau]), float(sched.alpha_bars[tau_prev])
    return eta * math.sqrt((1 - ab_prev) / (1 - ab)) * math.sqrt(1 - ab / ab_prev)


def ddim_step(
    z_tau: torch.Tensor,
    v_pred: torch.Tensor,
    tau: int,
    tau_prev: int,
    plan: DdimPlan,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One DDIM transition ``tau -> tau_prev`` from a v prediction.

    ``sqrt(abar_prev) * z0_hat + sqrt(1 - abar_prev - sigma^2) * eps_hat + sigma * noise``;
    with ``eta == 0`` no randomness is drawn.
    """
    if not tau > tau_prev >= 0:
        raise ValueError(f"need tau > tau_prev >= 0, got {tau}, {tau_prev}")
    _same_shape(z_tau, v_pred, "ddim_step")
    z0_hat = predict_z0_from_v(z_tau, v_pred, tau, sched)
    eps_hat = predict_eps_from_v(z_tau, v_pred, tau, sched)
    ab_prev = float(sched.alpha_bars[tau_prev])
    sigma = ddim_sigma(sched, tau, tau_prev, plan.eta)
    dir_var = 1 - ab_prev - sigma * sigma
    if dir_var < -1e-12:
        raise ValueError(f"eta={plan.eta} too large: sigma^2 exceeds 1 - abar_prev at tau={tau}")
    out = math.sqrt(ab_prev) * z0_hat
    if tau_prev > 0:
        out = out + math.sqrt(max(dir_var, 0.0)) * eps_hat
    if sigma > 0:
        noise = torch.randn(z_tau.shape, generator=generator, dtype=z_tau.dtype)
        out = out + sigma * noise
    return out


# --------------------------------------------------------------------------
# noise


def multires_noise(
    shape: tuple[int, ...], strength: float = 0.5, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Gaussian noise summed over dyadic scales with weight ``strength**i``.

    Each coarse level is nearest-upsampled, so every term has unit per-pixel
    variance and the sum is rescaled exactly to unit variance.
    """
    if not 0 <= strength < 1:
        raise ValueError(f"strength must be in [0, 1), got {strength}")
    *lead, h, w = shape
    noise = torch.randn(shape, generator=generator, dtype=DTYPE)
    if strength == 0:
        return noise
    flat = noise.reshape(-1, 1, h, w)
    total = flat.clone()
    var = 1.0
    i = 1
    while True:
        sh, sw = max(1, h >> i), max(1, w >> i)
        coarse = torch.randn((flat.shape[0], 1, sh, sw), generator=generator, dtype=DTYPE)
        weight = strength**i
        total = total + weight * F.interpolate(coarse, size=(h, w), mode="nearest")
        var += weight * weight
        if sh == 1 and sw == 1:
            break
        i += 1
    return (total / math.sqrt(var)).reshape(shape)


# --------------------------------------------------------------------------
# losses


def _diff(z: torch.Tensor, dim: int) -> torch.Tensor:
    n = z.shape[dim]
    central = z.narrow(dim, 2, n - 2) - z.narrow(dim, 0, n - 2)
    first = 2 * (z.narrow(dim, 1, 1) - z.narrow(dim, 0, 1))
    last = 2 * (z.narrow(dim, n - 1, 1) - z.narrow(dim, n - 2, 1))
    return torch.cat([first, central, last], dim=dim)


def grad_map(z: torch.Tensor) -> torch.Tensor:
    """Squared gradient magnitude summed over channels.

    ``z`` is ``(C, H, W)`` or ``(N, C, H, W)``; rows are the first spatial
    axis. Interior pixels use ``z[u+1] - z[u-1]``; borders use the one-sided
    difference doubled so the map is defined everywhere.
    """
    if z.dim() < 3:
        raise ShapeError(f"grad_map expects (C, H, W) or (N, C, H, W), got {tuple(z.shape)}")
    if z.shape[-1] < 3 or z.shape[-2] < 3:
        raise ShapeError(f"grad_map needs at least 3x3 spatial size, got {tuple(z.shape[-2:])}")
    zu = _diff(z, z.dim() - 2)
    zv = _diff(z, z.dim() - 1)
    return (zu * zu + zv * zv).sum(dim=-3)


def gradient_loss(z0_pred: torch.Tensor, z0_true: torch.Tensor, t) -> torch.Tensor:
    """``(1/t) * mean |G(pred) - G(true)|``; ``t`` may be a per-sample tensor."""
    _same_shape(z0_pred, z0_true, "gradient_loss")
    diff = (grad_map(z0_pred) - grad_map(z0_true)).abs()
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        weight = 1.0 / t.to(diff.dtype).reshape(-1, *([1] * (diff.dim() - 1)))
        return (weight * diff).mean()
    t = int(t)
    if t < 1:
        raise ValueError(f"gradient_loss needs t >= 1, got {t}")
    return diff.mean() / t


def total_loss(
    v_pred: torch.Tensor,
    v_true: torch.Tensor,
    z0_pred: torch.Tensor,
    z0_true: torch.Tensor,
    t,
    lambda1: float = 1.0,
    lambda2: float = 0.1,
) -> torch.Tensor:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"loss weights must be >= 0, got {lambda1}, {lambda2}")
    _same_shape(v_pred, v_true, "total_loss")
    loss = lambda1 * ((v_pred - v_true) ** 2).mean()
    if lambda2 > 0:
        loss = loss + lambda2 * gradient_loss(z0_pred, z0_true, t)
    return loss
