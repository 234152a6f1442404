"""Noise schedule, closed-form forward diffusion and ancestral sampling.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``schedule.beta[t - 1]``
is the variance added by step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    # model timestep used for each step; differs from 1..T only for respaced schedules
    timesteps: torch.Tensor

    def at(self, values: torch.Tensor, t: torch.Tensor, ndim: int) -> torch.Tensor:
        out = values.to(t.device)[t - 1]
        return out.reshape(-1, *([1] * (ndim - 1)))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist(), "timesteps": self.timesteps.tolist()}

    @classmethod
    def from_betas(cls, beta: torch.Tensor, timesteps: torch.Tensor | None = None) -> "NoiseSchedule":
        beta = torch.as_tensor(beta, dtype=torch.float64)
        alpha = 1.0 - beta
        T = len(beta)
        if timesteps is None:
            timesteps = torch.arange(1, T + 1)
        return cls(T, beta, alpha, torch.cumprod(alpha, 0), torch.as_tensor(timesteps, dtype=torch.long))

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls.from_betas(torch.tensor(d["beta"], dtype=torch.float64), torch.tensor(d["timesteps"]))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``T`` steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64) if T > 1 else torch.tensor(
        [beta_start], dtype=torch.float64
    )
    return NoiseSchedule.from_betas(beta)


def respace(schedule: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Strided sub-schedule with ``steps`` steps that keeps the same marginals."""
    if steps >= schedule.T:
        return schedule
    keep = torch.linspace(1, schedule.T, steps).round().long().unique()
    ab = schedule.alpha_bar[keep - 1]
    prev = torch.cat([torch.ones(1, dtype=ab.dtype), ab[:-1]])
    return NoiseSchedule.from_betas(1.0 - ab / prev, schedule.timesteps[keep - 1])


def _check_t(t: torch.Tensor, T: int):
    if (t < 1).any() or (t > T).any():
        raise ValueError(f"timestep out of range [1, {T}]: {t.tolist()}")


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1 and x0.shape[0] != 1:
        t = t.expand(x0.shape[0])
    _check_t(t, schedule.T)
    ab = schedule.at(schedule.alpha_bar, t, x0.ndim).to(x0.dtype)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def forward_step(x_prev: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One Markov step q(x_t | x_{t-1})."""
    _check_t(torch.tensor([t]), schedule.T)
    a = schedule.alpha[t - 1].item()
    return a ** 0.5 * x_prev + (1.0 - a) ** 0.5 * eps


@torch.no_grad()
def sample(model, schedule: NoiseSchedule, cond, count: int, generator: torch.Generator,
           shape: tuple[int, ...], clamp: tuple[float, float] | None = (-1.0, 1.0),
           dtype=torch.float32) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, I).

    ``model(x_t, t, cond)`` predicts the noise; ``cond`` is passed through
    unchanged (it must already be batched to ``count``).  The reverse
    variance is beta_t and no noise is added on the final step.

    With ``clamp`` set, every step clips the implied x_0 estimate to that
    range and forms the posterior mean from it, and the result is clamped
    too.  Without clipping this mean equals the plain noise-form update,
    which is what ``clamp=None`` uses.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    x = torch.randn((count, *shape), generator=generator, dtype=dtype)
    for step in range(schedule.T, 0, -1):
        t_model = torch.full((count,), int(schedule.timesteps[step - 1]), dtype=torch.long)
        eps = model(x, t_model, cond)
        a = schedule.alpha[step - 1].item()
        b = schedule.beta[step - 1].item()
        ab = schedule.alpha_bar[step - 1].item()
        if clamp is None:
            x = (x - (b / (1.0 - ab) ** 0.5) * eps) / a ** 0.5
        else:
            ab_prev = schedule.alpha_bar[step - 2].item() if step > 1 else 1.0
            x0 = ((x - (1.0 - ab) ** 0.5 * eps) / ab ** 0.5).clamp(*clamp)
            x = (ab_prev ** 0.5 * b / (1.0 - ab)) * x0 + (a ** 0.5 * (1.0 - ab_prev) / (1.0 - ab)) * x
        if step > 1:
            x = x + b ** 0.5 * torch.randn(x.shape, generator=generator, dtype=dtype)
    if clamp is not None:
        x = x.clamp(*clamp)
    return x
