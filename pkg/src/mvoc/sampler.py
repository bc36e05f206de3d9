"""Deterministic skip-step sampling and its algebraic inverse, single-step
and full-loop, with per-timestep latent caching for downstream injection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import VideoTensor
from .errors import ConfigError, NumericError
from .schedule import NoiseSchedule

__all__ = [
    "TimestepPlan",
    "uniform_plan",
    "predict_x0",
    "ddim_step",
    "ddim_invert_step",
    "SampleResult",
    "sample_loop",
    "invert_loop",
]

# callback signature: (latent, timestep, 1-based step index) -> eps prediction
EpsFn = Callable[[VideoTensor, int, int], VideoTensor]


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly decreasing timesteps visited during sampling; the final step
    lands on t = 0. Inversion walks the same plan in reverse."""

    steps: tuple[int, ...]

    def __post_init__(self):
        steps = tuple(int(t) for t in self.steps)
        if len(steps) < 1:
            raise ConfigError("plan needs at least one timestep")
        if any(t < 1 for t in steps):
            raise ConfigError(f"plan timesteps must be >= 1, got {steps}")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ConfigError(f"plan must be strictly decreasing, got {steps}")
        object.__setattr__(self, "steps", steps)

    @property
    def count(self) -> int:
        return len(self.steps)

    def validate_for(self, s: NoiseSchedule) -> None:
        if self.steps[0] > s.total_steps:
            raise ConfigError(
                f"plan starts at {self.steps[0]} but schedule ends at {s.total_steps}"
            )


def uniform_plan(total_steps: int, count: int) -> TimestepPlan:
    """Evenly strided plan, e.g. T=1000, count=50 -> 1000, 980, ..., 20."""
    if count < 1:
        raise ConfigError(f"plan count must be >= 1, got {count}")
    if count > total_steps:
        raise ConfigError(f"cannot fit {count} distinct steps in T={total_steps}")
    steps = tuple(int(round(total_steps * i / count)) for i in range(count, 0, -1))
    return TimestepPlan(steps)


def predict_x0(xt: VideoTensor, t: int, eps_pred: VideoTensor, s: NoiseSchedule) -> VideoTensor:
    """Clean-data estimate implied by a noise prediction at timestep t."""
    s.check_t(t)
    ab = s.alpha_bar[t]
    return VideoTensor((xt.data - np.sqrt(1.0 - ab) * eps_pred.data) / np.sqrt(ab))


def ddim_step(
    xt: VideoTensor,
    t: int,
    t_prev: int,
    eps_pred: VideoTensor,
    s: NoiseSchedule,
    sigma_t: float = 0.0,
    noise: VideoTensor | None = None,
) -> VideoTensor:
    """Non-Markovian reverse step from t to t_prev (t_prev may skip steps):

        sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps + sigma * noise

    sigma_t = 0 gives the deterministic, invertible regime.
    """
    s.check_t(t)
    s.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ConfigError(f"need t > t_prev, got {t} -> {t_prev}")
    if sigma_t < 0.0:
        raise NumericError(f"sigma_t must be >= 0, got {sigma_t}")
    ab_prev = s.alpha_bar[t_prev]
    residual_var = 1.0 - ab_prev - sigma_t * sigma_t
    if residual_var < 0.0:
        raise NumericError(
            f"sigma_t={sigma_t} too large at t_prev={t_prev}: 1 - alpha_bar - sigma^2 < 0"
        )
    x0_hat = predict_x0(xt, t, eps_pred, s)
    out = np.sqrt(ab_prev) * x0_hat.data + np.sqrt(residual_var) * eps_pred.data
    if sigma_t > 0.0:
        if noise is None:
            raise ConfigError("sigma_t > 0 requires an explicit noise tensor")
        out = out + sigma_t * noise.data
    return VideoTensor(out)


def ddim_invert_step(
    x_prev: VideoTensor,
    t: int,
    eps_pred: VideoTensor,
    s: NoiseSchedule,
    t_prev: int | None = None,
) -> VideoTensor:
    """Algebraic inverse of the deterministic step: maps x_{t_prev} up to x_t
    for a fixed eps prediction. t_prev defaults to t - 1."""
    s.check_t(t)
    if t_prev is None:
        t_prev = t - 1
    s.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ConfigError(f"need t > t_prev, got {t} -> {t_prev}")
    ab = s.alpha_bar[t]
    ab_prev = s.alpha_bar[t_prev]
    scale = np.sqrt(ab / ab_prev)
    shift = np.sqrt(ab) * (np.sqrt(1.0 / ab - 1.0) - np.sqrt(1.0 / ab_prev - 1.0))
    return VideoTensor(scale * x_prev.data + shift * eps_pred.data)


@dataclass(frozen=True)
class SampleResult:
    x0: VideoTensor
    trajectory: tuple[VideoTensor, ...] | None


def sample_loop(
    x_start: VideoTensor,
    plan: TimestepPlan,
    eps_fn: EpsFn,
    s: NoiseSchedule,
    keep_trajectory: bool = True,
) -> SampleResult:
    """Run the plan down to t = 0. Deterministic when the schedule's sigma is
    zero at every visited step; the trajectory holds plan.count + 1 latents
    (start included)."""
    plan.validate_for(s)
    x = x_start
    trajectory = [x] if keep_trajectory else None
    for k, t in enumerate(plan.steps):
        t_prev = plan.steps[k + 1] if k + 1 < plan.count else 0
        eps = eps_fn(x, t, k + 1)
        x = ddim_step(x, t, t_prev, eps, s, sigma_t=float(s.sigma[t]))
        if trajectory is not None:
            trajectory.append(x)
    return SampleResult(x0=x, trajectory=tuple(trajectory) if trajectory else None)


def invert_loop(
    x0: VideoTensor,
    plan: TimestepPlan,
    eps_fn: EpsFn,
    s: NoiseSchedule,
) -> dict[int, VideoTensor]:
    """Walk the plan in increasing-t order, mapping clean data to its noise
    latent, and cache the latent at every plan timestep.

    Matching the mirrored sampling loop, eps is evaluated at the current
    (less noised) latent and its timestep; the first jump starts at t = 0
    where no denoiser is defined, so its evaluation timestep clamps to 1.
    """
    plan.validate_for(s)
    cache: dict[int, VideoTensor] = {}
    x = x0
    t_prev = 0
    for k, t in enumerate(reversed(plan.steps)):
        t_eval = max(t_prev, 1)
        eps = eps_fn(x, t_eval, k + 1)
        x = ddim_invert_step(x, t, eps, s, t_prev=t_prev)
        cache[t] = x
        t_prev = t
    return cache
