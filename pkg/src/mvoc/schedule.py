"""Noise-schedule construction, the closed-form forward marginal, and the
stochastic reverse step.

Timesteps are 1-based: t in [1, T] indexes the noising chain and t = 0 is
clean data, with alpha_bar[0] = 1 as the boundary convention. Arrays are
length T+1 and indexed directly by t.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import VideoTensor
from .errors import ConfigError

__all__ = ["NoiseSchedule", "build_schedule", "forward_marginal", "ddpm_step"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients of the forward/reverse processes.

    sigma is zero everywhere by default, which makes the reverse process
    deterministic (the regime inversion requires); override with
    `with_sigma` for stochastic sampling.
    """

    total_steps: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.total_steps + 1,):
                raise ConfigError(f"{name} must have length T+1={self.total_steps + 1}")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def check_t(self, t: int, allow_zero: bool = False) -> None:
        low = 0 if allow_zero else 1
        if not (low <= t <= self.total_steps):
            raise ConfigError(
                f"timestep {t} outside [{low}, {self.total_steps}]"
            )

    def with_sigma(self, sigma: np.ndarray) -> "NoiseSchedule":
        return replace(self, sigma=np.asarray(sigma, dtype=np.float64))

    def to_config(self) -> dict:
        return {"T": self.total_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_config(cls, config: dict) -> "NoiseSchedule":
        try:
            return build_schedule(int(config["T"]), float(config["beta_start"]), float(config["beta_end"]))
        except KeyError as exc:
            raise ConfigError(f"schedule config missing key {exc}") from exc


def build_schedule(total_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with exact double-precision cumulative products."""
    if total_steps < 1:
        raise ConfigError(f"T must be >= 1, got {total_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.zeros(total_steps + 1)
    if total_steps == 1:
        beta[1] = beta_start
    else:
        beta[1:] = np.linspace(beta_start, beta_end, total_steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.zeros(total_steps + 1)
    return NoiseSchedule(
        total_steps=total_steps,
        beta_start=beta_start,
        beta_end=beta_end,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=sigma,
    )


def forward_marginal(x0: VideoTensor, t: int, noise: VideoTensor, s: NoiseSchedule) -> VideoTensor:
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise.

    The noise tensor is sampled by the caller so draws stay explicit and
    reproducible. t = 0 returns x0.
    """
    s.check_t(t, allow_zero=True)
    if x0.shape != noise.shape:
        raise ConfigError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = s.alpha_bar[t]
    return VideoTensor(np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * noise.data)


def ddpm_step(
    xt: VideoTensor,
    t: int,
    eps_pred: VideoTensor,
    noise: VideoTensor | None,
    s: NoiseSchedule,
) -> VideoTensor:
    """One reverse transition: the posterior mean from the predicted noise
    plus sigma_t * noise. With sigma_t = 0 the step is deterministic and the
    noise argument is ignored (may be None)."""
    s.check_t(t)
    if xt.shape != eps_pred.shape:
        raise ConfigError(f"eps shape {eps_pred.shape} != x shape {xt.shape}")
    a = s.alpha[t]
    ab = s.alpha_bar[t]
    mean = (xt.data - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_pred.data) / np.sqrt(a)
    sig = s.sigma[t]
    if sig == 0.0:
        return VideoTensor(mean)
    if noise is None:
        raise ConfigError("sigma_t > 0 requires an explicit noise tensor")
    if noise.shape != xt.shape:
        raise ConfigError(f"noise shape {noise.shape} != x shape {xt.shape}")
    return VideoTensor(mean + sig * noise.data)
