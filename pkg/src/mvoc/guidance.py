"""Multi-dependence noise-composition algebra: chained prefix-conditional
composition, the independent-condition reduction, classifier-free guidance,
and the telescoped-coefficient form.

All composers are pure algebra on equally shaped noise-prediction tensors;
evaluating the tensors is the caller's job, which keeps this module
denoiser-agnostic and directly checkable against brute-force oracles.

The chained/independent accumulators are ordered as
``acc = w * eps_i + (acc - w * eps_ref)`` rather than
``acc += w * (eps_i - eps_ref)``: the two are algebraically identical, but
only the former telescopes exactly in floating point (w = 1 reproduces the
last term bit-for-bit, w = 0 the unconditional term).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import VideoTensor
from .errors import ConfigError

__all__ = [
    "GuidanceWeights",
    "weights_to_omega",
    "compose_eps_chained",
    "compose_eps_independent",
    "cfg",
    "compose_eps_omega",
]


@dataclass(frozen=True)
class GuidanceWeights:
    """Dependency strengths w_1..w_N with the implicit w_0 = 1, w_{N+1} = 0.

    The derived telescoped coefficients always sum to 1 and may be negative;
    the instance is frozen, so they never go stale.
    """

    values: tuple[float, ...] = ()

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not all(np.isfinite(values)):
            raise ConfigError(f"guidance weights must be finite, got {values}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def omega(self) -> tuple[float, ...]:
        return weights_to_omega(self)

    @classmethod
    def uniform(cls, count: int, value: float = 1.0) -> "GuidanceWeights":
        return cls((value,) * count)


def weights_to_omega(w: GuidanceWeights | Sequence[float]) -> tuple[float, ...]:
    """Telescoped coefficients omega_i = w_i - w_{i+1} with w_0 = 1 and
    w_{N+1} = 0; the N+1 values sum to w_0 = 1."""
    values = tuple(w.values if isinstance(w, GuidanceWeights) else (float(v) for v in w))
    padded = (1.0,) + values + (0.0,)
    return tuple(padded[i] - padded[i + 1] for i in range(len(values) + 1))


def _check_terms(terms: Sequence[VideoTensor], expected: int, what: str) -> None:
    if len(terms) != expected:
        raise ConfigError(f"{what}: expected {expected} terms, got {len(terms)}")
    dims = terms[0].shape
    if any(term.shape != dims for term in terms):
        raise ConfigError(f"{what}: term dims differ")


def compose_eps_chained(
    eps_terms: Sequence[VideoTensor], w: GuidanceWeights
) -> VideoTensor:
    """eps_0 + sum_i w_i * (eps_i - eps_{i-1}) over prefix-conditional terms,
    eps_terms[0] being the unconditional prediction."""
    _check_terms(eps_terms, len(w) + 1, "chained composition")
    acc = eps_terms[0].data
    for wi, (prev, cur) in zip(w.values, zip(eps_terms, eps_terms[1:])):
        acc = wi * cur.data + (acc - wi * prev.data)
    return VideoTensor(acc)


def compose_eps_independent(
    eps_uncond: VideoTensor, eps_single: Sequence[VideoTensor], w: GuidanceWeights
) -> VideoTensor:
    """eps_0 + sum_i w_i * (eps_i - eps_0) over single-condition terms; the
    chained form collapses to this when conditions act independently."""
    _check_terms([eps_uncond, *eps_single], len(w) + 1, "independent composition")
    acc = eps_uncond.data
    for wi, term in zip(w.values, eps_single):
        acc = wi * term.data + (acc - wi * eps_uncond.data)
    return VideoTensor(acc)


def cfg(eps_uncond: VideoTensor, eps_cond: VideoTensor, w: float) -> VideoTensor:
    """Classifier-free guidance: the single-condition special case."""
    return compose_eps_chained([eps_uncond, eps_cond], GuidanceWeights((w,)))


def compose_eps_omega(
    eps_terms: Sequence[VideoTensor], omega: Sequence[float]
) -> VideoTensor:
    """sum_i omega_i * eps_i; the caller owns the coefficients (they are not
    re-checked against any weight vector here)."""
    if len(omega) != len(eps_terms):
        raise ConfigError(
            f"omega arity {len(omega)} != term count {len(eps_terms)}"
        )
    _check_terms(eps_terms, len(eps_terms), "omega composition")
    acc = float(omega[0]) * eps_terms[0].data
    for oi, term in zip(omega[1:], eps_terms[1:]):
        acc = acc + float(oi) * term.data
    return VideoTensor(acc)
