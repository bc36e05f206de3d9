"""Closed-form noise prediction over a finite dataset.

Under the Gaussian forward marginal, the exact posterior mean of the clean
data given a noisy latent is a softmax-weighted combination of the dataset
samples; the implied noise prediction and score follow by rearrangement.
This backend is oracle-grade: every value is a finite sum, so guidance math
can be checked against brute-force enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .core import VideoTensor
from .errors import ConfigError
from .schedule import NoiseSchedule

__all__ = [
    "ConditionSet",
    "NULL_CONDITION",
    "DenoiserInput",
    "Dataset",
    "posterior_mean",
    "eps_empirical",
    "score_from_eps",
]


@dataclass(frozen=True)
class ConditionSet:
    """Ordered object ids a denoiser call is conditioned on; empty = null."""

    ids: tuple[int, ...] = ()

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if len(set(ids)) != len(ids):
            raise ConfigError(f"condition ids must be unique, got {ids}")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def prefix(self, count: int) -> "ConditionSet":
        return ConditionSet(self.ids[:count])

    @property
    def is_null(self) -> bool:
        return not self.ids


NULL_CONDITION = ConditionSet(())


@dataclass(frozen=True)
class DenoiserInput:
    """Argument bundle for one denoiser evaluation."""

    xt: VideoTensor
    t: int
    condition: ConditionSet = NULL_CONDITION

    def validate_for(self, s: NoiseSchedule) -> None:
        s.check_t(self.t)


@dataclass(frozen=True)
class Dataset:
    """Clean samples with per-sample condition labels.

    A sample matches a ConditionSet when every conditioned id appears in its
    label set, so chaining conditions intersects the matching subsets.
    """

    samples: tuple[VideoTensor, ...]
    labels: tuple[frozenset[int], ...] = field(default=())

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise ConfigError("dataset needs at least one sample")
        dims = samples[0].shape
        if any(s.shape != dims for s in samples):
            raise ConfigError("dataset samples must share dims")
        labels = tuple(frozenset(int(v) for v in lab) for lab in self.labels)
        if not labels:
            labels = tuple(frozenset() for _ in samples)
        if len(labels) != len(samples):
            raise ConfigError(
                f"{len(labels)} label sets for {len(samples)} samples"
            )
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.samples[0].shape

    def conditions(self) -> frozenset[int]:
        out: set[int] = set()
        for lab in self.labels:
            out |= lab
        return frozenset(out)

    def matching(self, cond: ConditionSet) -> list[int]:
        wanted = set(cond.ids)
        return [i for i, lab in enumerate(self.labels) if wanted <= lab]

    def stacked(self) -> np.ndarray:
        return np.stack([s.data for s in self.samples])


def _posterior_weights(
    xt: VideoTensor, t: int, data: Dataset, s: NoiseSchedule, cond: ConditionSet
) -> tuple[np.ndarray, list[int]]:
    """Stable softmax weights over the cond-matching samples (uniform prior)."""
    s.check_t(t)
    if xt.shape != data.dims:
        raise ConfigError(f"latent dims {xt.shape} != dataset dims {data.dims}")
    idx = data.matching(cond)
    if not idx:
        raise ConfigError(f"no dataset sample matches condition {tuple(cond)}")
    ab = s.alpha_bar[t]
    var = 1.0 - ab
    if var <= 0.0:
        raise ConfigError(f"posterior undefined at t={t}: zero marginal variance")
    logits = np.empty(len(idx))
    for j, i in enumerate(idx):
        diff = xt.data - np.sqrt(ab) * data.samples[i].data
        logits[j] = -0.5 * float(np.sum(diff * diff)) / var
    logits -= logits.max()
    weights = np.exp(logits)
    weights /= weights.sum()
    return weights, idx


def posterior_mean(
    xt: VideoTensor,
    t: int,
    data: Dataset,
    s: NoiseSchedule,
    cond: ConditionSet = NULL_CONDITION,
) -> VideoTensor:
    """Exact MMSE estimate of the clean data: a convex combination of the
    cond-matching samples."""
    weights, idx = _posterior_weights(xt, t, data, s, cond)
    out = np.zeros(data.dims)
    for w, i in zip(weights, idx):
        out += w * data.samples[i].data
    return VideoTensor(out)


def eps_empirical(
    xt: VideoTensor,
    t: int,
    data: Dataset,
    s: NoiseSchedule,
    cond: ConditionSet = NULL_CONDITION,
) -> VideoTensor:
    """Noise prediction implied by the posterior mean:
    (xt - sqrt(alpha_bar) * E[x0 | xt]) / sqrt(1 - alpha_bar)."""
    mean = posterior_mean(xt, t, data, s, cond)
    ab = s.alpha_bar[t]
    return VideoTensor((xt.data - np.sqrt(ab) * mean.data) / np.sqrt(1.0 - ab))


def score_from_eps(eps: VideoTensor, t: int, s: NoiseSchedule) -> VideoTensor:
    """Gradient of the log marginal density: -eps / sqrt(1 - alpha_bar)."""
    s.check_t(t)
    return VideoTensor(-eps.data / np.sqrt(1.0 - s.alpha_bar[t]))


def condition_chain(ids: Iterable[int]) -> list[ConditionSet]:
    """Prefixes (null, first id, first two ids, ...) used by chained guidance."""
    full = ConditionSet(tuple(ids))
    return [full.prefix(i) for i in range(len(full) + 1)]
