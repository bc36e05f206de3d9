"""Layered composition of per-object features and attention maps, the
fraction-based step scheduler that gates each tap category, and the
injection-conditioned noise prediction that feeds the guided sampler.

Feature taps blend under resampled masks after an affine transport of the
object's tap onto the composite grid. Attention maps blend by query token
(rows), keys untouched: each row is either kept or swapped for the object's
row at the transported grid position, so row-stochasticity survives any
mask. Layers apply in stacking order, so nearer objects overwrite earlier
ones wherever masks overlap.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import floor
from typing import Mapping, Sequence

import numpy as np

from .core import AffineTransform, Mask, VideoTensor, affine_apply, mask_resample
from .denoiser import ConditionSet
from .errors import ConfigError, IOFormatError
from .guidance import GuidanceWeights, compose_eps_omega
from .unet import TAP_CATEGORIES, MiniUNet, UNetConfig, UNetTapSet, _net_for

__all__ = [
    "InjectionSchedule",
    "injection_active",
    "ObjectLayer",
    "InjectionBundle",
    "compose_layers",
    "build_injection_bundle",
    "guided_eps",
]

_RATE_FIELDS = {
    "input_features": "r_fn",
    "residual": "r_fr",
    "temporal_attention": "r_at",
    "spatial_attention": "r_as",
}


@dataclass(frozen=True)
class InjectionSchedule:
    """Fractions of the sampling run, counted from the noisiest step, during
    which each tap category is overridden."""

    n_steps: int
    r_fn: float = 0.02
    r_fr: float = 0.1
    r_at: float = 1.0
    r_as: float = 1.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        for name in ("r_fn", "r_fr", "r_at", "r_as"):
            value = float(getattr(self, name))
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {value}")
            object.__setattr__(self, name, value)

    def active_steps(self, category: str) -> int:
        if category not in _RATE_FIELDS:
            raise ConfigError(f"unknown injection category {category!r}")
        rate = getattr(self, _RATE_FIELDS[category])
        # half-up rounding; Python's round() is banker's
        return int(floor(rate * self.n_steps + 0.5))

    def to_dict(self) -> dict:
        return {"r_fn": self.r_fn, "r_fr": self.r_fr, "r_at": self.r_at, "r_as": self.r_as}


def injection_active(sched: InjectionSchedule, step_index: int, category: str) -> bool:
    """True when the 1-based sampling step (1 = noisiest) falls inside the
    category's active prefix of round(r * n_steps) steps."""
    if not 1 <= step_index <= sched.n_steps:
        raise ConfigError(f"step index {step_index} outside [1, {sched.n_steps}]")
    return step_index <= sched.active_steps(category)


@dataclass(frozen=True)
class ObjectLayer:
    """One video object as a guidance layer: its placed mask in composite
    coordinates, the placement transform for its tap tensors, and a
    per-timestep tap cache from its inversion trajectory."""

    object_id: int
    mask: Mask
    transform: AffineTransform
    taps: Mapping[int, UNetTapSet]

    def taps_at(self, t: int) -> UNetTapSet:
        try:
            return self.taps[t]
        except KeyError as exc:
            raise IOFormatError(
                f"object {self.object_id}: no tap cache entry at t={t}"
            ) from exc


@dataclass(frozen=True)
class InjectionBundle:
    """Composed taps for one timestep plus the categories that fired."""

    taps: UNetTapSet
    active: tuple[tuple[str, bool], ...]

    def active_map(self) -> dict[str, bool]:
        return dict(self.active)


def _site_mask(mask: Mask, height: int, width: int) -> np.ndarray:
    return mask_resample(mask, height, width).data


def _blend_feature(
    base: np.ndarray, layer: ObjectLayer, tap: np.ndarray, video_hw: tuple[int, int]
) -> np.ndarray:
    if tap.shape != base.shape:
        raise ConfigError(
            f"layer {layer.object_id} feature tap {tap.shape} != base {base.shape}"
        )
    f, c, h, w = base.shape
    if layer.transform.is_identity():
        warped = tap
    else:
        ratio_y = h / video_hw[0]
        ratio_x = w / video_hw[1]
        warped = affine_apply(
            VideoTensor(tap), layer.transform.rescaled(ratio_y, ratio_x)
        ).data
    m = _site_mask(layer.mask, h, w)[:, None, :, :]
    return base * (1.0 - m) + warped * m


def _transport_indices(
    layer: ObjectLayer, grid_hw: tuple[int, int], video_hw: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor source token index for each grid token under the
    inverse placement, plus validity (False where the source falls off grid)."""
    h, w = grid_hw
    if layer.transform.is_identity():
        return np.arange(h * w), np.ones(h * w, dtype=bool)
    inv = layer.transform.rescaled(h / video_hw[0], w / video_hw[1]).inverse()
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    src = inv.apply_points(pts)
    iy = np.round(src[:, 0]).astype(np.int64)
    ix = np.round(src[:, 1]).astype(np.int64)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    flat = np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)
    return flat, valid


def _attention_grid(tokens: int, video_hw: tuple[int, int]) -> tuple[int, int]:
    """Recover the (h, w) token grid of an attention site from its token
    count, assuming the video's aspect ratio."""
    vh, vw = video_hw
    scale = np.sqrt(tokens / (vh * vw))
    h = int(round(vh * scale))
    w = int(round(vw * scale))
    if h * w != tokens:
        raise ConfigError(f"cannot factor {tokens} tokens onto a {vh}x{vw}-aspect grid")
    return h, w


def _blend_spatial_attention(
    base: np.ndarray, layer: ObjectLayer, tap: np.ndarray, video_hw: tuple[int, int]
) -> np.ndarray:
    if tap.shape != base.shape:
        raise ConfigError(
            f"layer {layer.object_id} spatial attention tap {tap.shape} != base {base.shape}"
        )
    f, tokens, _ = base.shape
    h, w = _attention_grid(tokens, video_hw)
    source, valid = _transport_indices(layer, (h, w), video_hw)
    transported = tap[:, source, :]
    m = _site_mask(layer.mask, h, w).reshape(f, tokens)
    m = np.where(valid[None, :], m, 0.0)
    m = m[:, :, None]
    return base * (1.0 - m) + transported * m


def _blend_temporal_attention(
    base: np.ndarray, layer: ObjectLayer, tap: np.ndarray, video_hw: tuple[int, int]
) -> np.ndarray:
    if tap.shape != base.shape:
        raise ConfigError(
            f"layer {layer.object_id} temporal attention tap {tap.shape} != base {base.shape}"
        )
    tokens, frames, _ = base.shape
    h, w = _attention_grid(tokens, video_hw)
    source, valid = _transport_indices(layer, (h, w), video_hw)
    transported = tap[source, :, :]
    m = _site_mask(layer.mask, h, w).reshape(frames, tokens).T  # (tokens, F)
    m = np.where(valid[:, None], m, 0.0)
    m = m[:, :, None]
    return base * (1.0 - m) + transported * m


def compose_layers(
    base: UNetTapSet,
    layers: Sequence[ObjectLayer],
    t: int,
    categories: Sequence[str] = TAP_CATEGORIES,
) -> UNetTapSet:
    """Iterate the layered recurrence over every requested tap category:
    each layer's (transported) tap replaces the running composition inside
    its mask, later layers winning overlaps. The base set must carry every
    requested category."""
    for category in categories:
        if category not in TAP_CATEGORIES:
            raise ConfigError(f"unknown tap category {category!r}")
        if base.get(category) is None:
            raise ConfigError(f"base tap set has no {category} entry")
    if not layers:
        return base

    video_hw = (layers[0].mask.height, layers[0].mask.width)
    fields: dict[str, object] = {c: base.get(c) for c in TAP_CATEGORIES}

    for layer in layers:
        if (layer.mask.height, layer.mask.width) != video_hw:
            raise ConfigError("layer masks must share the video resolution")
        taps = layer.taps_at(t)
        if "input_features" in categories:
            tap = taps.get("input_features")
            if tap is None:
                raise ConfigError(f"layer {layer.object_id} tap set lacks input_features")
            fields["input_features"] = _blend_feature(
                fields["input_features"], layer, tap, video_hw
            )
        if "residual" in categories:
            tap_list = taps.get("residual")
            if tap_list is None:
                raise ConfigError(f"layer {layer.object_id} tap set lacks residual taps")
            base_list = fields["residual"]
            if len(tap_list) != len(base_list):
                raise ConfigError("residual tap arity mismatch")
            fields["residual"] = tuple(
                _blend_feature(b, layer, o, video_hw)
                for b, o in zip(base_list, tap_list)
            )
        if "spatial_attention" in categories:
            tap_list = taps.get("spatial_attention")
            if tap_list is None:
                raise ConfigError(f"layer {layer.object_id} tap set lacks spatial attention")
            base_list = fields["spatial_attention"]
            if len(tap_list) != len(base_list):
                raise ConfigError("spatial attention tap arity mismatch")
            fields["spatial_attention"] = tuple(
                _blend_spatial_attention(b, layer, o, video_hw)
                for b, o in zip(base_list, tap_list)
            )
        if "temporal_attention" in categories:
            tap_list = taps.get("temporal_attention")
            if tap_list is None:
                raise ConfigError(f"layer {layer.object_id} tap set lacks temporal attention")
            base_list = fields["temporal_attention"]
            if len(tap_list) != len(base_list):
                raise ConfigError("temporal attention tap arity mismatch")
            fields["temporal_attention"] = tuple(
                _blend_temporal_attention(b, layer, o, video_hw)
                for b, o in zip(base_list, tap_list)
            )

    return UNetTapSet(
        input_features=fields["input_features"],
        residual=fields["residual"],
        spatial_attention=fields["spatial_attention"],
        temporal_attention=fields["temporal_attention"],
    )


def _gated_override(composed: UNetTapSet, active: dict[str, bool]) -> UNetTapSet | None:
    kwargs = {c: (composed.get(c) if active[c] else None) for c in TAP_CATEGORIES}
    if all(v is None for v in kwargs.values()):
        return None
    return UNetTapSet(**kwargs)


def build_injection_bundle(
    base: UNetTapSet,
    layers: Sequence[ObjectLayer],
    t: int,
    sched: InjectionSchedule,
    step_index: int,
) -> InjectionBundle:
    """Fully composed taps over all layers, gated by the step schedule."""
    active = {c: injection_active(sched, step_index, c) for c in TAP_CATEGORIES}
    live = [c for c in TAP_CATEGORIES if active[c]]
    composed = compose_layers(base, layers, t, categories=live) if live else base
    gated = _gated_override(composed, active) or UNetTapSet()
    return InjectionBundle(taps=gated, active=tuple(active.items()))


def guided_eps(
    xt: VideoTensor,
    t: int,
    step_index: int,
    layers: Sequence[ObjectLayer],
    sched: InjectionSchedule,
    unet: MiniUNet | UNetConfig,
    base_condition: ConditionSet,
    weights: GuidanceWeights,
) -> VideoTensor:
    """Injection-conditioned composite noise prediction for one step.

    Term i runs the network on the current latent with overrides composed
    from the first i layers (term 0 is the plain pass, whose own taps seed
    the recurrence); the terms combine under the telescoped coefficients.
    Categories outside their active window pass no override.
    """
    if len(weights) != len(layers):
        raise ConfigError(
            f"{len(weights)} guidance weights for {len(layers)} layers"
        )
    net = _net_for(unet) if isinstance(unet, UNetConfig) else unet
    omega = weights.omega

    eps0, base_taps = net.forward(xt, t, base_condition, record=True)
    active = {c: injection_active(sched, step_index, c) for c in TAP_CATEGORIES}
    live = [c for c in TAP_CATEGORIES if active[c]]
    if not layers or not live:
        return compose_eps_omega([eps0] * (len(layers) + 1), omega)

    terms = [eps0]
    composed = base_taps
    for layer in layers:
        composed = compose_layers(composed, [layer], t, categories=live)
        override = _gated_override(composed, active)
        eps_i, _ = net.forward(xt, t, base_condition, override=override)
        terms.append(eps_i)
    return compose_eps_omega(terms, omega)
