"""Deterministic mini-UNet noise predictor with spatial/temporal attention
and injection taps.

The network is never trained: weights come from a seeded Gaussian init and
stay fixed, because injection correctness is a dataflow property. Layout:

    assemble input (latent + time channel + one-hot condition channels)
      -> input conv (full res)
      -> down block 1: pool /2, residual, spatial attn, temporal attn
      -> down block 2: pool /2, residual, spatial attn, temporal attn
      -> bottleneck residual
      -> up block 1: concat skip, residual, spatial attn, temporal attn, up x2
      -> up block 2: concat skip, residual, spatial attn, temporal attn, up x2
      -> output conv (full res)

Tap sites: the assembled input features (one tensor), the five residual
block outputs, and the four post-softmax spatial / temporal attention maps.
Attention runs on the pooled grids so recorded maps stay small. An override
replaces the tensor at its site before anything downstream runs; attention
overrides swap the post-softmax map before the value product.

Internal compute is float32 in channels-last layout for speed; taps are
exposed as float32 arrays in (F, C, H, W) / token layout, and overrides are
cast back to float32, so a recorded tap re-injected at its own site
reproduces the pass bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import VideoTensor
from .denoiser import ConditionSet, NULL_CONDITION
from .errors import ConfigError

__all__ = ["UNetConfig", "UNetTapSet", "MiniUNet", "unet_forward", "TAP_CATEGORIES"]

TAP_CATEGORIES = ("input_features", "residual", "spatial_attention", "temporal_attention")

RESIDUAL_SITES = 5
ATTENTION_SITES = 4


@dataclass(frozen=True)
class UNetConfig:
    """Architecture and init parameters; hashable so nets can be memoized."""

    in_channels: int
    base_channels: int = 16
    mid_channels: int = 32
    max_objects: int = 4
    time_scale: float = 1000.0
    init_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1 or self.mid_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.max_objects < 1:
            raise ConfigError("max_objects must be >= 1")

    @property
    def assembled_channels(self) -> int:
        return self.in_channels + 1 + self.max_objects

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "mid_channels": self.mid_channels,
            "max_objects": self.max_objects,
            "time_scale": self.time_scale,
            "init_scale": self.init_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


@dataclass
class UNetTapSet:
    """Tapped tensors for one forward pass. A None field means "no tap
    recorded / do not override"; populated fields must be complete (per-site
    None entries inside a tuple skip that site)."""

    input_features: np.ndarray | None = None
    residual: tuple[np.ndarray, ...] | None = None
    spatial_attention: tuple[np.ndarray, ...] | None = None
    temporal_attention: tuple[np.ndarray, ...] | None = None

    def get(self, category: str):
        if category not in TAP_CATEGORIES:
            raise ConfigError(f"unknown tap category {category!r}")
        return getattr(self, category)


def _conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 same-padding convolution on channels-last (F, H, W, C) input;
    kernel layout is (3, 3, C_in, C_out)."""
    f, h, w, c = x.shape
    c_out = kernel.shape[-1]
    padded = np.zeros((f, h + 2, w + 2, c), dtype=np.float32)
    padded[:, 1:-1, 1:-1, :] = x
    out = np.broadcast_to(bias, (f, h, w, c_out)).copy()
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy : dy + h, dx : dx + w, :] @ kernel[dy, dx]
    return out


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    f, h, w, c = x.shape
    return x.reshape(f, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4), dtype=np.float32)


def _upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


class MiniUNet:
    """Seeded, training-free noise predictor exposing injection taps."""

    def __init__(self, config: UNetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        scale = config.init_scale
        cb, cm = config.base_channels, config.mid_channels
        ca = config.assembled_channels

        def conv(c_out, c_in, k=3):
            if k == 3:
                # stored as (3, 3, C_in, C_out) for the channels-last conv
                kernel = np.ascontiguousarray(
                    rng.normal(0.0, scale, (c_out, c_in, 3, 3)).astype(np.float32)
                    .transpose(2, 3, 1, 0)
                )
            else:
                kernel = rng.normal(0.0, scale, (c_out, c_in)).astype(np.float32)
            return kernel, np.zeros(c_out, dtype=np.float32)

        def proj(c):
            return rng.normal(0.0, scale, (c, c)).astype(np.float32)

        self.conv_in = conv(cb, ca)
        # residual blocks: conv1, conv2, optional 1x1 skip projection
        self.res = []
        for c_in, c_out in [(cb, cb), (cb, cm), (cm, cm), (cm + cm, cb), (cb + cb, cb)]:
            self.res.append(
                {
                    "conv1": conv(c_out, c_in),
                    "conv2": conv(c_out, c_out),
                    "proj": conv(c_out, c_in, k=1) if c_in != c_out else None,
                }
            )
        # attention sites share the channel width of their residual output
        self.attn = []
        for c in [cb, cm, cb, cb]:
            self.attn.append(
                {
                    "spatial": {k: proj(c) for k in ("wq", "wk", "wv", "wo")},
                    "temporal": {k: proj(c) for k in ("wq", "wk", "wv", "wo")},
                }
            )
        self.conv_out = conv(config.in_channels, cb)

    # -- sites ---------------------------------------------------------

    def _residual_block(self, x: np.ndarray, index: int) -> np.ndarray:
        block = self.res[index]
        h = np.tanh(_conv2d(x, *block["conv1"]))
        h = _conv2d(h, *block["conv2"])
        if block["proj"] is None:
            skip = x
        else:
            kernel, bias = block["proj"]
            skip = x @ kernel.T + bias
        return skip + h

    def _spatial_attention(self, x, index, taps, override):
        f, h, w, c = x.shape
        weights = self.attn[index]["spatial"]
        tokens = x.reshape(f, h * w, c)
        q = tokens @ weights["wq"]
        k = tokens @ weights["wk"]
        v = tokens @ weights["wv"]
        attn = _softmax_rows(q @ k.transpose(0, 2, 1) / np.float32(np.sqrt(c)))
        attn = self._swap_attention(attn, "spatial_attention", index, taps, override)
        out = (attn @ v) @ weights["wo"]
        return x + out.reshape(f, h, w, c)

    def _temporal_attention(self, x, index, taps, override):
        f, h, w, c = x.shape
        weights = self.attn[index]["temporal"]
        tokens = np.ascontiguousarray(x.reshape(f, h * w, c).transpose(1, 0, 2))
        q = tokens @ weights["wq"]
        k = tokens @ weights["wk"]
        v = tokens @ weights["wv"]
        attn = _softmax_rows(q @ k.transpose(0, 2, 1) / np.float32(np.sqrt(c)))
        attn = self._swap_attention(attn, "temporal_attention", index, taps, override)
        out = (attn @ v) @ weights["wo"]
        out = out.transpose(1, 0, 2).reshape(f, h, w, c)
        return x + out

    def _swap_attention(self, attn, category, index, taps, override):
        if override is not None:
            injected = override.get(category)
            if injected is not None and injected[index] is not None:
                candidate = injected[index]
                if candidate.shape != attn.shape:
                    raise ConfigError(
                        f"{category}[{index}] override shape {candidate.shape}"
                        f" != expected {attn.shape}"
                    )
                attn = np.asarray(candidate, dtype=np.float32)
        if taps is not None:
            taps[category].append(attn.copy())
        return attn

    def _swap_feature(self, value, category, index, taps, override):
        """Tap/override boundary for feature maps; external layout is
        channels-first (F, C, H, W), internal is channels-last."""
        external = None
        if override is not None:
            injected = override.get(category)
            candidate = injected if category == "input_features" else (
                injected[index] if injected is not None else None
            )
            if candidate is not None:
                expected = value.shape[:1] + value.shape[3:] + value.shape[1:3]
                if candidate.shape != expected:
                    raise ConfigError(
                        f"{category}[{index}] override shape {candidate.shape}"
                        f" != expected {expected}"
                    )
                external = np.asarray(candidate, dtype=np.float32)
                value = np.ascontiguousarray(external.transpose(0, 2, 3, 1))
        if taps is not None:
            if external is None:
                external = np.ascontiguousarray(value.transpose(0, 3, 1, 2))
            if category == "input_features":
                taps[category] = external
            else:
                taps[category].append(external)
        return value

    # -- forward -------------------------------------------------------

    def assemble_input(self, xt: VideoTensor, t: int, condition: ConditionSet) -> np.ndarray:
        """Channels-last (F, H, W, C+1+max_objects) float32 input stack."""
        cfg = self.config
        f, c, h, w = xt.shape
        if c != cfg.in_channels:
            raise ConfigError(f"expected {cfg.in_channels} channels, got {c}")
        if h % 4 or w % 4:
            raise ConfigError(f"H and W must be divisible by 4, got {(h, w)}")
        if any(i < 0 or i >= cfg.max_objects for i in condition):
            raise ConfigError(
                f"condition ids {tuple(condition)} outside [0, {cfg.max_objects})"
            )
        stack = np.zeros((f, h, w, cfg.assembled_channels), dtype=np.float32)
        stack[..., :c] = xt.data.transpose(0, 2, 3, 1)
        stack[..., c] = np.float32(t / cfg.time_scale)
        for i in condition:
            stack[..., c + 1 + i] = 1.0
        return stack

    def forward(
        self,
        xt: VideoTensor,
        t: int,
        condition: ConditionSet = NULL_CONDITION,
        override: UNetTapSet | None = None,
        record: bool = False,
    ) -> tuple[VideoTensor, UNetTapSet | None]:
        if override is not None:
            self._check_override_arity(override)
        taps = (
            {"input_features": None, "residual": [], "spatial_attention": [], "temporal_attention": []}
            if record
            else None
        )
        res_idx = 0
        attn_idx = 0

        x = self.assemble_input(xt, t, condition)
        x = self._swap_feature(x, "input_features", 0, taps, override)
        h0 = _conv2d(x, *self.conv_in)

        def block(x, pool):
            nonlocal res_idx, attn_idx
            if pool:
                x = _avg_pool2(x)
            x = self._residual_block(x, res_idx)
            x = self._swap_feature(x, "residual", res_idx, taps, override)
            res_idx += 1
            x = self._spatial_attention(x, attn_idx, taps, override)
            x = self._temporal_attention(x, attn_idx, taps, override)
            attn_idx += 1
            return x

        d1 = block(h0, pool=True)
        d2 = block(d1, pool=True)

        mid = self._residual_block(d2, res_idx)
        mid = self._swap_feature(mid, "residual", res_idx, taps, override)
        res_idx += 1

        u1 = block(np.concatenate([mid, d2], axis=-1), pool=False)
        u1 = _upsample2(u1)
        u2 = block(np.concatenate([u1, d1], axis=-1), pool=False)
        u2 = _upsample2(u2)

        eps = _conv2d(u2, *self.conv_out)
        eps = eps.transpose(0, 3, 1, 2).astype(np.float64)

        tap_set = None
        if taps is not None:
            tap_set = UNetTapSet(
                input_features=taps["input_features"],
                residual=tuple(taps["residual"]),
                spatial_attention=tuple(taps["spatial_attention"]),
                temporal_attention=tuple(taps["temporal_attention"]),
            )
        return VideoTensor(eps), tap_set

    def _check_override_arity(self, override: UNetTapSet) -> None:
        if override.residual is not None and len(override.residual) != RESIDUAL_SITES:
            raise ConfigError(
                f"residual override needs {RESIDUAL_SITES} entries, got {len(override.residual)}"
            )
        for name in ("spatial_attention", "temporal_attention"):
            value = getattr(override, name)
            if value is not None and len(value) != ATTENTION_SITES:
                raise ConfigError(
                    f"{name} override needs {ATTENTION_SITES} entries, got {len(value)}"
                )


@lru_cache(maxsize=8)
def _net_for(config: UNetConfig) -> MiniUNet:
    return MiniUNet(config)


def unet_forward(
    xt: VideoTensor,
    t: int,
    condition: ConditionSet,
    config: UNetConfig,
    override: UNetTapSet | None = None,
    record: bool = False,
) -> tuple[VideoTensor, UNetTapSet | None]:
    """Forward pass through the (memoized) network for this config."""
    return _net_for(config).forward(xt, t, condition, override=override, record=record)
