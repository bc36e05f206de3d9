"""Temporal-consistency evaluation: masked warping error between frames at
a fixed interval, short range (2 frames) and long range (4 frames).

Flow lives on the earlier frame's grid and points at where that content
lands in the later frame, so the later frame is backward-warped onto the
earlier grid and compared inside the non-occlusion mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FlowField, Mask, VideoTensor, _bilinear_gather
from .errors import ConfigError, NumericError

__all__ = [
    "WarpMetricConfig",
    "warp_frame",
    "warping_error",
    "sequence_warping_error",
    "occlusion_from_flow_consistency",
]

FLOW_SOURCES = ("ground-truth", "forward-backward-estimate")


@dataclass(frozen=True)
class WarpMetricConfig:
    interval: int = 2
    occlusion_threshold: float = 1.0
    flow_source: str = "ground-truth"

    def __post_init__(self):
        if self.interval < 1:
            raise ConfigError(f"interval must be >= 1, got {self.interval}")
        if self.flow_source not in FLOW_SOURCES:
            raise ConfigError(
                f"flow_source must be one of {FLOW_SOURCES}, got {self.flow_source!r}"
            )
        if self.occlusion_threshold <= 0.0:
            raise ConfigError("occlusion threshold must be positive")


def warp_frame(frame: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward-warp a (C, H, W) frame: output pixel p samples the frame at
    p + flow(p) bilinearly. Returns the warped frame and an (H, W) bool map
    that is False where the sample fell out of bounds (those pixels are 0)."""
    if frame.ndim != 3:
        raise ConfigError(f"frame must be (C,H,W), got {frame.shape}")
    if flow.shape != (2,) + frame.shape[1:]:
        raise ConfigError(f"flow {flow.shape} does not match frame {frame.shape}")
    c, h, w = frame.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys = (yy + flow[0]).ravel()
    xs = (xx + flow[1]).ravel()
    values, in_bounds = _bilinear_gather(frame, ys, xs)
    warped = values.reshape(c, h, w)
    valid = in_bounds.reshape(h, w)
    warped = np.where(valid[None], warped, 0.0)
    return warped, valid


def warping_error(
    frame_ref: np.ndarray,
    frame_future: np.ndarray,
    flow: np.ndarray,
    occlusion_mask: np.ndarray,
) -> float:
    """Masked mean squared difference between the reference frame and the
    future frame warped back onto its grid. The per-pixel term is the mean
    over channels; out-of-bounds warp targets drop out of the mask."""
    if frame_ref.shape != frame_future.shape:
        raise ConfigError(
            f"frame shapes differ: {frame_ref.shape} vs {frame_future.shape}"
        )
    if occlusion_mask.shape != frame_ref.shape[1:]:
        raise ConfigError(
            f"mask {occlusion_mask.shape} does not match frame grid {frame_ref.shape[1:]}"
        )
    warped, valid = warp_frame(frame_future, flow)
    mask = occlusion_mask * valid
    total = mask.sum()
    if total == 0:
        raise NumericError("warping error undefined: every pixel is occluded")
    sq = ((frame_ref - warped) ** 2).mean(axis=0)
    return float((mask * sq).sum() / total)


def sequence_warping_error(
    video: VideoTensor,
    flow: FlowField,
    occlusion: Mask,
    config: WarpMetricConfig,
) -> tuple[float, list[float]]:
    """Average masked warping error over every valid (t, t+G) pair; returns
    the mean and the per-pair values."""
    g = config.interval
    if flow.interval != g:
        raise ConfigError(f"flow interval {flow.interval} != config interval {g}")
    pairs = video.frames - g
    if pairs < 1:
        raise ConfigError(f"interval {g} leaves no frame pairs in {video.frames} frames")
    if flow.pairs < pairs:
        raise ConfigError(f"flow holds {flow.pairs} pairs, need {pairs}")
    if occlusion.frames < pairs:
        raise ConfigError(f"occlusion mask holds {occlusion.frames} pairs, need {pairs}")
    per_pair = [
        warping_error(
            video.data[k], video.data[k + g], flow.data[k], occlusion.data[k]
        )
        for k in range(pairs)
    ]
    return float(np.mean(per_pair)), per_pair


def occlusion_from_flow_consistency(
    flow_forward: FlowField, flow_backward: FlowField, threshold: float
) -> Mask:
    """Estimate non-occlusion masks without ground truth: a pixel passes when
    the forward displacement and the backward displacement sampled at its
    landing point cancel to within the threshold."""
    if flow_forward.data.shape != flow_backward.data.shape:
        raise ConfigError("forward/backward flow shapes differ")
    if threshold <= 0.0:
        raise ConfigError("occlusion threshold must be positive")
    pairs, _, h, w = flow_forward.data.shape
    masks = np.zeros((pairs, h, w))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for k in range(pairs):
        fw = flow_forward.data[k]
        ys = (yy + fw[0]).ravel()
        xs = (xx + fw[1]).ravel()
        bw_at_target, valid = _bilinear_gather(flow_backward.data[k], ys, xs)
        residual = fw.reshape(2, -1) + bw_at_target
        magnitude = np.sqrt((residual**2).sum(axis=0))
        ok = valid & (magnitude <= threshold)
        masks[k] = ok.reshape(h, w)
    return Mask(masks)
