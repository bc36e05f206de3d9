"""Dense video tensors, spatial masks, affine placement, and the blending
algebra used by every other module.

Conventions:
  * arrays are float64 in memory and read-only after construction
  * video data is (frames, channels, height, width), masks are
    (frames, height, width) with values in [0, 1]
  * spatial coordinates are (y, x) pixel indices, y down, x right
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, NumericError

__all__ = [
    "VideoTensor",
    "Mask",
    "AffineTransform",
    "FlowField",
    "hadamard_blend",
    "affine_apply",
    "mask_resample",
    "warp_mask",
]


def _frozen_f64(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VideoTensor:
    """Rank-4 video-shaped array: clean frames, latents, noise, features."""

    data: np.ndarray

    def __post_init__(self):
        arr = _frozen_f64(self.data, "VideoTensor")
        if arr.ndim != 4:
            raise ConfigError(f"VideoTensor needs 4 dims (F,C,H,W), got {arr.ndim}")
        if min(arr.shape) < 1:
            raise ConfigError(f"VideoTensor dims must be positive, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Mask:
    """Per-frame spatial gate in [0, 1]; broadcast over channels when blending."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise ConfigError(f"Mask needs 3 dims (F,H,W), got {arr.ndim}")
        if min(arr.shape) < 1:
            raise ConfigError(f"Mask dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("Mask contains non-finite values")
        np.clip(arr, 0.0, 1.0, out=arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))

    @classmethod
    def full(cls, frames: int, height: int, width: int) -> "Mask":
        return cls(np.ones((frames, height, width)))

    @classmethod
    def empty(cls, frames: int, height: int, width: int) -> "Mask":
        return cls(np.zeros((frames, height, width)))


_IDENTITY_2X3 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping source (y, x) points to destination points.

    The linear block must be invertible; placement resampling uses the
    inverse map (destination pixels pull from the source).
    """

    matrix: np.ndarray

    def __post_init__(self):
        arr = _frozen_f64(self.matrix, "AffineTransform")
        if arr.shape != (2, 3):
            raise ConfigError(f"AffineTransform matrix must be 2x3, got {arr.shape}")
        det = arr[0, 0] * arr[1, 1] - arr[0, 1] * arr[1, 0]
        if abs(det) <= 1e-9:
            raise NumericError(f"singular affine transform (|det|={abs(det):.3e})")
        object.__setattr__(self, "matrix", arr)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, _IDENTITY_2X3))

    def inverse(self) -> "AffineTransform":
        inv_lin = np.linalg.inv(self.linear)
        inv_t = -inv_lin @ self.translation
        return AffineTransform(np.column_stack([inv_lin, inv_t]))

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) arrays of (y, x) points through the transform."""
        return points @ self.linear.T + self.translation

    def rescaled(self, ratio_y: float, ratio_x: float) -> "AffineTransform":
        """Same geometric transform expressed on a grid scaled by the ratios.

        Conjugates the linear block by diag(ratio_y, ratio_x) and scales the
        translation, so uniform ratios leave the linear block untouched.
        """
        s = np.diag([ratio_y, ratio_x])
        s_inv = np.diag([1.0 / ratio_y, 1.0 / ratio_x])
        lin = s @ self.linear @ s_inv
        t = s @ self.translation
        return AffineTransform(np.column_stack([lin, t]))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(_IDENTITY_2X3)

    @classmethod
    def translate(cls, dy: float, dx: float) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, dy], [0.0, 1.0, dx]]))

    @classmethod
    def scale(cls, factor: float) -> "AffineTransform":
        return cls(np.array([[factor, 0.0, 0.0], [0.0, factor, 0.0]]))

    @classmethod
    def rotate(cls, radians: float) -> "AffineTransform":
        c, s = np.cos(radians), np.sin(radians)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0]]))


@dataclass(frozen=True)
class FlowField:
    """Per-pixel (dy, dx) displacement from frame k to frame k+interval,
    sampled on frame k's grid. Shape (F-interval, 2, H, W)."""

    data: np.ndarray
    interval: int = 1

    def __post_init__(self):
        arr = _frozen_f64(self.data, "FlowField")
        if arr.ndim != 4 or arr.shape[1] != 2:
            raise ConfigError(f"FlowField needs (pairs, 2, H, W), got {arr.shape}")
        if self.interval < 1:
            raise ConfigError(f"flow interval must be >= 1, got {self.interval}")
        limit = max(arr.shape[2], arr.shape[3])
        if np.max(np.abs(arr)) > limit:
            raise ConfigError("flow displacement exceeds the frame extent")
        object.__setattr__(self, "data", arr)

    @property
    def pairs(self) -> int:
        return self.data.shape[0]


def hadamard_blend(base: VideoTensor, overlay: VideoTensor, mask: Mask) -> VideoTensor:
    """base*(1-m) + overlay*m with the mask broadcast over channels."""
    if base.shape != overlay.shape:
        raise ConfigError(f"blend shape mismatch: {base.shape} vs {overlay.shape}")
    if mask.data.shape != (base.frames, base.height, base.width):
        raise ConfigError(
            f"mask {mask.data.shape} does not match video (F,H,W)="
            f"{(base.frames, base.height, base.width)}"
        )
    m = mask.data[:, None, :, :]
    return VideoTensor(base.data * (1.0 - m) + overlay.data * m)


def _bilinear_gather(plane_stack: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Sample (..., H, W) planes at fractional (y, x) positions with zero
    padding. Returns (values, in_bounds) where values has shape
    (..., len(ys))."""
    h, w = plane_stack.shape[-2:]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    wy = ys - y0
    wx = xs - x0

    def corner(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        vals = plane_stack[..., yc, xc]
        return np.where(valid, vals, 0.0), valid

    v00, b00 = corner(y0, x0)
    v01, b01 = corner(y0, x1)
    v10, b10 = corner(y1, x0)
    v11, b11 = corner(y1, x1)
    top = v00 * (1.0 - wx) + v01 * wx
    bot = v10 * (1.0 - wx) + v11 * wx
    values = top * (1.0 - wy) + bot * wy
    in_bounds = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    _ = (b00, b01, b10, b11)
    return values, in_bounds


def affine_apply(
    src: VideoTensor,
    transform: AffineTransform,
    out_dims: tuple[int, int] | None = None,
) -> VideoTensor:
    """Inverse-warp resample: each output pixel pulls from transform^-1 (y, x)
    in the source with bilinear interpolation; out-of-bounds samples are 0.
    An exact identity transform with matching dims returns the input as is."""
    f, c, h, w = src.shape
    out_h, out_w = out_dims if out_dims is not None else (h, w)
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output dims must be positive, got {(out_h, out_w)}")
    if transform.is_identity() and (out_h, out_w) == (h, w):
        return src

    inv = transform.inverse()
    yy, xx = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    src_pts = inv.apply_points(pts)
    planes = src.data.reshape(f * c, h, w)
    values, in_bounds = _bilinear_gather(planes, src_pts[:, 0], src_pts[:, 1])
    out = np.where(in_bounds, values, 0.0).reshape(f, c, out_h, out_w)
    return VideoTensor(out)


@lru_cache(maxsize=64)
def _box_weights(src: int, dst: int) -> np.ndarray:
    """Row-stochastic (dst, src) overlap matrix for area-average downsampling."""
    edges = np.linspace(0.0, float(src), dst + 1)
    weights = np.zeros((dst, src))
    cell = src / dst
    for i in range(dst):
        lo, hi = edges[i], edges[i + 1]
        j0 = int(np.floor(lo))
        j1 = min(int(np.ceil(hi)), src)
        for j in range(j0, j1):
            weights[i, j] = min(hi, j + 1.0) - max(lo, float(j))
    weights /= cell
    weights.setflags(write=False)
    return weights


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    return np.minimum((np.arange(dst) + 0.5) * src / dst, src - 1).astype(np.int64)


def mask_resample(mask: Mask, target_h: int, target_w: int, threshold: float = 0.5) -> Mask:
    """Resample to the target grid: shrinking axes use area averaging and the
    result is binarized at the threshold; growing or unchanged axes use
    nearest neighbor and keep values as they are."""
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"target dims must be positive, got {(target_h, target_w)}")
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must be in [0,1], got {threshold}")
    f, h, w = mask.data.shape
    data = mask.data
    downsampled = False

    if target_h < h:
        data = np.einsum("ts,fsw->ftw", _box_weights(h, target_h), data)
        downsampled = True
    elif target_h > h:
        data = data[:, _nearest_indices(h, target_h), :]

    if target_w < w:
        data = np.einsum("ts,fhs->fht", _box_weights(w, target_w), data)
        downsampled = True
    elif target_w > w:
        data = data[:, :, _nearest_indices(w, target_w)]

    if downsampled:
        data = (data >= threshold).astype(np.float64)
    return Mask(data)


def warp_mask(
    mask: Mask,
    transform: AffineTransform,
    out_dims: tuple[int, int] | None = None,
    threshold: float = 0.5,
) -> Mask:
    """Place a mask through an affine transform and binarize at the threshold."""
    f, h, w = mask.data.shape
    as_video = VideoTensor(mask.data[:, None, :, :])
    warped = affine_apply(as_video, transform, out_dims)
    return Mask((warped.data[:, 0] >= threshold).astype(np.float64))
