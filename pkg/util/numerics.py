# util/numerics.py

"""
Dense-tensor kernels shared by the losses, the augmentation pipeline and the
toy model. Tensors are plain numpy arrays; spatial dims are always the last two.
"""

import logging
import math

import numpy as np

from util.errors import NonFiniteError, ShapeError, ValidationError

logger = logging.getLogger(__name__)


def check_finite(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Raises NonFiniteError if t holds a NaN or an infinity."""
    if not np.all(np.isfinite(t)):
        bad = int(np.size(t) - np.count_nonzero(np.isfinite(t)))
        raise NonFiniteError(f"{name} contains {bad} non-finite values", name=name, count=bad)
    return t


def _check_axis(t: np.ndarray, axis: int) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise ValidationError(f"axis {axis} is invalid for a tensor of rank {t.ndim}")
    axis %= t.ndim
    if t.shape[axis] < 1:
        raise ShapeError(f"extent along axis {axis} must be >= 1, got shape {t.shape}")
    return axis


def softmax(t: np.ndarray, axis: int = 0) -> np.ndarray:
    axis = _check_axis(t, axis)
    check_finite(t, "softmax input")
    shifted = t - np.max(t, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(t: np.ndarray, axis: int = 0) -> np.ndarray:
    axis = _check_axis(t, axis)
    check_finite(t, "log_softmax input")
    shifted = t - np.max(t, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def interpolation_matrix(in_size: int, out_size: int, align_corners: bool = False) -> np.ndarray:
    """
    Returns the (out_size, in_size) matrix R of 1-D linear interpolation weights,
    so that resampling one axis is R @ x. Rows are convex combinations of at most
    two source taps. Half-pixel centers are used unless align_corners is set.
    """
    if in_size < 1 or out_size < 1:
        raise ShapeError(f"interpolation sizes must be >= 1, got {in_size} -> {out_size}")
    dst = np.arange(out_size, dtype=np.float64)
    if align_corners:
        if out_size == 1:
            src = np.zeros(1)
        else:
            src = dst * ((in_size - 1) / (out_size - 1))
    else:
        src = (dst + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w1 = src - i0
    weights = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(weights, (rows, i0), 1.0 - w1)
    np.add.at(weights, (rows, i1), w1)
    return weights


def upsample_bilinear(t: np.ndarray, out_h: int, out_w: int, align_corners: bool = False) -> np.ndarray:
    """
    Bilinear resampling of the last two axes of t to (out_h, out_w). Works in
    both directions despite the name; every leading axis (channels, batch) is
    preserved. The result keeps float32 inputs in float32.
    """
    if t.ndim < 2:
        raise ShapeError(f"tensor needs spatial dims, got shape {t.shape}")
    in_h, in_w = t.shape[-2:]
    if in_h < 1 or in_w < 1:
        raise ShapeError(f"zero-sized spatial dims: {t.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {out_h}x{out_w}")
    check_finite(t, "upsample input")
    if (in_h, in_w) == (out_h, out_w):
        return t.copy()
    ry = interpolation_matrix(in_h, out_h, align_corners)
    rx = interpolation_matrix(in_w, out_w, align_corners)
    out = np.einsum("oh,...hw,pw->...op", ry, t.astype(np.float64, copy=False), rx, optimize=True)
    return out.astype(t.dtype) if t.dtype == np.float32 else out


def upsample_bilinear_backward(grad: np.ndarray, in_h: int, in_w: int, align_corners: bool = False) -> np.ndarray:
    """Transposed interpolation: pulls a gradient at output resolution back to (in_h, in_w)."""
    out_h, out_w = grad.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return grad.copy()
    ry = interpolation_matrix(in_h, out_h, align_corners)
    rx = interpolation_matrix(in_w, out_w, align_corners)
    return np.einsum("oh,...op,pw->...hw", ry, grad, rx, optimize=True)


def nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    """Source index floor((i + 0.5) * in/out) for every output position, clipped to the input."""
    scale = in_size / out_size
    idx = np.floor((np.arange(out_size) + 0.5) * scale).astype(np.int64)
    return np.minimum(idx, in_size - 1)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if mask.ndim < 2 or 0 in mask.shape[-2:]:
        raise ShapeError(f"mask needs non-empty spatial dims, got shape {mask.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {out_h}x{out_w}")
    in_h, in_w = mask.shape[-2:]
    rows = nearest_indices(in_h, out_h)
    cols = nearest_indices(in_w, out_w)
    return mask[..., rows[:, None], cols[None, :]]


def downsample_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour label downsampling; never invents labels."""
    in_h, in_w = mask.shape[-2:]
    if out_h > in_h or out_w > in_w:
        raise ShapeError(f"downsample target {out_h}x{out_w} exceeds input {in_h}x{in_w}")
    return resize_nearest(mask, out_h, out_w)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a| + |n|, floor), the figure reported by gradient checks."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_difference(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function fn at x (x is perturbed in place and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn()
        flat[i] = orig - step
        minus = fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def image_diagonal(h: int, w: int) -> float:
    return math.hypot(h, w)
