"""Rendering and trajectory quality metrics: PSNR, SSIM, depth-L1, ATE.

SSIM uses an 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03, L=1),
evaluated on valid windows only (no padding), per channel then averaged
over channels. The same windowing backs the analytic SSIM gradient used
by the mapping loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import umeyama_fit


class MetricError(Exception):
    pass


class ShapeMismatch(MetricError):
    pass


class TooSmall(MetricError):
    pass


class NoValidOverlap(MetricError):
    pass


class TooShort(MetricError):
    pass


@dataclass
class RenderQuality:
    psnr: float
    ssim: float
    depth_l1: float  # centimeters


@dataclass
class TrajectoryError:
    ate_pre: float  # meters
    ate_post: float


_WINDOW = 11
_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _gaussian_kernel_1d() -> np.ndarray:
    r = np.arange(_WINDOW) - (_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (r / _SIGMA) ** 2)
    return k / k.sum()


_K1D = _gaussian_kernel_1d()
_HALF = (_WINDOW - 1) // 2


def _conv_valid(x: np.ndarray) -> np.ndarray:
    """Separable valid-mode filter with the (symmetric) SSIM window."""
    r = correlate1d(x, _K1D, axis=0, mode="constant")[_HALF:-_HALF, :]
    return correlate1d(r, _K1D, axis=1, mode="constant")[:, _HALF:-_HALF]


def _conv_full(x: np.ndarray) -> np.ndarray:
    return _conv_valid(np.pad(x, 2 * _HALF))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0,1]; identical images cap at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return 100.0
    return min(100.0, 10.0 * np.log10(1.0 / mse))


def _moments(x: np.ndarray, y: np.ndarray):
    mu_x = _conv_valid(x)
    mu_y = _conv_valid(y)
    var_x = _conv_valid(x * x) - mu_x ** 2
    var_y = _conv_valid(y * y) - mu_y ** 2
    cov = _conv_valid(x * y) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def _ssim_map(x: np.ndarray, y: np.ndarray):
    mu_x, mu_y, var_x, var_y, cov = _moments(x, y)
    a1 = 2 * mu_x * mu_y + _C1
    a2 = 2 * cov + _C2
    b1 = mu_x ** 2 + mu_y ** 2 + _C1
    b2 = var_x + var_y + _C2
    return a1 * a2 / (b1 * b2), (mu_x, mu_y, var_x, var_y, cov, a1, a2, b1, b2)


def _check_ssim_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < _WINDOW:
        raise TooSmall(f"min dimension {min(a.shape[:2])} < {_WINDOW}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid windows; multi-channel images average channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_ssim_shapes(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    vals = [float(np.mean(_ssim_map(a[:, :, c], b[:, :, c])[0])) for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_with_gradient(a: np.ndarray, b: np.ndarray):
    """SSIM plus d(mean SSIM)/da, the adjoint of the valid-window moments."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_ssim_shapes(a, b)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
        b = b[:, :, None]
    n_ch = a.shape[2]
    grad = np.zeros_like(a)
    vals = []
    for c in range(n_ch):
        x, y = a[:, :, c], b[:, :, c]
        s_map, (mu_x, mu_y, _, _, _, a1, a2, b1, b2) = _ssim_map(x, y)
        vals.append(float(np.mean(s_map)))
        n = s_map.size
        d_mu = 2 * mu_y * a2 / (b1 * b2) - 2 * mu_x * s_map / b1
        d_var = -s_map / b2
        d_cov = 2 * a1 / (b1 * b2)
        # Adjoint of the valid convolution is a full convolution (symmetric kernel).
        grad[:, :, c] = (
            _conv_full(d_mu)
            + 2 * x * _conv_full(d_var)
            - 2 * _conv_full(mu_x * d_var)
            + y * _conv_full(d_cov)
            - _conv_full(mu_y * d_cov)
        ) / (n * n_ch)
    value = float(np.mean(vals))
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad


def depth_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute depth difference in centimeters over mutually valid pixels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    valid = (a > 0) & (b > 0)
    if not valid.any():
        raise NoValidOverlap("no pixel valid in both depth maps")
    return float(np.mean(np.abs(a[valid] - b[valid])) * 100.0)


def ate_rmse(est, gt) -> float:
    """Trajectory RMSE in meters after rigid (no-scale) alignment of est to gt."""
    if len(est) != len(gt):
        raise ShapeMismatch(f"{len(est)} vs {len(gt)} poses")
    if len(est) < 3:
        raise TooShort(f"need >=3 poses, got {len(est)}")
    p_est = np.array([p.t for p in est])
    p_gt = np.array([p.t for p in gt])
    align = umeyama_fit(p_est, p_gt)
    residual = align.apply(p_est) - p_gt
    return float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
