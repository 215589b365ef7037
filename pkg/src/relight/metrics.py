"""Full-reference quality metrics: PSNR and Gaussian-window SSIM.

SSIM is computed on the luma channel (BT.601 weights) with an 11x11
Gaussian window (sigma 1.5) and the standard stabilizing constants
C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1. Local statistics use the
window as weights (no sample-covariance correction) and only fully
valid window positions contribute to the mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 100.0
_LUMA = np.array([0.299, 0.587, 0.114])
_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB; `cap` is returned when MSE = 0."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return 10.0 * math.log10(max_val**2 / mse)


def _to_gray(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3 and x.shape[-1] == 3:
        return x @ _LUMA
    if x.ndim == 2:
        return x
    raise ValueError(f"expected H x W or H x W x 3 image, got shape {x.shape}")


def _gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel2d: np.ndarray) -> np.ndarray:
    # valid-mode weighted local mean
    win = kernel2d.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (win, win))
    return np.tensordot(view, kernel2d, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local structural similarity between two images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ga, gb = _to_gray(a), _to_gray(b)
    win = 2 * _SSIM_RADIUS + 1
    if min(ga.shape) < win:
        raise ValueError(f"image smaller than the {win}x{win} SSIM window")
    k1d = _gaussian_kernel(_SSIM_SIGMA, _SSIM_RADIUS)
    k2d = np.outer(k1d, k1d)

    mu_a = _windowed_mean(ga, k2d)
    mu_b = _windowed_mean(gb, k2d)
    var_a = _windowed_mean(ga * ga, k2d) - mu_a**2
    var_b = _windowed_mean(gb * gb, k2d) - mu_b**2
    cov = _windowed_mean(ga * gb, k2d) - mu_a * mu_b

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricsReport:
    """Per-image and aggregate scores over a matched set of images."""

    ids: tuple[str, ...]
    psnr_values: tuple[float, ...]
    ssim_values: tuple[float, ...]

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    def to_csv(self) -> str:
        lines = ["id,psnr,ssim"]
        for i, p, s in zip(self.ids, self.psnr_values, self.ssim_values):
            lines.append(f"{i},{p:.6f},{s:.6f}")
        lines.append(f"mean,{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (
            f"{self.count} images: "
            f"PSNR {self.mean_psnr:.2f} dB, SSIM {self.mean_ssim:.4f}"
        )


def evaluate_pairs(pairs: list[tuple[str, np.ndarray, np.ndarray]]) -> MetricsReport:
    """Score (id, prediction, reference) triples."""
    ids, ps, ss = [], [], []
    for i, pred, ref in pairs:
        ids.append(i)
        ps.append(psnr(pred, ref))
        ss.append(ssim(pred, ref))
    return MetricsReport(ids=tuple(ids), psnr_values=tuple(ps), ssim_values=tuple(ss))
