"""Diffusion noise schedule and the closed-form forward (noising) process.

The schedule holds the per-step noise rates beta_t, their complements
alpha_t = 1 - beta_t, and the cumulative products abar_t used by both the
forward process and the deterministic sampler. abar_0 is defined as 1
exactly, so a reverse step targeting t_prev = 0 returns the predicted
clean image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha/abar tables for t = 1..T.

    Arrays are index-shifted: betas[i] is beta_{i+1}.  Use ``abar(t)``
    for 1-based lookup with the abar_0 = 1 convention.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = field(default=DEFAULT_BETA_START)
    beta_end: float = field(default=DEFAULT_BETA_END)

    def abar(self, t: int) -> float:
        """Cumulative product abar_t, with abar_0 defined as 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])


@dataclass(frozen=True)
class StepSequence:
    """Strictly decreasing sampling-step subset of [1, T], ending at 1
    (or a single element when only one step is requested)."""

    steps: tuple[int, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("empty step sequence")
        if any(b >= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("steps must be strictly decreasing")

    def __iter__(self):
        return iter(self.steps)

    def __len__(self):
        return len(self.steps)


def build_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta schedule from beta_start (t=1) to beta_end (t=T)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Closed-form noising: x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Works element-wise on numpy arrays (or anything broadcasting like
    them); no clamping is applied.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    abar = schedule.abar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def select_substeps(T: int, n: int) -> StepSequence:
    """Pick n sampling steps uniformly (by rounding) over [1, T], decreasing.

    The result always starts at T; for n > 1 it always ends at 1.
    Rounding collisions are deduplicated, so the sequence may be shorter
    than n for pathological (T, n) combinations.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > T:
        raise ValueError(f"n={n} exceeds T={T}")
    raw = np.round(np.linspace(T, 1, n)).astype(int)
    steps = tuple(dict.fromkeys(int(t) for t in raw))
    return StepSequence(steps=steps)
