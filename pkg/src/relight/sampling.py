"""Deterministic reverse-process sampling (implicit, eta = 0).

Each step estimates the clean image from the predicted noise and
re-noises it to the previous noise level; the final step targets
abar_0 = 1 and therefore returns the clean estimate directly.
"""

from __future__ import annotations

from typing import Callable

import torch

from .colormap import color_map_batch
from .schedule import NoiseSchedule, StepSequence


def ddim_step(x_t, e, abar_t: float, abar_prev: float):
    """One implicit reverse update from noise level abar_t to abar_prev."""
    if not 0.0 < abar_t <= 1.0:
        raise ValueError(f"abar_t must be in (0, 1], got {abar_t}")
    if not 0.0 < abar_prev <= 1.0:
        raise ValueError(f"abar_prev must be in (0, 1], got {abar_prev}")
    x0_pred = (x_t - (1.0 - abar_t) ** 0.5 * e) / abar_t**0.5
    return abar_prev**0.5 * x0_pred + (1.0 - abar_prev) ** 0.5 * e


def ddim_sample(
    x_T: torch.Tensor,
    denoise_fn: Callable[[torch.Tensor, int], torch.Tensor],
    schedule: NoiseSchedule,
    steps: StepSequence,
    value_range: tuple[float, float] = (0.0, 1.0),
) -> torch.Tensor:
    """Run the implicit sampler down a step sequence starting from x_T.

    denoise_fn(x_t, t) must return the predicted noise at step t. The
    clean estimate is clamped to value_range at every step (the usual
    clip-denoised stabilizer); for exact noise the estimate is already
    in range and the clamp is a no-op, so reconstruction identities are
    preserved.
    """
    x = x_T
    seq = list(steps)
    for t, t_prev in zip(seq, seq[1:] + [0]):
        e = denoise_fn(x, t)
        abar_t, abar_prev = schedule.abar(t), schedule.abar(t_prev)
        x0_pred = (x - (1.0 - abar_t) ** 0.5 * e) / abar_t**0.5
        x0_pred = x0_pred.clamp(*value_range)
        x = abar_prev**0.5 * x0_pred + (1.0 - abar_prev) ** 0.5 * e
    return x.clamp(*value_range)


def sample(
    y: torch.Tensor,
    encoder,
    denoiser,
    schedule: NoiseSchedule,
    steps: StepSequence,
    seed: int,
    use_color_map: bool = True,
) -> torch.Tensor:
    """Enhance a batch of low-light images y (B x 3 x H x W in [0,1]).

    Draws x_T from a generator seeded with `seed`, conditions on the
    degradation maps and the color map of y, and runs the implicit
    sampler. Deterministic given (seed, y, parameters). use_color_map
    must match how the denoiser was trained; disabling it feeds zeros.

    The diffusion variable lives in [-1, 1] (images are mapped by
    2x - 1) so the pure-noise start is zero-centered like the data.
    """
    gen = torch.Generator(device=y.device).manual_seed(seed)
    x_T = torch.randn(y.shape, generator=gen, device=y.device, dtype=y.dtype)
    with torch.no_grad():
        rep = encoder(y)
        cmap = color_map_batch(y) if use_color_map else torch.zeros_like(y)
        out = ddim_sample(
            x_T,
            lambda x_t, t: denoiser.predict_noise(
                x_t, y, rep, cmap, torch.full((y.shape[0],), t, device=y.device)
            ),
            schedule,
            steps,
            value_range=(-1.0, 1.0),
        )
    return (out + 1.0) / 2.0
