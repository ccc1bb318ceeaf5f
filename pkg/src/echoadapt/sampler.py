"""Deterministic reverse-process sampling with a second-order Heun solver.

The noise grid follows the power-rho discretization (linear in sigma^(1/rho))
from sigma_max down to sigma_min, with a final appended zero. Each step takes
an Euler predictor and a trapezoidal correction; the last step to sigma = 0
stays first-order because the probe slope 1/sigma is undefined there.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import InvalidConfig, NonMonotoneSigma


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 32
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise InvalidConfig("num_steps must be >= 1")
        if not 0 < self.sigma_min < self.sigma_max:
            raise InvalidConfig("need 0 < sigma_min < sigma_max")
        if self.rho <= 0:
            raise InvalidConfig("rho must be positive")


def sigma_steps(config: SamplerConfig) -> list[float]:
    """Strictly decreasing noise levels from sigma_max to sigma_min, then 0."""
    n = config.num_steps
    if n == 1:
        return [config.sigma_max, 0.0]
    inv_rho = 1.0 / config.rho
    hi = config.sigma_max**inv_rho
    lo = config.sigma_min**inv_rho
    steps = [(hi + i / (n - 1) * (lo - hi)) ** config.rho for i in range(n)]
    return steps + [0.0]


def heun_step(x: Tensor, sigma_cur: float, sigma_next: float, denoiser) -> Tensor:
    """One solver step from sigma_cur down to sigma_next.

    ``denoiser`` maps (x, sigma) to the denoised estimate. The probe slope is
    d = (x - D(x, sigma)) / sigma; for sigma_next > 0 the Euler prediction is
    corrected with the average of the slopes at both ends.
    """
    if not sigma_cur > sigma_next >= 0:
        raise NonMonotoneSigma(f"need sigma_cur > sigma_next >= 0, got {sigma_cur}, {sigma_next}")
    d_cur = (x - denoiser(x, sigma_cur)) / sigma_cur
    x_euler = x + (sigma_next - sigma_cur) * d_cur
    if sigma_next == 0:
        return x_euler
    d_next = (x_euler - denoiser(x_euler, sigma_next)) / sigma_next
    return x + (sigma_next - sigma_cur) * 0.5 * (d_cur + d_next)


def sample(
    denoiser,
    cond,
    config: SamplerConfig,
    rng: torch.Generator | None = None,
    shape: tuple[int, ...] | None = None,
    trajectory: list | None = None,
) -> Tensor:
    """Integrate the reverse process from pure noise down to sigma = 0.

    ``denoiser`` maps (x, sigma, cond) to the denoised estimate and fixes the
    sample shape via ``shape`` when it cannot be inferred from ``cond``.
    Passing a list as ``trajectory`` records (sigma, state) pairs for
    inspection. Deterministic given (seed, weights, cond).
    """
    if rng is None:
        rng = torch.Generator().manual_seed(config.seed)
    if shape is None:
        if cond is None or cond.ndim != 4:
            raise InvalidConfig("shape is required when it cannot be inferred from cond")
        shape = (cond.shape[0], 1, cond.shape[2], cond.shape[3])
    steps = sigma_steps(config)
    x = config.sigma_max * torch.randn(shape, generator=rng, dtype=torch.float32)

    def bound(x_t, sigma):
        return denoiser(x_t, sigma, cond)

    if trajectory is not None:
        trajectory.append((steps[0], x.clone()))
    for sigma_cur, sigma_next in zip(steps[:-1], steps[1:]):
        x = heun_step(x, sigma_cur, sigma_next, bound)
        if trajectory is not None:
            trajectory.append((sigma_next, x.clone()))
    return x
