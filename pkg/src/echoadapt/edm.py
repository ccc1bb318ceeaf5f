"""Elucidated-diffusion numerics: forward perturbation, preconditioning, loss.

The forward process adds Gaussian noise of standard deviation sigma to a
clean image (variance-exploding convention, mean scale 1). The denoiser is
reconstructed from the raw network F as

    D(x~; sigma) = c_skip * x~ + c_out * F(c_in * x~; c_noise)

and training regresses F onto the effective target (x0 - c_skip*x~)/c_out
with a plain mean-squared error. All functions are pure and reentrant; RNG
state is always caller-supplied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import InvalidConfig, NonPositiveSigma, ShapeMismatch

CSKIP_FORMS = ("inverted", "canonical")


@dataclass(frozen=True)
class EDMParams:
    """Noise-scale bounds and the dataset scale, in pixel units.

    ``cskip_form`` selects the skip coefficient: ``inverted`` uses
    sigma^2/(sigma_data^2 + sigma^2), which passes the noisy input
    through mostly untouched at high noise; ``canonical`` uses
    sigma_data^2/(sigma_data^2 + sigma^2), which damps it instead.
    The two weights are complementary (they sum to 1).
    """

    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    train_logsigma_mean: float = -1.2
    train_logsigma_std: float = 1.2
    cskip_form: str = "inverted"

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise NonPositiveSigma("sigma_data must be positive")
        if not 0 < self.sigma_min < self.sigma_max:
            raise NonPositiveSigma("need 0 < sigma_min < sigma_max")
        if self.train_logsigma_std <= 0:
            raise NonPositiveSigma("train_logsigma_std must be positive")
        if self.cskip_form not in CSKIP_FORMS:
            raise InvalidConfig(f"cskip_form must be one of {CSKIP_FORMS}")


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_in: float
    c_skip: float
    c_noise: float
    c_out: float


@dataclass(frozen=True)
class NoisySample:
    x_tilde: Tensor
    sigma: float
    noise: Tensor


def precondition_coeffs(sigma: float, params: EDMParams) -> PreconditionCoeffs:
    """Scalar preconditioning coefficients at one noise level."""
    if sigma <= 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    sd2 = params.sigma_data**2
    s2 = sigma**2
    denom = sd2 + s2
    if params.cskip_form == "inverted":
        c_skip = s2 / denom
    else:
        c_skip = sd2 / denom
    return PreconditionCoeffs(
        c_in=1.0 / math.sqrt(denom),
        c_skip=c_skip,
        c_noise=0.25 * math.log(sigma),
        c_out=sigma * params.sigma_data / math.sqrt(denom),
    )


def coeff_tensors(sigma: Tensor, params: EDMParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Batched (c_in, c_skip, c_noise, c_out), each shaped like ``sigma``."""
    if (sigma <= 0).any():
        raise NonPositiveSigma("all sigmas must be positive")
    sd2 = params.sigma_data**2
    denom = sd2 + sigma**2
    c_skip = sigma**2 / denom if params.cskip_form == "inverted" else sd2 / denom
    return (
        denom.rsqrt(),
        c_skip,
        0.25 * torch.log(sigma),
        sigma * params.sigma_data * denom.rsqrt(),
    )


def forward_perturb(x0: Tensor, sigma: float | Tensor, rng: torch.Generator) -> NoisySample:
    """x0 + sigma * eps with eps standard normal per pixel."""
    sig = torch.as_tensor(sigma, dtype=x0.dtype)
    if (sig <= 0).any():
        raise NonPositiveSigma("sigma must be positive")
    if sig.ndim == 1:  # one level per batch item
        sig = sig.view(-1, *([1] * (x0.ndim - 1)))
    noise = sig * torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    return NoisySample(x_tilde=x0 + noise, sigma=sigma, noise=noise)


def _expand(c: Tensor, like: Tensor) -> Tensor:
    return c.view(-1, *([1] * (like.ndim - 1))) if c.ndim == 1 else c


def denoise(
    net,
    x_tilde: Tensor,
    sigma: float | Tensor,
    cond,
    params: EDMParams,
) -> Tensor:
    """Preconditioned denoiser output c_skip*x~ + c_out*F(c_in*x~; c_noise).

    ``sigma`` may be a scalar or a per-item vector for a batched ``x_tilde``.
    ``cond`` is forwarded to the network untouched.
    """
    sig = torch.as_tensor(sigma, dtype=x_tilde.dtype)
    if sig.ndim == 0:
        sig = sig.repeat(x_tilde.shape[0]) if x_tilde.ndim == 4 else sig.unsqueeze(0)
    elif sig.ndim != 1 or sig.shape[0] != x_tilde.shape[0]:
        raise ShapeMismatch(
            f"sigma batch {tuple(sig.shape)} does not match images {tuple(x_tilde.shape)}"
        )
    c_in, c_skip, c_noise, c_out = coeff_tensors(sig, params)
    raw = net(_expand(c_in, x_tilde) * x_tilde, c_noise, cond)
    if raw.shape != x_tilde.shape:
        raise ShapeMismatch(f"network returned {tuple(raw.shape)} for input {tuple(x_tilde.shape)}")
    return _expand(c_skip, x_tilde) * x_tilde + _expand(c_out, x_tilde) * raw


def training_target(x0: Tensor, noisy: NoisySample, coeffs: PreconditionCoeffs) -> Tensor:
    """(x0 - c_skip * x~) / c_out, the quantity F is regressed onto."""
    return (x0 - coeffs.c_skip * noisy.x_tilde) / coeffs.c_out


def training_target_batch(
    x0: Tensor, x_tilde: Tensor, sigma: Tensor, params: EDMParams
) -> Tensor:
    """Per-item regression targets for a batch with one sigma per item."""
    _, c_skip, _, c_out = coeff_tensors(sigma.to(x0.dtype), params)
    return (x0 - _expand(c_skip, x_tilde) * x_tilde) / _expand(c_out, x_tilde)


def edm_loss(net_out: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if net_out.shape != target.shape:
        raise ShapeMismatch(f"{tuple(net_out.shape)} vs {tuple(target.shape)}")
    return ((net_out - target) ** 2).mean()


def sample_training_sigma(
    rng: torch.Generator, params: EDMParams, n: int = 1
) -> Tensor:
    """Log-normal noise levels clamped to [sigma_min, sigma_max]."""
    z = torch.randn(n, generator=rng, dtype=torch.float64)
    sig = torch.exp(params.train_logsigma_mean + params.train_logsigma_std * z)
    return sig.clamp(params.sigma_min, params.sigma_max)
