"""Noise-level grids, the adaptive discretization/EMA laws, noising
helpers, the loss weighting, and the learning-rate profile.

Everything here is plain floats and numpy arrays; nothing touches the
autodiff tape.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ContractError


@dataclasses.dataclass(frozen=True)
class KarrasSchedule:
    """A power-law grid of N noise levels between eps and t_max."""

    eps: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    n: int = 18

    def __post_init__(self):
        if not 0 < self.eps < self.t_max:
            raise ContractError(f"need 0 < eps < t_max, got {self.eps}, {self.t_max}")
        if self.rho <= 0:
            raise ContractError(f"rho must be positive, got {self.rho}")
        if self.n < 2:
            raise ContractError(f"need at least 2 grid points, got {self.n}")


def timesteps(sched: KarrasSchedule) -> np.ndarray:
    """The grid, increasing: index 0 is eps, index N-1 is t_max.

    t_i = (eps^(1/rho) + i/(N-1) * (t_max^(1/rho) - eps^(1/rho)))^rho
    """
    lo = sched.eps ** (1.0 / sched.rho)
    hi = sched.t_max ** (1.0 / sched.rho)
    ramp = np.arange(sched.n, dtype=np.float64) / (sched.n - 1)
    return (lo + ramp * (hi - lo)) ** sched.rho


@dataclasses.dataclass(frozen=True)
class AdaptiveSchedule:
    """Training-time laws for the grid size N(k) and the EMA decay mu(k)."""

    s0: int = 2
    s1: int = 1025
    mu0: float = 0.95
    total_steps: int = 800_000
    variant: str = "floor"

    def __post_init__(self):
        if not 2 <= self.s0 <= self.s1:
            raise ContractError(f"need 2 <= s0 <= s1, got {self.s0}, {self.s1}")
        if not 0 < self.mu0 < 1:
            raise ContractError(f"mu0 must be in (0, 1), got {self.mu0}")
        if self.total_steps < 1:
            raise ContractError("total_steps must be positive")
        if self.variant not in ("floor", "ceil"):
            raise ContractError(f"variant must be floor or ceil, got {self.variant!r}")


def n_of_k(sched: AdaptiveSchedule, k: int) -> int:
    """Grid size at training step k; grows from s0+... to s1+1.

    The default ("floor") form is
        N(k) = floor(sqrt(k/K * ((s1+1)^2 - s0^2) + s0^2 - 1)) + 1
    evaluated in exact integer arithmetic, so N(0) = s0 and N(K) = s1+1
    hold without floating-point hedging. The "ceil" variant
        N(k) = ceil(sqrt((1 - k/K) * s0^2 + k/K * (s1+1)^2) - 1) + 1
    is available for comparison runs and differs by at most one level.
    """
    if not 0 <= k <= sched.total_steps:
        raise ContractError(f"step {k} outside [0, {sched.total_steps}]")
    s0, s1, big_k = sched.s0, sched.s1, sched.total_steps
    if sched.variant == "floor":
        span = (s1 + 1) ** 2 - s0 * s0
        radicand = (k * span + (s0 * s0 - 1) * big_k) // big_k
        return math.isqrt(radicand) + 1
    frac = k / big_k
    return math.ceil(math.sqrt((1.0 - frac) * s0 * s0 + frac * (s1 + 1) ** 2) - 1.0) + 1


def mu_of_k(sched: AdaptiveSchedule, k: int) -> float:
    """EMA decay at step k: mu = mu0^(s0 / N(k)).

    When N(k) == s0 the exponent collapses to 1 and this returns mu0
    exactly.
    """
    return sched.mu0 ** (sched.s0 / n_of_k(sched, k))


def lambda_weight(t: float, sigma_data: float) -> float:
    """Consistency-term weight 1/t^2 + 1/sigma_data^2."""
    if t <= 0 or sigma_data <= 0:
        raise ContractError("lambda_weight needs positive t and sigma_data")
    return 1.0 / (t * t) + 1.0 / (sigma_data * sigma_data)


def add_noise(x0: np.ndarray, t: float, noise: np.ndarray) -> np.ndarray:
    """x0 + t * noise."""
    if t < 0:
        raise ContractError(f"noise level must be nonnegative, got {t}")
    if x0.shape != noise.shape:
        raise ContractError(f"shape mismatch {x0.shape} vs {noise.shape}")
    return x0 + t * noise


def euler_step(x_n: np.ndarray, x0: np.ndarray, t_n: float, t_next: float) -> np.ndarray:
    """One probability-flow Euler move from level t_n to t_next.

    x_next = x_n + (x_n - x0) / t_n * (t_next - t_n). For x_n built by
    add_noise(x0, t_n, z) this lands on add_noise(x0, t_next, z) up to
    rounding.
    """
    if t_n <= 0:
        raise ContractError(f"euler_step needs t_n > 0, got {t_n}")
    return x_n + (x_n - x0) / t_n * (t_next - t_n)


def learning_rate(step: int, total: int, lr_initial: float, lr_final: float,
                  warm_frac: float, tail_frac: float) -> float:
    """Piecewise LR: constant warmup, log-linear anneal, constant tail.

    The default fractions put 1/80 of the run at each end, matching a
    10k warmup and 800k horizon scaled to whatever ``total`` is. At the
    midpoint of the anneal the LR is the geometric mean of the two
    endpoints.
    """
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if lr_initial <= 0 or lr_final <= 0:
        raise ContractError("learning rates must be positive")
    warm = total * warm_frac
    tail_start = total - total * tail_frac
    if step < warm:
        return lr_initial
    if step >= tail_start:
        return lr_final
    frac = (step - warm) / (tail_start - warm)
    return lr_initial * (lr_final / lr_initial) ** frac
