"""Forward-process variance schedule and closed-form marginal coefficients.

The forward chain multiplies in noise one step at a time,

    q(x_t | x_{t-1}) = N(x_t; sqrt(1 - beta_t) x_{t-1}, beta_t I),

which collapses to the closed form

    q(x_t | x_0) = N(x_t; sqrt(abar_t) x_0, (1 - abar_t) I),

with alpha_t = 1 - beta_t and abar_t the cumulative product. Reverse steps
use the noise-prediction parameterization

    mu = (1 / sqrt(alpha_t)) * (x_t - beta_t / sqrt(1 - abar_t) * eps_hat)

with fixed per-step variance beta_t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "q_sample",
    "posterior_mean_coeffs",
    "ParameterError",
]


class ParameterError(ValueError):
    """Schedule parameters outside their valid range."""


@dataclass(frozen=True)
class NoiseSchedule:
    """beta / alpha / alpha_bar sequences, 1-indexed by timestep.

    ``beta[t]``, ``alpha[t]`` are valid for t in 1..T (index 0 is padding);
    ``alpha_bar[t]`` is valid for t in 0..T with ``alpha_bar[0] == 1`` so
    t=0 denotes clean data. Cumulative products are carried in float64 to
    bound drift over long schedules.
    """

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside 1..{self.T}")
        return t

    def header(self) -> dict:
        """Parameters recorded in checkpoint headers."""
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": "linear",
        }

    @classmethod
    def from_header(cls, h: dict) -> "NoiseSchedule":
        return make_linear_schedule(h["T"], h["beta_start"], h["beta_end"])


def make_linear_schedule(T: int, beta_start: float = 1e-4,
                         beta_end: float = 0.05) -> NoiseSchedule:
    """Linearly interpolated beta between the two endpoints, inclusive."""
    if T < 1:
        raise ParameterError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    beta = np.concatenate([[np.nan], betas])          # 1-indexed
    alpha = np.concatenate([[np.nan], 1.0 - betas])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
    )


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray,
             sched: NoiseSchedule) -> np.ndarray:
    """Draw from the closed-form marginal: sqrt(abar) x0 + sqrt(1-abar) eps."""
    t = sched.check_t(t)
    if np.shape(x0) != np.shape(eps):
        raise ParameterError("x0 and eps must have the same shape")
    x0 = np.asarray(x0)
    ab = sched.alpha_bar[t]
    c0 = x0.dtype.type(np.sqrt(ab))
    ce = x0.dtype.type(np.sqrt(1.0 - ab))
    return c0 * x0 + ce * np.asarray(eps, dtype=x0.dtype)


def q_sample_batch(x0: np.ndarray, ts: np.ndarray, eps: np.ndarray,
                   sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal with one timestep per leading batch element."""
    x0 = np.asarray(x0)
    ts = np.asarray(ts, dtype=np.int64)
    if ts.ndim != 1 or ts.shape[0] != x0.shape[0]:
        raise ParameterError("need one timestep per batch element")
    if ts.min() < 1 or ts.max() > sched.T:
        raise ParameterError(f"timesteps outside 1..{sched.T}")
    ab = sched.alpha_bar[ts].reshape((-1,) + (1,) * (x0.ndim - 1))
    c0 = np.sqrt(ab).astype(x0.dtype)
    ce = np.sqrt(1.0 - ab).astype(x0.dtype)
    return c0 * x0 + ce * np.asarray(eps, dtype=x0.dtype)


def posterior_mean_coeffs(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    """Coefficients (c_xt, c_eps) so that mu = c_xt * (x_t - c_eps * eps_hat)."""
    t = sched.check_t(t)
    c_xt = 1.0 / np.sqrt(sched.alpha[t])
    c_eps = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
    return float(c_xt), float(c_eps)
