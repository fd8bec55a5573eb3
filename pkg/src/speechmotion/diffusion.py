"""Noise schedules and forward/reverse diffusion transition math.

Steps are 1-based; alpha_bar at the virtual step 0 is defined as 1 so the
final reverse transition is well-posed. All functions here operate on raw
numpy arrays — the denoiser network is the only differentiable piece.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha/alpha_bar tables for T diffusion steps."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("beta table must be a non-empty 1-D array")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "alpha_bar", np.asarray(self.alpha_bar, dtype=np.float64))
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        prod = np.concatenate([[self.alpha_bar[0]], self.alpha_bar[:-1] * self.alpha[1:]])
        if np.max(np.abs(prod - self.alpha_bar)) > 1e-7:
            raise ConfigError("alpha_bar inconsistent with the running product of alpha")

    @property
    def T(self) -> int:
        return self.beta.size

    def abar(self, t: int) -> float:
        """alpha_bar at 1-based step t, with the virtual boundary abar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])


@dataclass(frozen=True)
class InferenceSchedule:
    """Strided subset of training steps used at sampling time, descending."""

    steps: tuple
    parent: NoiseSchedule = field(repr=False)

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("inference steps must be strictly decreasing")
        if steps[0] > self.parent.T or steps[-1] < 1:
            raise ConfigError("inference steps must stay inside [1, T]")

    def __len__(self):
        return len(self.steps)


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule over T steps with derived alpha tables."""
    if T < 1:
        raise ConfigError("T must be at least 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"betas out of range: start={beta_start}, end={beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def subsample_schedule(s: NoiseSchedule, n_steps: int) -> InferenceSchedule:
    """Uniformly strided descending subsequence starting at T.

    The terminal reverse transition targets the virtual step 0 (alpha_bar = 1),
    so the smallest retained step need not be 1 unless n_steps == T.
    """
    if not (1 <= n_steps <= s.T):
        raise ConfigError(f"n_steps must lie in [1, {s.T}], got {n_steps}")
    stride = s.T // n_steps
    steps = tuple(s.T - k * stride for k in range(n_steps))
    return InferenceSchedule(steps=steps, parent=s)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Diffuse a clean signal to step t: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} differs from signal shape {x0.shape}")
    if not (1 <= t <= s.T):
        raise ValueError(f"step {t} outside [1, {s.T}]")
    ab = s.abar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """Invert q_sample given a noise estimate."""
    if not (1 <= t <= s.T):
        raise ValueError(f"step {t} outside [1, {s.T}]")
    ab = s.abar(t)
    if ab <= 0.0:
        raise NumericalError(f"alpha_bar vanished at step {t}")
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, s: NoiseSchedule,
              rng: np.random.Generator) -> np.ndarray:
    """One stochastic reverse transition; deterministic at t = 1."""
    if not (1 <= t <= s.T):
        raise ValueError(f"step {t} outside [1, {s.T}]")
    x_t = np.asarray(x_t)
    beta = s.beta_at(t)
    mean = (x_t - beta / np.sqrt(1.0 - s.abar(t)) * np.asarray(eps_hat)) / np.sqrt(s.alpha_at(t))
    if t == 1:
        return mean
    var = (1.0 - s.abar(t - 1)) / (1.0 - s.abar(t)) * beta
    return mean + np.sqrt(var) * rng.standard_normal(x_t.shape)


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t_from: int, t_to: int,
              s: NoiseSchedule) -> np.ndarray:
    """Deterministic reverse hop through the implied clean signal.

    t_to may be 0, meaning the virtual boundary where alpha_bar = 1 and the
    hop returns the clean estimate itself.
    """
    if t_to >= t_from:
        raise ValueError(f"ddim hop must descend, got {t_from} -> {t_to}")
    x0_hat = predict_x0(x_t, eps_hat, t_from, s)
    ab_to = s.abar(t_to)
    return np.sqrt(ab_to) * x0_hat + np.sqrt(1.0 - ab_to) * np.asarray(eps_hat)
