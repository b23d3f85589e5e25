"""DDPM variance schedules and their resampled K-step subsequences.

Index convention: step ``t`` runs 1..T and ``alpha_bar[0] == 1`` so that the
posterior variance at the first step is exactly zero. Arrays are stored with
that leading entry, i.e. ``beta[t]`` is the value at step ``t`` and
``beta[0]`` is unused (0).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _posterior_variance(alpha_bar: np.ndarray, beta: np.ndarray) -> np.ndarray:
    out = np.zeros_like(beta)
    out[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return out


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray


@dataclass(frozen=True)
class SubSchedule:
    """K-step schedule over chosen parent timesteps ``timesteps[1..K]``.

    Every array has a leading entry for ``k = 0``: ``timesteps[0] = 0`` and
    ``alpha_bar[0] = 1``.
    """

    K: int
    parent: NoiseSchedule
    timesteps: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    def describe(self) -> tuple[int, float, float, int]:
        return (self.parent.T, self.parent.beta_start, self.parent.beta_end, self.K)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        T=T, beta_start=float(beta_start), beta_end=float(beta_end), beta=beta, alpha=alpha,
        alpha_bar=alpha_bar, beta_tilde=_posterior_variance(alpha_bar, beta),
    )


def subsequence_timesteps(T: int, K: int) -> np.ndarray:
    """Evenly spaced steps from 1 to T inclusive, rounded half to even."""
    return np.round(np.linspace(1, T, K)).astype(np.int64)


def resample_subsequence(s: NoiseSchedule, K: int) -> SubSchedule:
    if K < 2 or K > s.T:
        raise ValueError(f"K must satisfy 2 <= K <= T={s.T}, got {K}")
    ts = np.zeros(K + 1, dtype=np.int64)
    ts[1:] = subsequence_timesteps(s.T, K)
    alpha_bar = s.alpha_bar[ts]
    beta = np.zeros(K + 1)
    beta[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    alpha = 1.0 - beta
    return SubSchedule(
        K=K, parent=s, timesteps=ts, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
        beta_tilde=_posterior_variance(alpha_bar, beta),
    )


def schedule_from_descriptor(T: int, beta_start: float, beta_end: float, K: int) -> SubSchedule:
    return resample_subsequence(make_linear_schedule(T, beta_start, beta_end), K)
