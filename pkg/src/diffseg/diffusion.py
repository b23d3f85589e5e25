"""Mask encodings, forward noising and the reverse denoising process.

Signals are :class:`~diffseg.autodiff.Tensor` objects shaped ``[C, D, H, W]``
or batched ``[N, C, D, H, W]``; masks are integer arrays ``[D, H, W]`` or
``[N, D, H, W]``. Step arguments ``k`` index the :class:`SubSchedule` and may
be an int or a per-sample integer array.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .schedule import SubSchedule

PREDICT_X0 = "predict_x0"
PREDICT_EPS = "predict_eps"
MODES = (PREDICT_X0, PREDICT_EPS)

Step = Union[int, np.ndarray]
# (image, x_t, parent timesteps) -> network output
Denoiser = Callable[[Tensor, Tensor, np.ndarray], Tensor]


@dataclass
class Volume:
    """Scalar image ``[1, D, H, W]`` with voxel spacing in mm."""

    intensities: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def channel_axis(x) -> int:
    return x.ndim - 4


def mask_to_signal(mask: np.ndarray, C: int, dtype=np.float32) -> Tensor:
    """One-hot encode then map {0, 1} to {-1, +1}."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= C):
        raise ValueError(f"labels must lie in [0, {C}), got range [{mask.min()}, {mask.max()}]")
    onehot = np.stack([mask == c for c in range(C)], axis=mask.ndim - 3)
    return Tensor(2.0 * onehot.astype(dtype) - 1.0)


def signal_to_mask(x) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(data, axis=data.ndim - 4).astype(np.uint8)


def logits_to_signal(logits: Tensor) -> Tensor:
    return ad.scale(ad.softmax(logits, axis=channel_axis(logits)), 2.0) - 1.0


def _shaped(v, like: Tensor) -> np.ndarray:
    """Scalar or per-sample coefficient shaped to broadcast against ``like``."""
    v = np.asarray(v, dtype=like.dtype)
    if v.ndim == 0:
        return v
    if like.ndim != 5 or v.shape[0] != like.shape[0]:
        raise ShapeError(f"per-sample steps {v.shape} do not match batch of {like.shape}")
    return v.reshape(-1, 1, 1, 1, 1)


def _coef(values: np.ndarray, k: Step, like: Tensor) -> np.ndarray:
    return _shaped(values[np.asarray(k)], like)


def _check_step(k: Step, sched: SubSchedule, lowest: int = 1) -> None:
    k = np.asarray(k)
    if k.size and (k.min() < lowest or k.max() > sched.K):
        raise ValueError(f"step must lie in [{lowest}, {sched.K}], got {k.tolist()}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def q_sample(x0: Tensor, k: Step, eps: Tensor, sched: SubSchedule) -> Tensor:
    """``sqrt(abar_k) * x0 + sqrt(1 - abar_k) * eps``; not clipped."""
    _check_step(k, sched, lowest=0)
    _same_shape(x0, eps, "q_sample")
    ab = sched.alpha_bar
    return x0 * _coef(np.sqrt(ab), k, x0) + eps * _coef(np.sqrt(1.0 - ab), k, eps)


def x0_from_eps(x_t: Tensor, k: Step, eps: Tensor, sched: SubSchedule) -> Tensor:
    """Exact algebraic inverse of :func:`q_sample` (no clipping)."""
    ab = sched.alpha_bar
    return (x_t - eps * _coef(np.sqrt(1.0 - ab), k, eps)) / _coef(np.sqrt(ab), k, x_t)


def signal_from_noise_pred(x_t: Tensor, k: Step, eps_pred: Tensor, sched: SubSchedule) -> Tensor:
    """Mask estimate implied by a noise prediction, clipped to [-1, 1]."""
    _same_shape(x_t, eps_pred, "signal_from_noise_pred")
    return ad.clip(x0_from_eps(x_t, k, eps_pred, sched), -1.0, 1.0)


def posterior_mean(x_t: Tensor, k: Step, prediction: Tensor, mode: str, sched: SubSchedule) -> Tensor:
    """Reverse-process mean from a mask estimate or from a noise estimate."""
    if np.any(np.asarray(k) == 0):
        raise ValueError("posterior mean is undefined at step 0")
    _check_step(k, sched)
    _same_shape(x_t, prediction, "posterior_mean")
    ab, beta, alpha = sched.alpha_bar, sched.beta, sched.alpha
    k = np.asarray(k)
    if mode == PREDICT_X0:
        c0 = np.sqrt(ab[k - 1]) * beta[k] / (1.0 - ab[k])
        ct = (1.0 - ab[k - 1]) / (1.0 - ab[k]) * np.sqrt(alpha[k])
        return prediction * _shaped(c0, x_t) + x_t * _shaped(ct, x_t)
    if mode == PREDICT_EPS:
        ce = beta[k] / np.sqrt(1.0 - ab[k])
        return (x_t - prediction * _shaped(ce, x_t)) * _shaped(1.0 / np.sqrt(alpha[k]), x_t)
    raise ValueError(f"unknown mode {mode!r}")


def reverse_step(x_t: Tensor, k: Step, prediction: Tensor, mode: str, sched: SubSchedule,
                 rng: np.random.Generator) -> Tensor:
    """One ancestral step; no noise at ``k == 1`` where the variance is zero."""
    mu = posterior_mean(x_t, k, prediction, mode, sched)
    var = np.asarray(sched.beta_tilde[np.asarray(k)])
    if np.any(var > 0):
        z = rng.standard_normal(mu.shape).astype(mu.dtype)
        mu = mu + Tensor(z) * _coef(np.sqrt(sched.beta_tilde), k, mu)
    return ad.clip(mu, -1.0, 1.0)


def estimate_x0(output: Tensor, x_t: Tensor, k: Step, mode: str, sched: SubSchedule) -> Tensor:
    """Clipped mask estimate from a raw network output."""
    if mode == PREDICT_X0:
        return logits_to_signal(output)
    return signal_from_noise_pred(x_t, k, output, sched)


def sample_mask(denoiser: Denoiser, image: Tensor, sched: SubSchedule, rng: np.random.Generator,
                mode: str = PREDICT_X0, num_classes: int = 2) -> tuple[np.ndarray, Tensor]:
    """Run the K-step reverse process from pure noise.

    ``image`` is ``[1, D, H, W]`` or batched ``[N, 1, D, H, W]``. Returns the
    argmax mask and the final signal.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    shape = list(image.shape)
    shape[channel_axis(image)] = num_classes
    x = Tensor(rng.standard_normal(shape).astype(image.dtype))
    batch = image.shape[0] if image.ndim == 5 else None
    with ad.no_grad():
        for k in range(sched.K, 0, -1):
            t = np.full(batch or 1, sched.timesteps[k], dtype=np.int64)
            out = denoiser(image, x, t)
            if mode == PREDICT_X0:
                out = logits_to_signal(out)
            x = reverse_step(x, k, out, mode, sched, rng)
    return signal_to_mask(x), x
