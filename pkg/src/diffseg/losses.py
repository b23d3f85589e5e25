"""Segmentation and diffusion training losses.

Probabilities and masks may be batched (``[N, C, D, H, W]`` / ``[N, D, H, W]``)
or single (``[C, D, H, W]`` / ``[D, H, W]``). Every loss is a mean over the
batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor
from .diffusion import PREDICT_EPS, PREDICT_X0, channel_axis, signal_from_noise_pred
from .schedule import SubSchedule

DICE_SMOOTH = 1e-5
# keeps per-voxel renormalization defined when every clipped channel is -1
RENORM_EPS = 1e-6


@dataclass
class LossConfig:
    use_dice: bool = True
    use_ce: bool = True
    noise_l2_weight: float = 0.1
    parameterization: str = PREDICT_X0

    def __post_init__(self):
        if not (self.use_dice or self.use_ce):
            raise ValueError("at least one segmentation loss term must be enabled")
        if self.noise_l2_weight < 0:
            raise ValueError("noise_l2_weight must be non-negative")
        if self.parameterization not in (PREDICT_X0, PREDICT_EPS):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")


def _onehot(mask: np.ndarray, probs: Tensor) -> np.ndarray:
    C = probs.shape[channel_axis(probs)]
    ax = channel_axis(probs)
    expected = probs.shape[:ax] + probs.shape[ax + 1:]
    if tuple(mask.shape) != expected:
        raise ShapeError(f"mask shape {mask.shape} does not match probabilities {probs.shape}")
    return np.stack([mask == c for c in range(C)], axis=ax).astype(probs.dtype)


def cross_entropy(probs: Tensor, target_mask: np.ndarray) -> Tensor:
    """Voxel-mean of ``-log p[target]`` (log floored at 1e-12)."""
    y = _onehot(np.asarray(target_mask), probs)
    ax = channel_axis(probs)
    picked = ad.sum(ad.mul(ad.log(probs), y), axis=ax)
    return ad.neg(ad.mean(picked))


def dice_loss(probs: Tensor, target_mask: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """One minus the soft Dice averaged over foreground classes and cases."""
    ax = channel_axis(probs)
    C = probs.shape[ax]
    if C < 2:
        raise ShapeError("dice loss needs a background and at least one foreground class")
    y = _onehot(np.asarray(target_mask), probs)
    spatial = (-3, -2, -1)
    p_fg = ad.split(probs, [1, C - 1], axis=ax)[1]
    y_fg = y.take(range(1, C), axis=ax)
    inter = ad.sum(ad.mul(p_fg, y_fg), axis=spatial)
    denom = ad.add(ad.sum(p_fg, axis=spatial), y_fg.sum(axis=spatial) + smooth)
    dice = ad.div(ad.scale(inter, 2.0) + smooth, denom)
    return ad.neg(ad.mean(dice)) + 1.0


def probs_from_signal(x0: Tensor) -> Tensor:
    """Map a [-1, 1] mask estimate to per-voxel probabilities."""
    ax = channel_axis(x0)
    p = ad.scale(ad.clip(x0, -1.0, 1.0) + 1.0, 0.5) + RENORM_EPS
    return ad.div(p, ad.sum(p, axis=ax, keepdims=True))


def segmentation_loss(probs: Tensor, mask: np.ndarray, cfg: LossConfig) -> dict[str, Tensor]:
    terms = {}
    if cfg.use_ce:
        terms["ce"] = cross_entropy(probs, mask)
    if cfg.use_dice:
        terms["dice"] = dice_loss(probs, mask)
    return terms


def diffusion_loss(output: Tensor, mask: np.ndarray, eps: Tensor, x_t: Tensor, k, sched: SubSchedule,
                   cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Total loss and a float breakdown of its terms.

    ``output`` holds logits (``predict_x0``) or a noise estimate
    (``predict_eps``); ``eps`` is the noise that produced ``x_t``.
    """
    if cfg.parameterization == PREDICT_X0:
        probs = ad.softmax(output, axis=channel_axis(output))
        terms = segmentation_loss(probs, mask, cfg)
    else:
        l2 = ad.mean(ad.square(ad.sub(eps, output)))
        probs = probs_from_signal(signal_from_noise_pred(x_t, k, output, sched))
        terms = segmentation_loss(probs, mask, cfg)
        terms["l2"] = ad.scale(l2, cfg.noise_l2_weight)
    total = None
    for term in terms.values():
        total = term if total is None else ad.add(total, term)
    breakdown = {name: float(t.data) for name, t in terms.items()}
    for name, value in breakdown.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"loss term {name} is not finite")
    breakdown["total"] = float(total.data)
    return total, breakdown
