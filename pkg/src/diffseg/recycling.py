"""Training-input construction with and without recycling, and one training step.

Recycling replaces the ground-truth mask used to build the noisy input at
step ``k`` with the model's own (gradient-stopped) mask estimate from step
``k + 1``, so training sees the same kind of input as sampling does.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, NonFiniteError, Tensor
from .diffusion import (
    PREDICT_X0,
    Denoiser,
    logits_to_signal,
    mask_to_signal,
    q_sample,
    signal_from_noise_pred,
)
from .losses import LossConfig, diffusion_loss, segmentation_loss
from .optim import OptimState, adamw_update
from .schedule import SubSchedule

STANDARD = "standard"
RECYCLE = "recycle"

# (params, image, x_t, timesteps) -> output
ApplyFn = Callable[[dict, Tensor, Tensor, np.ndarray], Tensor]


@dataclass
class TrainConfig:
    strategy: str = RECYCLE
    loss: LossConfig = field(default_factory=LossConfig)
    recycle_prob: float = 1.0
    # sample k from 1..K-1 instead of clamping the recycle source at K
    exclude_last: bool = False

    @property
    def parameterization(self) -> str:
        return self.loss.parameterization

    def __post_init__(self):
        if self.strategy not in (STANDARD, RECYCLE):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.recycle_prob <= 1.0:
            raise ValueError("recycle_prob must lie in [0, 1]")


@dataclass
class TrainStepPlan:
    strategy: str
    parameterization: str
    k: np.ndarray
    k_next: np.ndarray
    eps_k: Tensor
    eps_next: Tensor
    recycled: np.ndarray  # per-case flag; all True when recycling always applies


def sample_timestep(K: int, rng: np.random.Generator, size: Optional[int] = None,
                    exclude_last: bool = False):
    """Uniform over ``{1, ..., K}`` (or ``{1, ..., K-1}`` with ``exclude_last``)."""
    if K < 1:
        raise ValueError(f"K must be positive, got {K}")
    high = K - 1 if exclude_last and K > 1 else K
    return rng.integers(1, high + 1, size=size)


def make_plan(cfg: TrainConfig, sched: SubSchedule, signal_shape: tuple[int, ...],
              rng: np.random.Generator, dtype=np.float32) -> TrainStepPlan:
    """Draw steps and the two independent noises for one batch.

    Draw order is fixed and identical for both strategies, so a standard and
    a recycled run with the same seed see the same ``k`` and ``eps_k``.
    """
    n = signal_shape[0]
    k = sample_timestep(sched.K, rng, size=n, exclude_last=cfg.exclude_last)
    eps_k = Tensor(rng.standard_normal(signal_shape).astype(dtype))
    eps_next = Tensor(rng.standard_normal(signal_shape).astype(dtype))
    if cfg.strategy == RECYCLE and cfg.recycle_prob < 1.0:
        recycled = rng.random(n) < cfg.recycle_prob
    else:
        recycled = np.full(n, cfg.strategy == RECYCLE)
    return TrainStepPlan(
        strategy=cfg.strategy, parameterization=cfg.parameterization, k=k,
        k_next=np.minimum(k + 1, sched.K), eps_k=eps_k, eps_next=eps_next, recycled=recycled,
    )


def build_inputs_standard(x0: Tensor, k, eps_k: Tensor, sched: SubSchedule) -> Tensor:
    return q_sample(x0, k, eps_k, sched)


def _recycle(x0, plan, denoiser, image, sched, to_signal):
    x_next = q_sample(x0, plan.k_next, plan.eps_next, sched)
    with ad.no_grad():
        out = denoiser(image, x_next, sched.timesteps[plan.k_next])
        x0_pred = ad.stop_gradient(to_signal(out, x_next))
    return q_sample(x0_pred, plan.k, plan.eps_k, sched), x0_pred


def build_inputs_recycle_x0(x0: Tensor, plan: TrainStepPlan, denoiser: Denoiser, image: Tensor,
                            sched: SubSchedule) -> tuple[Tensor, Tensor]:
    """Noisy input at ``k`` built from the mask predicted at ``k_next``."""
    return _recycle(x0, plan, denoiser, image, sched, lambda out, x: logits_to_signal(out))


def build_inputs_recycle_eps(x0: Tensor, plan: TrainStepPlan, denoiser: Denoiser, image: Tensor,
                             sched: SubSchedule) -> tuple[Tensor, Tensor]:
    """As :func:`build_inputs_recycle_x0` for a noise-predicting network."""
    return _recycle(x0, plan, denoiser, image, sched,
                    lambda out, x: signal_from_noise_pred(x, plan.k_next, out, sched))


def build_inputs(x0: Tensor, plan: TrainStepPlan, denoiser: Denoiser, image: Tensor,
                 sched: SubSchedule) -> Tensor:
    standard = build_inputs_standard(x0, plan.k, plan.eps_k, sched)
    if not plan.recycled.any():
        return standard
    build = build_inputs_recycle_x0 if plan.parameterization == PREDICT_X0 else build_inputs_recycle_eps
    recycled, _ = build(x0, plan, denoiser, image, sched)
    if plan.recycled.all():
        return recycled
    keep = plan.recycled.reshape(-1, 1, 1, 1, 1)
    return Tensor(np.where(keep, recycled.data, standard.data))


@dataclass
class StepResult:
    params: dict[str, Tensor]
    terms: dict[str, float]
    grads: dict[str, Tensor]


def loss_and_grads(params: dict[str, Tensor], apply_fn: ApplyFn, image: Tensor, x_k: Tensor,
                   plan: TrainStepPlan, mask: np.ndarray, sched: SubSchedule,
                   loss_cfg: LossConfig) -> tuple[dict[str, float], dict[str, Tensor]]:
    """Gradient-carrying pass at the true step ``k`` against the ground-truth mask."""
    with Graph(params) as g:
        out = apply_fn(params, image, x_k, sched.timesteps[plan.k])
        loss, terms = diffusion_loss(out, mask, plan.eps_k, x_k, plan.k, sched, loss_cfg)
    return terms, ad.backward(g, loss)


def _guard(terms: dict[str, float], step: int) -> None:
    if not all(np.isfinite(v) for v in terms.values()):
        detail = ", ".join(f"{k}={v}" for k, v in terms.items())
        raise NonFiniteError(f"non-finite loss at step {step}: {detail}")


def train_step(params: dict[str, Tensor], apply_fn: ApplyFn, images: np.ndarray, masks: np.ndarray,
               cfg: TrainConfig, opt: OptimState, sched: SubSchedule, rng: np.random.Generator,
               lr: float, num_classes: int) -> StepResult:
    """Build inputs per strategy, compute the loss, apply one AdamW update."""
    dtype = next(iter(params.values())).dtype
    image = Tensor(np.asarray(images, dtype=dtype))
    x0 = mask_to_signal(masks, num_classes, dtype=dtype)
    plan = make_plan(cfg, sched, x0.shape, rng, dtype=dtype)
    denoiser = lambda img, x, t: apply_fn(params, img, x, t)  # noqa: E731
    x_k = build_inputs(x0, plan, denoiser, image, sched)
    try:
        terms, grads = loss_and_grads(params, apply_fn, image, x_k, plan, masks, sched, cfg.loss)
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {opt.step + 1}: {exc}") from exc
    _guard(terms, opt.step + 1)
    new_params, _ = adamw_update(params, grads, opt, lr)
    return StepResult(new_params, terms, grads)


def supervised_train_step(params: dict[str, Tensor], predict_fn: Callable, images: np.ndarray,
                          masks: np.ndarray, loss_cfg: LossConfig, opt: OptimState,
                          lr: float) -> StepResult:
    """Plain (image -> mask) training used by the non-diffusion baseline."""
    dtype = next(iter(params.values())).dtype
    image = Tensor(np.asarray(images, dtype=dtype))
    with Graph(params) as g:
        logits = predict_fn(params, image)
        terms = segmentation_loss(ad.softmax(logits, axis=1), masks, loss_cfg)
        loss = None
        for t in terms.values():
            loss = t if loss is None else ad.add(loss, t)
    breakdown = {k: float(v.data) for k, v in terms.items()}
    breakdown["total"] = float(loss.data)
    _guard(breakdown, opt.step + 1)
    grads = ad.backward(g, loss)
    new_params, _ = adamw_update(params, grads, opt, lr)
    return StepResult(new_params, breakdown, grads)
