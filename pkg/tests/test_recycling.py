import math

import numpy as np
import pytest

from diffseg import autodiff as ad
from diffseg.autodiff import Graph, NonFiniteError, Tensor
from diffseg.diffusion import PREDICT_EPS, PREDICT_X0, mask_to_signal, q_sample
from diffseg.losses import LossConfig
from diffseg.optim import OptimConfig, init_state
from diffseg.recycling import (
    RECYCLE,
    STANDARD,
    TrainConfig,
    build_inputs,
    build_inputs_recycle_eps,
    build_inputs_recycle_x0,
    build_inputs_standard,
    loss_and_grads,
    make_plan,
    sample_timestep,
    train_step,
)
from diffseg.schedule import schedule_from_descriptor
from diffseg.unet import UNetConfig, init_params, unet_apply

SCHED = schedule_from_descriptor(1000, 1e-4, 0.02, 5)
C = 3
SHAPE = (2, C, 4, 4, 4)


def setup(seed=0):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, C, (2, 4, 4, 4))
    return rng, mask, mask_to_signal(mask, C, dtype=np.float64)


def x0_oracle(x0):
    logits = Tensor(x0.data * 50.0)
    return lambda image, x, t: logits


def test_sample_timestep():
    rng = np.random.default_rng(0)
    assert set(sample_timestep(1, rng, size=100).tolist()) == {1}
    draws = sample_timestep(5, rng, size=100_000)
    freq = np.bincount(draws, minlength=6)[1:] / draws.size
    np.testing.assert_allclose(freq, 0.2, atol=0.01)
    a = sample_timestep(5, np.random.default_rng(3), size=20)
    b = sample_timestep(5, np.random.default_rng(3), size=20)
    np.testing.assert_array_equal(a, b)
    assert sample_timestep(5, rng, size=1000, exclude_last=True).max() == 4
    with pytest.raises(ValueError):
        sample_timestep(0, rng)


def test_plan_invariants():
    rng = np.random.default_rng(1)
    plan = make_plan(TrainConfig(), SCHED, (500, 1, 1, 1, 1), rng, dtype=np.float64)
    np.testing.assert_array_equal(plan.k_next, np.minimum(plan.k + 1, 5))
    assert plan.recycled.all()
    corr = np.corrcoef(plan.eps_k.data.ravel(), plan.eps_next.data.ravel())[0, 1]
    assert abs(corr) < 0.15


def test_strategies_share_step_and_noise_draws():
    a = make_plan(TrainConfig(strategy=STANDARD), SCHED, SHAPE, np.random.default_rng(2))
    b = make_plan(TrainConfig(strategy=RECYCLE), SCHED, SHAPE, np.random.default_rng(2))
    np.testing.assert_array_equal(a.k, b.k)
    np.testing.assert_array_equal(a.eps_k.data, b.eps_k.data)
    assert not a.recycled.any() and b.recycled.all()


def test_partial_recycling_probability():
    plan = make_plan(TrainConfig(recycle_prob=0.5), SCHED, (2000, 1, 1, 1, 1), np.random.default_rng(3))
    assert 0.45 < plan.recycled.mean() < 0.55
    with pytest.raises(ValueError):
        TrainConfig(recycle_prob=1.5)
    with pytest.raises(ValueError):
        TrainConfig(strategy="sometimes")


def test_standard_inputs_equal_q_sample():
    rng, _, x0 = setup(4)
    eps = Tensor(rng.standard_normal(SHAPE))
    k = np.array([1, 4])
    np.testing.assert_array_equal(build_inputs_standard(x0, k, eps, SCHED).data,
                                  q_sample(x0, k, eps, SCHED).data)
    zero = build_inputs_standard(x0, k, Tensor(np.zeros(SHAPE)), SCHED).data
    np.testing.assert_array_equal(zero, q_sample(x0, k, Tensor(np.zeros(SHAPE)), SCHED).data)


def test_last_step_input_is_nearly_uncorrelated_with_mask():
    rng = np.random.default_rng(5)
    corrs = []
    for _ in range(10):
        mask = rng.integers(0, C, (2, 8, 8, 8))
        x0 = mask_to_signal(mask, C, dtype=np.float64)
        xk = build_inputs_standard(x0, 5, Tensor(rng.standard_normal(x0.shape)), SCHED)
        corrs.append(np.corrcoef(xk.data.ravel(), x0.data.ravel())[0, 1])
    assert abs(np.mean(corrs)) < 0.05


def test_oracle_recycling_degenerates_to_standard_x0():
    rng, mask, x0 = setup(6)
    plan = make_plan(TrainConfig(), SCHED, SHAPE, rng, dtype=np.float64)
    xk, x0_pred = build_inputs_recycle_x0(x0, plan, x0_oracle(x0), Tensor(np.zeros((2, 1, 4, 4, 4))), SCHED)
    np.testing.assert_array_equal(x0_pred.data, x0.data)
    np.testing.assert_array_equal(xk.data, build_inputs_standard(x0, plan.k, plan.eps_k, SCHED).data)


def test_oracle_recycling_degenerates_to_standard_eps():
    rng, mask, x0 = setup(7)
    plan = make_plan(TrainConfig(loss=LossConfig(parameterization=PREDICT_EPS)), SCHED, SHAPE, rng,
                     dtype=np.float64)
    oracle = lambda image, x, t: plan.eps_next  # noqa: E731
    xk, x0_pred = build_inputs_recycle_eps(x0, plan, oracle, None, SCHED)
    np.testing.assert_allclose(x0_pred.data, x0.data, atol=1e-12)
    np.testing.assert_allclose(xk.data, build_inputs_standard(x0, plan.k, plan.eps_k, SCHED).data,
                               atol=1e-12)


def test_zero_noise_prediction_recycles_scaled_input():
    rng, mask, x0 = setup(8)
    plan = make_plan(TrainConfig(loss=LossConfig(parameterization=PREDICT_EPS)), SCHED, SHAPE, rng,
                     dtype=np.float64)
    zero = lambda image, x, t: Tensor(np.zeros(SHAPE))  # noqa: E731
    _, x0_pred = build_inputs_recycle_eps(x0, plan, zero, None, SCHED)
    x_next = q_sample(x0, plan.k_next, plan.eps_next, SCHED).data
    ab = SCHED.alpha_bar[plan.k_next].reshape(-1, 1, 1, 1, 1)
    np.testing.assert_allclose(x0_pred.data, np.clip(x_next / np.sqrt(ab), -1, 1), rtol=1e-14)


def test_eps_recycling_scalar_oracle():
    rng, mask, x0 = setup(9)
    plan = make_plan(TrainConfig(loss=LossConfig(parameterization=PREDICT_EPS)), SCHED, SHAPE, rng,
                     dtype=np.float64)
    seen = []

    def denoiser(image, x, t):
        seen.append(np.asarray(t).tolist())
        return Tensor(0.3 * x.data + 0.1)

    xk, _ = build_inputs_recycle_eps(x0, plan, denoiser, None, SCHED)
    assert seen == [SCHED.timesteps[plan.k_next].tolist()]
    ab = SCHED.alpha_bar
    for idx in np.ndindex(SHAPE):
        n = idx[0]
        kn, k = plan.k_next[n], plan.k[n]
        x_next = math.sqrt(ab[kn]) * x0.data[idx] + math.sqrt(1 - ab[kn]) * plan.eps_next.data[idx]
        e = 0.3 * x_next + 0.1
        est = min(1.0, max(-1.0, (x_next - math.sqrt(1 - ab[kn]) * e) / math.sqrt(ab[kn])))
        want = math.sqrt(ab[k]) * est + math.sqrt(1 - ab[k]) * plan.eps_k.data[idx]
        assert xk.data[idx] == pytest.approx(want, rel=1e-12, abs=1e-14)


def tiny_model(dtype="float64"):
    cfg = UNetConfig(num_classes=C, channels=(4, 4), time_dim=4, time_hidden=4, dtype=dtype)
    return cfg, init_params(cfg, 0)


def test_recycle_branch_carries_no_gradient():
    rng, mask, x0 = setup(10)
    cfg, params = tiny_model()
    apply_fn = lambda p, img, x, t: unet_apply(p, cfg, img, x, t)  # noqa: E731
    image = Tensor(rng.standard_normal((2, 1, 4, 4, 4)))
    plan = make_plan(TrainConfig(), SCHED, SHAPE, rng, dtype=np.float64)
    loss_cfg = LossConfig()

    with Graph(params) as g:
        denoiser = lambda img, x, t: apply_fn(params, img, x, t)  # noqa: E731
        xk = build_inputs(x0, plan, denoiser, image, SCHED)
        assert len(g) == 0
        from diffseg.losses import diffusion_loss
        out = apply_fn(params, image, xk, SCHED.timesteps[plan.k])
        loss, _ = diffusion_loss(out, mask, plan.eps_k, xk, plan.k, SCHED, loss_cfg)
    inside = ad.backward(g, loss)
    # same input as a plain constant, built outside any graph
    _, outside = loss_and_grads(params, apply_fn, image, Tensor(xk.data), plan, mask, SCHED, loss_cfg)
    for k in params:
        np.testing.assert_array_equal(inside[k].data, outside[k].data)


def test_oracle_recycler_gives_identical_gradients():
    rng, mask, x0 = setup(11)
    cfg, params = tiny_model()
    apply_fn = lambda p, img, x, t: unet_apply(p, cfg, img, x, t)  # noqa: E731
    image = Tensor(rng.standard_normal((2, 1, 4, 4, 4)))
    std = make_plan(TrainConfig(strategy=STANDARD), SCHED, SHAPE, np.random.default_rng(1), np.float64)
    rec = make_plan(TrainConfig(strategy=RECYCLE), SCHED, SHAPE, np.random.default_rng(1), np.float64)
    xs = build_inputs(x0, std, x0_oracle(x0), image, SCHED)
    xr = build_inputs(x0, rec, x0_oracle(x0), image, SCHED)
    _, gs = loss_and_grads(params, apply_fn, image, xs, std, mask, SCHED, LossConfig())
    _, gr = loss_and_grads(params, apply_fn, image, xr, rec, mask, SCHED, LossConfig())
    for k in params:
        np.testing.assert_array_equal(gs[k].data, gr[k].data)


def counting_apply(cfg, log):
    def apply_fn(p, img, x, t):
        log.append(ad.current_graph() is not None)
        return unet_apply(p, cfg, img, x, t)
    return apply_fn


@pytest.mark.parametrize("strategy, expected", [(RECYCLE, [False, True]), (STANDARD, [True])])
def test_forward_pass_count(strategy, expected):
    rng, mask, x0 = setup(12)
    cfg, params = tiny_model()
    log = []
    opt = init_state(params, OptimConfig())
    images = rng.standard_normal((2, 1, 4, 4, 4))
    train_step(params, counting_apply(cfg, log), images, mask, TrainConfig(strategy=strategy), opt, SCHED,
               rng, 1e-3, C)
    assert log == expected


@pytest.mark.parametrize("mode", [PREDICT_X0, PREDICT_EPS])
def test_repeated_steps_reduce_loss_on_a_frozen_batch(mode):
    rng, mask, _ = setup(13)
    cfg, params = tiny_model()
    images = rng.standard_normal((2, 1, 4, 4, 4))
    tcfg = TrainConfig(loss=LossConfig(parameterization=mode))
    apply_fn = lambda p, img, x, t: unet_apply(p, cfg, img, x, t)  # noqa: E731
    opt = init_state(params, OptimConfig(weight_decay=0.0))
    losses = []
    for _ in range(50):
        # fixed noise and step every time so only the parameters change
        res = train_step(params, apply_fn, images, mask, tcfg, opt, SCHED, np.random.default_rng(0), 3e-3, C)
        losses.append(res.terms["total"])
        params = res.params
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    def run():
        rng, mask, _ = setup(14)
        cfg, params = tiny_model("float32")
        images = rng.standard_normal((2, 1, 4, 4, 4))
        apply_fn = lambda p, img, x, t: unet_apply(p, cfg, img, x, t)  # noqa: E731
        opt = init_state(params)
        for _ in range(10):
            params = train_step(params, apply_fn, images, mask, TrainConfig(), opt, SCHED, rng, 1e-3, C).params
        return params

    a, b = run(), run()
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()


def test_non_finite_loss_names_step():
    rng, mask, _ = setup(15)
    cfg, params = tiny_model()
    bad = lambda p, img, x, t: ad.add(unet_apply(p, cfg, img, x, t), Tensor(np.array(np.inf)))  # noqa: E731
    opt = init_state(params)
    with pytest.raises(NonFiniteError, match="step 1"):
        train_step(params, bad, rng.standard_normal((2, 1, 4, 4, 4)), mask,
                   TrainConfig(strategy=STANDARD), opt, SCHED, rng, 1e-3, C)
    assert opt.step == 0
