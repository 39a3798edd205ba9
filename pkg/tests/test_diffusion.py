import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sota.diffusion import (BETA_MAX, BETA_MIN, Denoiser, RecedingHorizonController, forward_noise,
                            inference_steps, make_schedule, sample_chunk, training_loss)
from sota.numerics import ParamStore, Tensor, check_gradients, projected

from toys import regress_bimodal, sample_bimodal, train_bimodal


def cosine_oracle(n):
    f = lambda s: math.cos(((s / n) + 0.008) / 1.008 * math.pi / 2) ** 2
    ab = [f(s) / f(0) for s in range(n + 1)]
    betas = [0.0] + [min(max(1 - ab[s] / ab[s - 1], 1e-5), 0.999) for s in range(1, n + 1)]
    out = [1.0]
    for b in betas[1:]:
        out.append(out[-1] * (1 - b))
    return betas, out


@pytest.mark.parametrize("n", [1, 10, 50, 100])
def test_schedule_invariants(n):
    s = make_schedule(n)
    assert s.alpha_bar[0] == 1.0 and s.betas[0] == 0.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.betas[1:] >= BETA_MIN) & (s.betas[1:] <= BETA_MAX))
    assert np.all((s.betas[1:] > 0) & (s.betas[1:] < 1))
    betas, ab = cosine_oracle(n)
    assert np.allclose(s.betas, betas, rtol=0, atol=1e-14)
    assert np.allclose(s.alpha_bar, ab, rtol=1e-12, atol=0)


def test_schedule_ends_near_pure_noise():
    assert make_schedule(100).alpha_bar[-1] < 0.01
    with pytest.raises(ValueError):
        make_schedule(0)


def test_forward_noise_trivial_cases(rng):
    s = make_schedule(100)
    y0, eps = rng.standard_normal((2, 16, 3)), rng.standard_normal((2, 16, 3))
    assert np.array_equal(forward_noise(y0, 0, eps, s), y0)
    assert np.allclose(forward_noise(np.zeros_like(y0), 40, eps, s), math.sqrt(1 - s.alpha_bar[40]) * eps)
    per = forward_noise(y0, np.array([0, 40]), eps, s)
    assert np.array_equal(per[0], y0[0])
    assert np.allclose(per[1], forward_noise(y0[1], 40, eps[1], s))
    for bad in (-1, 101):
        with pytest.raises(ValueError):
            forward_noise(y0, bad, eps, s)


@pytest.mark.parametrize("step", [1, 10, 50, 90, 100])
def test_forward_noise_variance_monte_carlo(step):
    sched = make_schedule(100)
    r = np.random.default_rng(step)
    y0 = r.normal(0.3, 0.7, 100_000)
    ys = forward_noise(y0, step, r.standard_normal(100_000), sched)
    ab = sched.alpha_bar[step]
    want = ab * y0.var() + (1 - ab)
    assert abs(ys.var() / want - 1) < 0.02


def test_closed_form_matches_stepwise_moments():
    """Composing one-step noising reproduces the closed-form mean scale and variance."""
    sched = make_schedule(100)
    mean_scale, var = 1.0, 0.0
    for s in range(1, 101):
        b = sched.betas[s]
        mean_scale *= math.sqrt(1 - b)
        var = (1 - b) * var + b
        assert math.isclose(mean_scale ** 2, sched.alpha_bar[s], rel_tol=1e-12)
        assert math.isclose(var, 1 - sched.alpha_bar[s], rel_tol=1e-10, abs_tol=1e-15)


def test_loss_zero_for_exact_noise_stub(rng):
    sched = make_schedule(100)
    y0 = rng.standard_normal((8, 16, 3))
    state = {}

    def oracle(ys, s, cond):
        ab = sched.alpha_bar[s][:, None, None]
        return Tensor((ys.data - np.sqrt(ab) * y0) / np.sqrt(1 - ab))

    loss = training_loss(y0, Tensor(np.zeros((8, 4))), oracle, sched, np.random.default_rng(0))
    assert loss.item() < 1e-20


def test_loss_near_one_for_zero_stub():
    sched = make_schedule(100)
    zero = lambda ys, s, cond: Tensor(np.zeros(ys.shape))
    loss = training_loss(np.zeros((4096, 16, 3)), Tensor(np.zeros((4096, 1))), zero, sched,
                         np.random.default_rng(3))
    assert abs(loss.item() - 1) < 0.02


def tiny_denoiser(seed, cond_dim=5):
    store = ParamStore(seed=seed)
    den = Denoiser(store, cond_dim, d_action=2, t_h=4, widths=(3, 4, 5), step_dim=4, cond_hidden=3)
    r = np.random.default_rng(seed)
    # zero-initialized layers give trivial gradients; perturb them for a meaningful check
    for k, p in store.items():
        if not p.data.any():
            p.data[...] = r.standard_normal(p.shape) * 0.3
    return store, den


def test_denoiser_shapes_and_zero_output_at_init():
    store = ParamStore(seed=0)
    den = Denoiser(store, 12, t_h=16)
    out = den(Tensor(np.ones((2, 16, 3))), np.array([3, 7]), Tensor(np.ones((2, 12))))
    assert out.shape == (2, 16, 3) and not out.data.any()
    with pytest.raises(ValueError):
        Denoiser(ParamStore(), 4, t_h=6)


@pytest.mark.parametrize("seed", range(20))
def test_denoiser_and_loss_gradients(seed):
    store, den = tiny_denoiser(seed)
    r = np.random.default_rng(seed)
    cond = Tensor(r.standard_normal((2, 5)), requires_grad=True)
    y = Tensor(r.standard_normal((2, 4, 2)), requires_grad=True)
    s = np.array([1 + seed % 7, 9])
    rep = check_gradients(projected(lambda: den(y, s, cond), seed), dict(store.items(), y=y, cond=cond),
                          max_entries=4, seed=seed)
    assert rep.passed, str(rep)
    sched = make_schedule(10)
    y0 = r.standard_normal((2, 4, 2))
    loss = lambda: training_loss(y0, cond, den, sched, np.random.default_rng(seed))
    rep = check_gradients(loss, dict(store.items(), cond=cond), max_entries=4, seed=seed)
    assert rep.passed, str(rep)


def test_inference_steps():
    assert inference_steps(100, 1) == [100]
    assert inference_steps(100, 2) == [100, 1]
    assert inference_steps(10, 10) == list(range(10, 0, -1))
    st10 = inference_steps(100, 10)
    assert len(st10) == 10 and st10[0] == 100 and st10[-1] == 1
    assert all(a > b for a, b in zip(st10, st10[1:]))
    for n_inf in (0, 101):
        with pytest.raises(ValueError):
            inference_steps(100, n_inf)


@given(st.integers(1, 200), st.data())
def test_inference_steps_property(n_diff, data):
    n_inf = data.draw(st.integers(1, n_diff))
    steps = inference_steps(n_diff, n_inf)
    assert steps[0] == n_diff and (n_inf == 1 or steps[-1] == 1)
    assert len(steps) == n_inf
    assert all(a > b for a, b in zip(steps, steps[1:]))


def test_sampler_recovers_delta_data_with_perfect_stub():
    sched = make_schedule(100)
    y0 = np.linspace(-0.8, 0.8, 12).reshape(1, 4, 3)

    def perfect(ys, s, cond):
        ab = sched.alpha_bar[s][:, None, None]
        return Tensor((ys.data - np.sqrt(ab) * y0) / np.sqrt(1 - ab))

    for n_inf in (100, 10, 1):
        out = sample_chunk(Tensor(np.zeros((1, 2))), sched, n_inf, perfect, np.random.default_rng(0),
                           (1, 4, 3), clip=None)
        assert np.allclose(out, y0, atol=1e-9)


def test_sampler_determinism_and_errors():
    sched = make_schedule(20)
    store, den = tiny_denoiser(0, cond_dim=3)
    cond = Tensor(np.ones((2, 3)))
    a = sample_chunk(cond, sched, 5, den, np.random.default_rng(7), (2, 4, 2))
    b = sample_chunk(cond, sched, 5, den, np.random.default_rng(7), (2, 4, 2))
    c = sample_chunk(cond, sched, 5, den, np.random.default_rng(8), (2, 4, 2))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.all(np.abs(a) <= 1)
    with pytest.raises(ValueError):
        sample_chunk(cond, sched, 0, den, np.random.default_rng(0), (2, 4, 2))


def test_bimodal_modes_recovered_where_regression_collapses():
    sched, den, reg = train_bimodal(steps=800)
    x = sample_bimodal(sched, den, n=200)
    means = x.mean(axis=(1, 2))
    assert np.mean(np.abs(x) <= 0.5) < 0.05
    assert np.sum(means > 0.5) >= 20 and np.sum(means < -0.5) >= 20
    assert np.all(np.abs(regress_bimodal(reg)) <= 0.5)


class Recorder:
    def __init__(self, chunk):
        self.chunk, self.windows = chunk, []

    def __call__(self, window):
        self.windows.append(list(window))
        return self.chunk


def test_receding_horizon_pads_and_replans():
    chunk = np.arange(16 * 3, dtype=float).reshape(16, 3)
    for n_exec, plans in ((1, 20), (8, 3)):
        rec = Recorder(chunk)
        ctl = RecedingHorizonController(rec, t_w=8, n_exec=n_exec)
        acts = [ctl.step(i) for i in range(20)]
        assert ctl.n_plans == plans
        assert all(a.shape == (3,) for a in acts)
        assert np.array_equal(acts[0], chunk[0])
        assert np.array_equal(acts[n_exec - 1], chunk[n_exec - 1])
    assert rec.windows[0] == [0] * 8
    assert rec.windows[1] == list(range(1, 9))


def test_zero_chunk_keeps_robot_still():
    ctl = RecedingHorizonController(lambda w: np.zeros((16, 3)), t_w=4, n_exec=8)
    pose = np.zeros(3)
    for t in range(30):
        pose = pose + ctl.step(pose)
    assert not pose.any()


def test_controller_errors():
    with pytest.raises(ValueError):
        RecedingHorizonController(lambda w: w, n_exec=0)
    with pytest.raises(ValueError):
        RecedingHorizonController(lambda w: w).step()
