import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sota.numerics import NonFiniteError, Tensor, check_gradients
from sota.ot import (OTProblem, entropic_objective, exact_oracle, export_plan_csv, marginal_error,
                     sinkhorn_logdomain)


def simplex(rng, n):
    return rng.dirichlet(np.ones(n))


def plain_sinkhorn(C, a, b, eps, iters=1000):
    """Independent reference: multiplicative scaling in the probability domain."""
    K = np.exp(-C / eps)
    v = np.ones_like(b)
    for _ in range(iters):
        u = a / (K @ v)
        v = b / (K.T @ u)
    return u[:, None] * K * v[None, :]


@st.composite
def instances(draw, max_l=3, max_p=4):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    L, P = draw(st.integers(1, max_l)), draw(st.integers(1, max_p))
    eps = draw(st.sampled_from([0.05, 0.2, 1.0]))
    return rng.uniform(-1, 1, (L, P)), simplex(rng, L), simplex(rng, P), eps


def test_zero_cost_is_product_coupling():
    prob = OTProblem(np.zeros((3, 4)), np.full(3, 1 / 3), np.full(4, 1 / 4), 0.2, 5)
    plan = sinkhorn_logdomain(prob)
    assert np.allclose(plan.numpy(), 1 / 12, atol=1e-15)
    assert max(marginal_error(plan, prob)) <= 1e-12


def test_single_row_equals_capacity(rng):
    b = simplex(rng, 6)
    prob = OTProblem(rng.standard_normal((1, 6)), [1.0], b, 0.2, 3)
    assert np.allclose(sinkhorn_logdomain(prob).numpy()[0], b, atol=1e-15)


def test_matches_plain_domain_reference(rng):
    C = rng.uniform(-1, 0, (2, 3))
    a, b = simplex(rng, 2), simplex(rng, 3)
    plan = sinkhorn_logdomain(OTProblem(C, a, b, 0.2, 1000)).numpy()
    assert np.allclose(plan, plain_sinkhorn(C, a, b, 0.2), atol=1e-6, rtol=0)


def test_default_shape_row_error_after_five_rounds():
    # typical size of the supply mismatch left by the unrolled solver at its default settings
    errs = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        prob = OTProblem(r.uniform(-1, 1, (2, 49)), simplex(r, 2), np.full(49, 1 / 49), 0.2, 5)
        row, col = marginal_error(sinkhorn_logdomain(prob), prob)
        assert col <= 1e-9
        errs.append(row)
    assert np.median(errs) < 1e-2


def test_long_run_row_error(rng):
    prob = OTProblem(rng.uniform(-1, 1, (2, 49)), simplex(rng, 2), np.full(49, 1 / 49), 0.2, 1000)
    assert marginal_error(sinkhorn_logdomain(prob), prob)[0] <= 1e-8


def test_row_error_decreases_with_rounds(rng):
    C, a, b = rng.uniform(-1, 1, (3, 7)), simplex(rng, 3), simplex(rng, 7)
    errs = [marginal_error(sinkhorn_logdomain(OTProblem(C, a, b, 0.2, n)), OTProblem(C, a, b))[0]
            for n in range(1, 30)]
    assert all(e2 <= e1 + 1e-15 for e1, e2 in zip(errs, errs[1:]))


@given(instances(3, 8))
def test_columns_exact_and_plan_nonnegative(inst):
    C, a, b, eps = inst
    prob = OTProblem(C, a, b, eps, 5)
    plan = sinkhorn_logdomain(prob)
    assert plan.numpy().min() >= 0
    assert marginal_error(plan, prob)[1] <= 1e-9


@given(instances())
def test_matches_exact_oracle(inst):
    C, a, b, eps = inst
    got = sinkhorn_logdomain(OTProblem(C, a, b, eps, 1000)).numpy()
    ref = exact_oracle(OTProblem(C, a, b, eps)).numpy()
    assert np.abs(got - ref).max() <= 1e-6


@given(st.floats(-3, 3), st.sampled_from([0.01, 0.2, 5.0]), st.integers(0, 10**6))
def test_constant_cost_product_coupling(c, eps, seed):
    r = np.random.default_rng(seed)
    a, b = simplex(r, 3), simplex(r, 5)
    plan = sinkhorn_logdomain(OTProblem(np.full((3, 5), c), a, b, eps, 5)).numpy()
    assert np.abs(plan - np.outer(a, b)).max() <= 1e-9


@given(st.integers(0, 10**6))
def test_temperature_limit_monotone(seed):
    r = np.random.default_rng(seed)
    C, a, b = r.uniform(-1, 1, (2, 3)), simplex(r, 2), simplex(r, 3)
    dist = [np.abs(exact_oracle(OTProblem(C, a, b, e)).numpy() - np.outer(a, b)).max()
            for e in (0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 20.0)]
    assert all(d2 <= d1 + 1e-10 for d1, d2 in zip(dist, dist[1:]))
    assert dist[-1] < 0.05


def test_objective_closed_forms():
    prob = OTProblem(np.zeros((3, 4)), np.full(3, 1 / 3), np.full(4, 1 / 4), 0.2)
    assert np.isclose(entropic_objective(np.full((3, 4), 1 / 12), prob).data, -0.2 * np.log(12), atol=1e-14)
    one = OTProblem([[0.37]], [1.0], [1.0], 0.2)
    assert np.isclose(entropic_objective([[1.0]], one).data, 0.37, atol=1e-15)


def test_objective_minimum_on_one_parameter_grid(rng):
    C = rng.uniform(-1, 1, (2, 2))
    a, b = np.array([0.3, 0.7]), np.array([0.55, 0.45])
    prob = OTProblem(C, a, b, 0.2, 2000)

    def obj(t):
        P = np.array([[t, a[0] - t], [b[0] - t, 1 - a[0] - b[0] + t]])
        P = np.where(P > 0, P, 0.0)
        return float((P * C).sum() + 0.2 * np.where(P > 0, P * np.log(np.where(P > 0, P, 1)), 0).sum())

    lo, hi = max(0.0, a[0] + b[0] - 1), min(a[0], b[0])
    grid = np.linspace(lo, hi, 200001)[1:-1]
    vals = np.array([obj(t) for t in grid])
    i = int(vals.argmin())
    fine = np.linspace(grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)], 2001)
    best = min(obj(t) for t in fine)
    got = float(entropic_objective(sinkhorn_logdomain(prob), prob).data)
    assert abs(got - best) <= 1e-6
    assert got <= best + 1e-9


def test_objective_rejects_negative_plan():
    with pytest.raises(ValueError):
        entropic_objective([[-0.1, 1.1]], OTProblem([[0.0, 0.0]], [1.0], [0.5, 0.5]))


@pytest.mark.parametrize("seed", range(20))
def test_objective_gradient_through_unrolled_solver(seed):
    r = np.random.default_rng(seed)
    C = Tensor(r.uniform(-1, 1, (2, 5)), requires_grad=True)
    a = simplex(r, 2)

    def loss():
        prob = OTProblem(C, a, np.full(5, 0.2), 0.2, 5)
        return entropic_objective(sinkhorn_logdomain(prob), prob)

    rep = check_gradients(loss, {"C": C})
    assert rep.passed, str(rep)


def test_problem_validation():
    with pytest.raises(ValueError):
        OTProblem(np.zeros((1, 2)), [1.0], [0.5, 0.5], epsilon=0.0)
    with pytest.raises(NonFiniteError):
        OTProblem(np.array([[np.inf, 0.0]]), [1.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        OTProblem(np.zeros((1, 2)), [1.0], [0.6, 0.6])
    with pytest.raises(ValueError):
        exact_oracle(OTProblem(np.zeros((2, 5)), [0.5, 0.5], np.full(5, 0.2)))


def test_zero_marginal_entry_is_clamped():
    prob = OTProblem(np.zeros((2, 3)), [1.0, 0.0], [0.2, 0.3, 0.5], 0.2, 5)
    plan = sinkhorn_logdomain(prob).numpy()
    assert np.all(np.isfinite(plan))
    assert plan[1].sum() < 1e-10
    assert np.allclose(plan.sum(0), [0.2, 0.3, 0.5], atol=1e-9)


def test_export_csv(tmp_path):
    prob = OTProblem(np.zeros((2, 3)), [0.5, 0.5], [0.2, 0.3, 0.5])
    export_plan_csv(sinkhorn_logdomain(prob), tmp_path / "plan.csv")
    back = np.loadtxt(tmp_path / "plan.csv", delimiter=",")
    assert back.shape == (2, 3) and np.isclose(back.sum(), 1.0)
