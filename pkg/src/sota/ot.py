"""Entropy-regularized optimal transport with a log-domain Sinkhorn solver.

The solver alternates the two dual updates a fixed number of times and
always finishes on the column update, so the returned plan's column sums
equal the capacity to machine precision.  Everything runs on ``Tensor``
so the unrolled iterations are differentiable w.r.t. the cost and supply.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import NonFiniteError, Tensor, as_tensor
from .numerics import ops as T

MARGINAL_FLOOR = 1e-12
ORACLE_MAX_SIZE = 4


@dataclass
class OTProblem:
    cost: Tensor            # [..., L, P]
    supply: Tensor          # [..., L], sums to 1
    capacity: Tensor        # [P] or [..., P], sums to 1
    epsilon: float = 0.2
    n_iter: int = 5

    def __post_init__(self):
        self.cost = as_tensor(self.cost)
        self.supply = as_tensor(self.supply)
        self.capacity = as_tensor(self.capacity)
        if not self.epsilon > 0:
            raise ValueError(f"temperature must be positive, got {self.epsilon}")
        if self.n_iter < 1:
            raise ValueError("need at least one Sinkhorn iteration")
        if not np.all(np.isfinite(self.cost.data)):
            raise NonFiniteError("non-finite transport cost")
        for name, m in (("supply", self.supply), ("capacity", self.capacity)):
            if np.any(m.data < 0):
                raise ValueError(f"{name} has negative entries")
            if np.any(np.abs(m.data.sum(axis=-1) - 1.0) > 1e-9):
                raise ValueError(f"{name} must sum to 1")

    @property
    def shape(self) -> tuple:
        return self.cost.shape[-2:]


@dataclass
class TransportPlan:
    plan: Tensor        # [..., L, P]
    kappa: Tensor       # row duals [..., L]
    nu: Tensor          # column duals [..., P]
    row_err: float
    col_err: float

    def numpy(self) -> np.ndarray:
        return self.plan.data


def safe_log_marginal(m: Tensor) -> Tensor:
    """log of a marginal with zero entries clamped to the floor and renormalized."""
    if np.any(m.data < MARGINAL_FLOOR):
        m = T.maximum(m, MARGINAL_FLOOR)
        m = m / m.sum(axis=-1, keepdims=True)
    return T.log(m)


def sinkhorn_duals(cost, log_supply, log_capacity, epsilon: float, n_iter: int,
                   nu0=None) -> tuple[Tensor, Tensor]:
    """Unrolled log-domain updates; returns (kappa, nu) after ``n_iter`` rounds.

    Each round updates the row duals from the current column duals and
    then the column duals from the new row duals.
    """
    cost = as_tensor(cost)
    scaled = cost * (-1.0 / epsilon)
    nu = as_tensor(nu0) if nu0 is not None else Tensor(np.zeros(cost.shape[:-2] + cost.shape[-1:],
                                                                dtype=cost.dtype))
    lcap = as_tensor(log_capacity)
    log_supply = as_tensor(log_supply)
    if not any(x.requires_grad for x in (scaled, nu, lcap, log_supply)):
        k, n = _sinkhorn_plain(scaled.data, log_supply.data, lcap.data, nu.data, n_iter)
        return (Tensor(k) if k is not None else None), Tensor(n)
    kappa = None
    for _ in range(n_iter):
        kappa = log_supply - T.logsumexp(scaled + T.reshape(nu, nu.shape[:-1] + (1,) + nu.shape[-1:]),
                                         axis=-1)
        nu = lcap - T.logsumexp(scaled + T.reshape(kappa, kappa.shape + (1,)), axis=-2)
    return kappa, nu


def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m, axis)


def _sinkhorn_plain(scaled, log_supply, lcap, nu, n_iter):
    # same arithmetic as the taped loop, without graph bookkeeping
    kappa = None
    for _ in range(n_iter):
        kappa = log_supply - _lse(scaled + nu[..., None, :], -1)
        nu = lcap - _lse(scaled + kappa[..., None], -2)
    return kappa, nu


def recover_plan(cost, kappa, nu, epsilon: float) -> Tensor:
    cost = as_tensor(cost)
    return T.exp(T.reshape(kappa, kappa.shape + (1,)) - cost * (1.0 / epsilon)
                 + T.reshape(nu, nu.shape[:-1] + (1,) + nu.shape[-1:]))


def sinkhorn_logdomain(problem: OTProblem, nu0=None) -> TransportPlan:
    """Solve the entropic OT problem with exactly ``problem.n_iter`` rounds."""
    log_g = safe_log_marginal(problem.supply)
    log_b = safe_log_marginal(problem.capacity)
    kappa, nu = sinkhorn_duals(problem.cost, log_g, log_b, problem.epsilon, problem.n_iter, nu0)
    plan = recover_plan(problem.cost, kappa, nu, problem.epsilon)
    row_err, col_err = _marginal_errors(plan.data, problem.supply.data, problem.capacity.data)
    return TransportPlan(plan, kappa, nu, row_err, col_err)


def _marginal_errors(plan, supply, capacity) -> tuple[float, float]:
    row = np.abs(plan.sum(axis=-1) - supply).max()
    col = np.abs(plan.sum(axis=-2) - capacity).max()
    return float(row), float(col)


def marginal_error(plan, problem: OTProblem) -> tuple[float, float]:
    """(max |Pi 1 - supply|, max |Pi^T 1 - capacity|)."""
    p = plan.plan.data if isinstance(plan, TransportPlan) else np.asarray(as_tensor(plan).data)
    if p.shape[-2:] != problem.shape:
        raise ValueError(f"plan shape {p.shape} does not match problem {problem.shape}")
    return _marginal_errors(p, problem.supply.data, problem.capacity.data)


def entropic_objective(plan, problem: OTProblem) -> Tensor:
    """<Pi, C> - eps * H(Pi) with H(Pi) = -sum Pi log Pi and 0 log 0 = 0."""
    p = plan.plan if isinstance(plan, TransportPlan) else as_tensor(plan)
    if np.any(p.data < 0):
        raise ValueError("transport plan has negative entries")
    safe = T.where(p.data > 0, p, 1.0)
    plogp = T.where(p.data > 0, p * T.log(safe), 0.0)
    return (p * problem.cost).sum() + problem.epsilon * plogp.sum()


def exact_oracle(problem: OTProblem, tol: float = 1e-13, max_iter: int = 200) -> TransportPlan:
    """Reference solution for tiny instances (L, P <= 4) by Newton's method on the dual.

    Maximizes <f, a> + <g, b> - eps * sum exp((f_i + g_j - C_ij) / eps) with
    the gauge g_P = 0; the optimal plan is exp((f_i + g_j - C_ij) / eps).
    This shares no code with the Sinkhorn path.
    """
    C = np.asarray(problem.cost.data, dtype=np.float64)
    if C.ndim != 2 or max(C.shape) > ORACLE_MAX_SIZE:
        raise ValueError(f"exact oracle supports single instances up to {ORACLE_MAX_SIZE}x"
                         f"{ORACLE_MAX_SIZE}, got {C.shape}")
    a = np.maximum(problem.supply.data.astype(np.float64), MARGINAL_FLOOR)
    b = np.maximum(problem.capacity.data.astype(np.float64), MARGINAL_FLOOR)
    a, b = a / a.sum(), b / b.sum()
    eps = problem.epsilon
    L, P = C.shape

    def plan_of(x):
        f, g = x[:L], np.append(x[L:], 0.0)
        return np.exp((f[:, None] + g[None, :] - C) / eps)

    def dual(x):
        f, g = x[:L], np.append(x[L:], 0.0)
        return f @ a + g @ b - eps * plan_of(x).sum()

    x = np.concatenate([eps * np.log(a) + C.min(axis=1), np.zeros(P - 1)])
    with np.errstate(over="ignore"):
        x = _newton(x, plan_of, dual, a, b, eps, L, P, tol, max_iter)
    Pi = plan_of(x)
    f, g = x[:L], np.append(x[L:], 0.0)
    row_err, col_err = _marginal_errors(Pi, a, b)
    return TransportPlan(Tensor(Pi), Tensor(f / eps), Tensor(g / eps), row_err, col_err)


def _newton(x, plan_of, dual, a, b, eps, L, P, tol, max_iter):
    """Damped Newton ascent: the damping grows whenever a step fails to improve the dual."""
    mu = 0.0
    for _ in range(max_iter):
        Pi = plan_of(x)
        grad = np.concatenate([a - Pi.sum(1), (b - Pi.sum(0))[:-1]])
        if np.abs(grad).max() < tol:
            break
        H = np.zeros((L + P - 1, L + P - 1))
        H[:L, :L] = np.diag(Pi.sum(1))
        H[L:, L:] = np.diag(Pi.sum(0)[:-1])
        H[:L, L:] = Pi[:, :-1]
        H[L:, :L] = Pi[:, :-1].T
        H /= eps
        d0, g0 = dual(x), np.abs(grad).max()

        def accept(y, t):
            # near the optimum the dual change drops below rounding, so a
            # halved gradient also counts as progress
            if dual(y) >= d0 + 1e-4 * t * (grad @ step):
                return True
            Q = plan_of(y)
            gy = np.concatenate([a - Q.sum(1), (b - Q.sum(0))[:-1]])
            return bool(np.abs(gy).max() < 0.5 * g0)

        for _ in range(60):
            try:
                step = np.linalg.solve(H + mu * np.eye(len(H)), grad)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                t = 1.0
                while t > 1e-6 and not accept(x + t * step, t):
                    t *= 0.5
                if accept(x + t * step, t):
                    x = x + t * step
                    mu = mu / 10 if t == 1.0 else mu
                    break
            mu = max(10 * mu, 1e-10)
        else:
            break
    return x


def export_plan_csv(plan, path) -> None:
    """Write an L x P plan as CSV (one row per sub-query)."""
    p = plan.plan.data if isinstance(plan, TransportPlan) else np.asarray(plan)
    if p.ndim != 2:
        raise ValueError("only single (L x P) plans can be exported")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for row in p:
            w.writerow([repr(float(v)) for v in row])
