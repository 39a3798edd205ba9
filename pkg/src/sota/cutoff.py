"""Cutoff-and-reset runtime wrapper.

Single-attempt outcomes are resampled i.i.d. into retry episodes: an attempt
that has not succeeded by the cutoff is aborted and costs ``cutoff + reset``
seconds.  The cutoff is chosen to minimize a high percentile of the
success-only total time subject to a minimum episode success rate.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

PERCENTILE_METHOD = "inverted_cdf"


@dataclass(frozen=True)
class AttemptSamples:
    """Column view of single-attempt outcomes; ``time`` is NaN on failure."""
    success: np.ndarray
    time: np.ndarray
    censored: np.ndarray
    budget: float = 100.0

    def __post_init__(self):
        n = len(self.success)
        if n == 0:
            raise ValueError("no attempt samples")
        if len(self.time) != n or len(self.censored) != n:
            raise ValueError("success/time/censored lengths differ")
        t = self.time[self.success]
        if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > self.budget):
            raise ValueError("successful attempts need a time in [0, budget]")
        if np.any(np.isfinite(self.time[~self.success])):
            raise ValueError("failed attempts carry no completion time")

    def __len__(self) -> int:
        return len(self.success)

    @property
    def success_times(self) -> np.ndarray:
        return self.time[self.success]

    @classmethod
    def from_arrays(cls, success, time=None, censored=None, budget: float = 100.0):
        s = np.asarray(success, dtype=bool).reshape(-1)
        t = np.full(s.shape, np.nan) if time is None else np.asarray(time, dtype=np.float64).reshape(-1).copy()
        if len(t) != len(s):
            raise ValueError("success/time lengths differ")
        t[~s] = np.nan
        c = np.zeros_like(s) if censored is None else np.asarray(censored, dtype=bool).reshape(-1)
        return cls(s, t, c, float(budget))

    @classmethod
    def from_outcomes(cls, outcomes, budget: float = 100.0):
        """Build from rollout outcomes (``success``, ``time_s``, ``cause``)."""
        outcomes = list(outcomes)
        return cls.from_arrays([o.success for o in outcomes], [o.time_s for o in outcomes],
                               [(not o.success) and o.cause == "timeout" for o in outcomes], budget)


@dataclass(frozen=True)
class CutoffPolicy:
    cutoff: float
    reset: float = 1.0
    budget: float = 100.0
    percentile: float = 99.0
    min_success: float = 0.995
    feasible: bool = True
    success_prob: float = float("nan")
    total_time_percentile: float = float("nan")

    def __post_init__(self):
        if not 0 < self.cutoff <= self.budget:
            raise ValueError("cutoff must lie in (0, budget]")
        if self.reset < 0:
            raise ValueError("reset overhead must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RetryResult:
    success_prob: float
    totals: np.ndarray     # total time of each successful simulated episode
    attempts: np.ndarray = field(repr=False, default=None)  # attempts used per episode

    def percentile(self, q: float = 99.0) -> float:
        return success_percentile(self.totals, q)


def success_percentile(totals, q: float = 99.0) -> float:
    totals = np.asarray(totals)
    if totals.size == 0:
        return float("nan")
    return float(np.percentile(totals, q, method=PERCENTILE_METHOD))


def max_attempts(cutoff: float, reset: float, budget: float) -> int:
    """Upper bound on attempts that can start before the budget runs out."""
    return int(math.floor(budget / (cutoff + reset))) + 1 if cutoff + reset > 0 else 1


def draw_attempts(n_samples: int, n_sims: int, n_attempts: int, rng) -> np.ndarray:
    """Sample indices [n_sims, n_attempts]; shared across cutoffs for common random numbers."""
    return rng.integers(0, n_samples, size=(n_sims, n_attempts))


def _check(samples, cutoff, reset, budget):
    if not isinstance(samples, AttemptSamples):
        raise TypeError("samples must be AttemptSamples")
    if not 0 < cutoff <= budget:
        raise ValueError(f"cutoff {cutoff} outside (0, {budget}]")
    if reset < 0:
        raise ValueError("reset overhead must be >= 0")


def retry_from_draws(samples: AttemptSamples, draws: np.ndarray, cutoff: float,
                     reset: float = 1.0, budget: float = 100.0) -> RetryResult:
    """Replay retry episodes over a fixed matrix of attempt indices."""
    _check(samples, cutoff, reset, budget)
    k = min(max_attempts(cutoff, reset, budget), draws.shape[1])
    d = draws[:, :k]
    t = samples.time[d]
    hit = samples.success[d] & (t <= cutoff)
    first = np.argmax(hit, axis=1)
    rows = np.arange(len(d))
    total = first * (cutoff + reset) + np.where(hit[rows, first], t[rows, first], np.inf)
    ok = hit.any(axis=1) & (total <= budget)
    return RetryResult(float(ok.mean()), total[ok], np.where(ok, first + 1, k))


def simulate_retry(samples: AttemptSamples, cutoff: float, reset: float = 1.0,
                   budget: float = 100.0, n_sims: int = 1000, rng=None) -> RetryResult:
    """Monte Carlo success probability and success-only totals for one cutoff."""
    _check(samples, cutoff, reset, budget)
    rng = np.random.default_rng(rng)
    draws = draw_attempts(len(samples), n_sims, max_attempts(cutoff, reset, budget), rng)
    return retry_from_draws(samples, draws, cutoff, reset, budget)


def default_grid(samples: AttemptSamples, budget: float) -> np.ndarray:
    t = samples.success_times
    return np.unique(np.concatenate([t[(t > 0) & (t <= budget)], [budget]]))


@dataclass
class CutoffCurve:
    cutoff: np.ndarray
    success: np.ndarray
    percentile: np.ndarray

    def write_csv(self, path, q: float = 99.0) -> None:
        name = f"p{q:g}_total_s"
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cutoff_s", "success_prob", name])
            for c, s, p in zip(self.cutoff, self.success, self.percentile):
                w.writerow([repr(float(c)), repr(float(s)), repr(float(p))])


def select_cutoff(samples: AttemptSamples, percentile: float = 99.0, min_success: float = 0.995,
                  grid=None, n_sims: int = 1000, rng=None, reset: float = 1.0,
                  budget: float = 100.0, draws=None) -> tuple[CutoffPolicy, CutoffCurve]:
    """Feasible cutoff minimizing the success-only total-time percentile.

    All candidates replay the same attempt draws (pass ``draws`` to share
    them across calls).  Ties go to the smallest cutoff; with no feasible
    candidate the budget itself is returned and ``feasible`` is False.
    """
    grid = default_grid(samples, budget) if grid is None else np.unique(np.asarray(grid, dtype=np.float64))
    if grid.size == 0:
        raise ValueError("empty cutoff grid")
    if draws is None:
        rng = np.random.default_rng(rng)
        draws = draw_attempts(len(samples), n_sims, max_attempts(float(grid.min()), reset, budget), rng)
    elif draws.shape[1] < max_attempts(float(grid.min()), reset, budget):
        raise ValueError("draw matrix has too few attempts for the smallest cutoff")
    succ, pct = [], []
    for c in grid:
        res = retry_from_draws(samples, draws, float(c), reset, budget)
        succ.append(res.success_prob)
        pct.append(res.percentile(percentile))
    curve = CutoffCurve(grid, np.array(succ), np.array(pct))
    feasible = curve.success >= min_success
    if feasible.any():
        cand = np.where(feasible, curve.percentile, np.inf)
        i = int(np.flatnonzero(cand == cand.min())[0])
        pol = CutoffPolicy(float(grid[i]), reset, budget, percentile, min_success, True,
                           float(curve.success[i]), float(curve.percentile[i]))
    else:
        res = retry_from_draws(samples, draws, budget, reset, budget)
        pol = CutoffPolicy(budget, reset, budget, percentile, min_success, False,
                           res.success_prob, res.percentile(percentile))
    return pol, curve


def bootstrap_ci(samples, statistic: Callable, n_boot: int = 1000, rng=None,
                 level: float = 0.95) -> tuple[float, float, float]:
    """Percentile bootstrap interval of a scalar statistic over resampled rows."""
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    x = np.asarray(samples)
    if len(x) < 2:
        raise ValueError("bootstrap needs at least 2 samples")
    rng = np.random.default_rng(rng)
    idx = rng.integers(0, len(x), size=(n_boot, len(x)))
    stats = np.array([statistic(x[i]) for i in idx], dtype=np.float64)
    a = (1 - level) / 2 * 100
    lo, hi = np.nanpercentile(stats, [a, 100 - a])
    return float(statistic(x)), float(lo), float(hi)


def write_policy_json(policy: CutoffPolicy, path, extra: dict | None = None) -> None:
    d = policy.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True, allow_nan=True) + "\n")
