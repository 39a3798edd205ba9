"""Central finite-difference verification of recorded gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .params import ParamStore
from .tensor import Tensor, no_grad


@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)
    threshold: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"{status} max_rel_err={self.max_error:.3e} (worst: {worst}, threshold {self.threshold:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|), with a tiny floor for all-zero gradients."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], point, h: float = 1e-5,
                    threshold: float = 1e-4, max_entries: int | None = None,
                    seed: int = 0) -> GradReport:
    """Compare backward() against central differences for every tensor in ``point``.

    ``point`` is a ParamStore or a mapping name -> leaf Tensor.  ``loss_fn``
    takes no arguments and must return a scalar built from those tensors.
    With ``max_entries`` only a random subset of each tensor's entries is
    perturbed (the analytic gradient is still compared on that subset).
    """
    leaves: Mapping[str, Tensor] = dict(point.items()) if isinstance(point, ParamStore) else dict(point)
    for t in leaves.values():
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks require double precision")
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    report = GradReport(threshold=threshold)
    with no_grad():
        for name, t in leaves.items():
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * h)
            report.errors[name] = relative_error(analytic.reshape(-1)[idx], numeric)
    return report


def projected(fn: Callable[[], Tensor], seed: int = 0) -> Callable[[], Tensor]:
    """Turn a tensor-valued function into a scalar one via a fixed random projection."""
    cache: dict = {}

    def loss():
        out = fn()
        if "w" not in cache:
            cache["w"] = np.random.default_rng(seed).standard_normal(out.shape)
        return (out * cache["w"]).sum()

    return loss
