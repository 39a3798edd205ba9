"""Dense tensor arithmetic and reverse-mode differentiation."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import nn
from .gradcheck import GradReport, check_gradients, projected, relative_error
from .optim import EMA, AdamW, cosine_warmup
from .params import CheckpointError, ParamStore
from .tensor import (BackwardError, NonFiniteError, Tensor, as_tensor, check_finite,
                     get_default_dtype, no_grad, set_default_dtype)
from . import tensor as ops


def forward(graph_fn: Callable, inputs: Sequence, params: ParamStore) -> Tensor:
    """Run ``graph_fn(*inputs, params)`` while recording, rejecting non-finite output."""
    out = graph_fn(*[as_tensor(x) for x in inputs], params)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("forward produced non-finite values")
    return out


def backward(output: Tensor, out_grad=None) -> None:
    """Accumulate gradients of ``output`` into every reachable parameter."""
    output.backward(out_grad)


__all__ = [
    "AdamW", "BackwardError", "CheckpointError", "EMA", "GradReport", "NonFiniteError",
    "ParamStore", "Tensor", "as_tensor", "backward", "check_finite", "check_gradients",
    "cosine_warmup", "forward", "get_default_dtype", "nn", "no_grad", "ops", "projected",
    "relative_error", "set_default_dtype",
]
