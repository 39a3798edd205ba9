from __future__ import annotations

import math

import numpy as np

from .params import ParamStore


class AdamW:
    """Decoupled weight decay Adam; the only way parameters change."""

    def __init__(self, store: ParamStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4, grad_clip: float | None = 1.0):
        self.store = store
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in store.items()}

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        grads = self.store.grads()
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(gnorm):
            from .tensor import NonFiniteError
            raise NonFiniteError("non-finite gradient norm")
        scale = 1.0
        if self.grad_clip is not None and gnorm > self.grad_clip:
            scale = self.grad_clip / gnorm
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.store.items():
            g = grads[k] * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            decay = self.wd if p.ndim >= 2 else 0.0
            with np.errstate(over="ignore", invalid="ignore"):
                p.data = (p.data * (1 - lr * decay) - lr * upd).astype(p.data.dtype)
            if not np.all(np.isfinite(p.data)):
                from .tensor import NonFiniteError
                raise NonFiniteError(f"parameter {k} became non-finite")
        return gnorm

    def state(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state(self, st: dict) -> None:
        self.t = st["t"]
        self.m = {k: v.copy() for k, v in st["m"].items()}
        self.v = {k: v.copy() for k, v in st["v"].items()}


def cosine_warmup(step: int, total: int, warmup: int, base_lr: float, min_ratio=0.05) -> float:
    if step < warmup:
        return base_lr * (step + 1) / warmup
    prog = (step - warmup) / max(1, total - warmup)
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * min(prog, 1.0))))


class EMA:
    """Exponential moving average of parameters (optional; off by default)."""

    def __init__(self, store: ParamStore, decay=0.995):
        self.decay = decay
        self.shadow = store.state()

    def update(self, store: ParamStore) -> None:
        d = self.decay
        for k, t in store.items():
            self.shadow[k] = d * self.shadow[k] + (1 - d) * t.data
