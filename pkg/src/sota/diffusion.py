"""Conditional DDPM over pose-action chunks.

Index convention: diffusion steps run s = 1..N; ``alpha_bar[0] == 1`` is
the clean sample.  Chunks are [B, T_h, d_action] in the normalized action
space [-1, 1].
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import ParamStore, Tensor, as_tensor, no_grad
from .numerics import ops as T
from .numerics.nn import MLP, Conv1d, LayerNorm, Linear, sinusoidal_embedding

BETA_MIN, BETA_MAX = 1e-5, 0.999
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    n_diff: int
    betas: np.ndarray       # [N+1], betas[0] = 0
    alpha_bar: np.ndarray   # [N+1], alpha_bar[0] = 1


def make_schedule(n_diff: int) -> NoiseSchedule:
    """Squared-cosine schedule; per-step betas clipped, then alpha_bar re-accumulated."""
    if n_diff < 1:
        raise ValueError("n_diff must be >= 1")
    s = np.arange(n_diff + 1, dtype=np.float64)
    f = np.cos(((s / n_diff) + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2
    ab = f / f[0]
    betas = np.zeros(n_diff + 1)
    betas[1:] = np.clip(1.0 - ab[1:] / ab[:-1], BETA_MIN, BETA_MAX)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(n_diff, betas, alpha_bar)


def forward_noise(y0, s, noise, schedule: NoiseSchedule):
    """Closed-form jump y_s = sqrt(ab_s) y0 + sqrt(1 - ab_s) eps; ``s`` scalar or per-batch."""
    s = np.asarray(s)
    if np.any(s < 0) or np.any(s > schedule.n_diff):
        raise ValueError(f"diffusion step out of range [0, {schedule.n_diff}]")
    ab = schedule.alpha_bar[s]
    y0 = np.asarray(y0.data if isinstance(y0, Tensor) else y0)
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (y0.ndim - ab.ndim))
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * noise


# -- network --------------------------------------------------------------
class FiLMResBlock:
    def __init__(self, store, name, c_in, c_out, cond_dim, k=3):
        self.conv1 = Conv1d(store, f"{name}.conv1", c_in, c_out, k)
        self.ln1 = LayerNorm(store, f"{name}.ln1", c_out)
        self.film = Linear(store, f"{name}.film", cond_dim, 2 * c_out, init="zeros")
        self.conv2 = Conv1d(store, f"{name}.conv2", c_out, c_out, k)
        self.ln2 = LayerNorm(store, f"{name}.ln2", c_out)
        self.skip = Conv1d(store, f"{name}.skip", c_in, c_out, 1) if c_in != c_out else None
        self.c_out = c_out

    def __call__(self, x, cond):
        h = T.silu(self.ln1(self.conv1(x)))
        ss = T.reshape(self.film(cond), (cond.shape[0], 1, 2 * self.c_out))
        scale, shift = ss[..., :self.c_out], ss[..., self.c_out:]
        h = h * (scale + 1.0) + shift
        h = T.silu(self.ln2(self.conv2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


def _pool2(x):
    B, L, C = x.shape
    return T.reshape(x, (B, L // 2, 2, C)).mean(axis=2)


def _upsample2(x):
    B, L, C = x.shape
    y = T.broadcast_to(T.reshape(x, (B, L, 1, C)), (B, L, 2, C))
    return T.reshape(y, (B, 2 * L, C))


class Denoiser:
    """Temporal conv encoder-decoder with skips and FiLM conditioning per block.

    eps_hat = denoiser(y_s [B, T_h, d_a], s [B], cond [B, cond_dim]).
    """

    def __init__(self, store: ParamStore, cond_dim: int, d_action: int = 3, t_h: int = 16,
                 widths=(32, 64, 128), step_dim: int = 32, cond_hidden: int = 128,
                 name: str = "denoiser"):
        if t_h % 4:
            raise ValueError("chunk length must be divisible by 4 (two pooling levels)")
        w0, w1, w2 = widths
        n = name
        self.step_dim, self.d_action, self.t_h = step_dim, d_action, t_h
        self.step_mlp = MLP(store, f"{n}.step", [step_dim, 64, 64], act="silu")
        self.cond_proj = Linear(store, f"{n}.cond", cond_dim, cond_hidden)
        c = cond_hidden + 64
        self.inp = Conv1d(store, f"{n}.inp", d_action, w0)
        self.down1 = FiLMResBlock(store, f"{n}.down1", w0, w0, c)
        self.down2 = FiLMResBlock(store, f"{n}.down2", w0, w1, c)
        self.mid1 = FiLMResBlock(store, f"{n}.mid1", w1, w2, c)
        self.mid2 = FiLMResBlock(store, f"{n}.mid2", w2, w2, c)
        self.up2 = FiLMResBlock(store, f"{n}.up2", w2 + w1, w1, c)
        self.up1 = FiLMResBlock(store, f"{n}.up1", w1 + w0, w0, c)
        self.out = Conv1d(store, f"{n}.out", w0, d_action, init="zeros")

    def __call__(self, y, s, cond) -> Tensor:
        y = as_tensor(y)
        s = np.asarray(s).reshape(-1)
        if s.size == 1 and y.shape[0] > 1:
            s = np.full(y.shape[0], int(s[0]))
        emb = Tensor(sinusoidal_embedding(s, self.step_dim).astype(y.dtype))
        c = T.silu(T.concat([self.cond_proj(as_tensor(cond)), self.step_mlp(emb)], axis=-1))
        x = self.inp(y)
        h1 = self.down1(x, c)
        h2 = self.down2(_pool2(h1), c)
        m = self.mid2(self.mid1(_pool2(h2), c), c)
        u2 = self.up2(T.concat([_upsample2(m), h2], axis=-1), c)
        u1 = self.up1(T.concat([_upsample2(u2), h1], axis=-1), c)
        return self.out(u1)


# -- objectives & sampling ------------------------------------------------
EpsFn = Callable[[Tensor, np.ndarray, Tensor], Tensor]


def training_loss(y0, cond, denoiser: EpsFn, schedule: NoiseSchedule, rng) -> Tensor:
    """Mean squared eps-prediction error with s ~ U{1..N} and eps ~ N(0, I)."""
    y0 = np.asarray(y0.data if isinstance(y0, Tensor) else y0)
    B = y0.shape[0]
    s = rng.integers(1, schedule.n_diff + 1, size=B)
    eps = rng.standard_normal(y0.shape)
    ys = forward_noise(y0, s, eps, schedule)
    dtype = cond.dtype if isinstance(cond, Tensor) else np.float64
    pred = denoiser(Tensor(ys.astype(dtype)), s, cond)
    diff = pred - Tensor(eps.astype(dtype))
    return (diff * diff).mean()


def bc_loss(pred, target) -> Tensor:
    """Plain behavior-cloning regression loss (chunk MSE)."""
    d = as_tensor(pred) - as_tensor(target)
    return (d * d).mean()


def inference_steps(n_diff: int, n_infer: int) -> list[int]:
    """Evenly spaced descending steps including N and 1 (duplicates removed)."""
    if n_infer < 1:
        raise ValueError("n_infer must be >= 1")
    if n_infer > n_diff:
        raise ValueError(f"n_infer={n_infer} exceeds n_diff={n_diff}")
    steps = np.round(np.linspace(n_diff, 1, n_infer)).astype(int)
    return sorted(set(steps.tolist()), reverse=True)


def sample_chunk(cond, schedule: NoiseSchedule, n_infer: int, denoiser: EpsFn, rng,
                 shape: tuple, clip: float | None = 1.0) -> np.ndarray:
    """Ancestral DDPM sampling on a strided sub-schedule, from standard normal.

    Each step forms the clean-sample estimate from eps_hat (clipped to
    [-clip, clip]) and draws from the Gaussian posterior between the current
    and the next retained step.
    """
    steps = inference_steps(schedule.n_diff, n_infer)
    ab = schedule.alpha_bar
    dtype = cond.dtype if isinstance(cond, Tensor) else np.float64
    x = rng.standard_normal(shape)
    with no_grad():
        for i, s in enumerate(steps):
            prev = steps[i + 1] if i + 1 < len(steps) else 0
            eps = denoiser(Tensor(x.astype(dtype)), np.full(shape[0], s), cond).data.astype(np.float64)
            x0 = (x - np.sqrt(1 - ab[s]) * eps) / np.sqrt(ab[s])
            if clip is not None:
                x0 = np.clip(x0, -clip, clip)
            if prev == 0:
                x = x0
                continue
            beta = 1.0 - ab[s] / ab[prev]
            c0 = np.sqrt(ab[prev]) * beta / (1 - ab[s])
            ct = np.sqrt(1 - beta) * (1 - ab[prev]) / (1 - ab[s])
            var = beta * (1 - ab[prev]) / (1 - ab[s])
            x = c0 * x0 + ct * x + np.sqrt(var) * rng.standard_normal(shape)
    return x


class RecedingHorizonController:
    """Buffers observations, re-plans a chunk, and executes its leading actions.

    ``plan_fn(window) -> chunk [T_h, d_action]`` where window is the list of
    the last T_w frames (repeat-first padded at episode start).
    """

    def __init__(self, plan_fn, t_w: int = 8, n_exec: int = 8):
        if n_exec < 1:
            raise ValueError("n_exec must be >= 1")
        self.plan_fn, self.t_w, self.n_exec = plan_fn, t_w, n_exec
        self.reset()

    def reset(self) -> None:
        self.buffer: deque = deque(maxlen=self.t_w)
        self.queue: deque = deque()
        self.n_plans = 0

    def observe(self, frame) -> None:
        if not self.buffer:
            for _ in range(self.t_w):
                self.buffer.append(frame)
        else:
            self.buffer.append(frame)

    def window(self) -> list:
        if not self.buffer:
            raise ValueError("empty observation buffer")
        return list(self.buffer)

    def step(self, frame=None):
        """Record ``frame`` (if given) and return the next action."""
        if frame is not None:
            self.observe(frame)
        if not self.queue:
            chunk = np.asarray(self.plan_fn(self.window()))
            self.n_plans += 1
            for a in chunk[: self.n_exec]:
                self.queue.append(a)
        return self.queue.popleft()
