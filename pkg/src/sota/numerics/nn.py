"""Layers built from tensor ops.

Layers hold parameter *names*, not tensors: they look their weights up in
the ``ParamStore`` at call time, so loading a checkpoint into the store is
all it takes to swap weights.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


def xavier(rng, d_in, d_out, gain=1.0):
    lim = gain * np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-lim, lim, size=(d_in, d_out))


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 bias: bool = True, init: str = "xavier", gain: float = 1.0):
        self.store, self.name, self.bias = store, name, bias
        self.d_in, self.d_out = d_in, d_out
        if init == "zeros":
            w = np.zeros((d_in, d_out))
        else:
            w = xavier(store.rng, d_in, d_out, gain)
        store.add(f"{name}.weight", w)
        if bias:
            store.add(f"{name}.bias", np.zeros(d_out))

    @property
    def weight(self) -> Tensor:
        return self.store[f"{self.name}.weight"]

    def __call__(self, x):
        y = T.matmul(x, self.weight) if T.as_tensor(x).ndim >= 2 else \
            T.matmul(T.reshape(x, (1, -1)), self.weight)[0]
        if self.bias:
            y = y + self.store[f"{self.name}.bias"]
        return y


class MLP:
    def __init__(self, store, name, dims, act="gelu", final_init="xavier"):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(Linear(store, f"{name}.{i}", a, b,
                                      init=final_init if last else "xavier"))
        self.act = getattr(T, act)

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Fused layer norm over the last axis."""
    x = T.as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xh * (gx_hat * xh).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xh).sum(axis=lead), g.sum(axis=lead)

    return Tensor.from_op(out, (x, gamma, beta), bw, "layer_norm")


class LayerNorm:
    def __init__(self, store, name, d):
        self.store, self.name = store, name
        store.add(f"{name}.gamma", np.ones(d))
        store.add(f"{name}.beta", np.zeros(d))

    def __call__(self, x):
        return layer_norm(x, self.store[f"{self.name}.gamma"], self.store[f"{self.name}.beta"])


def attention(q, k, v, mask=None):
    """Scaled dot-product attention on [..., n, d] inputs; mask True = blocked."""
    d = q.shape[-1]
    s = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d))
    if mask is not None:
        s = T.where(mask, -1e9, s)
    w = T.softmax(s, axis=-1)
    return T.matmul(w, v), w


class MultiHeadSelfAttention:
    def __init__(self, store, name, d, n_heads):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.h = n_heads
        self.qkv = Linear(store, f"{name}.qkv", d, 3 * d)
        self.out = Linear(store, f"{name}.out", d, d)

    def __call__(self, x, mask=None):
        *lead, n, d = x.shape
        h = self.h
        qkv = self.qkv(x)
        qkv = T.reshape(qkv, (*lead, n, 3, h, d // h))
        perm = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 2, 0, 3))
        qkv = T.transpose(qkv, perm)  # [..., 3, h, n, dh]
        q, k, v = qkv[..., 0, :, :, :], qkv[..., 1, :, :, :], qkv[..., 2, :, :, :]
        y, _ = attention(q, k, v, mask)
        perm2 = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2))
        y = T.reshape(T.transpose(y, perm2), (*lead, n, d))
        return self.out(y)


class TransformerEncoderLayer:
    """Pre-norm encoder block: x + MHA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, store, name, d, n_heads, d_ff=None):
        d_ff = d_ff or 2 * d
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.attn = MultiHeadSelfAttention(store, f"{name}.attn", d, n_heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ff = MLP(store, f"{name}.ff", [d, d_ff, d])

    def __call__(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.ff(self.ln2(x))


class TransformerEncoder:
    def __init__(self, store, name, d, n_heads, n_layers):
        self.layers = [TransformerEncoderLayer(store, f"{name}.{i}", d, n_heads)
                       for i in range(n_layers)]
        self.ln = LayerNorm(store, f"{name}.ln_f", d)

    def __call__(self, x, mask=None):
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln(x)


def conv1d(x, w, b=None) -> Tensor:
    """'Same'-padded 1-D convolution on channels-last input.

    x: [B, L, C_in], w: [K, C_in, C_out] with odd K.
    """
    x, w = T.as_tensor(x), T.as_tensor(w)
    K, cin, cout = w.shape
    B, L, _ = x.shape
    p = K // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (0, 0)))
    cols = np.stack([xp[:, k:k + L] for k in range(K)], axis=2).reshape(B, L, K * cin)
    wm = w.data.reshape(K * cin, cout)
    out = cols @ wm
    if b is not None:
        out = out + b.data

    def bw(g):
        gw = (cols.reshape(-1, K * cin).T @ g.reshape(-1, cout)).reshape(K, cin, cout)
        gcols = (g @ wm.T).reshape(B, L, K, cin)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, k:k + L] += gcols[:, :, k]
        gx = gxp[:, p:p + L]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, bw, "conv1d")


class Conv1d:
    def __init__(self, store, name, c_in, c_out, k=3, init="xavier"):
        self.store, self.name = store, name
        if init == "zeros":
            w = np.zeros((k, c_in, c_out))
        else:
            w = xavier(store.rng, k * c_in, c_out).reshape(k, c_in, c_out)
        store.add(f"{name}.weight", w)
        store.add(f"{name}.bias", np.zeros(c_out))

    def __call__(self, x):
        return conv1d(x, self.store[f"{self.name}.weight"], self.store[f"{self.name}.bias"])


def sinusoidal_embedding(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """[sin(p w_0..), cos(p w_0..)] with geometric frequencies; constant (no grad)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    ang = positions[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
