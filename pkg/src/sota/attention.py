"""Optimal-transport attention node and the two comparison fusion heads.

Shapes use ``...`` for any leading batch/time axes.  A frame's patch tokens
``Z_img`` are [..., N_patch, d_model] (positional encoding already added)
and its force-pose conditioning ``z_fp`` is [..., d_att].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import ParamStore, Tensor, as_tensor
from .numerics import ops as T
from .numerics.nn import Linear
from .ot import recover_plan, sinkhorn_duals

NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    d_att: int = 32
    n_sub: int = 2
    grid: tuple = (7, 7)
    epsilon: float = 0.2
    n_ot: int = 5
    n_heads: int = 4
    query_bias: bool = True
    key_value_bias: bool = False

    def __post_init__(self):
        for k in ("d_model", "d_att", "n_sub", "n_ot", "n_heads"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if len(self.grid) != 2 or min(self.grid) <= 0:
            raise ValueError("grid must be (h, w) with positive entries")

    @property
    def n_patch(self) -> int:
        return self.grid[0] * self.grid[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


# Table-scale widths; the default above is the workstation configuration.
PAPER_CONFIG = AttentionConfig(d_model=512, d_att=256)


@dataclass
class SotaOutput:
    fused: Tensor        # [..., d_att]
    messages: Tensor     # [..., N_sub, d_att]
    plan: Tensor         # [..., N_sub, N_patch]
    supply: Tensor       # [..., N_sub]
    patch_weights: Tensor  # [..., N_patch]


def cosine_cost(q, k) -> Tensor:
    """C[l, p] = -<q_l/|q_l|, k_p/|k_p|> for q: [..., L, d], k: [..., P, d]."""
    q, k = as_tensor(q), as_tensor(k)
    qn = q / T.norm(q, axis=-1, keepdims=True, floor=NORM_FLOOR)
    kn = k / T.norm(k, axis=-1, keepdims=True, floor=NORM_FLOOR)
    return -T.matmul(qn, kn.swapaxes(-1, -2))


def _linear(params: ParamStore, name: str, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 1:
        return _linear(params, name, T.reshape(x, (1, -1)))[0]
    y = T.matmul(x, params[f"{name}.weight"])
    bias = f"{name}.bias"
    return y + params[bias] if bias in params else y


def subqueries_and_supply(z_fp, params: ParamStore, cfg: AttentionConfig, prefix: str = "sota"):
    """Sub-queries [..., N_sub, d_att], softmax supply [..., N_sub] and its log."""
    z_fp = as_tensor(z_fp)
    x = T.reshape(z_fp, (-1, cfg.d_att))
    q = T.reshape(_linear(params, f"{prefix}.qry", x), z_fp.shape[:-1] + (cfg.n_sub, cfg.d_att))
    logits = T.reshape(_linear(params, f"{prefix}.supply", x), z_fp.shape[:-1] + (cfg.n_sub,))
    return q, T.softmax(logits, axis=-1), T.log_softmax(logits, axis=-1)


def sota_forward(z_fp, z_img, params: ParamStore, cfg: AttentionConfig,
                 prefix: str = "sota") -> SotaOutput:
    """OT attention: plan between sub-queries and patches, merged with the supply weights."""
    z_img = as_tensor(z_img)
    if z_img.shape[-2] != cfg.n_patch:
        raise ValueError(f"expected {cfg.n_patch} patches, got {z_img.shape[-2]}")
    q, gamma, log_gamma = subqueries_and_supply(z_fp, params, cfg, prefix)
    keys = _linear(params, f"{prefix}.key", z_img)
    vals = _linear(params, f"{prefix}.val", z_img)
    cost = cosine_cost(q, keys)
    log_beta = Tensor(np.full(cfg.n_patch, -np.log(cfg.n_patch), dtype=cost.dtype))
    kappa, nu = sinkhorn_duals(cost, log_gamma, log_beta, cfg.epsilon, cfg.n_ot)
    plan = recover_plan(cost, kappa, nu, cfg.epsilon)
    messages = T.matmul(plan, vals)                                    # [..., L, d_att]
    g = T.reshape(gamma, gamma.shape + (1,))
    fused = (g * messages).sum(axis=-2)
    zeta = (g * plan).sum(axis=-2)                                     # [..., P]
    via_patches = np.einsum("...p,...pd->...d", zeta.data, vals.data)
    tol = 1e-9 if fused.dtype == np.float64 else 1e-4
    if not np.allclose(via_patches, fused.data, atol=tol, rtol=0):
        raise FloatingPointError("tied-merge identity violated")
    return SotaOutput(fused, messages, plan, gamma, zeta)


def cross_attention_forward(z_fp, z_img, params: ParamStore, cfg: AttentionConfig,
                            prefix: str = "ca"):
    """Multi-head softmax attention of one query over patches.

    Returns (z_ca [..., d_att], head-mean weights [..., N_patch]).  Query and
    keys are normalized per head; scores are divided by sqrt(d_att).
    """
    if cfg.d_att % cfg.n_heads:
        raise ValueError(f"d_att={cfg.d_att} not divisible by n_heads={cfg.n_heads}")
    z_fp, z_img = as_tensor(z_fp), as_tensor(z_img)
    h, dh = cfg.n_heads, cfg.d_att // cfg.n_heads
    lead = z_fp.shape[:-1]
    q = T.reshape(_linear(params, f"{prefix}.qry", z_fp), lead + (h, 1, dh))
    P = z_img.shape[-2]
    k = T.reshape(_linear(params, f"{prefix}.key", z_img), lead + (P, h, dh))
    v = T.reshape(_linear(params, f"{prefix}.val", z_img), lead + (P, h, dh))
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    k, v = T.transpose(k, perm), T.transpose(v, perm)       # [..., h, P, dh]
    qn = q / T.norm(q, axis=-1, keepdims=True, floor=NORM_FLOOR)
    kn = k / T.norm(k, axis=-1, keepdims=True, floor=NORM_FLOOR)
    scores = T.matmul(qn, kn.swapaxes(-1, -2)) * (1.0 / np.sqrt(cfg.d_att))
    w = T.softmax(scores, axis=-1)                          # [..., h, 1, P]
    heads = T.reshape(T.matmul(w, v), lead + (cfg.d_att,))
    z = _linear(params, f"{prefix}.out", heads)
    return z, T.reshape(w, lead + (h, P)).mean(axis=-2)


class SotaAttention:
    """Registers the OT head's parameters; calling it runs ``sota_forward``."""

    def __init__(self, store: ParamStore, name: str, cfg: AttentionConfig):
        self.cfg, self.store, self.name = cfg, store, name
        Linear(store, f"{name}.qry", cfg.d_att, cfg.n_sub * cfg.d_att, bias=cfg.query_bias)
        Linear(store, f"{name}.supply", cfg.d_att, cfg.n_sub, gain=0.5)
        Linear(store, f"{name}.key", cfg.d_model, cfg.d_att, bias=cfg.key_value_bias)
        Linear(store, f"{name}.val", cfg.d_model, cfg.d_att, bias=cfg.key_value_bias)

    def __call__(self, z_fp, z_img) -> SotaOutput:
        return sota_forward(z_fp, z_img, self.store, self.cfg, self.name)


class CrossAttention:
    def __init__(self, store: ParamStore, name: str, cfg: AttentionConfig):
        if cfg.d_att % cfg.n_heads:
            raise ValueError(f"d_att={cfg.d_att} not divisible by n_heads={cfg.n_heads}")
        self.cfg, self.store, self.name = cfg, store, name
        Linear(store, f"{name}.qry", cfg.d_att, cfg.d_att, bias=cfg.query_bias)
        Linear(store, f"{name}.key", cfg.d_model, cfg.d_att, bias=cfg.key_value_bias)
        Linear(store, f"{name}.val", cfg.d_model, cfg.d_att, bias=cfg.key_value_bias)
        Linear(store, f"{name}.out", cfg.d_att, cfg.d_att)

    def __call__(self, z_fp, z_img):
        return cross_attention_forward(z_fp, z_img, self.store, self.cfg, self.name)


def concat_fuse(z_vis, z_force, o_pose) -> Tensor:
    """[vision; force; pose] along the feature axis."""
    return T.concat([as_tensor(z_vis), as_tensor(z_force), as_tensor(o_pose)], axis=-1)
