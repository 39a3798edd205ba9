"""Tri-modal fusion backbone: tokens -> per-frame modal fusion -> temporal fusion.

Three variants share the token encoders' interfaces:

* ``sota``            OT attention over image patches, conditioned on force/pose
* ``cross_attention`` softmax attention with the same conditioning
* ``concat``          [vision; force feature; raw pose] per frame, no fusion layers
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (AttentionConfig, CrossAttention, SotaAttention, SotaOutput,
                        concat_fuse)
from .numerics import ParamStore, Tensor, as_tensor
from .numerics import ops as T
from .numerics.nn import MLP, Linear, TransformerEncoder, sinusoidal_embedding

VARIANTS = ("sota", "cross_attention", "concat")
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


@dataclass(frozen=True)
class BackboneConfig:
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    variant: str = "sota"
    d_force: int = 9
    d_pose: int = 10
    image_size: tuple = (56, 56)
    patch: int = 8
    t_w: int = 8
    n_layers: int = 2
    n_heads: int = 4
    d_forcefeat: int = 16
    d_vis: int = 64
    vis_patch_width: int = 8
    time_encoding: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}; expected one of {VARIANTS}")
        H, W = self.image_size
        if H % self.patch or W % self.patch:
            raise ValueError(f"image {H}x{W} not divisible by patch size {self.patch}")
        if (H // self.patch, W // self.patch) != tuple(self.attention.grid):
            raise ValueError("patch grid does not match attention grid")

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def d_frame(self) -> int:
        """Width of one Z^fused row."""
        if self.variant == "concat":
            return self.d_vis + self.d_forcefeat + self.d_pose
        return self.d_model

    @property
    def cond_dim(self) -> int:
        return self.t_w * self.d_frame

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"] = self.attention.to_dict()
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        att = dict(d.pop("attention", {}))
        if "grid" in att:
            att["grid"] = tuple(att["grid"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(attention=AttentionConfig(**att), **d)


@dataclass
class FusedEncoding:
    fused: Tensor                  # Z^fused [..., T_w, d_frame]
    frame: Tensor | None = None    # Z^frame [..., T_w, d_model]
    gate: Tensor | None = None     # [..., T_w, 3]
    tokens: Tensor | None = None   # pre-transformer frame tokens [..., T_w, 3, d_model]
    attn: SotaOutput | None = None
    ca_weights: Tensor | None = None


def normalize_image(img, dtype=np.float64) -> np.ndarray:
    """uint8 [.., H, W, 3] -> standardized float (pixels first scaled to [0, 1])."""
    raw = np.asarray(img)
    x = raw.astype(dtype)
    if raw.dtype == np.uint8:
        x /= 255.0
    return (x - IMAGE_MEAN) / IMAGE_STD


def patch_position_encoding(grid: tuple, d_model: int) -> np.ndarray:
    """[sin(r w), cos(r w), sin(c w), cos(c w)] with d_model/4 frequencies each."""
    if d_model % 4:
        raise ValueError("d_model must be divisible by 4 for the 2-D encoding")
    h, w = grid
    nf = d_model // 4
    freqs = 1.0 / (10000.0 ** (np.arange(nf) / nf))
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r = rows.reshape(-1, 1) * freqs
    c = cols.reshape(-1, 1) * freqs
    return np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=1)


def extract_patches(image, patch: int) -> np.ndarray:
    """[..., H, W, C] -> [..., (H/p)*(W/p), p*p*C], row-major over the grid."""
    x = np.asarray(image)
    *lead, H, W, C = x.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch}")
    h, w = H // patch, W // patch
    x = x.reshape(*lead, h, patch, w, patch, C)
    nl = len(lead)
    x = np.transpose(x, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return x.reshape(*lead, h * w, patch * patch * C)


def causal_mask(n: int) -> np.ndarray:
    """True above the diagonal: position i may not attend to j > i."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


class FusionBackbone:
    def __init__(self, store: ParamStore, cfg: BackboneConfig, name: str = "backbone"):
        self.store, self.cfg, self.name = store, cfg, name
        a = cfg.attention
        n = name
        self.pe = patch_position_encoding(a.grid, a.d_model)
        self.patch_proj = Linear(store, f"{n}.patch", cfg.patch * cfg.patch * 3, a.d_model)
        if cfg.variant == "concat":
            self.force_feat = MLP(store, f"{n}.force_feat", [cfg.d_force, 64, cfg.d_forcefeat])
            self.vis_reduce = Linear(store, f"{n}.vis_reduce", a.d_model, cfg.vis_patch_width)
            self.vis_proj = Linear(store, f"{n}.vis_proj", a.n_patch * cfg.vis_patch_width, cfg.d_vis)
            return
        self.force_enc = MLP(store, f"{n}.force_enc", [cfg.d_force, a.d_model, a.d_model])
        self.pose_enc = MLP(store, f"{n}.pose_enc", [cfg.d_pose, a.d_model, a.d_model])
        self.fp_proj = Linear(store, f"{n}.fp_proj", 2 * a.d_model, a.d_att)
        if cfg.variant == "sota":
            self.head = SotaAttention(store, f"{n}.sota", a)
        else:
            self.head = CrossAttention(store, f"{n}.ca", a)
        self.vis_out = Linear(store, f"{n}.vis_out", a.d_att, a.d_model)
        self.frame_tf = TransformerEncoder(store, f"{n}.frame_tf", a.d_model, cfg.n_heads, cfg.n_layers)
        self.gate = Linear(store, f"{n}.gate", a.d_model, 3, init="zeros")
        self.temporal_tf = TransformerEncoder(store, f"{n}.temporal_tf", a.d_model, cfg.n_heads,
                                              cfg.n_layers)

    # -- stages -----------------------------------------------------------
    def encode_tokens(self, o_force, o_pose):
        """(Z_force, Z_pose, z_fp) from normalized force/pose observations."""
        zf = self.force_enc(as_tensor(o_force))
        zp = self.pose_enc(as_tensor(o_pose))
        z_fp = self.fp_proj(T.concat([zf, zp], axis=-1))
        return zf, zp, z_fp

    def patch_embed(self, image) -> Tensor:
        """Standardized image [..., H, W, 3] -> patch tokens + 2-D encoding."""
        img = np.asarray(image.data if isinstance(image, Tensor) else image)
        H, W = img.shape[-3:-1]
        if (H, W) != tuple(self.cfg.image_size):
            raise ValueError(f"expected image {self.cfg.image_size}, got {(H, W)}")
        patches = Tensor(extract_patches(img, self.cfg.patch).astype(self.store.dtype))
        return self.patch_proj(patches) + Tensor(self.pe.astype(self.store.dtype))

    def framewise_fuse(self, tokens):
        """tokens [..., 3, d_model] -> (Z_frame [..., d_model], gate [..., 3])."""
        tokens = as_tensor(tokens)
        ctx = self.frame_tf(tokens)
        gate = T.softmax(self.gate(ctx.mean(axis=-2)), axis=-1)
        frame = (T.reshape(gate, gate.shape + (1,)) * ctx).sum(axis=-2)
        return frame, gate

    def temporal_fuse(self, frames) -> Tensor:
        """Z_frame [..., T_w, d_model] -> Z_fused (causal, time-encoded)."""
        frames = as_tensor(frames)
        t_w = frames.shape[-2]
        if t_w != self.cfg.t_w:
            raise ValueError(f"window length {t_w} != configured T_w={self.cfg.t_w}")
        x = frames
        if self.cfg.time_encoding:
            x = x + Tensor(sinusoidal_embedding(np.arange(t_w), self.cfg.d_model).astype(frames.dtype))
        return self.temporal_tf(x, mask=causal_mask(t_w))

    def frame_tokens(self, z_force, z_pose, z_vis) -> Tensor:
        """Stack [Z_force, Z_pose, projected visual token] -> [..., 3, d_model]."""
        return T.stack([z_force, z_pose, self.vis_out(z_vis)], axis=-2)

    # -- full pass --------------------------------------------------------
    def __call__(self, images, o_force, o_pose) -> FusedEncoding:
        """images [..., T_w, H, W, 3] (standardized), o_force [..., T_w, 9], o_pose [..., T_w, 10]."""
        cfg = self.cfg
        z_img = self.patch_embed(images)
        if cfg.variant == "concat":
            red = self.vis_reduce(z_img)
            flat = T.reshape(red, red.shape[:-2] + (red.shape[-2] * red.shape[-1],))
            z_vis = self.vis_proj(flat)
            z_force = self.force_feat(as_tensor(o_force))
            return FusedEncoding(fused=concat_fuse(z_vis, z_force, as_tensor(o_pose)))
        zf, zp, z_fp = self.encode_tokens(o_force, o_pose)
        attn, ca_w = None, None
        if cfg.variant == "sota":
            attn = self.head(z_fp, z_img)
            z_vis = attn.fused
        else:
            z_vis, ca_w = self.head(z_fp, z_img)
        tokens = self.frame_tokens(zf, zp, z_vis)
        frame, gate = self.framewise_fuse(tokens)
        fused = self.temporal_fuse(frame)
        return FusedEncoding(fused, frame, gate, tokens, attn, ca_w)
