"""Leave-one-out modal influence and OT patch heatmaps."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import Tensor, no_grad

MODALITIES = ("force", "pose", "sota")


@dataclass
class Heatmap:
    grid: np.ndarray      # [h, w], sums to the visual share
    frame: int = 0


def modal_influence(tokens, fuse) -> np.ndarray:
    """Normalized change of the fused frame feature when each token is zeroed.

    ``tokens`` is [..., 3, d] in (force, pose, visual) order and ``fuse``
    maps tokens to the fused frame feature [..., d].  Returns [..., 3]
    ratios; frames where no token changes the output get 1/3 each.
    """
    tok = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens)
    with no_grad():
        ref = _data(fuse(Tensor(tok)))
        deltas = []
        for m in range(tok.shape[-2]):
            masked = tok.copy()
            masked[..., m, :] = 0.0
            deltas.append(np.linalg.norm(ref - _data(fuse(Tensor(masked))), axis=-1))
    d = np.stack(deltas, axis=-1).astype(np.float64)
    total = d.sum(axis=-1, keepdims=True)
    uniform = np.full_like(d, 1.0 / d.shape[-1])
    return np.where(total > 0, d / np.where(total > 0, total, 1.0), uniform)


def _data(x) -> np.ndarray:
    if isinstance(x, tuple):
        x = x[0]
    return np.asarray(x.data if isinstance(x, Tensor) else x)


def compute_heatmap(patch_weights, visual_share: float, grid=(7, 7), frame: int = 0) -> Heatmap:
    """Normalize the effective patch weights and scale them by the visual share."""
    z = np.asarray(patch_weights.data if isinstance(patch_weights, Tensor) else patch_weights,
                   dtype=np.float64).reshape(-1)
    if z.size != grid[0] * grid[1]:
        raise ValueError(f"{z.size} patch weights do not fill a {grid} grid")
    if np.any(z < 0):
        raise ValueError("patch weights must be non-negative")
    total = z.sum()
    if total <= 0:
        raise ValueError("patch weights sum to zero")
    return Heatmap((z / total * visual_share).reshape(grid), frame)


def bilinear_upsample(grid, size: tuple) -> np.ndarray:
    """Cell-centered bilinear interpolation of an [h, w] grid to ``size`` (H, W)."""
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape
    H, W = size

    def axis_weights(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        t = pos - lo
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), lo] += 1 - t
        m[np.arange(n_out), hi] += t
        return m

    return axis_weights(h, H) @ g @ axis_weights(w, W).T


def heat_colormap(v) -> np.ndarray:
    """Black-red-yellow-white ramp for v in [0, 1] -> [..., 3]."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], -1)


def overlay(image, heatmap, alpha: float = 0.6) -> tuple[np.ndarray, np.ndarray]:
    """Blend a heat grid over a uint8 image; returns (blended uint8, per-pixel blend weight)."""
    img = np.asarray(image)
    grid = heatmap.grid if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    up = bilinear_upsample(grid, img.shape[:2])
    peak = up.max()
    level = up / peak if peak > 0 else np.zeros_like(up)
    weight = alpha * level
    base = img.astype(np.float64) / 255.0
    out = (1 - weight[..., None]) * base + weight[..., None] * heat_colormap(level)
    return np.round(np.clip(out, 0, 1) * 255).astype(np.uint8), weight


def export_overlay(image, heatmap, path, alpha: float = 0.6) -> np.ndarray:
    """Write the blended overlay as PNG; returns the blend weights."""
    blended, weight = overlay(image, heatmap, alpha)
    Image.fromarray(blended, mode="RGB").save(path, format="PNG")
    return weight


def export_ratios_csv(ratios, path, times=None) -> None:
    r = np.asarray(ratios)
    ts = range(len(r)) if times is None else times
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "w_force", "w_pose", "w_sota"])
        for t, row in zip(ts, r):
            w.writerow([t] + [repr(float(x)) for x in row])


@dataclass
class Explanation:
    ratios: np.ndarray        # [T, 3]
    heatmaps: list            # Heatmap per frame
    force_norm: np.ndarray    # [T] raw contact force magnitude, for phase context


def explain_episode(policy, episode, batch: int = 64) -> Explanation:
    """Per-frame ratios and heatmaps for an episode under a trained SO-TA policy.

    Frame t is probed through the window ending at t (repeat-first padded);
    the probe reads the frame's own tokens and its OT patch weights.
    """
    if policy.cfg.backbone.variant != "sota":
        raise ValueError("heatmaps need the optimal-transport fusion variant")
    from .datapipe import force_features, minmax_apply, pose_features
    stats = policy.stats
    n, t_w = len(episode), policy.cfg.backbone.t_w
    idx = np.clip(np.arange(n)[:, None] + np.arange(-t_w + 1, 1)[None, :], 0, n - 1)
    force = minmax_apply(force_features(episode), stats.force_min, stats.force_max)
    pose = minmax_apply(pose_features(episode), stats.pose_min, stats.pose_max)
    ratios, weights = [], []
    bb = policy.backbone
    with no_grad():
        for s in range(0, n, batch):
            o = idx[s:s + batch]
            _, enc = policy.condition(episode.images[o], force[o], pose[o], return_encoding=True)
            tokens = enc.tokens.data[:, -1]
            ratios.append(modal_influence(tokens, bb.framewise_fuse))
            weights.append(enc.attn.patch_weights.data[:, -1])
    ratios = np.concatenate(ratios)
    weights = np.concatenate(weights)
    grid = policy.cfg.backbone.attention.grid
    heatmaps = [compute_heatmap(weights[t], ratios[t, 2], grid, t) for t in range(n)]
    fn = np.linalg.norm(episode.wrench[:, :3].astype(np.float64), axis=-1)
    return Explanation(ratios, heatmaps, fn)
