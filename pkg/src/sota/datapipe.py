"""Raw episode streams -> normalized (window, chunk) training pairs, plus archives.

Channel layouts
---------------
force (9):  [|f|, f_hat(3), |tau|, tau_hat(3), grip_force]
pose (10):  [x, y, z, rot6d(6), gripper]
action (3): planar increments [dx, dz, dtheta]

Archive layout (directory)
--------------------------
``manifest.json``   format/version, per-episode entries (files, length, sha256,
                    success, meta), normalization stats, config hash
``ep_XXXXX.bin``    little-endian float32 arrays concatenated in ``BLOB_FIELDS``
                    order, each C-contiguous with shape [T, *trailing]
``ep_XXXXX.img``    raw uint8 frames [T, H, W, 3]
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_NAME = "sota-episodes"
FORMAT_VERSION = 1
D_FORCE, D_POSE, D_ACTION = 9, 10, 3
DIRECTION_FLOOR = 1e-12

# (field, trailing shape)
BLOB_FIELDS = (
    ("timestamps", ()),
    ("wrench", (6,)),
    ("grip_force", ()),
    ("position", (3,)),
    ("rotation", (3, 3)),
    ("gripper", ()),
    ("planar", (3,)),
)


class DataError(Exception):
    """Malformed, mismatched or corrupted dataset."""


@dataclass
class Episode:
    images: np.ndarray       # uint8 [T, H, W, 3]
    timestamps: np.ndarray   # f32 [T], seconds, uniform 10 Hz clock
    wrench: np.ndarray       # f32 [T, 6] (fx, fy, fz, tx, ty, tz), tool frame
    grip_force: np.ndarray   # f32 [T]
    position: np.ndarray     # f32 [T, 3]
    rotation: np.ndarray     # f32 [T, 3, 3]
    gripper: np.ndarray      # f32 [T]
    planar: np.ndarray       # f32 [T, 3] (x, z, theta), the action-space pose
    success: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.timestamps)
        for name, trail in BLOB_FIELDS:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.shape != (n,) + trail:
                raise DataError(f"{name}: expected shape {(n,) + trail}, got {arr.shape}")
            setattr(self, name, arr)
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        if self.images.ndim != 4 or self.images.shape[0] != n or self.images.shape[-1] != 3:
            raise DataError(f"images must be [T, H, W, 3], got {self.images.shape}")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)


# -- per-channel transforms ---------------------------------------------
def split_wrench(wrench, grip_force=0.0) -> np.ndarray:
    """[..., 6] wrench (+ gripper scalar) -> [..., 9] magnitude/direction layout."""
    w = np.asarray(wrench, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (D_FORCE,))
    for off, part in ((0, w[..., :3]), (4, w[..., 3:6])):
        mag = np.linalg.norm(part, axis=-1)
        safe = np.where(mag > DIRECTION_FLOOR, mag, 1.0)
        out[..., off] = np.where(mag > DIRECTION_FLOOR, mag, 0.0)
        out[..., off + 1:off + 4] = np.where((mag > DIRECTION_FLOOR)[..., None],
                                             part / safe[..., None], 0.0)
    out[..., 8] = grip_force
    return out


def rot_to_6d(R) -> np.ndarray:
    """First two columns of R, concatenated: [..., 3, 3] -> [..., 6]."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot_from_6d(v, tol: float = 1e-9) -> np.ndarray:
    """Gram-Schmidt on the two 3-vectors, third column by cross product."""
    v = np.asarray(v, dtype=np.float64)
    a, b = v[..., :3], v[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < tol):
        raise ValueError("degenerate 6-D rotation: zero first column")
    e1 = a / na
    b = b - np.sum(e1 * b, axis=-1, keepdims=True) * e1
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(nb < tol * np.maximum(1.0, np.linalg.norm(v[..., 3:6], axis=-1, keepdims=True))):
        raise ValueError("degenerate 6-D rotation: collinear columns")
    e2 = b / nb
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=-1)


def planar_rotation(theta) -> np.ndarray:
    """Rotation by ``theta`` about the y axis (the x-z plane's normal): [..., 3, 3]."""
    th = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(th), np.sin(th)
    z, o = np.zeros_like(th), np.ones_like(th)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1),
                     np.stack([-s, z, c], -1)], -2)


def wrap_angle(a):
    """Map to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def pose_increments(poses, angle_channels=(2,)) -> np.ndarray:
    """Frame-to-frame differences with the first increment zero; angles wrapped."""
    p = np.asarray(poses, dtype=np.float64)
    if p.shape[0] < 1:
        raise ValueError("need at least one frame")
    d = np.zeros_like(p)
    d[1:] = p[1:] - p[:-1]
    for c in angle_channels:
        d[1:, c] = wrap_angle(d[1:, c])
    return d


def integrate_increments(initial, increments) -> np.ndarray:
    """Inverse of ``pose_increments``; angles come back unwrapped (continuous)."""
    return np.asarray(initial, dtype=np.float64) + np.cumsum(increments, axis=0)


def force_features(ep: Episode) -> np.ndarray:
    return split_wrench(ep.wrench, ep.grip_force)


def pose_features(ep: Episode) -> np.ndarray:
    return np.concatenate([ep.position.astype(np.float64), rot_to_6d(ep.rotation),
                           ep.gripper[:, None].astype(np.float64)], axis=-1)


# -- normalization ------------------------------------------------------
@dataclass
class NormStats:
    force_min: np.ndarray
    force_max: np.ndarray
    pose_min: np.ndarray
    pose_max: np.ndarray
    action_min: np.ndarray
    action_max: np.ndarray

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in cls.__dataclass_fields__})


def minmax_fit(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (min, max) over all leading axes."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    if flat.shape[0] == 0:
        raise ValueError("cannot fit statistics on an empty array")
    return flat.min(axis=0), flat.max(axis=0)


def minmax_apply(x, lo, hi) -> np.ndarray:
    """(x - lo) / (hi - lo); channels with hi == lo map to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    span = hi - lo
    const = span <= 0
    out = (x - lo) / np.where(const, 1.0, span)
    return np.where(const, 0.5, out)


def minmax_invert(xn, lo, hi) -> np.ndarray:
    span = hi - lo
    xn = np.asarray(xn, dtype=np.float64)
    return np.where(span <= 0, lo, lo + xn * span)


def fit_stats(episodes) -> NormStats:
    f = np.concatenate([force_features(e) for e in episodes])
    p = np.concatenate([pose_features(e) for e in episodes])
    a = np.concatenate([pose_increments(e.planar) for e in episodes])
    return NormStats(*minmax_fit(f), *minmax_fit(p), *minmax_fit(a))


def normalize_actions(a, stats: NormStats) -> np.ndarray:
    """Physical increments -> [-1, 1]."""
    return 2.0 * minmax_apply(a, stats.action_min, stats.action_max) - 1.0


def denormalize_actions(an, stats: NormStats) -> np.ndarray:
    return minmax_invert((np.asarray(an) + 1.0) / 2.0, stats.action_min, stats.action_max)


# -- windowing ------------------------------------------------------------
def window_indices(length: int, t_w: int, t_h: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-step observation / action index arrays ([L, T_w], [L, T_h]).

    Pair t observes frames t-T_w .. t-1 (clamped to 0, i.e. repeat-first) and
    predicts increments t .. t+T_h-1 (clamped to L-1, i.e. repeat-last).
    """
    if length < 1:
        raise ValueError("empty episode")
    t = np.arange(length)[:, None]
    obs = np.clip(t + np.arange(-t_w, 0)[None, :], 0, length - 1)
    act = np.clip(t + np.arange(t_h)[None, :], 0, length - 1)
    return obs, act


def pair_count(lengths, t_w: int = 8, t_h: int = 16) -> int:
    """Pairs produced by ``windowize`` for the given episode lengths (one per step)."""
    return int(sum(int(n) for n in lengths))


def windowize(ep: Episode, t_w: int = 8, t_h: int = 16) -> list[tuple[dict, np.ndarray]]:
    """Raw (un-normalized) pairs: ({'images','force','pose'} window, increment chunk)."""
    obs, act = window_indices(len(ep), t_w, t_h)
    f, p, d = force_features(ep), pose_features(ep), pose_increments(ep.planar)
    return [({"images": ep.images[o], "force": f[o], "pose": p[o]}, d[a]) for o, a in zip(obs, act)]


class TrainingSet:
    """Normalized arrays for many episodes with global window/chunk index tables."""

    def __init__(self, episodes, stats: NormStats, t_w: int = 8, t_h: int = 16):
        if not episodes:
            raise DataError("no episodes")
        self.stats, self.t_w, self.t_h = stats, t_w, t_h
        self.images = np.concatenate([e.images for e in episodes])
        self.force = minmax_apply(np.concatenate([force_features(e) for e in episodes]),
                                  stats.force_min, stats.force_max)
        self.pose = minmax_apply(np.concatenate([pose_features(e) for e in episodes]),
                                 stats.pose_min, stats.pose_max)
        self.actions = normalize_actions(np.concatenate([pose_increments(e.planar) for e in episodes]),
                                         stats)
        obs_idx, act_idx, off = [], [], 0
        for e in episodes:
            o, a = window_indices(len(e), t_w, t_h)
            obs_idx.append(o + off)
            act_idx.append(a + off)
            off += len(e)
        self.obs_idx = np.concatenate(obs_idx)
        self.act_idx = np.concatenate(act_idx)

    def __len__(self) -> int:
        return len(self.obs_idx)

    def batch(self, idx) -> dict:
        o, a = self.obs_idx[idx], self.act_idx[idx]
        return {"images": self.images[o], "force": self.force[o], "pose": self.pose[o],
                "actions": self.actions[a]}


# -- archive ---------------------------------------------------------------
def _sha256(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _episode_blob(ep: Episode) -> bytes:
    return b"".join(getattr(ep, name).astype("<f4").tobytes() for name, _ in BLOB_FIELDS)


def dataset_write(episodes, path, config_hash: str = "", stats: NormStats | None = None) -> dict:
    """Write an archive directory; returns the manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    episodes = list(episodes)
    stats = stats if stats is not None else (fit_stats(episodes) if episodes else None)
    entries = []
    for i, ep in enumerate(episodes):
        blob, img = _episode_blob(ep), ep.images.tobytes()
        (root / f"ep_{i:05d}.bin").write_bytes(blob)
        (root / f"ep_{i:05d}.img").write_bytes(img)
        entries.append({"blob": f"ep_{i:05d}.bin", "images": f"ep_{i:05d}.img",
                        "n_steps": len(ep), "image_shape": list(ep.images.shape[1:]),
                        "sha256": _sha256(blob, img), "success": bool(ep.success),
                        "meta": ep.meta})
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "config_hash": config_hash,
                "n_episodes": len(entries), "n_steps": sum(e["n_steps"] for e in entries),
                "stats": stats.to_dict() if stats is not None else None, "episodes": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(path) -> dict:
    mf = Path(path) / "manifest.json"
    if not mf.exists():
        raise DataError(f"no manifest in {path}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"unreadable manifest: {e}") from e
    if manifest.get("format") != FORMAT_NAME:
        raise DataError("not an episode archive")
    if manifest.get("version") != FORMAT_VERSION:
        raise DataError(f"archive version {manifest.get('version')} != supported {FORMAT_VERSION}")
    return manifest


def dataset_read(path) -> tuple[list[Episode], NormStats | None, dict]:
    """Load and checksum-verify every episode; returns (episodes, stats, manifest)."""
    root = Path(path)
    manifest = read_manifest(root)
    episodes = []
    for entry in manifest["episodes"]:
        try:
            blob = (root / entry["blob"]).read_bytes()
            img = (root / entry["images"]).read_bytes()
        except OSError as e:
            raise DataError(f"missing episode file: {e}") from e
        if _sha256(blob, img) != entry["sha256"]:
            raise DataError(f"checksum mismatch for {entry['blob']}")
        n = entry["n_steps"]
        arrays, off = {}, 0
        for name, trail in BLOB_FIELDS:
            count = n * int(np.prod(trail, dtype=np.int64))
            arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(
                (n,) + trail).astype(np.float32)
            off += 4 * count
        images = np.frombuffer(img, dtype=np.uint8).reshape([n] + entry["image_shape"])
        episodes.append(Episode(images=images, success=entry["success"], meta=entry["meta"],
                                **arrays))
    stats = NormStats.from_dict(manifest["stats"]) if manifest.get("stats") else None
    return episodes, stats, manifest


def archive_hash(path) -> str:
    """Digest over the manifest and every episode file, for reproducibility checks."""
    root = Path(path)
    names = sorted(p.name for p in root.iterdir() if p.is_file())
    h = hashlib.sha256()
    for name in names:
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()
