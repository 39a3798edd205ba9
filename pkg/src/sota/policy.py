"""End-to-end diffusion policy: fusion backbone + conditional denoiser, training and acting."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, FusionBackbone, normalize_image
from .datapipe import (NormStats, TrainingSet, denormalize_actions, minmax_apply, rot_to_6d,
                       split_wrench)
from .diffusion import Denoiser, make_schedule, sample_chunk, training_loss
from .numerics import (EMA, AdamW, CheckpointError, NonFiniteError, ParamStore, Tensor,
                       cosine_warmup, no_grad)
from .numerics import ops as T

CHECKPOINT_PARAMS = "params.bin"
CHECKPOINT_EMA = "ema.bin"
CHECKPOINT_OPT = "optimizer.bin"
CHECKPOINT_META = "policy.json"


@dataclass
class PolicyConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    t_h: int = 16
    d_action: int = 3
    n_diff: int = 100
    n_infer: int = 10
    n_exec: int = 8
    widths: tuple = (32, 64, 128)
    mask_force: bool = False
    mask_pose: bool = False
    dtype: str = "float32"
    seed: int = 0
    # training
    batch_size: int = 64
    epochs: int = 200
    max_steps: int | None = None
    lr: float = 1e-3
    warmup: int = 200
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    ema_decay: float = 0.0             # 0 disables the moving average

    def __post_init__(self):
        if self.n_exec < 1 or self.n_exec > self.t_h:
            raise ValueError("n_exec must lie in [1, t_h]")
        if self.n_infer < 1 or self.n_infer > self.n_diff:
            raise ValueError("n_infer must lie in [1, n_diff]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        bb = BackboneConfig.from_dict(d.pop("backbone", {}))
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(backbone=bb, **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def frame_features(frames, stats: NormStats) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frames (dicts from the simulator) -> (images uint8, force [.., 9], pose [.., 10]) normalized.

    Force and pose saturate at the range seen in the demonstrations: a push
    harder than any demo reads as the hardest demonstrated contact.
    """
    images = np.stack([f["image"] for f in frames])
    wrench = np.stack([f["wrench"] for f in frames])
    grip = np.array([f["grip_force"] for f in frames])
    force = split_wrench(wrench, grip)
    pose = np.concatenate([np.stack([f["position"] for f in frames]),
                           rot_to_6d(np.stack([f["rotation"] for f in frames])),
                           np.array([f["gripper"] for f in frames])[:, None]], axis=-1)
    return (images, np.clip(minmax_apply(force, stats.force_min, stats.force_max), 0.0, 1.0),
            np.clip(minmax_apply(pose, stats.pose_min, stats.pose_max), 0.0, 1.0))


class DiffusionPolicy:
    def __init__(self, cfg: PolicyConfig, stats: NormStats | None = None):
        self.cfg, self.stats = cfg, stats
        self.dtype = np.dtype(cfg.dtype)
        self.store = ParamStore(seed=cfg.seed, dtype=self.dtype)
        self.backbone = FusionBackbone(self.store, cfg.backbone)
        self.denoiser = Denoiser(self.store, cfg.backbone.cond_dim, cfg.d_action, cfg.t_h, cfg.widths)
        self.schedule = make_schedule(cfg.n_diff)

    # -- observation handling ----------------------------------------------
    def prepare(self, images, force, pose):
        """Standardize images, apply modality masks, cast."""
        img = normalize_image(images, self.dtype)
        force = np.asarray(force, dtype=self.dtype)
        pose = np.asarray(pose, dtype=self.dtype)
        if self.cfg.mask_force:
            force = np.zeros_like(force)
        if self.cfg.mask_pose:
            pose = np.zeros_like(pose)
        return img, force, pose

    def condition(self, images, force, pose, return_encoding: bool = False):
        enc = self.backbone(*self.prepare(images, force, pose))
        B = enc.fused.shape[0]
        cond = T.reshape(enc.fused, (B, -1))
        return (cond, enc) if return_encoding else cond

    def loss(self, batch: dict, rng) -> Tensor:
        cond = self.condition(batch["images"], batch["force"], batch["pose"])
        return training_loss(batch["actions"], cond, self.denoiser, self.schedule, rng)

    def sample(self, images, force, pose, rng, n_infer: int | None = None) -> np.ndarray:
        """Normalized chunks [B, T_h, d_action] in [-1, 1]."""
        with no_grad():
            cond = self.condition(images, force, pose)
            shape = (cond.shape[0], self.cfg.t_h, self.cfg.d_action)
            return sample_chunk(cond, self.schedule, n_infer or self.cfg.n_infer, self.denoiser,
                                rng, shape)

    def plan(self, windows, rng, n_infer: int | None = None) -> np.ndarray:
        """Frame windows (list over batch of lists of T_w frames) -> physical increments."""
        if self.stats is None:
            raise ValueError("policy has no normalization statistics")
        feats = [frame_features(w, self.stats) for w in windows]
        images = np.stack([f[0] for f in feats])
        force = np.stack([f[1] for f in feats])
        pose = np.stack([f[2] for f in feats])
        return denormalize_actions(self.sample(images, force, pose, rng, n_infer), self.stats)

    # -- persistence ----------------------------------------------------------
    def save(self, path, extra: dict | None = None, ema: EMA | None = None,
             optimizer: AdamW | None = None) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        self.store.save(root / CHECKPOINT_PARAMS)
        if ema is not None:
            _dict_store(ema.shadow, self.dtype).save(root / CHECKPOINT_EMA)
        if optimizer is not None:
            st = optimizer.state()
            moments = {f"m.{k}": v for k, v in st["m"].items()}
            moments.update({f"v.{k}": v for k, v in st["v"].items()})
            _dict_store(moments, self.dtype).save(root / CHECKPOINT_OPT)
        meta = {"config": self.cfg.to_dict(), "config_hash": self.cfg.digest(),
                "stats": self.stats.to_dict() if self.stats is not None else None,
                "params_sha256": self.store.checksum()}
        if optimizer is not None:
            meta["optimizer_t"] = optimizer.t
        meta.update(extra or {})
        (root / CHECKPOINT_META).write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path, use_ema: bool = True) -> "DiffusionPolicy":
        root = Path(path)
        meta_path = root / CHECKPOINT_META
        if not meta_path.exists():
            raise CheckpointError(f"no policy sidecar in {path}")
        meta = json.loads(meta_path.read_text())
        cfg = PolicyConfig.from_dict(meta["config"])
        stats = NormStats.from_dict(meta["stats"]) if meta.get("stats") else None
        pol = cls(cfg, stats)
        weights = root / CHECKPOINT_EMA if use_ema and (root / CHECKPOINT_EMA).exists() else \
            root / CHECKPOINT_PARAMS
        pol.store.load(weights)
        pol.meta = meta
        return pol


def _dict_store(arrays: dict, dtype) -> ParamStore:
    st = ParamStore(dtype=dtype)
    for k, v in arrays.items():
        st.add(k, np.asarray(v))
    return st


def _load_dict(path) -> dict:
    return dict(ParamStore.read_bytes(Path(path).read_bytes()))


# -- training ----------------------------------------------------------------
@dataclass
class TrainResult:
    losses: list            # (step, epoch, loss, lr)
    steps: int
    seconds: float

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "loss", "lr"])
            for s, e, l, lr in self.losses:
                w.writerow([s, e, repr(float(l)), repr(float(lr))])


def total_steps(cfg: PolicyConfig, n_pairs: int) -> int:
    per_epoch = -(-n_pairs // cfg.batch_size)
    steps = per_epoch * cfg.epochs
    return min(steps, cfg.max_steps) if cfg.max_steps is not None else steps


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 11, epoch]).permutation(n)


def train(policy: DiffusionPolicy, data: TrainingSet, resume: str | None = None,
          checkpoint_every: int | None = None, out: str | None = None, log=None,
          stop_after: int | None = None) -> TrainResult:
    """AdamW with warm-up + cosine decay; every random draw is keyed by (seed, step).

    ``resume`` restores parameters, EMA and optimizer moments from a
    checkpoint written by this function and continues at its step.
    ``stop_after`` halts early (after that many total steps) without
    changing the schedule, which is how resumption is exercised.
    """
    cfg = policy.cfg
    opt = AdamW(policy.store, lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    ema = EMA(policy.store, cfg.ema_decay)
    start = 0
    if resume is not None:
        root = Path(resume)
        policy.store.load(root / CHECKPOINT_PARAMS)
        ema.shadow = {k: v.astype(policy.dtype) for k, v in _load_dict(root / CHECKPOINT_EMA).items()}
        moments = _load_dict(root / CHECKPOINT_OPT)
        start = json.loads((root / CHECKPOINT_META).read_text())["optimizer_t"]
        opt.load_state({"t": start,
                        "m": {k[2:]: v.astype(policy.dtype) for k, v in moments.items() if k.startswith("m.")},
                        "v": {k[2:]: v.astype(policy.dtype) for k, v in moments.items() if k.startswith("v.")}})
    n = len(data)
    per_epoch = -(-n // cfg.batch_size)
    total = total_steps(cfg, n)
    end = total if stop_after is None else min(total, stop_after)
    losses = []
    t0 = time.time()
    for step in range(start, end):
        epoch, k = divmod(step, per_epoch)
        order = epoch_order(cfg.seed, epoch, n)
        idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
        rng = np.random.default_rng([cfg.seed, 13, step])
        policy.store.zero_grad()
        loss = policy.loss(data.batch(idx), rng)
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"non-finite loss at step {step}")
        loss.backward()
        lr = cosine_warmup(step, total, min(cfg.warmup, total), cfg.lr)
        opt.step(lr)
        ema.update(policy.store)
        losses.append((step, epoch, float(loss.data), lr))
        if log is not None and (step % 50 == 0 or step == end - 1):
            log(f"step {step + 1}/{total} epoch {epoch} loss {float(loss.data):.4f} lr {lr:.2e}")
        if out is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            policy.save(out, ema=ema, optimizer=opt)
    if out is not None:
        policy.save(out, ema=ema, optimizer=opt)
    return TrainResult(losses, end - start, time.time() - t0)


class LearnedPolicy:
    """Batched receding-horizon adapter of a ``DiffusionPolicy`` for ``evaluate_policy``.

    All rollouts start together and re-plan every ``n_exec`` steps, so the
    chunks for every active rollout are sampled in one batch.
    """

    def __init__(self, policy: DiffusionPolicy, n_exec: int | None = None,
                 n_infer: int | None = None):
        self.policy = policy
        self.n_exec = n_exec or policy.cfg.n_exec
        self.n_infer = n_infer
        self.t_w = policy.cfg.backbone.t_w
        self.n_plans = 0

    def reset(self, n: int, rng) -> None:
        self.rng = np.random.default_rng(rng.integers(2**63))
        self.buffers = [[] for _ in range(n)]
        self.queues = [[] for _ in range(n)]

    def _push(self, i, frame):
        buf = self.buffers[i]
        if not buf:
            buf.extend([frame] * self.t_w)
        else:
            buf.append(frame)
            del buf[0]

    def act(self, frames, states, active) -> np.ndarray:
        out = np.zeros((len(frames), 3))
        need = []
        for i in np.flatnonzero(active):
            self._push(i, frames[i])
            if not self.queues[i]:
                need.append(i)
        if need:
            chunks = self.policy.plan([self.buffers[i] for i in need], self.rng, self.n_infer)
            self.n_plans += 1
            for i, c in zip(need, chunks):
                self.queues[i] = list(c[: self.n_exec])
        for i in np.flatnonzero(active):
            out[i] = self.queues[i].pop(0)
        return out
