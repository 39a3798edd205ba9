"""Run configuration: a flat ``key = value`` text file validated against a schema.

Format: one assignment per line, ``#`` starts a comment, blank lines are
ignored.  Values are parsed by the key's declared type; booleans accept
true/false/1/0/yes/no, tuples are comma separated.  Unknown keys, repeated
keys and out-of-range values are errors.  The canonical rendering
(``RunConfig.dumps``) lists every key in schema order and is what gets
hashed and copied next to outputs.
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .attention import AttentionConfig
from .backbone import VARIANTS, BackboneConfig
from .policy import PolicyConfig
from .sim import SUITES, SimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    check: Callable[[Any], bool] | None = None
    help: str = ""


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0 <= x < 1


SCHEMA: dict[str, Key] = {
    # fusion
    "variant": Key(str, "sota", lambda v: v in VARIANTS, "sota | cross_attention | concat"),
    "mask_force": Key(bool, False, None, "zero the force input at train and eval"),
    "mask_pose": Key(bool, False, None, "zero the pose input at train and eval"),
    "t_w": Key(int, 8, _pos, "observation window (frames)"),
    "t_h": Key(int, 16, _pos, "action chunk length"),
    "n_exec": Key(int, 8, _pos, "actions executed per plan"),
    "d_model": Key(int, 64, _pos, "token width"),
    "d_att": Key(int, 32, _pos, "attention width"),
    "n_sub": Key(int, 2, _pos, "sub-queries"),
    "epsilon": Key(float, 0.2, _pos, "entropic regularization"),
    "n_ot": Key(int, 5, _pos, "Sinkhorn rounds"),
    "n_heads": Key(int, 4, _pos, "transformer heads"),
    "n_layers": Key(int, 2, _pos, "layers per transformer"),
    "image_size": Key(int, 56, _pos, "square image side (pixels)"),
    "patch": Key(int, 8, _pos, "patch side (pixels)"),
    # diffusion
    "n_diff": Key(int, 100, _pos, "training diffusion steps"),
    "n_infer": Key(int, 10, _pos, "sampling steps"),
    "widths": Key(tuple, (32, 64, 128), lambda v: len(v) == 3 and min(v) > 0, "denoiser channel widths"),
    # training
    "batch_size": Key(int, 64, _pos),
    "epochs": Key(int, 200, _pos),
    "max_steps": Key(int, 0, _nonneg, "0 = derive from epochs"),
    "lr": Key(float, 1e-3, _pos),
    "warmup": Key(int, 200, _nonneg),
    "weight_decay": Key(float, 1e-4, _nonneg),
    "grad_clip": Key(float, 1.0, _pos),
    "ema_decay": Key(float, 0.0, _unit, "0 = no moving average"),
    "dtype": Key(str, "float32", lambda v: v in ("float32", "float64")),
    # data and evaluation
    "n_demos": Key(int, 200, _pos),
    "suite": Key(str, "nominal", lambda v: v in SUITES, "perturbation suite"),
    "n_eval": Key(int, 100, _pos),
    "force_limit": Key(float, 5.0, _pos, "N"),
    "budget": Key(float, 100.0, _pos, "s per evaluation episode"),
    "reset": Key(float, 1.0, _nonneg, "s overhead per aborted attempt"),
    "seed": Key(int, 0, _nonneg),
}


def _parse(key: str, spec: Key, raw):
    if not isinstance(raw, str):
        val = raw
    elif spec.type is bool:
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        val = low in ("true", "1", "yes")
    elif spec.type is tuple:
        try:
            val = tuple(int(p) for p in raw.split(",") if p.strip())
        except ValueError as e:
            raise ConfigError(f"{key}: expected comma separated integers, got {raw!r}") from e
    else:
        try:
            val = spec.type(raw.strip())
        except ValueError as e:
            raise ConfigError(f"{key}: expected {spec.type.__name__}, got {raw!r}") from e
    if spec.type is tuple:
        val = tuple(val)
    elif spec.type is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if spec.type is not tuple and not isinstance(val, spec.type):
        raise ConfigError(f"{key}: expected {spec.type.__name__}, got {type(val).__name__}")
    if spec.check is not None and not spec.check(val):
        raise ConfigError(f"{key}: invalid value {val!r}" + (f" ({spec.help})" if spec.help else ""))
    return val


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    def __init__(self, values: dict | None = None, **overrides):
        merged = {k: s.default for k, s in SCHEMA.items()}
        for src in (values or {}, overrides):
            for k, v in src.items():
                if k not in SCHEMA:
                    raise ConfigError(f"unknown key {k!r}")
                merged[k] = _parse(k, SCHEMA[k], v)
        self.values = merged
        self.policy_config()    # cross-field checks

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def replace(self, **overrides) -> "RunConfig":
        return RunConfig(self.values, **overrides)

    @classmethod
    def loads(cls, text: str, **overrides) -> "RunConfig":
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = (p.strip() for p in line.split("=", 1))
            if k in values:
                raise ConfigError(f"line {n}: duplicate key {k!r}")
            values[k] = v
        for k, v in overrides.items():
            if v is not None:
                values[k] = v
        return cls(values)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.loads(text, **overrides)

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in SCHEMA)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def policy_config(self) -> PolicyConfig:
        v = self.values
        try:
            side = v["image_size"]
            if side % v["patch"]:
                raise ValueError(f"image size {side} not divisible by patch {v['patch']}")
            g = side // v["patch"]
            att = AttentionConfig(d_model=v["d_model"], d_att=v["d_att"], n_sub=v["n_sub"], grid=(g, g),
                                  epsilon=v["epsilon"], n_ot=v["n_ot"], n_heads=v["n_heads"])
            bb = BackboneConfig(attention=att, variant=v["variant"], image_size=(side, side),
                                patch=v["patch"], t_w=v["t_w"], n_layers=v["n_layers"], n_heads=v["n_heads"])
            return PolicyConfig(backbone=bb, t_h=v["t_h"], n_diff=v["n_diff"], n_infer=v["n_infer"],
                                n_exec=v["n_exec"], widths=v["widths"], mask_force=v["mask_force"],
                                mask_pose=v["mask_pose"], dtype=v["dtype"],
                                seed=seed_stream(v["seed"], "train"), batch_size=v["batch_size"],
                                epochs=v["epochs"], max_steps=v["max_steps"] or None, lr=v["lr"],
                                warmup=v["warmup"], weight_decay=v["weight_decay"],
                                grad_clip=v["grad_clip"], ema_decay=v["ema_decay"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def sim_config(self) -> SimConfig:
        if self["image_size"] != SimConfig().image_size:
            raise ConfigError(f"the simulator renders {SimConfig().image_size}px images")
        return SimConfig(force_limit=self["force_limit"], budget_s=self["budget"])


def seed_stream(seed: int, name: str) -> int:
    """Independent integer seed for a named purpose (data / train / eval ...)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
