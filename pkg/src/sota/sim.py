"""Planar peg-in-hole with penalty contact, rendering, a scripted expert and rollouts.

World frame is the x-z plane in meters; ``theta`` rotates the peg about the
plane normal.  The socket block's top surface is z = 0 and the hole, centered
at ``hole_x``, has 45-degree chamfers on both rims.  The peg pose ``(x, z)``
is the center of its bottom edge.  Motion is kinematic: the commanded
increment is clamped and integrated, and contact only produces a reported
wrench (stiffness times interpenetration plus damping and Coulomb friction).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .datapipe import Episode, planar_rotation

MM = 1e-3
DEG = math.pi / 180.0
PHASES = ("approach", "descend", "search", "insert", "done")
CAUSES = ("timeout", "force_limit", "drift")


@dataclass(frozen=True)
class SimConfig:
    peg_width: float = 4.0 * MM
    peg_height: float = 10.0 * MM
    clearance: float = 0.5 * MM
    chamfer: float = 0.6 * MM
    hole_depth: float = 6.0 * MM
    insert_depth: float = 5.0 * MM     # success once the peg bottom is this deep
    stiffness: float = 5000.0          # N/m
    damping: float = 20.0              # N s/m
    friction: float = 0.3
    dt: float = 0.1
    max_step: float = 2.0 * MM
    max_rot_step: float = 1.0 * DEG
    force_limit: float = 5.0
    budget_s: float = 100.0
    x_range: tuple = (-14.0 * MM, 14.0 * MM)
    z_range: tuple = (-8.0 * MM, 20.0 * MM)
    hole_range: float = 2.0 * MM      # fixture placement tolerance
    start_offset: float = 8.0 * MM
    start_height: tuple = (10.0 * MM, 15.0 * MM)
    start_tilt: float = 5.0 * DEG
    grip_force: float = 10.0
    gripper_width: float = 4.0 * MM
    image_size: int = 56
    supersample: int = 3

    def __post_init__(self):
        if self.clearance < 0:
            raise ValueError("clearance must be non-negative")
        if self.stiffness <= 0 or self.dt <= 0:
            raise ValueError("stiffness and dt must be positive")

    @property
    def half_width(self) -> float:
        """Hole half width."""
        return 0.5 * (self.peg_width + self.clearance)

    @property
    def max_steps(self) -> int:
        return int(round(self.budget_s / self.dt))


@dataclass
class SimState:
    x: float
    z: float
    theta: float
    hole_x: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    wrench: np.ndarray = field(default_factory=lambda: np.zeros(3))   # tool frame (fx, fz, tau)
    force_world: np.ndarray = field(default_factory=lambda: np.zeros(2))
    depths: np.ndarray = field(default_factory=lambda: np.zeros(N_SEGMENTS))
    phase: str = "approach"
    t: int = 0

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.z, self.theta])

    @property
    def force_norm(self) -> float:
        return float(np.hypot(*self.force_world))

    def copy(self) -> "SimState":
        return replace(self, velocity=self.velocity.copy(), wrench=self.wrench.copy(),
                       force_world=self.force_world.copy(), depths=self.depths.copy())


# -- geometry -------------------------------------------------------------
N_SEGMENTS = 7   # top-L, chamfer-L, wall-L, floor, wall-R, chamfer-R, top-R
_FAR = 1.0


def surface_height(x, hole_x: float, cfg: SimConfig):
    """Height of the solid's upper boundary at x (0 on top, -depth in the hole)."""
    a = np.abs(np.asarray(x, dtype=np.float64) - hole_x)
    hw, ch = cfg.half_width, cfg.chamfer
    return np.where(a >= hw + ch, 0.0, np.where(a >= hw, a - hw - ch, -cfg.hole_depth))


def _segments(hole_x: float, cfg: SimConfig):
    """(start [7, 2], end [7, 2], outward normal [7, 2])."""
    hw, ch, d = cfg.half_width, cfg.chamfer, cfg.hole_depth
    xl, xr = hole_x - hw, hole_x + hw
    s2 = 1.0 / math.sqrt(2.0)
    start = np.array([[-_FAR, 0.0], [xl - ch, 0.0], [xl, -ch], [xl, -d],
                      [xr, -d], [xr, -ch], [xr + ch, 0.0]])
    end = np.array([[xl - ch, 0.0], [xl, -ch], [xl, -d], [xr, -d],
                    [xr, -ch], [xr + ch, 0.0], [_FAR, 0.0]])
    normal = np.array([[0.0, 1.0], [s2, s2], [1.0, 0.0], [0.0, 1.0],
                       [-1.0, 0.0], [-s2, s2], [0.0, 1.0]])
    return start, end, normal


@lru_cache(maxsize=8)
def _peg_samples(width: float, height: float, spacing: float = 0.2 * MM) -> np.ndarray:
    """Peg-frame boundary points (u across, v up) on the bottom edge and lower sides."""
    n_bottom = int(round(width / spacing)) + 1
    bottom = np.stack([np.linspace(-width / 2, width / 2, n_bottom), np.zeros(n_bottom)], axis=1)
    v = np.arange(1, int(height * 0.8 / spacing) + 1) * spacing
    left = np.stack([np.full_like(v, -width / 2), v], axis=1)
    right = np.stack([np.full_like(v, width / 2), v], axis=1)
    return np.concatenate([bottom, left, right])


def _rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def peg_points(x: float, z: float, theta: float, cfg: SimConfig) -> np.ndarray:
    local = _peg_samples(cfg.peg_width, cfg.peg_height)
    return local @ _rot2(theta).T + np.array([x, z])


def _point_segment_distance(p, a, b):
    """[N, 2] points vs [S, 2] segments -> [N, S] distances."""
    ab = b - a
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(ap * ab, axis=-1) / np.maximum(np.sum(ab * ab, axis=-1), 1e-30), 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(p[:, None, :] - closest, axis=-1)


def contact_wrench(x, z, theta, hole_x, velocity, prev_depths, cfg: SimConfig):
    """Penalty contact for the peg at (x, z, theta).

    Each penetrating sample point is assigned to its nearest solid boundary
    segment; per segment the deepest point carries the normal force
    k*d + c*dd/dt (clamped at zero) plus friction opposing tangential slip.
    Returns (force_world [2], torque about the peg bottom, depths [7]).
    """
    pts = peg_points(x, z, theta, cfg)
    inside = pts[:, 1] < surface_height(pts[:, 0], hole_x, cfg)
    depths = np.zeros(N_SEGMENTS)
    force, torque = np.zeros(2), 0.0
    if not np.any(inside):
        return force, torque, depths
    p = pts[inside]
    a, b, n = _segments(hole_x, cfg)
    dist = _point_segment_distance(p, a, b)
    seg = np.argmin(dist, axis=1)
    d = dist[np.arange(len(p)), seg]
    origin = np.array([x, z])
    for s in np.unique(seg):
        i = np.flatnonzero(seg == s)[np.argmax(d[seg == s])]
        depth = d[i]
        depths[s] = depth
        rate = (depth - prev_depths[s]) / cfg.dt
        normal_force = max(cfg.stiffness * depth + cfg.damping * rate, 0.0)
        r = p[i] - origin
        v_pt = velocity[:2] + velocity[2] * np.array([-r[1], r[0]])
        tangent = np.array([n[s, 1], -n[s, 0]])
        slip = float(v_pt @ tangent)
        f = normal_force * n[s] - cfg.friction * normal_force * math.tanh(slip / 1e-4) * tangent
        force += f
        torque += r[0] * f[1] - r[1] * f[0]
    return force, torque, depths


def in_workspace(state: SimState, cfg: SimConfig) -> bool:
    return (cfg.x_range[0] <= state.x <= cfg.x_range[1]
            and cfg.z_range[0] <= state.z <= cfg.z_range[1])


def is_success(state: SimState, cfg: SimConfig) -> bool:
    return state.z <= -cfg.insert_depth and abs(state.x - state.hole_x) < cfg.half_width


def clamp_action(action, cfg: SimConfig) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite action")
    lim = np.array([cfg.max_step, cfg.max_step, cfg.max_rot_step])
    return np.clip(a, -lim, lim)


def step(state: SimState, action, cfg: SimConfig = SimConfig()) -> tuple[SimState, np.ndarray]:
    """Integrate one clamped pose increment and evaluate contact; returns (state', wrench)."""
    a = clamp_action(action, cfg)
    x, z, th = state.x + a[0], state.z + a[1], state.theta + a[2]
    vel = a / cfg.dt
    f, tau, depths = contact_wrench(x, z, th, state.hole_x, vel, state.depths, cfg)
    c, s = math.cos(th), math.sin(th)
    f_tool = np.array([c * f[0] + s * f[1], -s * f[0] + c * f[1]])
    wrench = np.array([f_tool[0], f_tool[1], tau])
    new = SimState(x, z, th, state.hole_x, vel, wrench, f, depths, state.phase, state.t + 1)
    return new, wrench


def wrench6(state: SimState) -> np.ndarray:
    """Planar tool-frame wrench as (fx, fy, fz, tx, ty, tz)."""
    fx, fz, tau = state.wrench
    return np.array([fx, 0.0, fz, 0.0, tau, 0.0])


def initial_state(rng, cfg: SimConfig = SimConfig()) -> SimState:
    hole_x = rng.uniform(-cfg.hole_range, cfg.hole_range)
    x = float(np.clip(hole_x + rng.uniform(-cfg.start_offset, cfg.start_offset),
                      cfg.x_range[0] + 2 * MM, cfg.x_range[1] - 2 * MM))
    z = rng.uniform(*cfg.start_height)
    theta = rng.uniform(-cfg.start_tilt, cfg.start_tilt)
    return SimState(x, z, theta, hole_x)


# -- rendering -------------------------------------------------------------
BACKGROUND = np.array([0.15, 0.17, 0.22])
BLOCK = np.array([0.45, 0.45, 0.48])
CAVITY = np.array([0.05, 0.05, 0.06])
PEG = np.array([1.0, 0.7, 0.2])
OCCLUDER_GRAY = 0.5
BLOCK_BOTTOM = -8.0 * MM


@dataclass(frozen=True)
class PerturbationSpec:
    """Rendering-only perturbations; physics never sees these.

    ``distractors`` holds (kind, x) pairs with kind "socket" (a decoy hole
    drawn on the block) or "peg" (a decoy peg standing on the block).
    ``occlusion`` is the fraction of the socket's width hidden by a gray
    rectangle, starting from ``occlusion_side``.
    """
    gain: float = 1.0
    distractors: tuple = ()
    occlusion: float = 0.0
    occlusion_side: str = "left"

    def __post_init__(self):
        if self.gain < 0:
            raise ValueError("illumination gain must be non-negative")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError("occlusion fraction must be in [0, 1]")
        if self.occlusion_side not in ("left", "right"):
            raise ValueError("occlusion_side must be 'left' or 'right'")
        for kind, _ in self.distractors:
            if kind not in ("socket", "peg"):
                raise ValueError(f"unknown distractor kind {kind!r}")

    def to_dict(self) -> dict:
        return {"gain": self.gain, "distractors": [list(d) for d in self.distractors],
                "occlusion": self.occlusion, "occlusion_side": self.occlusion_side}


NOMINAL = PerturbationSpec()
SUITES = ("nominal", "illumination", "distractor", "occlusion", "combined")


def sample_perturbation(suite: str, hole_x: float, rng, cfg: SimConfig = SimConfig()) -> PerturbationSpec:
    """Draw one scene's perturbation from a named suite."""
    if suite not in SUITES:
        raise ValueError(f"unknown perturbation suite {suite!r}; expected one of {SUITES}")
    if suite == "nominal":
        return NOMINAL
    gain, distractors, occ, side = 1.0, (), 0.0, "left"
    if suite in ("illumination", "combined"):
        gain = float(rng.uniform(0.3, 1.7))
    if suite in ("distractor", "combined"):
        lo, hi = cfg.x_range[0] + 3 * MM, cfg.x_range[1] - 3 * MM
        xs = [x for x in np.linspace(lo, hi, 41) if abs(x - hole_x) > 6 * MM]
        kind = "peg" if rng.random() < 0.5 else "socket"
        distractors = ((kind, float(rng.choice(xs))),)
    if suite in ("occlusion", "combined"):
        occ = float(rng.uniform(0.3, 0.5))
        side = "left" if rng.random() < 0.5 else "right"
    return PerturbationSpec(gain, distractors, occ, side)


@lru_cache(maxsize=4)
def _sample_grid(size: int, ss: int, x_range: tuple, z_range: tuple):
    px = (x_range[1] - x_range[0]) / size
    pz = (z_range[1] - z_range[0]) / size
    off = (np.arange(ss) + 0.5) / ss
    xs = x_range[0] + (np.arange(size)[:, None] + off[None, :]).reshape(-1) * px
    zs = z_range[1] - (np.arange(size)[:, None] + off[None, :]).reshape(-1) * pz
    Z, X = np.meshgrid(zs, xs, indexing="ij")
    return X, Z


def pixel_of(x: float, z: float, cfg: SimConfig = SimConfig()) -> tuple[int, int]:
    """(row, col) of the pixel containing world point (x, z)."""
    n = cfg.image_size
    col = int((x - cfg.x_range[0]) / (cfg.x_range[1] - cfg.x_range[0]) * n)
    row = int((cfg.z_range[1] - z) / (cfg.z_range[1] - cfg.z_range[0]) * n)
    return row, col


def _peg_mask(X, Z, x, z, theta, cfg):
    c, s = math.cos(theta), math.sin(theta)
    dx, dz = X - x, Z - z
    u = c * dx + s * dz
    v = -s * dx + c * dz
    return (np.abs(u) <= cfg.peg_width / 2) & (v >= 0) & (v <= cfg.peg_height)


def render(state: SimState, perturbation: PerturbationSpec = NOMINAL,
           cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Side-view cutaway as float [H, W, 3] in [0, 1], supersampled for anti-aliasing."""
    n, ss = cfg.image_size, cfg.supersample
    X, Z = _sample_grid(n, ss, tuple(cfg.x_range), tuple(cfg.z_range))
    img = np.broadcast_to(BACKGROUND, X.shape + (3,)).copy()
    solid = (Z <= 0.0) & (Z >= BLOCK_BOTTOM)
    img[solid] = BLOCK
    sockets = [state.hole_x] + [x for k, x in perturbation.distractors if k == "socket"]
    for hx in sockets:
        cavity = (Z > surface_height(X, hx, cfg)) & (Z <= 0.0)
        img[cavity] = CAVITY
    for kind, px in perturbation.distractors:
        if kind == "peg":
            img[_peg_mask(X, Z, px, 0.0, 0.0, cfg)] = PEG
    img[_peg_mask(X, Z, state.x, state.z, state.theta, cfg)] = PEG
    img = img.reshape(n, ss, n, ss, 3).mean(axis=(1, 3))
    img = np.clip(img * perturbation.gain, 0.0, 1.0)
    if perturbation.occlusion > 0:
        width = 2 * (cfg.half_width + cfg.chamfer)
        if perturbation.occlusion_side == "left":
            x0 = state.hole_x - width / 2
            x1 = x0 + perturbation.occlusion * width
        else:
            x1 = state.hole_x + width / 2
            x0 = x1 - perturbation.occlusion * width
        r0, c0 = pixel_of(x0, 1.0 * MM, cfg)
        r1, c1 = pixel_of(x1, -cfg.hole_depth, cfg)
        img[max(r0, 0):min(r1 + 1, n), max(c0, 0):min(c1 + 1, n)] = OCCLUDER_GRAY
    return img


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- scripted expert ------------------------------------------------------
@dataclass
class ExpertConfig:
    aim_error: float = 1.5 * MM        # per-episode lateral aiming error bound (uniform)
    jitter: float = 0.03 * MM          # per-step lateral hand noise (std)
    lateral_speed: float = 0.6 * MM
    vertical_speed: float = 0.6 * MM
    rot_speed: float = 0.5 * DEG
    hover: float = 2.0 * MM
    slow_zone: float = 1.0 * MM
    slow_speed: float = 0.15 * MM
    align_tol: float = 0.1 * MM
    rot_tol: float = 0.3 * DEG
    contact_force: float = 0.4
    search_step: float = 0.2 * MM
    reaim: float = 0.3                 # aiming error kept after a flat contact
    retry_hover: float = 0.5 * MM
    insert_speed: float = 0.5 * MM
    jam_force: float = 1.5


@dataclass
class ExpertMemory:
    aim: float = 0.0                   # lateral aiming offset for this episode
    retries: int = 0
    searched: bool = False


def scripted_expert(state: SimState, rng, memory: ExpertMemory | None = None,
                    cfg: ExpertConfig = ExpertConfig(), sim: SimConfig = SimConfig()) -> np.ndarray:
    """Privileged phase machine: approach, descend, search on contact, insert.

    Updates ``state.phase`` and ``memory`` in place; returns (dx, dz, dtheta).
    """
    mem = memory if memory is not None else ExpertMemory()
    f = state.force_world
    fn = float(np.hypot(*f))
    hw_in = -sim.chamfer - 0.1 * MM
    a = np.zeros(3)
    a[2] = float(np.clip(-state.theta, -cfg.rot_speed, cfg.rot_speed))
    if state.phase in ("descend", "search") and state.z < hw_in:
        state.phase = "insert"

    if state.phase == "approach":
        ex = state.hole_x + mem.aim - state.x
        a[0] = np.clip(ex, -cfg.lateral_speed, cfg.lateral_speed) + rng.normal(0.0, cfg.jitter)
        hover = cfg.hover if mem.retries == 0 else cfg.retry_hover
        a[1] = np.clip(hover - state.z, -cfg.vertical_speed, cfg.vertical_speed)
        if abs(ex) < cfg.align_tol and abs(state.theta) < cfg.rot_tol and state.z <= hover + 0.05 * MM:
            state.phase = "descend"
    elif state.phase == "descend":
        if fn > cfg.contact_force:
            state.phase = "search"
            mem.searched = True
            return scripted_expert(state, rng, mem, cfg, sim)
        a[1] = -(cfg.slow_speed if state.z < cfg.slow_zone else cfg.vertical_speed)
    elif state.phase == "search":
        lateral = f[0]
        if fn > cfg.contact_force and abs(lateral) > 0.3 * fn:
            # chamfer contact: the rim pushes toward the hole
            a[0] = math.copysign(cfg.search_step, lateral)
            a[1] = 0.1 * MM if fn > cfg.jam_force else -0.1 * MM
        elif fn > cfg.contact_force:
            # flat contact: back off and re-aim with a smaller error
            mem.retries += 1
            mem.aim *= cfg.reaim
            state.phase = "approach"
            a[1] = 0.3 * MM
        else:
            a[1] = -cfg.slow_speed
    elif state.phase == "insert":
        a[0] = np.clip(state.hole_x - state.x, -0.1 * MM, 0.1 * MM)
        a[1] = 0.1 * MM if fn > cfg.jam_force else -cfg.insert_speed
    return a


# -- episodes & rollouts -----------------------------------------------------
@dataclass
class RolloutOutcome:
    seed: int
    success: bool
    time_s: float
    cause: str = ""
    max_force: float = 0.0
    steps: int = 0
    searched: bool = False

    def __post_init__(self):
        if self.success and self.cause:
            raise ValueError("successful rollout cannot carry a failure cause")


def classify(state: SimState, cfg: SimConfig) -> tuple[bool, str]:
    """(done, cause) after a step; cause '' with done=True means success."""
    if state.force_norm > cfg.force_limit:
        return True, "force_limit"
    if not in_workspace(state, cfg):
        return True, "drift"
    if is_success(state, cfg):
        return True, ""
    if state.t >= cfg.max_steps:
        return True, "timeout"
    return False, ""


def observe(state: SimState, perturbation: PerturbationSpec, cfg: SimConfig) -> dict:
    """One synchronized frame: image bytes, 6-D wrench, gripper force, pose, gripper width."""
    return {"image": to_uint8(render(state, perturbation, cfg)), "wrench": wrench6(state),
            "grip_force": cfg.grip_force, "position": np.array([state.x, 0.0, state.z]),
            "rotation": planar_rotation(state.theta), "gripper": cfg.gripper_width,
            "planar": state.pose}


def frames_to_episode(frames, success: bool, meta: dict, cfg: SimConfig) -> Episode:
    n = len(frames)
    return Episode(images=np.stack([f["image"] for f in frames]),
                   timestamps=np.arange(n) * cfg.dt,
                   wrench=np.stack([f["wrench"] for f in frames]),
                   grip_force=np.array([f["grip_force"] for f in frames]),
                   position=np.stack([f["position"] for f in frames]),
                   rotation=np.stack([f["rotation"] for f in frames]),
                   gripper=np.array([f["gripper"] for f in frames]),
                   planar=np.stack([f["planar"] for f in frames]),
                   success=success, meta=meta)


def run_expert_episode(seed, sim: SimConfig = SimConfig(), expert: ExpertConfig = ExpertConfig(),
                       perturbation: PerturbationSpec = NOMINAL, max_steps: int | None = None,
                       state: SimState | None = None, memory: ExpertMemory | None = None):
    """Roll the expert out; returns (Episode, RolloutOutcome)."""
    rng = np.random.default_rng(seed)
    state = state.copy() if state is not None else initial_state(rng, sim)
    mem = memory if memory is not None else ExpertMemory(aim=rng.uniform(-expert.aim_error, expert.aim_error))
    limit = max_steps if max_steps is not None else sim.max_steps
    frames = [observe(state, perturbation, sim)]
    max_force, cause, success = 0.0, "timeout", False
    while state.t < limit:
        action = scripted_expert(state, rng, mem, expert, sim)
        phase = state.phase
        state, _ = step(state, action, sim)
        state.phase = phase
        frames.append(observe(state, perturbation, sim))
        max_force = max(max_force, state.force_norm)
        done, cause = classify(state, sim)
        if done:
            success = cause == ""
            break
    else:
        cause = "timeout"
    state.phase = "done" if success else state.phase
    outcome = RolloutOutcome(int(seed) if np.isscalar(seed) else 0, success, state.t * sim.dt,
                             "" if success else cause, max_force, state.t, mem.searched)
    meta = {"seed": seed if np.isscalar(seed) else list(seed), "hole_x": state.hole_x,
            "searched": mem.searched, "perturbation": perturbation.to_dict()}
    return frames_to_episode(frames, success, meta, sim), outcome


def collect_demos(n: int, seed: int, sim: SimConfig = SimConfig(), expert: ExpertConfig = ExpertConfig(),
                  suite: str = "nominal") -> list[Episode]:
    """``n`` expert episodes; episode i uses the seed sequence (seed, i)."""
    episodes = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 1])
        state = initial_state(rng, sim)
        spec = sample_perturbation(suite, state.hole_x, rng, sim)
        ep, _ = run_expert_episode([seed, i], sim, expert, spec, state=state,
                                   memory=ExpertMemory(aim=rng.uniform(-expert.aim_error, expert.aim_error)))
        ep.meta["index"] = i
        episodes.append(ep)
    return episodes


# -- closed-loop evaluation ----------------------------------------------------
class ExpertPolicy:
    """The scripted expert behind the batch policy interface (uses privileged state)."""

    def __init__(self, expert: ExpertConfig = ExpertConfig(), sim: SimConfig = SimConfig()):
        self.expert, self.sim = expert, sim

    def reset(self, n: int, rng) -> None:
        self.rngs = [np.random.default_rng(rng.integers(2**63)) for _ in range(n)]
        self.memory = [ExpertMemory(aim=r.uniform(-self.expert.aim_error, self.expert.aim_error))
                       for r in self.rngs]

    def act(self, frames, states, active) -> np.ndarray:
        out = np.zeros((len(states), 3))
        for i in np.flatnonzero(active):
            out[i] = scripted_expert(states[i], self.rngs[i], self.memory[i], self.expert, self.sim)
        return out


class RandomPolicy:
    """Uniform random increments within the per-step clamp."""

    def __init__(self, sim: SimConfig = SimConfig()):
        self.sim = sim

    def reset(self, n: int, rng) -> None:
        self.rng = np.random.default_rng(rng.integers(2**63))

    def act(self, frames, states, active) -> np.ndarray:
        lim = np.array([self.sim.max_step, self.sim.max_step, self.sim.max_rot_step])
        return self.rng.uniform(-lim, lim, size=(len(states), 3))


@dataclass
class EvalSummary:
    n: int
    successes: int
    success_rate: float
    causes: dict
    mean_time_s: float | None
    median_time_s: float | None
    success_times: list

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def summarize(outcomes) -> EvalSummary:
    times = [o.time_s for o in outcomes if o.success]
    causes = {c: sum(o.cause == c for o in outcomes) for c in CAUSES}
    n = len(outcomes)
    return EvalSummary(n, len(times), len(times) / n if n else 0.0, causes,
                       float(np.mean(times)) if times else None,
                       float(np.median(times)) if times else None, times)


def evaluate_policy(policy, n: int, seed: int = 0, suite: str = "nominal",
                    sim: SimConfig = SimConfig(), force_limit: float | None = None,
                    budget_s: float | None = None):
    """Closed-loop rollouts in lockstep; returns (outcomes, summary).

    ``policy`` implements ``reset(n, rng)`` and ``act(frames, states, active)``
    returning one increment per rollout.  Frames are the synchronized
    observations from ``observe``; states are exposed only so privileged
    baselines can run through the same loop.
    """
    if force_limit is not None or budget_s is not None:
        sim = replace(sim, force_limit=force_limit if force_limit is not None else sim.force_limit,
                      budget_s=budget_s if budget_s is not None else sim.budget_s)
    states, specs = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 2])
        st = initial_state(rng, sim)
        states.append(st)
        specs.append(sample_perturbation(suite, st.hole_x, rng, sim))
    policy.reset(n, np.random.default_rng([seed, 3]))
    frames = [observe(s, p, sim) for s, p in zip(states, specs)]
    active = np.ones(n, dtype=bool)
    outcomes: list = [None] * n
    max_force = np.zeros(n)
    while active.any():
        actions = policy.act(frames, states, active)
        for i in np.flatnonzero(active):
            phase = states[i].phase
            states[i], _ = step(states[i], actions[i], sim)
            states[i].phase = phase
            max_force[i] = max(max_force[i], states[i].force_norm)
            frames[i] = observe(states[i], specs[i], sim)
            done, cause = classify(states[i], sim)
            if done:
                active[i] = False
                outcomes[i] = RolloutOutcome(i, cause == "", states[i].t * sim.dt, cause,
                                             float(max_force[i]), states[i].t)
    return outcomes, summarize(outcomes)


OUTCOME_COLUMNS = ("seed", "success", "time_s", "cause", "max_force_N")


def export_outcomes_csv(outcomes, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OUTCOME_COLUMNS)
        for o in outcomes:
            w.writerow([o.seed, int(o.success), f"{o.time_s:.1f}", o.cause, f"{o.max_force:.6f}"])


def read_outcomes_csv(path) -> list[RolloutOutcome]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(OUTCOME_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"outcome CSV missing columns {sorted(missing)}")
        for row in reader:
            ok = bool(int(row["success"]))
            out.append(RolloutOutcome(int(row["seed"]), ok, float(row["time_s"]),
                                      "" if ok else row["cause"], float(row["max_force_N"])))
    return out
