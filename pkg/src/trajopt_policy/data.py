"""Synthetic demonstrations, training windows, and action normalization.

The toy task is a 2-D point mass steered from a random start to a random goal
inside the unit box by a scripted controller with a trapezoidal speed profile
and multiplicative velocity noise. The action is [vx, vy, drop]: two
continuous velocity dimensions plus one discrete drop command that switches
on when the goal region is reached and stays on. Positions integrate the
noisy commanded velocities exactly, so the kinematics invariant holds to the
last bit and every demo position respects the workspace bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import storage

DATASET_VERSION = 1
OBS_DIM = 5          # [position(2), goal(2), drop-flag(1)]
ACTION_DIM = 3       # [vx, vy, drop]
VELOCITY_DIMS = (0, 1)


@dataclass
class TaskConfig:
    workspace_low: float = 0.0
    workspace_high: float = 1.0
    margin: float = 0.12          # start/goal kept this far inside the box
    min_separation: float = 0.25  # minimum start-goal distance
    speed: float = 0.05           # cruise speed, units per tick
    ramp: float = 0.012           # max commanded velocity change per tick
    decel_gain: float = 0.2       # approach speed = decel_gain * distance
    drop_radius: float = 0.02     # drop fires inside this goal distance
    drop_delay: int = 1           # in-region ticks required before firing
    noise: float = 0.1            # multiplicative velocity noise amplitude
    min_length: int = 24
    max_length: int = 80
    settle_steps: int = 14        # recorded ticks after the drop fires
    delta_t: float = 1.0

    def validate(self):
        extent = self.workspace_high - self.workspace_low
        if extent <= 0:
            raise ValueError("workspace must have positive extent")
        inner = extent - 2 * self.margin
        if inner <= 0:
            raise ValueError("margin leaves no room for start/goal sampling")
        if self.min_separation > inner * np.sqrt(2):
            raise ValueError("min_separation unreachable inside the workspace")
        if not (0 < self.speed and 0 < self.ramp):
            raise ValueError("speed and ramp must be positive")
        if self.min_length > self.max_length:
            raise ValueError("min_length must not exceed max_length")
        return self


@dataclass
class Demonstration:
    observations: np.ndarray   # T_d x OBS_DIM
    actions: np.ndarray        # T_d x ACTION_DIM, raw units
    positions: np.ndarray      # T_d x 2

    @property
    def length(self):
        return self.observations.shape[0]


@dataclass
class SequenceSample:
    observations: np.ndarray   # T_s x OBS_DIM
    targets: np.ndarray        # T_s x (T_p * ACTION_DIM), raw units
    positions: np.ndarray      # T_s x 2


def generate_demos(task, count, seed):
    """Scripted rollouts; deterministic given seed, demo i uses seed + i."""
    task.validate()
    if count < 1:
        raise ValueError("count must be >= 1")
    return [_one_demo(task, seed + i) for i in range(count)]


def sample_endpoints(task, rng):
    """Start/goal pair inside the margin-shrunk box, at least min_separation apart."""
    lo, hi = task.workspace_low, task.workspace_high
    while True:
        start = rng.uniform(lo + task.margin, hi - task.margin, size=2)
        goal = rng.uniform(lo + task.margin, hi - task.margin, size=2)
        if np.linalg.norm(goal - start) >= task.min_separation:
            return start, goal


def _one_demo(task, seed):
    rng = np.random.default_rng(seed)
    lo, hi = task.workspace_low, task.workspace_high
    dt = task.delta_t
    start, goal = sample_endpoints(task, rng)

    obs_rows, act_rows, pos_rows = [], [], []
    pos = start.copy()
    vel = np.zeros(2)
    dropped = False
    since_drop = 0
    in_region = 0
    for t in range(task.max_length):
        flag = 1.0 if dropped else 0.0
        to_goal = goal - pos
        dist = float(np.linalg.norm(to_goal))
        if not dropped:
            in_region = in_region + 1 if dist <= task.drop_radius else 0
            if in_region > task.drop_delay:
                dropped = True
        if dropped or in_region:
            desired = np.zeros(2)
        else:
            desired = to_goal / dist * min(task.speed, task.decel_gain * dist)

        dv = desired - vel
        dv_norm = float(np.linalg.norm(dv))
        if dv_norm > task.ramp:
            dv = dv * (task.ramp / dv_norm)
        vel = vel + dv
        vel = vel * (1.0 + rng.uniform(-task.noise, task.noise, size=2))
        # keep the next position inside the box by shaving the velocity
        vel = (np.clip(pos + vel * dt, lo, hi) - pos) / dt

        obs_rows.append(np.concatenate([pos, goal, [flag]]))
        act_rows.append(np.concatenate([vel, [1.0 if dropped else 0.0]]))
        pos_rows.append(pos.copy())
        pos = pos + vel * dt

        if dropped:
            since_drop += 1
            if since_drop >= task.settle_steps and t + 1 >= task.min_length:
                break

    return Demonstration(np.array(obs_rows), np.array(act_rows), np.array(pos_rows))


def sample_windows(demos, T_s, T_p, stride=1):
    """Sliding windows with per-step stacked future-action targets.

    Targets past the end of a trajectory repeat its final action ("hold last
    command"), so every window carries a full T_p-step target at every step.
    """
    if T_s < 1 or T_p < 1 or stride < 1:
        raise ValueError("T_s, T_p and stride must be >= 1")
    windows = []
    for demo in demos:
        td = demo.length
        if td < 1:
            raise ValueError("demonstration shorter than 1 step")
        if td < T_s:
            continue
        for start in range(0, td - T_s + 1, stride):
            targets = np.empty((T_s, T_p * ACTION_DIM))
            for t in range(T_s):
                idx = np.minimum(start + t + np.arange(T_p), td - 1)
                targets[t] = demo.actions[idx].reshape(-1)
            windows.append(SequenceSample(
                observations=demo.observations[start:start + T_s].copy(),
                targets=targets,
                positions=demo.positions[start:start + T_s].copy()))
    return windows


@dataclass
class Normalizer:
    """Per-dimension scaling of demonstrated [lo, hi] into [-1, 1].

    The map is pure scaling by the larger range endpoint, so zero commands
    stay zero (a zero plan really is stationary) and the largest demonstrated
    velocity magnitude lands exactly on 1. Discrete dimensions (everything
    outside `continuous`) pass through.
    """

    lo: np.ndarray
    hi: np.ndarray
    continuous: tuple = VELOCITY_DIMS

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.continuous = tuple(int(i) for i in self.continuous)
        self.scale = np.maximum(np.abs(self.lo), np.abs(self.hi))

    def normalize(self, a):
        a = np.asarray(a, dtype=np.float64)
        out = a.copy()
        idx = list(self.continuous)
        out[..., idx] = a[..., idx] / self.scale[idx]
        return out

    def unnormalize(self, a):
        a = np.asarray(a, dtype=np.float64)
        out = a.copy()
        idx = list(self.continuous)
        out[..., idx] = a[..., idx] * self.scale[idx]
        return out

    def velocity_affine(self):
        """(scale, offset) with raw = offset + scale * normalized, per velocity dim."""
        idx = list(self.continuous)
        return self.scale[idx].copy(), np.zeros(len(idx))


def fit_normalizer(demos, continuous=VELOCITY_DIMS):
    """Ranges from the demonstrated actions; errors on a constant dimension."""
    actions = np.vstack([d.actions for d in demos])
    lo = np.zeros(actions.shape[1])
    hi = np.ones(actions.shape[1])
    for dim in continuous:
        lo[dim] = np.min(actions[:, dim])
        hi[dim] = np.max(actions[:, dim])
        if hi[dim] <= lo[dim]:
            raise ValueError(f"action dimension {dim} is constant; cannot normalize")
    return Normalizer(lo, hi, tuple(continuous))


def save_dataset(path, demos, task, normalizer):
    header = {
        "kind": "dataset",
        "format_version": DATASET_VERSION,
        "delta_t": task.delta_t,
        "demo_count": len(demos),
        "task": {k: getattr(task, k) for k in TaskConfig.__dataclass_fields__},
        "normalizer": {
            "lo": list(normalizer.lo),
            "hi": list(normalizer.hi),
            "continuous": list(normalizer.continuous),
        },
    }
    arrays = []
    for i, demo in enumerate(demos):
        arrays.append((f"demo{i}/observations", demo.observations))
        arrays.append((f"demo{i}/actions", demo.actions))
        arrays.append((f"demo{i}/positions", demo.positions))
    storage.write_container(path, header, arrays)


def load_dataset(path):
    """Returns (demos, task_config, normalizer)."""
    header, arrays = storage.read_container(path, "dataset", DATASET_VERSION)
    demos = []
    for i in range(header["demo_count"]):
        demos.append(Demonstration(
            observations=arrays[f"demo{i}/observations"],
            actions=arrays[f"demo{i}/actions"],
            positions=arrays[f"demo{i}/positions"]))
    task = TaskConfig(**header["task"])
    norm = header["normalizer"]
    normalizer = Normalizer(np.array(norm["lo"]), np.array(norm["hi"]),
                            tuple(norm["continuous"]))
    return demos, task, normalizer
