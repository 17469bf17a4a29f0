"""Run configuration: one JSON file per run plus dotted-key overrides.

The file mirrors the module configs section by section; unknown keys are
rejected so typos fail loudly, and every path is resolved to an absolute
path before any command starts work.
"""

from __future__ import annotations

import copy
import json
import os

from . import data, training


class ConfigError(Exception):
    pass


DEFAULTS = {
    "task": {
        "workspace_low": 0.0,
        "workspace_high": 1.0,
        "margin": 0.12,
        "min_separation": 0.25,
        "speed": 0.05,
        "ramp": 0.012,
        "decel_gain": 0.2,
        "drop_radius": 0.02,
        "drop_delay": 1,
        "noise": 0.1,
        "min_length": 24,
        "max_length": 80,
        "settle_steps": 14,
        "delta_t": 1.0,
    },
    "data": {
        "demos": 100,
        "seed": 0,
        "path": "runs/demos.dat",
    },
    "train": {
        "epochs": 55,
        "batch_size": 16,
        "learning_rate": 1.2e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "seed": 1,
        "T_s": 12,
        "T_p": 6,
        "T_a": 3,
        "alpha": 1.0,
        "epsilon": 1e-4,
        "v_min": -1.0,
        "v_max": 1.0,
        "a_min": -0.1,
        "a_max": 0.1,
        "use_position_bounds": True,
        "b_min": [0.0, 0.0],
        "b_max": [1.0, 1.0],
        "hidden": 32,
        "stride": 3,
        "clip_norm": 10.0,
        "head": "qp",
        "solver_tol": 1e-8,
        "solver_max_iter": 50,
        "checkpoint_path": "runs/policy.ckpt",
        "log_path": "runs/train_log.csv",
    },
    "eval": {
        "episodes": 50,
        "seed": 100,
        "horizon": 100,
        "success_radius": 0.05,
        "clip": False,
        "report_prefix": "runs/eval",
        "traces_dir": "",
    },
}

DOC = {
    "task.workspace_low": "lower corner of the square workspace",
    "task.workspace_high": "upper corner of the square workspace",
    "task.margin": "start/goal sampling margin inside the workspace",
    "task.min_separation": "minimum start-goal distance",
    "task.speed": "scripted controller cruise speed (units/tick)",
    "task.ramp": "scripted controller max velocity change per tick",
    "task.decel_gain": "approach speed = decel_gain * goal distance",
    "task.drop_radius": "goal distance at which the drop command fires",
    "task.drop_delay": "in-region ticks required before the drop fires",
    "task.noise": "multiplicative velocity noise amplitude",
    "task.min_length": "minimum recorded demo length",
    "task.max_length": "maximum recorded demo length",
    "task.settle_steps": "ticks recorded after the drop fires",
    "task.delta_t": "tick duration",
    "data.demos": "number of demonstrations to generate",
    "data.seed": "demo generation seed",
    "data.path": "dataset file path",
    "train.epochs": "training epochs",
    "train.batch_size": "windows per optimizer step",
    "train.learning_rate": "Adam learning rate",
    "train.beta1": "Adam first-moment decay",
    "train.beta2": "Adam second-moment decay",
    "train.adam_eps": "Adam denominator epsilon",
    "train.seed": "training seed (init, shuffling)",
    "train.T_s": "training window length",
    "train.T_p": "predicted action-sequence length",
    "train.T_a": "actions executed per replan",
    "train.alpha": "acceleration smoothing weight",
    "train.epsilon": "positive-definiteness regularizer",
    "train.v_min": "velocity lower bound (normalized units)",
    "train.v_max": "velocity upper bound (normalized units)",
    "train.a_min": "acceleration lower bound (normalized units)",
    "train.a_max": "acceleration upper bound (normalized units)",
    "train.use_position_bounds": "constrain predicted positions to the box",
    "train.b_min": "position lower bounds (real units)",
    "train.b_max": "position upper bounds (real units)",
    "train.hidden": "encoder hidden size",
    "train.stride": "window sampling stride",
    "train.clip_norm": "global gradient-norm clip",
    "train.head": "'qp' (constrained) or 'affine' (baseline)",
    "train.solver_tol": "KKT residual tolerance for step solves",
    "train.solver_max_iter": "interior-point iteration cap",
    "train.checkpoint_path": "checkpoint output path",
    "train.log_path": "training log CSV path",
    "eval.episodes": "evaluation episodes",
    "eval.seed": "base evaluation seed (episode i uses seed + i)",
    "eval.horizon": "max ticks per episode",
    "eval.success_radius": "goal distance counted as success",
    "eval.clip": "apply the post-hoc clipping baseline during rollout",
    "eval.report_prefix": "metrics output prefix (.csv/.json appended)",
    "eval.traces_dir": "directory for per-episode trace CSVs (empty = none)",
}

_PATH_KEYS = ("data.path", "train.checkpoint_path", "train.log_path",
              "eval.report_prefix", "eval.traces_dir")


def _reject_unknown(given, known, prefix=""):
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(known[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a section")
            _reject_unknown(value, known[key], prefix=f"{path}.")


def _merge(base, override):
    for key, value in override.items():
        if isinstance(value, dict):
            _merge(base[key], value)
        else:
            base[key] = value


def parse_override(text):
    """'section.key=value'; the value is parsed as JSON, or kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key {key!r} must be section.key")
    return parts[0], parts[1], value


def load_config(path=None, overrides=()):
    """Defaults, then the file, then dotted overrides; unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _reject_unknown(user, DEFAULTS)
        _merge(cfg, user)
    for text in overrides:
        section, key, value = parse_override(text)
        _reject_unknown({section: {key: value}}, DEFAULTS)
        cfg[section][key] = value

    for dotted in _PATH_KEYS:
        section, key = dotted.split(".")
        if cfg[section][key]:
            cfg[section][key] = os.path.abspath(cfg[section][key])
    return cfg


def task_config(cfg):
    try:
        return data.TaskConfig(**cfg["task"]).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"task config: {exc}") from None


def train_config(cfg):
    section = dict(cfg["train"])
    section["b_min"] = tuple(section["b_min"])
    section["b_max"] = tuple(section["b_max"])
    try:
        return training.TrainConfig(**section).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train config: {exc}") from None


def config_docs():
    lines = []
    for dotted, text in DOC.items():
        section, key = dotted.split(".")
        lines.append(f"  {dotted} (default {DEFAULTS[section][key]!r}): {text}")
    return "\n".join(lines)
