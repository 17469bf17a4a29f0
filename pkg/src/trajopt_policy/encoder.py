"""Recurrent observation encoder.

A single gated recurrent cell (input/forget/cell/output gates over the
concatenated [observation, hidden] vector) followed by an affine projection
to the embedding that parameterizes the trajectory optimizer's linear cost.

Two execution paths share the exact same op order: a plain numpy `step` for
deployment and `step_on_tape` for training, so their outputs are bitwise
identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import sigmoid

PARAM_FIELDS = ("w_i", "w_f", "w_g", "w_o", "b_i", "b_f", "b_g", "b_o",
                "w_out", "b_out")


@dataclass
class EncoderParams:
    w_i: np.ndarray
    w_f: np.ndarray
    w_g: np.ndarray
    w_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        hidden, width = self.w_i.shape
        for name in ("w_f", "w_g", "w_o"):
            if getattr(self, name).shape != (hidden, width):
                raise ValueError(f"{name} must have shape {(hidden, width)}")
        for name in ("b_i", "b_f", "b_g", "b_o"):
            if getattr(self, name).shape != (hidden,):
                raise ValueError(f"{name} must have shape ({hidden},)")
        if self.w_out.ndim != 2 or self.w_out.shape[1] != hidden:
            raise ValueError(f"w_out must have {hidden} columns")
        if self.b_out.shape != (self.w_out.shape[0],):
            raise ValueError(f"b_out must have shape ({self.w_out.shape[0]},)")
        for name in PARAM_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            setattr(self, name, arr)

    @property
    def hidden(self):
        return self.w_i.shape[0]

    @property
    def obs_dim(self):
        return self.w_i.shape[1] - self.hidden

    @property
    def out_dim(self):
        return self.w_out.shape[0]


@dataclass
class EncoderState:
    hidden: np.ndarray
    cell: np.ndarray


def init_params(obs_dim, hidden, out_dim, seed):
    """Uniform init in [-k, k] with k = 1/sqrt(obs_dim + hidden); forget bias 1."""
    rng = np.random.default_rng(seed)
    width = obs_dim + hidden
    k = 1.0 / np.sqrt(width)

    def u(*shape):
        return rng.uniform(-k, k, size=shape)

    return EncoderParams(
        w_i=u(hidden, width), w_f=u(hidden, width),
        w_g=u(hidden, width), w_o=u(hidden, width),
        b_i=u(hidden), b_f=np.ones(hidden), b_g=u(hidden), b_o=u(hidden),
        w_out=u(out_dim, hidden), b_out=u(out_dim))


def init_state(params):
    return EncoderState(np.zeros(params.hidden), np.zeros(params.hidden))


def step(params, obs, state):
    """One recurrent update; returns (embedding, next state)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (params.obs_dim,):
        raise ValueError(f"obs must have shape ({params.obs_dim},), got {obs.shape}")
    x = np.concatenate([obs, state.hidden])
    i = sigmoid(params.w_i @ x + params.b_i)
    f = sigmoid(params.w_f @ x + params.b_f)
    g = np.tanh(params.w_g @ x + params.b_g)
    o = sigmoid(params.w_o @ x + params.b_o)
    c = (f * state.cell) + (i * g)
    h = o * np.tanh(c)
    e = params.w_out @ h + params.b_out
    return e, EncoderState(h, c)


def register_params(tape, params):
    """Put every weight on the tape as a parameter node; returns {field: node id}."""
    return {name: tape.input(getattr(params, name), param=True)
            for name in PARAM_FIELDS}


def step_on_tape(tape, ids, obs_id, h_id, c_id):
    """Tape twin of step(); same op order, so values match bitwise."""
    x = tape.concat([obs_id, h_id])
    i = tape.sigmoid(tape.add(tape.matmul(ids["w_i"], x), ids["b_i"]))
    f = tape.sigmoid(tape.add(tape.matmul(ids["w_f"], x), ids["b_f"]))
    g = tape.tanh(tape.add(tape.matmul(ids["w_g"], x), ids["b_g"]))
    o = tape.sigmoid(tape.add(tape.matmul(ids["w_o"], x), ids["b_o"]))
    c = tape.add(tape.mul(f, c_id), tape.mul(i, g))
    h = tape.mul(o, tape.tanh(c))
    e = tape.add(tape.matmul(ids["w_out"], h), ids["b_out"])
    return e, h, c
