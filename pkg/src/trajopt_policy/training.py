"""End-to-end training: encoder unrolled through the trajectory optimizer.

Each batch builds one tape: every window unrolls the recurrent encoder for
T_s steps, each step's embedding enters the step QP as its linear cost, and
the per-step MSE between the constrained optimum and the stacked
demonstrated targets (normalized) is averaged over steps and windows. The
backward sweep reaches the learned cost factor L and all encoder weights
through the QP's KKT-implicit adjoints, then Adam updates both.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data, dto, encoder, qp, storage
from .autodiff import Tape

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ADAM_ORDER = ("L",) + encoder.PARAM_FIELDS


class TrainingAbortError(RuntimeError):
    """A training-time QP failed to solve: configuration violates feasibility."""


@dataclass
class TrainConfig:
    epochs: int = 55
    batch_size: int = 16
    learning_rate: float = 1.2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 1
    T_s: int = 12
    T_p: int = 6
    T_a: int = 3
    alpha: float = 1.0
    epsilon: float = 1e-4
    v_min: float = -1.0
    v_max: float = 1.0
    a_min: float = -0.1
    a_max: float = 0.1
    use_position_bounds: bool = True
    b_min: tuple = (0.0, 0.0)
    b_max: tuple = (1.0, 1.0)
    hidden: int = 32
    stride: int = 3
    clip_norm: float = 10.0
    head: str = "qp"                 # "qp" or "affine" (constraint-free baseline)
    solver_tol: float = 1e-8
    solver_max_iter: int = 50
    checkpoint_path: str | None = None
    log_path: str | None = None

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (self.v_min < self.v_max and self.a_min < self.a_max):
            raise ValueError("constraint bounds must be well ordered")
        if self.head not in ("qp", "affine"):
            raise ValueError(f"unknown head {self.head!r}")
        return self


@dataclass
class Checkpoint:
    dto_params: dto.DtoParams
    encoder_params: encoder.EncoderParams
    normalizer: data.Normalizer
    config: dict
    epoch: int
    loss_history: list = field(default_factory=list)


def build_dto_params(config, normalizer, d_v=2, delta_t=1.0):
    """Assemble layer parameters from config defaults plus the action map."""
    scale, offset = normalizer.velocity_affine()
    n = config.T_p * data.ACTION_DIM
    sel = np.zeros((d_v, data.ACTION_DIM))
    for row, dim in enumerate(data.VELOCITY_DIMS):
        sel[row, dim] = 1.0
    kwargs = {}
    if config.use_position_bounds:
        kwargs = dict(A_pos=np.eye(d_v), b_min=np.asarray(config.b_min, dtype=float),
                      b_max=np.asarray(config.b_max, dtype=float))
    return dto.DtoParams(
        L=np.eye(n), epsilon=config.epsilon, alpha=config.alpha, S=sel,
        v_min=np.full(d_v, config.v_min), v_max=np.full(d_v, config.v_max),
        a_min=np.full(d_v, config.a_min), a_max=np.full(d_v, config.a_max),
        delta_t=delta_t, T_p=config.T_p, T_s=config.T_s, T_a=config.T_a,
        v_scale=scale, v_offset=offset, **kwargs)


def check_demo_feasibility(demos, params):
    """The feasibility precondition: every demonstrated position must satisfy
    the position bounds, which guarantees every training QP is solvable."""
    if params.A_pos is None:
        return
    for i, demo in enumerate(demos):
        proj = demo.positions @ params.A_pos.T
        bad = np.any(proj > params.b_max, axis=1) | np.any(proj < params.b_min, axis=1)
        if np.any(bad):
            step = int(np.flatnonzero(bad)[0])
            raise TrainingAbortError(
                f"demo {i} step {step}: position {demo.positions[step]} violates "
                f"the position bounds; refusing to train")


def adam_step(values, grads, moments, hyper):
    """One bias-corrected Adam update over a fixed-order dict of arrays.

    moments is (m, v, t); returns (new_values, (m, v, t+1)).
    """
    lr, beta1, beta2, eps = hyper
    m, v, t = moments
    t = t + 1
    out = {}
    for key in ADAM_ORDER:
        if key not in values:
            continue
        g = grads[key]
        m[key] = beta1 * m[key] + (1 - beta1) * g
        v[key] = beta2 * v[key] + (1 - beta2) * (g * g)
        m_hat = m[key] / (1 - beta1 ** t)
        v_hat = v[key] / (1 - beta2 ** t)
        out[key] = values[key] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, (m, v, t)


def _clip_by_global_norm(grads, clip_norm):
    total = 0.0
    for key in ADAM_ORDER:
        if key in grads:
            total += float(np.sum(grads[key] * grads[key]))
    norm = np.sqrt(total)
    if norm > clip_norm:
        factor = clip_norm / norm
        for key in grads:
            grads[key] = grads[key] * factor
    return grads


def _qp_step_node(tape, params, e_id, l_id, p_t, config, stats):
    """Record the constrained step solve as a custom node on the tape."""
    e_val = tape.value(e_id)
    problem = dto.assemble_qp(params, e_val, p_t)
    solution = qp.solve(problem, tol=config.solver_tol, max_iter=config.solver_max_iter)
    if solution.status is not qp.SolveStatus.SOLVED:
        raise TrainingAbortError(
            f"training QP returned {solution.status.value} after "
            f"{solution.iterations} iterations (|e|_max={np.max(np.abs(e_val)):.3e}, "
            f"p_t={p_t}); the dataset/constraint configuration is inconsistent")
    stats.append(solution.iterations)

    def pullback(g):
        for reg in (0.0, 1e-10):
            try:
                grad_l, grad_e = dto.backward(
                    params, e_val, p_t, None, solution, g,
                    problem=problem, dual_reg=reg)
                return grad_e, grad_l
            except qp.SingularKktError:
                continue
        log.warning("singular KKT after dual-regularized retry; "
                    "skipping this sample's gradient contribution")
        return np.zeros_like(e_val), np.zeros_like(params.L)

    return tape.register_custom(solution.z, (e_id, l_id), pullback)


def _affine_step_node(tape, params, e_id, l_id):
    """Constraint-free head: y = -Qbar^{-1} e, for the comparison baseline."""
    e_val = tape.value(e_id)
    y = dto.unconstrained_forward(params, e_val)

    def pullback(g):
        grad_l, grad_e = dto.unconstrained_backward(params, e_val, y, g)
        return grad_e, grad_l

    return tape.register_custom(y, (e_id, l_id), pullback)


def batch_loss(tape, params, enc_ids, l_id, windows, config, stats):
    """Record the forward pass of a batch; returns the scalar loss node id."""
    hidden0 = np.zeros(tape.value(enc_ids["b_i"]).shape[0])
    sq_ids = []
    for window in windows:
        h_id = tape.input(hidden0)
        c_id = tape.input(hidden0)
        for t in range(window.observations.shape[0]):
            obs_id = tape.input(window.observations[t])
            e_id, h_id, c_id = encoder.step_on_tape(tape, enc_ids, obs_id, h_id, c_id)
            if config.head == "qp":
                y_id = _qp_step_node(tape, params, e_id, l_id,
                                     window.positions[t], config, stats)
            else:
                y_id = _affine_step_node(tape, params, e_id, l_id)
            err = tape.sub(y_id, tape.input(window.targets[t]))
            sq_ids.append(tape.sum_of_squares(err))
    total = sq_ids[0]
    for sid in sq_ids[1:]:
        total = tape.add(total, sid)
    return tape.scale(total, 1.0 / (len(sq_ids) * params.n))


def train(demos, config, delta_t=1.0, resume=None):
    """Train on demonstrations; deterministic given config.seed.

    resume may be a Checkpoint whose epoch/loss history/weights carry over.
    Raises TrainingAbortError if the feasibility gate fails or any training
    QP does not solve.
    """
    config.validate()
    normalizer = data.fit_normalizer(demos)
    if resume is None:
        params = build_dto_params(config, normalizer, delta_t=delta_t)
        enc = encoder.init_params(data.OBS_DIM, config.hidden, params.n,
                                  seed=config.seed)
        start_epoch = 0
        loss_history = []
    else:
        params = resume.dto_params
        enc = resume.encoder_params
        start_epoch = resume.epoch
        loss_history = list(resume.loss_history)

    check_demo_feasibility(demos, params)
    windows = data.sample_windows(demos, config.T_s, config.T_p, config.stride)
    if not windows:
        raise TrainingAbortError("no training windows: demos shorter than T_s")
    targets = [normalizer.normalize(w.targets.reshape(-1, data.ACTION_DIM))
               .reshape(w.targets.shape) for w in windows]
    windows = [data.SequenceSample(w.observations, tgt, w.positions)
               for w, tgt in zip(windows, targets)]

    moments = ({k: np.zeros_like(v) for k, v in _values(params, enc).items()},
               {k: np.zeros_like(v) for k, v in _values(params, enc).items()},
               0)
    hyper = (config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    log_rows = []

    for epoch in range(start_epoch, config.epochs):
        t_start = time.perf_counter()
        order = rng.permutation(len(windows))
        epoch_loss = 0.0
        n_batches = 0
        qp_iters = []
        for lo in range(0, len(order), config.batch_size):
            batch = [windows[i] for i in order[lo:lo + config.batch_size]]
            tape = Tape()
            enc_ids = encoder.register_params(tape, enc)
            l_id = tape.input(params.L, param=True)
            loss_id = batch_loss(tape, params, enc_ids, l_id, batch, config, qp_iters)
            grads_by_id = tape.backward(loss_id)

            grads = {"L": np.tril(grads_by_id[l_id])}
            for name in encoder.PARAM_FIELDS:
                grads[name] = grads_by_id[enc_ids[name]]
            grads = _clip_by_global_norm(grads, config.clip_norm)

            new_values, moments = adam_step(_values(params, enc), grads,
                                            moments, hyper)
            params.set_L(np.tril(new_values["L"]))
            for name in encoder.PARAM_FIELDS:
                setattr(enc, name, new_values[name])

            epoch_loss += float(tape.value(loss_id))
            n_batches += 1
        mean_loss = epoch_loss / n_batches
        loss_history.append(mean_loss)
        wall = time.perf_counter() - t_start
        mean_iters = float(np.mean(qp_iters)) if qp_iters else 0.0
        log_rows.append((epoch, mean_loss, mean_iters, wall))
        log.info("epoch %d loss %.6f qp-iters %.2f wall %.2fs",
                 epoch, mean_loss, mean_iters, wall)

    # JSON-normalized snapshot so in-memory and reloaded configs compare equal
    snapshot = json.loads(json.dumps(asdict(config)))
    ckpt = Checkpoint(params, enc, normalizer, snapshot,
                      config.epochs, loss_history)
    if config.log_path:
        _write_log(config.log_path, log_rows)
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, ckpt)
    return ckpt


def _values(params, enc):
    out = {"L": params.L}
    for name in encoder.PARAM_FIELDS:
        out[name] = getattr(enc, name)
    return out


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "mean_qp_iterations", "wall_seconds"])
        writer.writerows(rows)


def save_checkpoint(path, ckpt):
    params = ckpt.dto_params
    header = {
        "kind": "checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "epoch": ckpt.epoch,
        "loss_history": list(ckpt.loss_history),
        "config": ckpt.config,
        "dto": {
            "epsilon": params.epsilon,
            "alpha": params.alpha,
            "delta_t": params.delta_t,
            "T_p": params.T_p,
            "T_s": params.T_s,
            "T_a": params.T_a,
            "has_position_bounds": params.A_pos is not None,
        },
        "normalizer": {
            "lo": list(ckpt.normalizer.lo),
            "hi": list(ckpt.normalizer.hi),
            "continuous": list(ckpt.normalizer.continuous),
        },
    }
    arrays = [("L", params.L), ("S", params.S),
              ("v_min", params.v_min), ("v_max", params.v_max),
              ("a_min", params.a_min), ("a_max", params.a_max),
              ("v_scale", params.v_scale), ("v_offset", params.v_offset)]
    if params.A_pos is not None:
        arrays += [("A_pos", params.A_pos), ("b_min", params.b_min),
                   ("b_max", params.b_max)]
    for name in encoder.PARAM_FIELDS:
        arrays.append((f"encoder/{name}", getattr(ckpt.encoder_params, name)))
    storage.write_container(path, header, arrays)


def load_checkpoint(path):
    header, arrays = storage.read_container(path, "checkpoint", CHECKPOINT_VERSION)
    meta = header["dto"]
    kwargs = {}
    if meta["has_position_bounds"]:
        kwargs = dict(A_pos=arrays["A_pos"], b_min=arrays["b_min"],
                      b_max=arrays["b_max"])
    params = dto.DtoParams(
        L=arrays["L"], epsilon=meta["epsilon"], alpha=meta["alpha"],
        S=arrays["S"], v_min=arrays["v_min"], v_max=arrays["v_max"],
        a_min=arrays["a_min"], a_max=arrays["a_max"], delta_t=meta["delta_t"],
        T_p=meta["T_p"], T_s=meta["T_s"], T_a=meta["T_a"],
        v_scale=arrays["v_scale"], v_offset=arrays["v_offset"], **kwargs)
    enc = encoder.EncoderParams(
        **{name: arrays[f"encoder/{name}"] for name in encoder.PARAM_FIELDS})
    norm = header["normalizer"]
    normalizer = data.Normalizer(np.array(norm["lo"]), np.array(norm["hi"]),
                                 tuple(norm["continuous"]))
    return Checkpoint(params, enc, normalizer, header["config"],
                      header["epoch"], list(header["loss_history"]))
