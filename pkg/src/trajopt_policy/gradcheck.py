"""Finite-difference verification of every adjoint path.

Four suites: the raw QP backward, the trajectory layer's (grad_L, grad_e),
the encoder step, and a tiny end-to-end training gradient. All compare
reverse-mode gradients against central differences with step 1e-5.

Solves feeding finite differences run at a tight tolerance so the quotient
noise stays well under the pass threshold; instances where a constraint is
weakly active (dual and slack simultaneously tiny) are nondifferentiable
points and get resampled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data, dto, encoder, qp, training
from .autodiff import Tape

FD_STEP = 1e-5
FD_TOL = 1e-11          # solver tolerance for finite-difference probes
WEAK_ACTIVE = 1e-3      # min(slack + dual) below this -> resample
THRESHOLD = 1e-3


def relative_error(analytic, fd, floor):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    return float(np.max(np.abs(analytic - fd) / np.maximum(floor, np.abs(analytic))))


def central_difference(f, x, step=FD_STEP, mask=None):
    """Entrywise central differences of a scalar function; mask limits entries."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    it = np.ndindex(*x.shape)
    for idx in it:
        if mask is not None and not mask[idx]:
            continue
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        out[idx] = (f(xp) - f(xm)) / (2 * step)
    return out


def _random_qp(rng):
    n = int(rng.integers(2, 8))
    m = int(rng.integers(2, 16))
    mat = rng.normal(size=(n, n))
    p = mat.T @ mat + np.eye(n)
    q = rng.normal(scale=2.0, size=n)
    g = rng.normal(size=(m, n))
    z0 = rng.normal(size=n)
    h = g @ z0 + rng.uniform(0.1, 1.5, size=m)
    return qp.QpProblem(p, q, g, h)


def _weakly_active(problem, solution):
    slack = problem.h - problem.G @ solution.z
    return problem.m > 0 and float(np.min(slack + solution.lam)) < WEAK_ACTIVE


def check_qp_backward(instances=50, seed=0, corrupt=False):
    """grad_P/grad_q of c'z* versus finite differences of the solve."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < instances:
        problem = _random_qp(rng)
        solution = qp.solve(problem, tol=FD_TOL)
        if solution.status is not qp.SolveStatus.SOLVED or _weakly_active(problem, solution):
            continue
        c = rng.normal(size=problem.n)
        try:
            grad_p, grad_q = qp.backward(problem, solution, c)
        except qp.SingularKktError:
            continue
        if corrupt:
            grad_q = 1.5 * grad_q

        def loss_q(qv):
            return c @ qp.solve(qp.QpProblem(problem.P, qv, problem.G, problem.h),
                                tol=FD_TOL).z

        def loss_p(pv):
            return c @ qp.solve(qp.QpProblem(pv, problem.q, problem.G, problem.h),
                                tol=FD_TOL).z

        fd_q = central_difference(loss_q, problem.q)
        fd_p = central_difference(loss_p, problem.P)
        worst = max(worst,
                    relative_error(grad_q, fd_q, 1e-3),
                    relative_error(grad_p, fd_p, 1e-3))
        done += 1
    return worst


def _random_dto(rng, wide_bounds=False):
    t_p = int(rng.integers(2, 4))
    sel = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    n = t_p * 3
    ell = np.tril(rng.normal(size=(n, n)))
    np.fill_diagonal(ell, np.abs(np.diag(ell)) + 0.5)
    bound = 1e6 if wide_bounds else 1.0
    a_bound = 1e6 if wide_bounds else 0.4
    b_lo, b_hi = (-1e6, 1e6) if wide_bounds else (0.0, 1.0)
    return dto.DtoParams(
        L=ell, epsilon=1e-4, alpha=float(rng.uniform(0.0, 2.0)), S=sel,
        v_min=-bound * np.ones(2), v_max=bound * np.ones(2),
        a_min=-a_bound * np.ones(2), a_max=a_bound * np.ones(2),
        delta_t=1.0, T_p=t_p, T_s=t_p, T_a=1,
        A_pos=np.eye(2), b_min=b_lo * np.ones(2), b_max=b_hi * np.ones(2))


def check_dto_backward(instances=50, seed=1):
    """grad_L/grad_e of c'y* through assembly, solve, and the Cholesky chain."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < instances:
        params = _random_dto(rng)
        e_t = rng.normal(scale=1.5, size=params.n)
        p_t = rng.uniform(0.2, 0.8, size=2)
        try:
            y, sol = dto.forward(params, e_t, p_t, tol=FD_TOL)
        except dto.TrajectoryOptError:
            continue
        problem = dto.assemble_qp(params, e_t, p_t)
        if _weakly_active(problem, sol):
            continue
        c = rng.normal(size=params.n)
        try:
            grad_l, grad_e = dto.backward(params, e_t, p_t, None, sol, c,
                                          problem=problem)
        except qp.SingularKktError:
            continue

        def loss_e(ev):
            return c @ dto.forward(params, ev, p_t, tol=FD_TOL)[0]

        def loss_l(lv):
            trial = _with_l(params, lv)
            return c @ dto.forward(trial, e_t, p_t, tol=FD_TOL)[0]

        fd_e = central_difference(loss_e, e_t)
        fd_l = central_difference(loss_l, params.L,
                                  mask=np.tril(np.ones_like(params.L)) > 0)
        worst = max(worst,
                    relative_error(grad_e, fd_e, 1e-3),
                    relative_error(grad_l, fd_l, 1e-3))
        done += 1
    return worst


def _with_l(params, l_new):
    fresh = dto.DtoParams(
        L=np.tril(l_new), epsilon=params.epsilon, alpha=params.alpha, S=params.S,
        v_min=params.v_min, v_max=params.v_max, a_min=params.a_min,
        a_max=params.a_max, delta_t=params.delta_t, T_p=params.T_p,
        T_s=params.T_s, T_a=params.T_a, A_pos=params.A_pos,
        b_min=params.b_min, b_max=params.b_max,
        v_scale=params.v_scale, v_offset=params.v_offset)
    return fresh


def check_encoder_step(instances=50, seed=2):
    """Tape gradients of sum(e_t) for one recurrent step, all ten weights."""
    worst = 0.0
    for k in range(instances):
        enc = encoder.init_params(obs_dim=3, hidden=4, out_dim=5, seed=seed + k)
        rng = np.random.default_rng(10_000 + k)
        obs = rng.uniform(-1, 1, size=3)
        h0 = rng.uniform(-0.5, 0.5, size=4)
        c0 = rng.uniform(-0.5, 0.5, size=4)

        tape = Tape()
        ids = encoder.register_params(tape, enc)
        e_id, _, _ = encoder.step_on_tape(tape, ids, tape.input(obs),
                                          tape.input(h0), tape.input(c0))
        ones = tape.input(np.ones(5))
        loss_id = tape.sum_of_squares(tape.mul(e_id, ones))
        # sum of squares of e; any smooth scalar works for the comparison
        grads = tape.backward(loss_id)

        for name in encoder.PARAM_FIELDS:
            def loss_fn(val, name=name):
                trial = encoder.EncoderParams(
                    **{f: (val if f == name else getattr(enc, f))
                       for f in encoder.PARAM_FIELDS})
                e_t, _ = encoder.step(trial, obs, encoder.EncoderState(h0, c0))
                return float(np.sum(e_t * e_t))

            fd = central_difference(loss_fn, getattr(enc, name))
            worst = max(worst, relative_error(grads[ids[name]], fd, 1e-8))
    return worst


def _tiny_setup(seed):
    rng = np.random.default_rng(seed)
    config = training.TrainConfig(
        epochs=1, batch_size=1, hidden=4, T_s=3, T_p=2, T_a=1,
        a_min=-0.4, a_max=0.4, solver_tol=FD_TOL, stride=1)
    task = data.TaskConfig(min_length=8, max_length=16, settle_steps=2)
    demos = data.generate_demos(task, 2, seed=int(rng.integers(10_000)))
    normalizer = data.fit_normalizer(demos)
    params = training.build_dto_params(config, normalizer)
    enc = encoder.init_params(data.OBS_DIM, config.hidden, params.n,
                              seed=int(rng.integers(10_000)))
    windows = data.sample_windows(demos, config.T_s, config.T_p, stride=4)
    window = windows[int(rng.integers(len(windows)))]
    targets = normalizer.normalize(
        window.targets.reshape(-1, data.ACTION_DIM)).reshape(window.targets.shape)
    window = data.SequenceSample(window.observations, targets, window.positions)
    return config, params, enc, window


def _window_weakly_active(params, enc, window, tol):
    """Replay the window outside the tape and flag weakly active step solves."""
    state = encoder.init_state(enc)
    for t in range(window.observations.shape[0]):
        e_t, state = encoder.step(enc, window.observations[t], state)
        problem = dto.assemble_qp(params, e_t, window.positions[t])
        solution = qp.solve(problem, tol=tol)
        if solution.status is not qp.SolveStatus.SOLVED:
            return True
        if _weakly_active(problem, solution):
            return True
    return False


def check_training_gradient(instances=6, seed=3):
    """End-to-end loss gradient for a tiny model versus finite differences."""
    worst = 0.0
    done = 0
    attempt = 0
    while done < instances:
        attempt += 1
        config, params, enc, window = _tiny_setup(seed * 1000 + attempt)
        if _window_weakly_active(params, enc, window, config.solver_tol):
            continue
        enc_vals = {f: getattr(enc, f) for f in encoder.PARAM_FIELDS}

        def run_loss(l_val, enc_vals):
            trial_params = _with_l(params, l_val)
            trial_enc = encoder.EncoderParams(**enc_vals)
            tape = Tape()
            ids = encoder.register_params(tape, trial_enc)
            l_id = tape.input(trial_params.L, param=True)
            loss_id = training.batch_loss(tape, trial_params, ids, l_id,
                                          [window], config, [])
            return tape, ids, l_id, loss_id

        tape, ids, l_id, loss_id = run_loss(params.L, enc_vals)
        grads = tape.backward(loss_id)

        def scalar_loss(l_val, enc_vals):
            t, _, _, lid = run_loss(l_val, enc_vals)
            return float(t.value(lid))

        fd_l = central_difference(
            lambda lv: scalar_loss(lv, enc_vals), params.L,
            mask=np.tril(np.ones_like(params.L)) > 0)
        worst = max(worst, relative_error(grads[l_id], fd_l, 1e-3))
        # rotate through the encoder weights so large instance counts stay
        # affordable while every tensor is still covered repeatedly
        fields = encoder.PARAM_FIELDS
        names = (fields if instances <= 8
                 else (fields[done % len(fields)], fields[(done + 5) % len(fields)]))
        for name in names:
            def loss_fn(val, name=name):
                vals = dict(enc_vals)
                vals[name] = val
                return scalar_loss(params.L, vals)

            fd = central_difference(loss_fn, enc_vals[name])
            worst = max(worst, relative_error(grads[ids[name]], fd, 1e-3))
        done += 1
    return worst


def run_all(corrupt=False, fast=False):
    """Worst relative error per suite; the CLI gate checks them against 1e-3."""
    k = 12 if fast else 50
    return {
        "qp_backward": check_qp_backward(instances=k, corrupt=corrupt),
        "dto_backward": check_dto_backward(instances=k),
        "encoder_step": check_encoder_step(instances=k),
        "training_end_to_end": check_training_gradient(instances=3 if fast else k),
    }
