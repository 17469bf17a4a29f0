"""Receding-horizon deployment, clipping baseline, audits, and metrics.

The policy is queried once per replan: encoder step on the current
observation, constrained solve with the continuity bound against the last
executed command, then the first T_a actions of the plan are executed
through exact kinematics. The environment adds nothing of its own, so any
bound violation in a record is attributable to the policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data, dto, encoder, qp


@dataclass
class RolloutRecord:
    positions: np.ndarray        # (T+1) x D_v real units, includes the start
    velocities: np.ndarray       # T x D_v normalized executed commands
    drops: np.ndarray            # T discrete-action stream (thresholded)
    accelerations: np.ndarray    # (T-1) x D_v, diff(velocities)/delta_t
    success: bool
    goal: np.ndarray
    plan_starts: list            # tick index of each plan's first executed action
    qp_statuses: list
    qp_iterations: list
    failure: str | None = None


@dataclass
class MetricsReport:
    avg_mean: dict
    avg_max: dict
    avg_std: dict
    acc_peak: float
    success_rate: float
    violations: dict = field(default_factory=dict)


def clip_baseline_action(raw, prev, a_bounds, delta_t):
    """Post-hoc projection of the action step change into the acceleration box."""
    a_min, a_max = a_bounds
    diff = np.clip(np.asarray(raw) - prev, a_min * delta_t, a_max * delta_t)
    return prev + diff


def rollout(ckpt, task, env_seed, horizon, clip=False, success_radius=0.05,
            solver_tol=1e-8):
    """One episode; deterministic given (checkpoint, task, env_seed).

    The head is taken from the checkpoint's training config: the constrained
    head plans through the deployment QP, the affine baseline emits the
    unconstrained map (optionally clipped per executed step).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    params = ckpt.dto_params
    norm = ckpt.normalizer
    head = ckpt.config.get("head", "qp")
    dt = params.delta_t
    t_a, t_s, t_p = params.T_a, params.T_s, params.T_p
    d_y = params.D_y

    rng = np.random.default_rng(env_seed)
    pos, goal = data.sample_endpoints(task, rng)
    state = encoder.init_state(ckpt.encoder_params)
    enc_steps = 0
    prev_v = np.zeros(params.D_v)
    dropped = False
    fire_dist = None

    positions = [pos.copy()]
    velocities, drops = [], []
    plan_starts, statuses, iter_counts = [], [], []
    failure = None
    plan = None
    plan_tick = 0
    # the recurrent encoder consumes every observation, one step per tick,
    # while a fresh plan is solved every T_a ticks from the newest embedding
    for t in range(horizon):
        if enc_steps > 0 and enc_steps % t_s == 0:
            state = encoder.init_state(ckpt.encoder_params)
        obs = np.concatenate([pos, goal, [1.0 if dropped else 0.0]])
        e_t, state = encoder.step(ckpt.encoder_params, obs, state)
        enc_steps += 1

        if t % t_a == 0:
            if head == "qp":
                try:
                    y_hat, sol = dto.forward(params, e_t, pos,
                                             prev_action=prev_v, tol=solver_tol)
                except dto.TrajectoryOptError as exc:
                    failure = f"tick {t}: {exc}"
                    statuses.append(exc.status.value)
                    break
                except dto.InfeasibleStartError as exc:
                    failure = f"tick {t}: {exc}"
                    break
                statuses.append(sol.status.value)
                iter_counts.append(sol.iterations)
            else:
                y_hat = dto.unconstrained_forward(params, e_t)
                statuses.append("affine")
            plan = y_hat.reshape(t_p, d_y)
            plan_tick = t
            plan_starts.append(t)

        action = plan[t - plan_tick].copy()
        v_norm = action[list(data.VELOCITY_DIMS)]
        if clip:
            v_norm = clip_baseline_action(v_norm, prev_v,
                                          (params.a_min, params.a_max), dt)
            v_norm = np.clip(v_norm, -1.0, 1.0)
            action[list(data.VELOCITY_DIMS)] = v_norm
        raw = norm.unnormalize(action)
        v_real = raw[list(data.VELOCITY_DIMS)]

        drop_cmd = 1.0 if action[2] > 0.5 else 0.0
        if drop_cmd and not dropped:
            dropped = True
            fire_dist = float(np.linalg.norm(goal - pos))
        pos = pos + v_real * dt
        positions.append(pos.copy())
        velocities.append(v_norm.copy())
        drops.append(drop_cmd)
        prev_v = v_norm

    positions = np.array(positions)
    velocities = np.array(velocities) if velocities else np.zeros((0, params.D_v))
    accelerations = (np.diff(velocities, axis=0) / dt
                     if velocities.shape[0] >= 2 else np.zeros((0, params.D_v)))
    final_dist = float(np.linalg.norm(goal - positions[-1]))
    success = (failure is None and final_dist <= success_radius
               and dropped and fire_dist is not None
               and fire_dist <= success_radius)
    return RolloutRecord(positions, velocities, np.array(drops), accelerations,
                         success, goal, plan_starts, statuses, iter_counts,
                         failure)


def record_from_demo(demo, normalizer, delta_t, success_radius=0.05):
    """Wrap a scripted demonstration as a rollout record (oracle policy replay)."""
    v_norm = normalizer.normalize(demo.actions)[:, list(data.VELOCITY_DIMS)]
    drops = demo.actions[:, 2]
    goal = demo.observations[0, 2:4]
    final_pos = demo.positions[-1] + demo.actions[-1, :2] * delta_t
    positions = np.vstack([demo.positions, final_pos])
    fire = np.flatnonzero(drops > 0.5)
    fired_ok = False
    if fire.size:
        fire_dist = float(np.linalg.norm(goal - demo.positions[fire[0]]))
        fired_ok = fire_dist <= success_radius
    success = (float(np.linalg.norm(goal - positions[-1])) <= success_radius
               and fired_ok)
    acc = np.diff(v_norm, axis=0) / delta_t
    return RolloutRecord(positions, v_norm, drops, acc, success, goal,
                         [0], ["scripted"], [])


def count_violations(records, params, slack=1e-6):
    """Violation counts per constraint family over executed trajectories."""
    counts = {"velocity": 0, "acceleration": 0, "position": 0, "continuity": 0}
    dt = params.delta_t
    for rec in records:
        v = rec.velocities
        counts["velocity"] += int(np.sum((v > params.v_max + slack)
                                         | (v < params.v_min - slack)))
        a = rec.accelerations
        counts["acceleration"] += int(np.sum((a > params.a_max + slack)
                                             | (a < params.a_min - slack)))
        if params.A_pos is not None and rec.positions.size:
            proj = rec.positions @ params.A_pos.T
            counts["position"] += int(np.sum((proj > params.b_max + slack)
                                             | (proj < params.b_min - slack)))
        for start in rec.plan_starts:
            if start >= len(v):
                continue
            prev = v[start - 1] if start > 0 else np.zeros(params.D_v)
            step = (v[start] - prev) / dt
            counts["continuity"] += int(np.sum((step > params.a_max + slack)
                                               | (step < params.a_min - slack)))
    return counts


def compute_metrics(records, groups, params=None, slack=1e-6):
    """Per-trial mean/max/std of |acceleration|, averaged within each
    dimension group and then across trials; acc-peak is the global maximum.

    groups maps a name to the dimension indices it covers. params switches on
    the constraint audit.
    """
    if not records:
        raise ValueError("need at least one rollout record")
    avg_mean, avg_max, avg_std = {}, {}, {}
    peak = 0.0
    for name, dims in groups.items():
        means, maxes, stds = [], [], []
        for rec in records:
            if rec.accelerations.shape[0] == 0:
                mags = np.zeros((1, len(dims)))
            else:
                mags = np.abs(rec.accelerations[:, list(dims)])
            means.append(float(np.mean(np.mean(mags, axis=0))))
            maxes.append(float(np.mean(np.max(mags, axis=0))))
            stds.append(float(np.mean(np.std(mags, axis=0))))
            peak = max(peak, float(np.max(mags)))
        avg_mean[name] = float(np.mean(means))
        avg_max[name] = float(np.mean(maxes))
        avg_std[name] = float(np.mean(stds))
    report = MetricsReport(avg_mean, avg_max, avg_std, peak,
                           float(np.mean([r.success for r in records])))
    if params is not None:
        report.violations = count_violations(records, params, slack=slack)
    return report


def evaluate(ckpt, task, n_episodes, base_seed, horizon=100, clip=False,
             success_radius=0.05, groups=None):
    """Run n episodes with per-episode seeds base_seed + i; returns
    (MetricsReport, records)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if groups is None:
        groups = {"lin": tuple(range(ckpt.dto_params.D_v))}
    records = [rollout(ckpt, task, base_seed + i, horizon, clip=clip,
                       success_radius=success_radius)
               for i in range(n_episodes)]
    report = compute_metrics(records, groups, params=ckpt.dto_params)
    return report, records
