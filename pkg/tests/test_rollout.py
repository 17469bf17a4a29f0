import numpy as np
import pytest

from trajopt_policy import data, encoder, rollout, training


def tiny_checkpoint(demos, head="qp", **kwargs):
    cfg = dict(epochs=2, batch_size=4, hidden=8, T_s=4, T_p=2, T_a=1,
               stride=4, seed=1, a_min=-0.4, a_max=0.4, head=head)
    cfg.update(kwargs)
    return training.train(demos, training.TrainConfig(**cfg))


@pytest.fixture(scope="module")
def demos():
    return data.generate_demos(data.TaskConfig(), 6, seed=3)


@pytest.fixture(scope="module")
def ckpt(demos):
    return tiny_checkpoint(demos)


def test_clip_within_bounds_unchanged():
    raw = np.array([0.05, -0.02])
    out = rollout.clip_baseline_action(raw, np.zeros(2),
                                       (np.full(2, -0.1), np.full(2, 0.1)), 1.0)
    assert np.array_equal(out, raw)


def test_clip_caps_step_change():
    out = rollout.clip_baseline_action(np.array([0.5]), np.zeros(1),
                                       (np.array([-0.1]), np.array([0.1])), 1.0)
    assert out == pytest.approx([0.1])


def test_clip_idempotent():
    rng = np.random.default_rng(0)
    bounds = (np.full(3, -0.1), np.full(3, 0.1))
    for _ in range(20):
        raw = rng.normal(size=3)
        prev = rng.normal(scale=0.1, size=3)
        once = rollout.clip_baseline_action(raw, prev, bounds, 0.5)
        twice = rollout.clip_baseline_action(once, prev, bounds, 0.5)
        assert np.array_equal(once, twice)


def test_metrics_worked_example():
    # accelerations x = [0.1, 0.3], y = [0.2, 0.0] -> avg-max (0.3+0.2)/2
    rec = rollout.RolloutRecord(
        positions=np.zeros((4, 2)),
        velocities=np.array([[0.0, 0.0], [0.1, 0.2], [0.4, 0.2]]),
        drops=np.zeros(3),
        accelerations=np.array([[0.1, 0.2], [0.3, 0.0]]),
        success=True, goal=np.zeros(2), plan_starts=[0],
        qp_statuses=[], qp_iterations=[])
    report = rollout.compute_metrics([rec], {"lin": (0, 1)})
    assert abs(report.avg_max["lin"] - 0.25) <= 1e-12
    assert abs(report.avg_mean["lin"] - (0.2 + 0.1) / 2) <= 1e-12
    assert report.acc_peak == pytest.approx(0.3, abs=1e-15)
    assert report.success_rate == 1.0


def test_metrics_all_zero():
    rec = rollout.RolloutRecord(
        positions=np.zeros((3, 2)), velocities=np.zeros((2, 2)),
        drops=np.zeros(2), accelerations=np.zeros((1, 2)),
        success=False, goal=np.zeros(2), plan_starts=[0],
        qp_statuses=[], qp_iterations=[])
    report = rollout.compute_metrics([rec], {"lin": (0, 1)})
    assert report.avg_mean["lin"] == 0.0
    assert report.avg_max["lin"] == 0.0
    assert report.avg_std["lin"] == 0.0
    assert report.acc_peak == 0.0
    assert report.success_rate == 0.0


def test_metrics_empty_records_error():
    with pytest.raises(ValueError):
        rollout.compute_metrics([], {"lin": (0, 1)})


def test_zero_weight_encoder_stays_stationary(demos):
    ckpt = tiny_checkpoint(demos)
    hidden = ckpt.encoder_params.hidden
    out = ckpt.dto_params.n
    obs = data.OBS_DIM
    ckpt.encoder_params = encoder.EncoderParams(
        *(np.zeros((hidden, obs + hidden)) for _ in range(4)),
        *(np.zeros(hidden) for _ in range(4)),
        np.zeros((out, hidden)), np.zeros(out))
    rec = rollout.rollout(ckpt, data.TaskConfig(), 7, 40)
    assert not rec.success
    # zero embedding gives a zero plan up to solver tolerance
    assert np.max(np.abs(rec.velocities)) <= 1e-7
    assert np.max(np.abs(rec.positions[0] - rec.positions[-1])) <= 1e-6
    assert np.all(rec.drops == 0.0)


def test_rollout_deterministic(ckpt):
    task = data.TaskConfig()
    r1 = rollout.rollout(ckpt, task, 11, 40)
    r2 = rollout.rollout(ckpt, task, 11, 40)
    assert r1.positions.tobytes() == r2.positions.tobytes()
    assert r1.velocities.tobytes() == r2.velocities.tobytes()
    assert r1.success == r2.success


def test_rollout_respects_bounds(ckpt):
    task = data.TaskConfig()
    params = ckpt.dto_params
    for seed in range(10):
        rec = rollout.rollout(ckpt, task, seed, 60)
        assert rec.failure is None
        counts = rollout.count_violations([rec], params)
        assert all(v == 0 for v in counts.values()), counts


def test_rollout_acceleration_invariant(ckpt):
    rec = rollout.rollout(ckpt, data.TaskConfig(), 3, 40)
    dt = ckpt.dto_params.delta_t
    expect = np.diff(rec.velocities, axis=0) / dt
    assert np.array_equal(rec.accelerations, expect)


def test_replan_continuity_within_solver_tolerance(ckpt):
    # first velocity of every replanned horizon stays within a_max*dt + 1e-8
    # of the previously executed one
    params = ckpt.dto_params
    dt = params.delta_t
    for seed in range(5):
        rec = rollout.rollout(ckpt, data.TaskConfig(), seed, 40)
        v = rec.velocities
        for start in rec.plan_starts:
            if start >= len(v):
                continue
            prev = v[start - 1] if start > 0 else np.zeros(params.D_v)
            step = v[start] - prev
            assert np.all(step <= params.a_max * dt + 1e-8)
            assert np.all(step >= params.a_min * dt - 1e-8)


def test_rollout_plan_cadence(ckpt):
    rec = rollout.rollout(ckpt, data.TaskConfig(), 3, 40)
    t_a = ckpt.dto_params.T_a
    assert rec.plan_starts == list(range(0, 40, t_a))


def test_scripted_policy_replay_full_success(demos):
    task = data.TaskConfig()
    norm = data.fit_normalizer(demos)
    records = [rollout.record_from_demo(d, norm, task.delta_t) for d in demos]
    report = rollout.compute_metrics(records, {"lin": (0, 1)})
    assert report.success_rate == 1.0


def test_evaluate_deterministic(ckpt):
    task = data.TaskConfig()
    rep1, recs1 = rollout.evaluate(ckpt, task, 4, 50, horizon=40)
    rep2, recs2 = rollout.evaluate(ckpt, task, 4, 50, horizon=40)
    assert rep1 == rep2
    for a, b in zip(recs1, recs2):
        assert a.positions.tobytes() == b.positions.tobytes()


def test_evaluate_counts_continuity(demos):
    # clipped affine baseline: body-step families are clean by construction
    ckpt = tiny_checkpoint(demos, head="affine")
    task = data.TaskConfig()
    report, records = rollout.evaluate(ckpt, task, 3, 60, horizon=40, clip=True)
    assert report.violations["velocity"] == 0
    assert report.violations["acceleration"] == 0
    assert report.violations["continuity"] == 0
