import numpy as np
import pytest

from trajopt_policy import encoder
from trajopt_policy.autodiff import (
    NonScalarLossError, ShapeMismatchError, Tape, UnknownKindError)
from trajopt_policy.gradcheck import central_difference, relative_error


def test_tanh_at_zero():
    tape = Tape()
    out = tape.tanh(tape.input(np.zeros(4)))
    assert np.array_equal(tape.value(out), np.zeros(4))


def test_matmul_identity():
    tape = Tape()
    a = np.arange(6.0).reshape(3, 2)
    out = tape.matmul(tape.input(np.eye(3)), tape.input(a))
    assert np.array_equal(tape.value(out), a)


def test_sum_of_squares_pythagorean():
    tape = Tape()
    out = tape.sum_of_squares(tape.input(np.array([3.0, 4.0])))
    assert tape.value(out) == 25.0


def test_shape_mismatch_names_both_shapes():
    tape = Tape()
    a = tape.input(np.zeros(2))
    b = tape.input(np.zeros(3))
    with pytest.raises(ShapeMismatchError, match=r"\(2,\).*\(3,\)"):
        tape.add(a, b)


def test_matmul_inner_dim_mismatch():
    tape = Tape()
    with pytest.raises(ShapeMismatchError):
        tape.matmul(tape.input(np.zeros((2, 3))), tape.input(np.zeros((2,))))


def test_unknown_kind():
    tape = Tape()
    with pytest.raises(UnknownKindError):
        tape.record("convolve", ())


def test_non_scalar_loss_rejected():
    tape = Tape()
    vec = tape.input(np.zeros(3))
    with pytest.raises(NonScalarLossError):
        tape.backward(vec)


def test_custom_linear_map():
    # y = 2x with pullback g -> 2g; loss = sum(y) gives gradient [2, 2]
    tape = Tape()
    x = tape.input(np.array([1.0, 1.0]), param=True)
    y = tape.register_custom(2.0 * tape.value(x), (x,), lambda g: (2.0 * g,))
    loss = tape.register_custom(np.sum(tape.value(y)), (y,),
                                lambda g: (float(g) * np.ones(2),))
    grads = tape.backward(loss)
    assert np.array_equal(grads[x], np.array([2.0, 2.0]))


def test_custom_identity_pullback_scalar():
    tape = Tape()
    x = tape.input(np.asarray(1.5), param=True)
    y = tape.register_custom(tape.value(x), (x,), lambda g: (g,))
    grads = tape.backward(y)
    assert grads[x] == 1.0


def test_custom_adjoint_shape_checked():
    tape = Tape()
    x = tape.input(np.zeros(3), param=True)
    y = tape.register_custom(np.asarray(0.0), (x,), lambda g: (np.zeros(2),))
    with pytest.raises(ShapeMismatchError):
        tape.backward(y)


def test_backward_sum_of_squares():
    tape = Tape()
    x = tape.input(np.array([1.0, -2.0]), param=True)
    grads = tape.backward(tape.sum_of_squares(x))
    assert np.array_equal(grads[x], np.array([2.0, -4.0]))


def test_backward_sigmoid_at_zero():
    tape = Tape()
    x = tape.input(np.asarray(0.0), param=True)
    grads = tape.backward(tape.sigmoid(x))
    assert grads[x] == pytest.approx(0.25, abs=1e-15)


def test_fanout_linearity():
    def grad_of(build):
        tape = Tape()
        a = tape.input(np.array([0.3, -0.7]), param=True)
        grads = tape.backward(tape.sum_of_squares(build(tape, a)))
        return grads[a]

    doubled = grad_of(lambda t, a: t.add(a, a))
    single = grad_of(lambda t, a: a)
    assert np.allclose(doubled, 4.0 * single)

    tape = Tape()
    a = tape.input(np.array([0.3, -0.7]), param=True)
    loss = tape.register_custom(np.sum(tape.value(a)) * 2, (tape.add(a, a),),
                                lambda g: (float(g) * np.ones(2),))
    grads = tape.backward(loss)
    assert np.array_equal(grads[a], 2.0 * np.ones(2))


def test_unreachable_param_gets_zeros():
    tape = Tape()
    a = tape.input(np.ones(2), param=True)
    b = tape.input(np.ones(3), param=True)
    grads = tape.backward(tape.sum_of_squares(a))
    assert np.array_equal(grads[b], np.zeros(3))


def test_backward_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(7)
        tape = Tape()
        w = tape.input(rng.normal(size=(3, 4)), param=True)
        x = tape.input(rng.normal(size=4), param=True)
        y = tape.tanh(tape.matmul(w, x))
        z = tape.add(y, y)
        grads = tape.backward(tape.sum_of_squares(z))
        return grads[w].tobytes(), grads[x].tobytes()

    assert run() == run()


def _loss_through(kind, rng):
    """Build a tiny graph of the given kind ending in a scalar; returns
    (loss_fn over flattened inputs, analytic grads, inputs)."""
    if kind == "matmul":
        shapes = [(2, 3), (3, 2)]
    elif kind in ("add", "subtract", "multiply"):
        shapes = [(4,), (4,)]
    elif kind in ("tanh", "sigmoid", "scale", "sum_of_squares", "slice"):
        shapes = [(5,)]
    elif kind == "concatenate":
        shapes = [(2,), (3,)]
    else:
        raise AssertionError(kind)
    inputs = [rng.uniform(-2, 2, size=s) for s in shapes]

    def build(vals):
        tape = Tape()
        ids = [tape.input(v, param=True) for v in vals]
        if kind == "matmul":
            out = tape.matmul(*ids)
        elif kind == "add":
            out = tape.add(*ids)
        elif kind == "subtract":
            out = tape.sub(*ids)
        elif kind == "multiply":
            out = tape.mul(*ids)
        elif kind == "tanh":
            out = tape.tanh(ids[0])
        elif kind == "sigmoid":
            out = tape.sigmoid(ids[0])
        elif kind == "scale":
            out = tape.scale(ids[0], 1.7)
        elif kind == "concatenate":
            out = tape.concat(ids)
        elif kind == "slice":
            out = tape.slice(ids[0], 1, 4)
        else:
            out = ids[0]
        if kind != "sum_of_squares":
            loss = tape.sum_of_squares(out)
        else:
            loss = tape.sum_of_squares(ids[0])
        return tape, ids, loss

    tape, ids, loss = build(inputs)
    grads = tape.backward(loss)
    analytic = [grads[i] for i in ids]

    def loss_at(k, flat):
        vals = [v.copy() for v in inputs]
        vals[k] = flat.reshape(vals[k].shape)
        t, _, l = build(vals)
        return float(t.value(l))

    return inputs, analytic, loss_at


@pytest.mark.parametrize("kind", ["matmul", "add", "subtract", "multiply",
                                  "tanh", "sigmoid", "concatenate", "slice",
                                  "scale", "sum_of_squares"])
def test_builtin_kind_matches_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for rep in range(100):
        inputs, analytic, loss_at = _loss_through(kind, rng)
        for k, (value, grad) in enumerate(zip(inputs, analytic)):
            fd = central_difference(lambda f: loss_at(k, f), value.reshape(-1))
            assert relative_error(grad.reshape(-1), fd, 1e-8) <= 1e-3


def test_slice_and_concat_roundtrip_gradient():
    tape = Tape()
    x = tape.input(np.array([1.0, 2.0, 3.0, 4.0]), param=True)
    left = tape.slice(x, 0, 2)
    right = tape.slice(x, 2, 4)
    back = tape.concat([left, right])
    grads = tape.backward(tape.sum_of_squares(back))
    assert np.array_equal(grads[x], 2.0 * tape.value(x))


def test_lstm_cell_gradient_matches_fd_20_seeds():
    worst = 0.0
    for seed in range(20):
        enc = encoder.init_params(obs_dim=3, hidden=4, out_dim=2, seed=seed)
        rng = np.random.default_rng(100 + seed)
        obs = rng.uniform(-1, 1, size=3)
        h0 = rng.uniform(-0.5, 0.5, size=4)
        c0 = rng.uniform(-0.5, 0.5, size=4)

        tape = Tape()
        ids = encoder.register_params(tape, enc)
        e_id, h_id, _ = encoder.step_on_tape(
            tape, ids, tape.input(obs), tape.input(h0), tape.input(c0))
        grads = tape.backward(tape.sum_of_squares(e_id))

        for name in ("w_i", "w_f", "w_g", "w_o", "b_i", "w_out"):
            def loss_fn(val, name=name):
                trial = encoder.EncoderParams(
                    **{f: (val.reshape(getattr(enc, f).shape) if f == name
                           else getattr(enc, f))
                       for f in encoder.PARAM_FIELDS})
                e, _ = encoder.step(trial, obs, encoder.EncoderState(h0, c0))
                return float(np.sum(e * e))

            flat = getattr(enc, name).reshape(-1)
            fd = central_difference(loss_fn, flat)
            worst = max(worst, relative_error(
                grads[ids[name]].reshape(-1), fd, 1e-8))
    assert worst <= 1e-3
