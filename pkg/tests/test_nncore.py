import math

import numpy as np
import pytest

from poseflow.errors import DivergedError, ShapeError, TapeReuseError
from poseflow.nncore import AdamState, DenseLayer, GradTape, Mlp, adam_step, mlp_backward, mlp_forward


def tiny_net():
    return Mlp(
        [DenseLayer(np.array([[0.5]]), np.array([-2.0])),
         DenseLayer(np.array([[3.0], [4.0]]), np.array([0.1, 0.2]))],
        s_width=1, t_width=1,
    )


def random_net(seed, in_width=3, hidden=(5, 4), half=3):
    rng = np.random.default_rng(seed)
    return Mlp.create(in_width, hidden, half, rng, output_scale=0.5)


def test_zero_output_layer_gives_zero_heads():
    m = Mlp.create(63, (32, 32), 63, np.random.default_rng(0))
    s, t = mlp_forward(m, np.random.default_rng(1).standard_normal((4, 63)))
    assert s.shape == t.shape == (4, 63)
    assert not s.any() and not t.any()


def test_hand_computed_tiny_net():
    # pre-activation 0.5*2 - 2 = -1, leaky -> -0.01
    # head outputs: 3*(-0.01)+0.1 = 0.07 (s, then squashed), 4*(-0.01)+0.2 = 0.16 (t)
    s, t = mlp_forward(tiny_net(), np.array([[2.0]]))
    assert s[0, 0] == pytest.approx(5 * math.tanh(0.07 / 5), abs=1e-15)
    assert t[0, 0] == pytest.approx(0.16, abs=1e-15)


def test_forward_deterministic():
    m = random_net(2)
    x = np.random.default_rng(3).standard_normal((10, 3))
    a, b = mlp_forward(m, x), mlp_forward(m, x)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        mlp_forward(random_net(0), np.zeros((2, 4)))


def test_s_head_is_bounded():
    m = random_net(4)
    m.layers[-1].biases[:] = 1e3
    s, _ = mlp_forward(m, np.zeros((1, 3)))
    assert np.all(np.abs(s) <= m.s_max)


def _objective(m, x, cs, ct):
    s, t = mlp_forward(m, x)
    return float(np.sum(cs * s) + np.sum(ct * t))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_central_differences(seed):
    rng = np.random.default_rng(seed + 10)
    m = random_net(seed)
    x = rng.standard_normal((6, 3))
    cs, ct = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    tape = GradTape()
    mlp_forward(m, x, tape)
    grads, gx = mlp_backward(tape, cs, ct)
    h = 1e-4
    for p, g in zip(m.params(), grads):
        assert g.shape == p.shape
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = _objective(m, x, cs, ct)
            p[idx] = old - h
            down = _objective(m, x, cs, ct)
            p[idx] = old
            fd = (up - down) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-3 * max(abs(fd), 1e-2), (idx, fd, g[idx])
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (_objective(m, xp, cs, ct) - _objective(m, xm, cs, ct)) / (2 * h)
        assert abs(fd - gx[idx]) <= 1e-3 * max(abs(fd), 1e-2)


def test_zero_upstream_gives_zero_gradients():
    m = random_net(5)
    tape = GradTape()
    mlp_forward(m, np.ones((2, 3)), tape)
    grads, gx = mlp_backward(tape, np.zeros((2, 3)), np.zeros((2, 3)))
    assert all(not g.any() for g in grads) and not gx.any()


def test_t_head_bias_gradient_is_one_per_output():
    m = random_net(6)
    tape = GradTape()
    batch = 4
    mlp_forward(m, np.ones((batch, 3)), tape)
    grads, _ = mlp_backward(tape, np.ones((batch, 3)), np.ones((batch, 3)))
    t_bias = grads[-1][m.s_width:]
    np.testing.assert_array_equal(t_bias, np.full(m.t_width, float(batch)))


def test_tape_reuse_rejected():
    m = random_net(7)
    tape = GradTape()
    mlp_forward(m, np.ones((1, 3)), tape)
    mlp_backward(tape, np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(TapeReuseError):
        mlp_backward(tape, np.ones((1, 3)), np.ones((1, 3)))


def test_adam_first_step_is_lr_times_sign():
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.5, -4.0, 1e-3])]
    state = AdamState(lr=1e-2)
    adam_step(p, g, state)
    expected = np.array([1.0, -2.0, 3.0]) - 1e-2 * np.sign(g[0])
    np.testing.assert_allclose(p[0], expected, rtol=0, atol=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_and_zero_lr():
    p = [np.array([1.0, 2.0])]
    state = AdamState()
    adam_step(p, [np.zeros(2)], state)
    np.testing.assert_array_equal(p[0], [1.0, 2.0])
    assert state.step == 1
    state0 = AdamState(lr=0.0)
    for _ in range(3):
        adam_step(p, [np.array([0.3, -5.0])], state0)
    np.testing.assert_array_equal(p[0], [1.0, 2.0])


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    p = [rng.standard_normal(4)]
    ref = p[0].copy()
    m = v = np.zeros(4)
    state = AdamState(lr=1e-3)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        adam_step(p, [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p[0], ref, rtol=1e-12)


def test_adam_rejects_non_finite():
    with pytest.raises(DivergedError, match="diverged"):
        adam_step([np.zeros(2)], [np.array([np.nan, 0.0])], AdamState())


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(42)
        p = [rng.standard_normal((3, 3))]
        state = AdamState(lr=1e-2)
        for _ in range(20):
            adam_step(p, [rng.standard_normal((3, 3))], state)
        return p[0].tobytes()

    assert run() == run()
