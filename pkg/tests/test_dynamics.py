import io
import math

import numpy as np
import pytest

from naisnet.dynamics import (
    Activation,
    AdaptiveUnroll,
    Affine,
    BlockChain,
    ConvBlockParams,
    FcBlock,
    FcBlockParams,
    FixedUnroll,
    cascade_forward,
    conv_step,
    fc_step,
    steady_state_tanh,
    unroll,
    unroll_adaptive,
    unroll_fixed,
)
from naisnet.numerics import spectral_radius
from naisnet.stability import dense_equivalent, fc_rho_bound, io_gain, tanh_slope_floor

from conftest import random_conv, random_projected_fc


def test_activation_derivatives():
    z = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(Activation.RELU.derivative(z), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(Activation.TANH.derivative(z), 1 - np.tanh(z) ** 2)
    assert Activation("relu") is Activation.RELU


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_fc_step_zero_fixed_point(rng, act):
    p = random_projected_fc(rng, activation=act)
    p.b[:] = 0
    np.testing.assert_array_equal(fc_step(p, np.zeros(p.n), np.zeros(p.m)), np.zeros(p.n))


def test_fc_step_scalar_value():
    p = FcBlockParams.scalar(-0.5, 1.0, 0.0, h=1.0)
    assert fc_step(p, [0.0], [0.3])[0] == pytest.approx(math.tanh(0.3), abs=1e-15)
    assert fc_step(p, [0.0], [0.3])[0] == pytest.approx(0.291313, abs=1e-6)


def test_fc_step_dimension_mismatch(rng):
    p = random_projected_fc(rng, n=3, m=2)
    with pytest.raises(ValueError):
        fc_step(p, np.zeros(4), np.zeros(2))
    with pytest.raises(ValueError):
        fc_step(p, np.zeros(3), np.zeros(3))


def test_block_param_validation():
    with pytest.raises(ValueError):
        FcBlockParams(np.eye(2), np.eye(2), np.zeros(2), h=1.5)
    with pytest.raises(ValueError):
        FcBlockParams(np.eye(2), np.eye(2), np.zeros(2), eps=0.5)
    with pytest.raises(ValueError):
        FcBlockParams(np.ones((2, 3)), np.eye(2), np.zeros(2))


def test_steady_state_examples(rng):
    p = FcBlockParams.scalar(-0.5, 1.0, 0.0)
    assert steady_state_tanh(p, [0.0])[0] == 0.0
    assert steady_state_tanh(p, [0.3])[0] == pytest.approx(0.6, abs=1e-15)
    for _ in range(100):
        p = random_projected_fc(rng)
        u = rng.normal(size=p.m)
        xbar = steady_state_tanh(p, u)
        assert np.max(np.abs(fc_step(p, xbar, u) - xbar)) <= 1e-12
    with pytest.raises(ValueError):
        steady_state_tanh(random_projected_fc(rng, activation="relu"), np.zeros(5))


def test_conv_step_examples(rng):
    p = ConvBlockParams(C=np.zeros((1, 1, 3, 3)), D=np.zeros((1, 1, 3, 3)), E=[0.0], delta=[0.0], n_X=4, n_U=4)
    np.testing.assert_array_equal(conv_step(p, np.zeros((1, 4, 4)), np.zeros((1, 4, 4))), 0)
    C = np.zeros((1, 1, 3, 3))
    C[0, 0, 1, 1] = -1.0
    p = ConvBlockParams(C=C, D=np.zeros((1, 1, 3, 3)), E=[0.0], delta=[0.0], n_X=4, n_U=4, h=1.0)
    X = rng.uniform(0, 3, size=(1, 4, 4))
    np.testing.assert_array_equal(conv_step(p, X, np.zeros((1, 4, 4))), X)


def test_conv_step_matches_dense_step(rng):
    for _ in range(30):
        p = random_conv(rng, project=bool(rng.integers(2)), activation=str(rng.choice(["tanh", "relu"])))
        dense = dense_equivalent(p)
        X = rng.normal(size=(p.channels, p.n_X, p.n_X))
        U = rng.normal(size=(p.input_channels, p.n_U, p.n_U))
        ref = fc_step(dense, X.reshape(-1), U.reshape(-1))
        assert np.max(np.abs(conv_step(p, X, U).reshape(-1) - ref)) <= 1e-12


def test_conv_validation():
    with pytest.raises(ValueError):
        ConvBlockParams(C=np.zeros((1, 1, 2, 2)), D=np.zeros((1, 1, 3, 3)), E=[0], delta=[0], n_X=3, n_U=3)
    p = ConvBlockParams(C=np.zeros((1, 1, 3, 3)), D=np.zeros((1, 1, 3, 3)), E=[0], delta=[0], n_X=3, n_U=3)
    with pytest.raises(ValueError):
        conv_step(p, np.zeros((1, 4, 4)), np.zeros((1, 3, 3)))


def test_unroll_fixed_trivial():
    p = FcBlockParams.scalar(-0.5)
    traj = unroll_fixed(p, [0.0], 1)
    assert traj.depth == 1 and not traj.converged
    assert [float(x[0]) for x in traj.states] == [0.0, 0.0]
    with pytest.raises(ValueError):
        unroll_fixed(p, [0.0], 0)


def test_unroll_relu_inactive_stays_zero():
    p = FcBlockParams.scalar(-0.5, 1.0, 0.0, activation="relu")
    traj = unroll_fixed(p, [-1.0], 50)
    assert all(x[0] == 0.0 for x in traj.states)


def test_unroll_stable_scalar_geometric_decay():
    p = FcBlockParams.scalar(-0.5, 1.0, 0.0, h=1.0)
    u = [0.3]
    xbar = steady_state_tanh(p, u)
    traj = unroll_fixed(p, u, 200)
    s = tanh_slope_floor(p, traj.states, u)
    rho = abs(1 - 0.5 * s)
    e0 = abs(traj.states[0][0] - xbar[0])
    for k, x in enumerate(traj.states):
        assert abs(x[0] - xbar[0]) <= rho ** k * e0 + 1e-9


def test_trajectory_lengths_and_csv(rng):
    p = random_projected_fc(rng, n=3)
    traj = unroll_fixed(p, rng.normal(size=p.m), 7)
    assert len(traj.states) == traj.depth + 1 and len(traj.residuals) == traj.depth
    buf = io.StringIO()
    traj.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "k,residual,x_0,x_1,x_2"
    assert lines[1].startswith("0,,")
    assert len(lines) == 9
    assert float(lines[3].split(",")[1]) == traj.residuals[1]


def test_unroll_adaptive_at_fixed_point(rng):
    p = random_projected_fc(rng)
    u = rng.normal(size=p.m)
    xbar = steady_state_tanh(p, u)
    traj = unroll_adaptive(p, u, 1e-4, x0=xbar)
    assert traj.depth == 1 and traj.converged


def test_unroll_adaptive_depth_geometric():
    # I + hA = 0.5 with A = -0.5, h = 1; for tanh the fixed point is x = 0.6 at u = 0.3
    p = FcBlockParams.scalar(-0.5, 1.0, 0.0, h=1.0)
    traj = unroll_adaptive(p, [0.3], 1e-4, 500)
    assert traj.converged
    r = traj.residuals
    assert r[-1] < 1e-4 and all(v >= 1e-4 for v in r[:-1])
    assert all(b <= a for a, b in zip(r, r[1:]))
    # each residual contracts by at most max slope factor 1 - 0.5 * sigma', so depth is at least the pure-linear count
    linear = math.ceil(math.log(1e-4 / r[0]) / math.log(0.5)) + 1
    assert traj.depth >= linear
    assert abs(traj.final[0] - 0.6) < 1e-3


def test_unroll_adaptive_cap_and_validation():
    p = FcBlockParams.scalar(1.0, 1.0, 0.0, activation="relu")
    traj = unroll_adaptive(p, [1.0], 1e-4, k_max=5)
    assert traj.depth == 5 and not traj.converged
    with pytest.raises(ValueError):
        unroll_adaptive(p, [1.0], 0.0)
    with pytest.raises(ValueError):
        unroll_adaptive(p, [1.0], 1e-4, k_max=0)


def test_fixed_and_adaptive_agree_at_realized_depth(rng):
    p = random_projected_fc(rng)
    u = rng.normal(size=p.m)
    a = unroll_adaptive(p, u, 1e-4)
    f = unroll_fixed(p, u, a.depth)
    np.testing.assert_array_equal(a.final, f.final)


@pytest.mark.parametrize("k", [0, 3, 50])
def test_relu_coordinate_freezing_decoupled(rng, k):
    for _ in range(20):
        n = int(rng.integers(2, 8))
        A = np.diag(-rng.uniform(0.05, 0.95, n))
        p = FcBlockParams(np.zeros((n, n)), rng.normal(size=(n, 2)), rng.normal(size=n), h=1.0,
                          activation="relu", A_direct=A)
        u = rng.normal(size=2)
        traj = unroll_fixed(p, u, 60)
        x = traj.states[k]
        frozen = p.A @ x + p.B @ u + p.b < 0
        for later in traj.states[k + 1:]:
            np.testing.assert_array_equal(later[frozen], x[frozen])


def test_relu_coordinate_can_reactivate_when_coupled():
    # Row 0 starts inactive, but row 1 grows and its coupling pushes row 0 back on.
    A = np.array([[-0.5, 0.4], [0.4, -0.5]])
    p = FcBlockParams(np.zeros((2, 2)), np.eye(2), np.zeros(2), h=1.0, activation="relu", A_direct=A)
    traj = unroll_fixed(p, [-0.1, 1.0], 20)
    assert (p.A @ traj.states[0] + [-0.1, 1.0])[0] < 0
    assert traj.states[-1][0] > traj.states[0][0]


def test_monotone_scalar_trajectories(rng):
    for _ in range(50):
        A = -rng.uniform(0.05, 0.95)
        p = FcBlockParams.scalar(A, 1.0, 0.0, h=float(rng.uniform(0.1, 1.0)))
        traj = unroll_fixed(p, [rng.normal()], 100)
        d = np.diff([x[0] for x in traj.states])
        assert np.all(d >= 0) or np.all(d <= 0)


def test_io_perturbation_bound(rng):
    for _ in range(20):
        p = random_projected_fc(rng)
        u = rng.normal(size=p.m)
        w = rng.normal(size=p.m)
        w *= 0.1 / np.linalg.norm(w)
        a, b = unroll_fixed(p, u, 200), unroll_fixed(p, u + w, 200)
        s = min(tanh_slope_floor(p, a.states, u), tanh_slope_floor(p, b.states, u + w))
        rho = fc_rho_bound(p.h, p.eps, s)
        assert np.linalg.norm(b.final - a.final) <= 2 * io_gain(p, rho) * 0.1 + 1e-9


def test_untied_and_autonomous_blocks(rng):
    layers = [random_projected_fc(rng, n=3, m=2, eps=0.05, h=1.0) for _ in range(4)]
    blk = FcBlock(layers, non_autonomous=True)
    u = rng.normal(size=2)
    x = np.zeros(3)
    for k in range(4):
        x = fc_step(layers[k], x, u)
    np.testing.assert_allclose(unroll_fixed(blk, u, 4).final, x, rtol=0, atol=1e-15)
    with pytest.raises(IndexError):
        unroll_fixed(blk, u, 5)

    auto = FcBlock([layers[0]], non_autonomous=False)
    x = fc_step(layers[0], np.zeros(3), u)
    for _ in range(5):
        x = fc_step(layers[0], x, np.zeros(2))
    np.testing.assert_allclose(unroll_fixed(auto, u, 6).final, x, rtol=0, atol=1e-15)


def test_autonomous_block_forgets_input(rng):
    p = random_projected_fc(rng, eps=0.1, h=1.0)
    p.b[:] = 0
    auto = FcBlock([p], non_autonomous=False)
    a = unroll_fixed(auto, rng.normal(size=p.m), 400).final
    assert np.linalg.norm(a) < 1e-6


def test_cascade_single_block_matches_unroll(rng):
    p = random_projected_fc(rng)
    u = rng.normal(size=p.m)
    final, trajs = cascade_forward(BlockChain([p], [FixedUnroll(12)]), u)
    np.testing.assert_array_equal(final, unroll_fixed(p, u, 12).final)
    final, _ = cascade_forward(BlockChain([p], [AdaptiveUnroll(1e-4, 500)]), u)
    np.testing.assert_array_equal(final, unroll(p, u, AdaptiveUnroll()).final)


def test_cascade_zero_weight_second_block_contracts(rng):
    p1 = random_projected_fc(rng, n=4, m=2)
    p2 = FcBlockParams(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros(4), h=1.0, eps=0.1)
    u = rng.normal(size=2)
    x1 = unroll_fixed(p1, u, 30).final
    final, trajs = cascade_forward(BlockChain([p1, p2], [FixedUnroll(30)] * 2), u)
    np.testing.assert_array_equal(trajs[0].final, x1)
    # the second block starts from zero with zero drive, so it stays at zero
    np.testing.assert_array_equal(final, 0)
    traj = unroll_fixed(p2, np.zeros(4), 30, x0=x1)
    assert np.linalg.norm(traj.final) < np.linalg.norm(x1)


def test_cascade_scalar_lipschitz():
    blocks = [FcBlockParams.scalar(A, 1.0, 0.0) for A in (-0.5, -0.8, -0.6)]
    gain = np.prod([1 / 0.5, 1 / 0.8, 1 / 0.6])
    chain = BlockChain(blocks, [FixedUnroll(300)] * 3)
    us = np.linspace(-2, 2, 81)
    ys = np.array([cascade_forward(chain, [u])[0][0] for u in us])
    assert np.max(np.abs(np.diff(ys) / np.diff(us))) <= gain + 1e-9


def test_cascade_transitions_and_dims(rng):
    p1 = random_projected_fc(rng, n=4, m=2)
    p2 = random_projected_fc(rng, n=3, m=5)
    T = Affine(rng.normal(size=(5, 4)), rng.normal(size=5))
    u = rng.normal(size=2)
    final, _ = cascade_forward(BlockChain([p1, p2], [FixedUnroll(5)] * 2, [T]), u)
    np.testing.assert_array_equal(final, unroll_fixed(p2, T(unroll_fixed(p1, u, 5).final), 5).final)
    with pytest.raises(ValueError):
        BlockChain([p1, p2], [FixedUnroll(5)] * 2)
    with pytest.raises(ValueError):
        BlockChain([p1, p2], [FixedUnroll(5)] * 2, [Affine(np.ones((4, 4)), np.zeros(4))])


def test_spectral_radius_of_scalar_jacobian():
    p = FcBlockParams.scalar(-0.5, h=1.0)
    assert spectral_radius(np.eye(1) + p.h * p.A) == pytest.approx(0.5)
