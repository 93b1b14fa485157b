import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from oldpf import ssm
from oldpf.ssm import Trajectory


class ZeroRng:
    """Stand-in generator whose Gaussian draws are all zero."""

    def standard_normal(self, size=None):
        return np.zeros(size)


def test_pretrain_params_d2():
    p = ssm.lgssm_params("pretrain", 2)
    np.testing.assert_allclose(p.theta1, [[0.42, 0.1764], [0.1764, 0.42]], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(p.theta2, np.diag([0.5, 0.5]))
    assert p.obs_var == 0.1


def test_online_params_d2():
    p = ssm.lgssm_params("online", 2)
    np.testing.assert_allclose(p.theta1, [[0.2, 0.04], [0.04, 0.2]], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(p.theta2, np.diag([10.0, 10.0]))


@pytest.mark.parametrize("d", [2, 5, 10])
def test_diagonal_and_stability(d):
    pre, on = ssm.lgssm_params("pretrain", d), ssm.lgssm_params("online", d)
    np.testing.assert_allclose(np.diag(pre.theta1), 0.42)
    np.testing.assert_allclose(np.diag(on.theta1), 0.2)
    assert pre.spectral_radius() < 1 and on.spectral_radius() < 1


def test_unstudied_dimension_warns_and_bad_dimension_raises():
    with pytest.warns(UserWarning):
        ssm.lgssm_params("pretrain", 3)
    with pytest.raises(ValueError):
        ssm.lgssm_params("pretrain", 0)
    with pytest.raises(ValueError):
        ssm.lgssm_params("midway", 2)


def test_null_dynamics_give_zero_trajectory():
    tr = ssm.lgssm_simulate(ssm.lgssm_params("online", 2), 20, ZeroRng(), x0=np.zeros(2))
    assert not tr.states.any() and not tr.observations.any()


def test_stationary_covariance_matches_lyapunov_solution():
    p = ssm.lgssm_params("pretrain", 2)
    tr = ssm.lgssm_simulate(p, 100_000, np.random.default_rng(0))
    emp = np.cov(tr.states[1000:].T)
    ref = scipy.linalg.solve_discrete_lyapunov(p.theta1, np.eye(2))
    assert np.max(np.abs(emp - ref) / np.abs(ref)) < 0.05


def test_lgssm_noise_moments():
    p = ssm.lgssm_params("online", 2)
    tr = ssm.lgssm_simulate(p, 100_000, np.random.default_rng(1))
    v = tr.observations - tr.states[1:] @ p.theta2.T
    u = tr.states[1:] - tr.states[:-1] @ p.theta1.T
    n = v.shape[0]
    for noise, var in ((u, 1.0), (v, 0.1)):
        assert np.all(np.abs(noise.mean(axis=0)) < 3 * math.sqrt(var / n))
        # variance of the sample variance of a Gaussian is 2 var^2 / n
        assert np.all(np.abs(noise.var(axis=0) - var) < 3 * var * math.sqrt(2 / n))


def test_lgssm_same_seed_bit_identical():
    p = ssm.lgssm_params("online", 5)
    a = ssm.lgssm_simulate(p, 50, np.random.default_rng(42))
    b = ssm.lgssm_simulate(p, 50, np.random.default_rng(42))
    assert a.states.tobytes() == b.states.tobytes()
    assert a.observations.tobytes() == b.observations.tobytes()


def test_trajectory_validation():
    with pytest.raises(ValueError, match="T\\+1"):
        Trajectory(np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        Trajectory(np.array([[0.0], [np.nan]]), np.zeros((1, 1)))


# -- tracking ----------------------------------------------------------------

def test_transition_entry_at_quarter_turn():
    ts = 5.0
    a = ssm.tracking_transition_matrix(math.pi / (2 * ts), ts)
    assert a[0, 2] == pytest.approx(10 / math.pi, rel=1e-12)
    assert 10 / math.pi == pytest.approx(3.18310, abs=1e-5)


def test_transition_small_angle_limit():
    a = ssm.tracking_transition_matrix(0.0, 5.0)
    expected = np.eye(4)
    expected[0, 2] = expected[1, 3] = 5.0
    np.testing.assert_array_equal(a, expected)
    near = ssm.tracking_transition_matrix(1e-7, 5.0)
    np.testing.assert_allclose(near, expected, atol=1e-5)


@given(omega=st.floats(-2.0, 2.0, allow_nan=False))
def test_rotation_block_has_unit_determinant(omega):
    a = ssm.tracking_transition_matrix(omega, 5.0)
    assert np.linalg.det(a[2:, 2:]) == pytest.approx(1.0, abs=1e-12)


def test_turn_rate_from_speed():
    assert ssm.turn_rate(5.0, (3.0, 4.0)) == 1.0
    with pytest.raises(ValueError, match="turn rate"):
        ssm.turn_rate(5.0, (0.0, 1e-9))


def test_noise_free_turn_rate_uses_previous_speed():
    p = ssm.tracking_params("pretrain")
    tr = ssm.tracking_simulate(p, 3, np.random.default_rng(0), init_vel=(3.0, 4.0), noise_free=True)
    assert tr.states[0, 4] == 1.0
    # rotation keeps speed, so omega stays a / 5
    assert tr.states[1, 4] == pytest.approx(1.0)
    np.testing.assert_allclose(np.hypot(tr.states[:, 2], tr.states[:, 3]), 5.0)


def test_measurement_at_unit_range_and_zero_bearing():
    h = ssm.tracking_measurement([3.0, 2.0], ssm.tracking_params("pretrain"))
    np.testing.assert_array_equal(h, [0.0, 0.0])


@given(x=st.floats(-1e3, 1e3), y=st.floats(-1e3, 1e3))
def test_bearing_in_half_open_interval(x, y):
    p = ssm.tracking_params("online")
    if math.hypot(x - 2.0, y - 2.0) < 1e-6:
        return
    b = ssm.tracking_measurement([x, y], p)[1]
    assert -math.pi < b <= math.pi


def test_bearing_negative_pi_mapped_to_pi():
    p = ssm.tracking_params("online")
    assert ssm.tracking_measurement([1.0, 2.0], p)[1] == math.pi


def test_mixture_noise_variance():
    p = ssm.tracking_params("pretrain")
    v = ssm.mixture_noise(np.random.default_rng(0), p, 1_000_000)
    np.testing.assert_allclose(v.var(axis=0), 10.3, rtol=0.02)
    assert np.all(np.abs(v.mean(axis=0)) < 3 * math.sqrt(10.3 / v.shape[0]))


def test_tracking_process_noise_moments():
    p = ssm.tracking_params("online")
    tr = ssm.tracking_simulate(p, 100_000 // 50, np.random.default_rng(3))
    xs = tr.states
    bmat = ssm.tracking_input_matrix(p.sampling_period)
    resid = np.array([xs[t, :4] - ssm.tracking_transition_matrix(xs[t - 1, 4]) @ xs[t - 1, :4]
                      for t in range(1, xs.shape[0])])
    u = np.linalg.lstsq(bmat, resid.T, rcond=None)[0].T
    n = u.shape[0]
    assert np.all(np.abs(u.var(axis=0) - 1e-2) < 3 * 1e-2 * math.sqrt(2 / n))
    w = np.array([xs[t, 4] - ssm.turn_rate(p.accel, xs[t - 1, 2:4]) for t in range(1, xs.shape[0])])
    assert abs(w.var() - 1e-4) < 3 * 1e-4 * math.sqrt(2 / n)


def test_tracking_params_phases():
    assert ssm.tracking_params("pretrain").accel == 5.0
    assert ssm.tracking_params("online").accel == -5.0
    assert sum(ssm.tracking_params("online").mix_weights) == 1.0
    with pytest.raises(ValueError):
        ssm.TrackingParams(mix_weights=(0.5, 0.6))


def test_tracking_initial_state():
    tr = ssm.tracking_simulate(ssm.tracking_params("online"), 5, np.random.default_rng(0))
    v = 55 / math.sqrt(2)
    np.testing.assert_allclose(tr.states[0], [0.0, 0.0, v, v, -5.0 / 55.0])
    assert tr.observations.shape == (5, 2)


# -- datasets ----------------------------------------------------------------

def test_generate_dataset_shapes_and_determinism():
    a = ssm.generate_dataset("lgssm", "pretrain", 7, 50, seed=3)
    b = ssm.generate_dataset("lgssm", "pretrain", 7, 50, seed=3)
    assert len(a) == 7 and a[0].states.shape == (51, 2) and a[0].observations.shape == (50, 2)
    for x, y in zip(a, b):
        assert x.states.tobytes() == y.states.tobytes()
    assert not np.array_equal(a[0].states, a[1].states)


def test_online_dataset_is_one_long_trajectory():
    (tr,) = ssm.generate_dataset("tracking", "online", 1, 300, seed=0)
    assert tr.T == 300 and tr.states.shape == (301, 5)


def test_generate_dataset_rejects_empty():
    with pytest.raises(ValueError):
        ssm.generate_dataset("lgssm", "pretrain", 0, 10, seed=0)


def test_dataset_csv_round_trip_bit_exact(tmp_path):
    trajs = ssm.generate_dataset("tracking", "pretrain", 3, 12, seed=9)
    path = tmp_path / "d.csv"
    ssm.save_dataset(trajs, path, "tracking", "pretrain", 9)
    back = ssm.load_dataset(path)
    assert len(back) == 3
    for a, b in zip(trajs, back):
        assert a.states.tobytes() == b.states.tobytes()
        assert a.observations.tobytes() == b.observations.tobytes()
    assert path.with_suffix(".json").exists()
