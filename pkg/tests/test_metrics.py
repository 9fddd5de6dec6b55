import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from temporl import metrics

GRID = metrics.CoverageConfig(100, np.zeros(2), np.full(2, 10.0))
points = st.floats(0.0, 9.999)
trajectory = st.lists(st.tuples(points, points), min_size=1, max_size=30).map(np.array)


# -- coverage -----------------------------------------------------------------------
def test_every_bucket_center_gives_full_coverage():
    centers = np.array([[i + 0.5, j + 0.5] for i in range(10) for j in range(10)])
    assert metrics.coverage([centers], GRID) == 1.0


def test_stationary_trajectory_covers_one_bucket():
    assert metrics.coverage([np.tile([3.3, 7.1], (50, 1))], GRID) == pytest.approx(1 / 100)


def test_coverage_matches_brute_force_set():
    a = np.array([[0.1, 0.1], [0.9, 0.2], [1.5, 0.5], [5.2, 5.9], [9.9, 9.9]])
    b = np.array([[1.2, 0.4], [3.3, 8.8], [3.7, 8.1], [0.0, 9.5]])
    expected = {(int(x), int(y)) for x, y in np.vstack([a, b])}
    assert metrics.coverage([a, b], GRID) == pytest.approx(len(expected) / 100)


def test_coverage_errors():
    with pytest.raises(ValueError):
        metrics.coverage([], GRID)
    with pytest.raises(ValueError):
        metrics.CoverageConfig(50, np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        metrics.CoverageConfig(4, np.ones(2), np.ones(2))


@given(st.lists(trajectory, min_size=1, max_size=4), trajectory)
def test_coverage_monotone_under_added_trajectories(trajs, extra):
    before = metrics.coverage(trajs, GRID)
    after = metrics.coverage(trajs + [extra], GRID)
    assert after >= before
    assert 0.0 < after <= 1.0


@given(st.lists(trajectory, min_size=1, max_size=4))
def test_coverage_equals_set_oracle(trajs):
    expected = {(int(x), int(y)) for t in trajs for x, y in t}
    assert metrics.coverage(trajs, GRID) == pytest.approx(len(expected) / 100)


# -- radius of gyration -------------------------------------------------------------
def test_constant_trajectory_has_zero_gyration():
    assert metrics.gyration_sq([np.ones((10, 2))], metrics.GyrationConfig(1.0)) == 0.0


def test_two_point_hand_evaluation():
    traj = np.array([[0.0, 0.0], [2.0, 0.0]])
    assert metrics.gyration_sq([traj], metrics.GyrationConfig(1.0)) == pytest.approx(2.0)


def test_gyration_averages_over_trajectories_and_divides_by_diagonal():
    t1 = np.array([[0.0, 0.0], [2.0, 0.0]])  # per-trajectory term 2
    t2 = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 3.0]])  # squared distances 1, 1, 4 over 2
    assert metrics.gyration_sq([t1, t2], metrics.GyrationConfig(4.0)) == pytest.approx((2.0 + 3.0) / (4.0 * 2))


def test_gyration_errors():
    with pytest.raises(ValueError):
        metrics.gyration_sq([np.zeros((1, 2))], metrics.GyrationConfig(1.0))
    with pytest.raises(ValueError):
        metrics.GyrationConfig(0.0)


@given(
    st.lists(arrays(np.float64, (6, 2), elements=st.floats(-50, 50)), min_size=1, max_size=3),
    st.floats(-3, 3),
    st.tuples(st.floats(-100, 100), st.floats(-100, 100)),
)
def test_gyration_scaling_and_translation(trajs, c, shift):
    cfg = metrics.GyrationConfig(7.0)
    base = metrics.gyration_sq(trajs, cfg)
    scaled = metrics.gyration_sq([c * t for t in trajs], cfg)
    moved = metrics.gyration_sq([t + np.array(shift) for t in trajs], cfg)
    assert scaled == pytest.approx(c * c * base, rel=1e-9, abs=1e-9)
    assert moved == pytest.approx(base, rel=1e-9, abs=1e-7)


# -- power spectra ------------------------------------------------------------------
def test_dft_matrix_matches_numpy_fft():
    x = np.random.default_rng(0).normal(size=16)
    np.testing.assert_allclose(metrics.dft_matrix(16) @ x, np.fft.fft(x), atol=1e-10)


def test_constant_sequence_puts_power_in_bin_zero():
    psd = metrics.action_psd([np.full((32, 2), 0.7)])
    assert psd[0] == pytest.approx(0.49)
    np.testing.assert_allclose(psd[1:], 0.0, atol=1e-20)


@pytest.mark.parametrize("length,k", [(64, 5), (63, 1), (64, 32)])
def test_cosine_concentrates_in_its_bin(length, k):
    t = np.arange(length)
    psd = metrics.action_psd([np.cos(2 * np.pi * k * t / length)[:, None]])
    assert len(psd) == length // 2 + 1
    assert psd[k] / psd.sum() >= 0.99


def test_white_noise_spectrum_is_flat():
    rng = np.random.default_rng(1)
    n_seq, length = 100, 512
    psd = metrics.action_psd([rng.normal(size=(length, 1)) for _ in range(n_seq)])
    # unit-variance white noise: E|X_k|^2 = L, so interior bins expect 2/L and the two edge bins 1/L;
    # each bin is a mean of n_seq exponential-like terms whose std equals their mean
    expected = np.full(length // 2 + 1, 2.0 / length)
    expected[[0, -1]] = 1.0 / length
    sigma = expected / math.sqrt(n_seq)
    outside = np.abs(psd - expected) > 3 * sigma
    assert outside.mean() <= 0.02
    interior = psd[1:-1] * length / 2
    assert abs(interior.mean() - 1.0) <= 3 / math.sqrt(n_seq * len(interior))


def test_ragged_sequences_rejected():
    with pytest.raises(ValueError):
        metrics.action_psd([np.zeros((10, 2)), np.zeros((11, 2))])
    with pytest.raises(ValueError):
        metrics.action_psd([])


@settings(max_examples=30)
@given(
    st.integers(2, 40).flatmap(
        lambda n: st.lists(arrays(np.float64, (n, 2), elements=st.floats(-5, 5)), min_size=1, max_size=3)
    )
)
def test_parseval(seqs):
    psd = metrics.action_psd(seqs)
    energy = np.mean([np.mean(s**2) for s in seqs])
    assert psd.sum() == pytest.approx(energy, rel=1e-9, abs=1e-12)


def test_low_frequency_fraction():
    psd = np.array([4.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    # ceil(0.1 * 11) = 2 lowest bins
    assert metrics.low_frequency_fraction(psd, 0.1) == pytest.approx(5.0 / 14.0)
