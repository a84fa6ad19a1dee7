import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from omlog.drift import (DistributionSnapshot, MmdConfig, Route, calibrate, decide, epsilon_from_mmds,
                         gaussian_kernel, median_sigma, mmd_value)

from oracles import naive_mmd


def snap(rows):
    return DistributionSnapshot.from_vectors(np.asarray(rows, dtype=float))


def test_kernel_examples():
    assert gaussian_kernel([1.0, 2.0], [1.0, 2.0], 1.0) == 1.0
    assert gaussian_kernel([0.0], [1.0], 1.0) == pytest.approx(math.exp(-1), abs=1e-15)


def test_kernel_shape_mismatch():
    with pytest.raises(ValueError):
        gaussian_kernel([0.0], [1.0, 2.0], 1.0)


def test_mmd_single_points_closed_form():
    assert mmd_value(snap([[0]]), snap([[1]]), 1.0) == pytest.approx(2 - 2 * math.exp(-1), abs=1e-12)


def test_mmd_two_point_example():
    P, Q = [[0], [2]], [[1], [1]]
    oracle = naive_mmd(P, Q, 1.0)
    assert oracle == pytest.approx(0.773399, abs=1e-6)
    assert mmd_value(snap(P), snap(Q), 1.0) == pytest.approx(oracle, abs=1e-12)


def test_mmd_same_multiset_vanishes():
    P = np.random.default_rng(0).random((7, 5))
    assert mmd_value(snap(P), snap(P[::-1]), 0.3) <= 1e-12


def test_mmd_pads_dimensions():
    a = mmd_value(snap([[1, 0]]), snap([[0, 1, 0, 0]]), 1.0)
    assert a == pytest.approx(naive_mmd([[1, 0, 0, 0]], [[0, 1, 0, 0]], 1.0), abs=1e-12)


def test_empty_snapshot_rejected():
    with pytest.raises(ValueError):
        DistributionSnapshot(np.zeros((0, 3)), frozenset())


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 5)), elements=st.floats(0, 1)),
       arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 5)), elements=st.floats(0, 1)),
       st.floats(0.05, 5.0))
def test_mmd_matches_naive_and_is_symmetric(P, Q, sigma):
    dim = max(P.shape[1], Q.shape[1])
    Pp = np.pad(P, ((0, 0), (0, dim - P.shape[1])))
    Qp = np.pad(Q, ((0, 0), (0, dim - Q.shape[1])))
    v = mmd_value(snap(P), snap(Q), sigma)
    assert v >= 0
    assert v == pytest.approx(max(naive_mmd(Pp, Qp, sigma), 0.0), abs=1e-10)
    assert v == pytest.approx(mmd_value(snap(Q), snap(P), sigma), abs=1e-12)


def test_epsilon_rule():
    assert epsilon_from_mmds([0.02, 0.04]) == pytest.approx(0.003, abs=1e-15)


def test_identical_training_batches_give_zero_epsilon():
    b = snap([[0.5, 0.5], [1, 0]])
    cfg = calibrate([b, b, b])
    assert cfg.epsilon == 0.0
    d = decide(b, snap([[0.4, 0.6], [1, 0]]), 2, cfg)
    assert d.route == Route.ONLINE and d.mmd > 0


def test_sigma_fallback_on_constant_vectors():
    assert median_sigma(np.ones((10, 3))) == 1.0
    assert calibrate([snap([[1, 0]]), snap([[1, 0]])]).sigma == 1.0


def test_median_sigma_value():
    # squared distances 1, 4, 1 -> median 1; scaled points give median 4
    assert median_sigma(np.array([[0.0], [1.0], [2.0]])) == 1.0
    assert median_sigma(np.array([[0.0], [2.0], [4.0]])) == 4.0


def test_calibrate_needs_two_batches():
    with pytest.raises(ValueError):
        calibrate([snap([[1.0]])])


def test_new_event_routes_online_regardless_of_mmd():
    prev = snap([[0.5, 0, 0.5]])
    d = decide(prev, prev, 2, MmdConfig(1.0, math.inf))
    assert d.new_events and d.route == Route.ONLINE


def test_identical_batch_routes_offline():
    prev = snap([[0.5, 0.5], [0, 1]])
    d = decide(prev, prev, 2, MmdConfig(1.0, 0.0))
    assert d.mmd == 0.0 and d.route == Route.OFFLINE


def test_mmd_above_epsilon_routes_online():
    prev, cur = snap([[1, 0]]), snap([[0, 1]])
    m = mmd_value(prev, cur, 1.0)
    assert decide(prev, cur, 2, MmdConfig(1.0, m / 1.5)).route == Route.ONLINE
    assert decide(prev, cur, 2, MmdConfig(1.0, m)).route == Route.OFFLINE


def test_config_validation():
    with pytest.raises(ValueError):
        MmdConfig(sigma=0.0)
    with pytest.raises(ValueError):
        MmdConfig(epsilon=-1.0)


def test_equal_valued_batches_give_exact_zero():
    X = np.random.default_rng(2).random((40, 9))
    X /= X.sum(1, keepdims=True)
    P = snap(X)
    Q = DistributionSnapshot.from_vectors(np.asfortranarray(X.copy()))
    assert mmd_value(P, Q, 0.05) == 0.0
    assert decide(P, Q, 9, MmdConfig(0.05, 0.0)).route == Route.OFFLINE
