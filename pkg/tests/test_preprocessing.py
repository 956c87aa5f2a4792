import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfr.preprocessing import Scaler, apply_scaler, fit_scaler


def test_hand_example():
    s = fit_scaler([[1, 2], [3, 4]])
    np.testing.assert_array_equal(s.mean_, [2, 3])
    np.testing.assert_array_equal(s.std_, [1, 1])


def test_constant_column_and_single_row():
    s = fit_scaler([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    assert s.std_[1] == 1.0
    assert not apply_scaler(s, [[0.0, 5.0]])[:, 1].any()
    one = fit_scaler([[3.0, -1.0]])
    np.testing.assert_array_equal(one.std_, [1, 1])
    np.testing.assert_array_equal(apply_scaler(one, [[3.0, -1.0]]), [[0, 0]])


@given(st.integers(2, 50), st.integers(1, 8), st.integers(0, 2**32))
def test_standardizes_fit_set(n, d, seed):
    r = np.random.default_rng(seed)
    X = r.normal(r.normal(0, 10, d), r.uniform(0.1, 5, d), (n, d))
    Z = apply_scaler(fit_scaler(X), X)
    assert np.abs(Z.mean(0)).max() < 1e-10
    assert np.abs(Z.std(0) - 1).max() < 1e-8
    np.testing.assert_allclose(fit_scaler(X).inverse_transform(Z), X, atol=1e-9)


def test_identity_and_shifted_test_set(rng):
    X = rng.standard_normal((20, 3))
    np.testing.assert_array_equal(apply_scaler(Scaler.identity(3), X), X)
    s = fit_scaler(X)
    T = apply_scaler(s, X + 2.0)
    assert np.all(np.abs(T.mean(0)) > 0.5)


def test_width_mismatch():
    with pytest.raises(ValueError):
        apply_scaler(fit_scaler(np.ones((3, 2))), np.ones((3, 4)))
