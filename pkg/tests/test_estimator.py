import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pivotlab.errors import DomainError
from pivotlab.estimator import EstimatorState, init_estimator

# Minimizer of the 80/20 two-point BCE, found independently by BFGS to 1e-8
# and matching the closed form w = -2 ln 4 / 0.6, sigmoid(0.2 w + b) = 0.8.
W_8020 = -4.620981203732969
B_8020 = 2.3104906018664844


def test_init_and_predict():
    est = init_estimator(16)
    assert est.predict(0.3) == 0.5 and est.predict(0.5) == 0.5
    assert init_estimator(16) == init_estimator(16)
    with pytest.raises(DomainError):
        init_estimator(0)
    assert EstimatorState(w=-4.0, b=2.0).predict(0.5) == 0.5
    assert EstimatorState(w=-10.0, b=5.0).predict(0.9) == pytest.approx(0.01798620996209156, abs=1e-15)
    for r in (0.0, 1.0, -0.1):
        with pytest.raises(DomainError):
            est.predict(r)


def test_record_fifo_and_validation():
    est = init_estimator(2)
    for r, y in ((0.1, 1), (0.2, 0), (0.3, 1)):
        est.record(r, y)
    assert list(est.buffer) == [(0.2, 0), (0.3, 1)]
    with pytest.raises(DomainError):
        est.record(0.5, 2)
    with pytest.raises(DomainError):
        est.record(1.0, 1)


def test_update_empty_is_noop():
    est = init_estimator()
    assert est.update() is None
    assert (est.w, est.b) == (0.0, 0.0)


def _two_point(n_each, ones_low, ones_high):
    est = init_estimator()
    for i in range(n_each):
        est.record(0.2, int(i < ones_low))
        est.record(0.8, int(i < ones_high))
    return est


def test_separable_two_point():
    est = _two_point(50, 50, 0)
    est.update(epochs=500, lr=0.5)
    assert est.predict(0.2) >= 0.95
    assert est.predict(0.8) <= 0.05


def test_balanced_8020_converges_to_oracle():
    est = _two_point(50, 40, 10)
    est.update(epochs=500, lr=0.5)
    assert est.predict(0.2) == pytest.approx(0.8, abs=0.02)
    assert est.predict(0.8) == pytest.approx(0.2, abs=0.02)
    assert est.w == pytest.approx(W_8020, abs=1e-3)
    assert est.b == pytest.approx(B_8020, abs=1e-3)


def test_all_ones_saturates():
    est = init_estimator()
    for r in np.linspace(0.05, 0.95, 19):
        est.record(float(r), 1)
    est.update(epochs=500, lr=0.5)
    assert all(est.predict(r) >= 0.99 for r in (0.01, 0.5, 0.99))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 200), lr=st.floats(0.01, 0.5))
def test_update_never_increases_bce(seed, n, lr):
    rng = np.random.default_rng(seed)
    est = EstimatorState(w=float(rng.normal(0, 3)), b=float(rng.normal(0, 3)))
    for r, y in zip(rng.uniform(0.01, 0.99, n), rng.integers(0, 2, n)):
        est.record(float(r), int(y))
    before = est.bce()
    after = est.update(epochs=int(rng.integers(1, 60)), lr=lr)
    assert after <= before + 1e-15
    assert est.bce() == pytest.approx(after, abs=1e-12)


def test_monotone_when_w_negative():
    est = EstimatorState(w=-3.0, b=1.0)
    vals = [est.predict(r) for r in np.linspace(0.01, 0.99, 50)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_recovers_known_logistic():
    rng = np.random.default_rng(0)
    w_star, b_star = -5.0, 2.0
    est = init_estimator(10_000)
    r = rng.uniform(0.01, 0.99, 10_000)
    y = rng.random(10_000) < 1 / (1 + np.exp(-(w_star * r + b_star)))
    for ri, yi in zip(r, y):
        est.record(float(ri), int(yi))
    est.update(epochs=500)
    grid = np.arange(1, 10) / 10
    truth = 1 / (1 + np.exp(-(w_star * grid + b_star)))
    assert np.mean(np.abs([est.predict(g) for g in grid] - truth)) <= 0.05


def test_serialization_roundtrip():
    est = _two_point(5, 3, 1)
    est.update(epochs=7)
    again = EstimatorState.from_dict(est.to_dict())
    assert again == est
    assert math.isclose(again.predict(0.4), est.predict(0.4), rel_tol=0, abs_tol=0)
