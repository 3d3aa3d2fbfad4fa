import numpy as np
import pytest

from magnetorbit.exceptions import BadFit
from magnetorbit.fitting import PowerLawEnvelope, asymptotic_slope, envelope_line

LAM = np.logspace(1, 3, 41)


def test_pure_power_law():
    fit = asymptotic_slope(LAM, LAM ** -2.0)
    assert fit.slope == pytest.approx(-2.0, abs=0.02)
    assert fit.ols_slope == pytest.approx(-2.0, abs=1e-12)
    assert fit.residual < 1e-8


def test_log_periodic_fluctuation_envelope():
    y = LAM ** -2.0 * (1 + 0.3 * np.sin(np.log(LAM)))
    fit = asymptotic_slope(LAM, y)
    assert fit.slope == pytest.approx(-2.0, abs=0.1)
    # envelope stays above every sample
    lx, ly = np.log(LAM), np.log(y)
    assert np.all(fit.intercept + fit.slope * lx >= ly - 1e-9)


def test_envelope_line_against_brute_force(rng):
    lx = np.sort(rng.uniform(0, 5, 30))
    ly = -1.3 * lx + rng.normal(scale=0.2, size=30)
    s, a = envelope_line(lx, ly)
    # oracle: the optimal supporting line passes through two hull vertices; scan all pairs
    best = np.inf
    for i in range(30):
        for j in range(i + 1, 30):
            ss = (ly[j] - ly[i]) / (lx[j] - lx[i])
            aa = ly[i] - ss * lx[i]
            if np.all(aa + ss * lx >= ly - 1e-12):
                best = min(best, np.sum(aa + ss * lx))
    assert np.sum(a + s * lx) == pytest.approx(best, rel=1e-9)


def test_window_and_errors():
    fit = asymptotic_slope(LAM, LAM ** -1.0, window=(10, 1000))
    assert fit.window == pytest.approx((10, 1000))
    with pytest.raises(BadFit):
        asymptotic_slope(LAM[:5], LAM[:5] ** -1.0)
    with pytest.raises(BadFit):
        asymptotic_slope(np.linspace(10, 50, 20), np.ones(20))
    with pytest.raises(BadFit):
        asymptotic_slope(LAM, np.where(LAM > 100, 0.0, 1.0))


def test_power_law_estimator():
    y = 3.0 * LAM ** -1.0
    est = PowerLawEnvelope(method="ols").fit(LAM[:, None], y)
    assert est.slope_ == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_allclose(est.predict([20.0, 200.0]), 3.0 / np.array([20.0, 200.0]), rtol=1e-10)
    assert est.score(LAM[:, None], y) == pytest.approx(1.0)
    env = PowerLawEnvelope().fit(LAM, y * (1 + 0.3 * np.sin(np.log(LAM))))
    assert env.slope_ == env.envelope_slope_
    with pytest.raises(ValueError):
        PowerLawEnvelope(method="median").fit(LAM, y)
