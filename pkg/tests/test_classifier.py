from itertools import product

import numpy as np
import pytest

from magnetorbit.classifier import (CHAOTIC, CLOSED, PERIODIC, REGULAR, Thresholds, TrajectoryClassifier,
                                    classify_trajectory, mean_direction, strip_width, topological_numbers,
                                    width_plateau)
from magnetorbit.contours import contour_seeds
from magnetorbit.exceptions import NoIntegralPlane, TooShort
from magnetorbit.lattice import DirectLattice, FieldSetup
from magnetorbit.models import ridge_model
from magnetorbit.tracer import PlaneSlice, StepControl, integrate_trajectory, slice_function

CUBIC = DirectLattice.cubic()
TAU = 1.839286755214161
LONG = StepControl(tol=1e-9, max_arc_step=0.1, saddle_policy="offset")


def _exhaustive_min_angle(d, b, rows, m_max):
    """Independent oracle: loop over every integer triple, no primitivity or sign tricks."""
    best = np.inf
    for m in product(range(-m_max, m_max + 1), repeat=3):
        if m == (0, 0, 0):
            continue
        c = np.cross(b, np.asarray(m, float) @ rows)
        n = np.linalg.norm(c)
        if n < 1e-9:
            continue
        best = min(best, np.arccos(min(abs(c @ d) / n, 1.0)))
    return best


# ---------------------------------------------------------------------------
# strip width and direction on synthetic polylines


def test_straight_line_width():
    t = np.linspace(0, 500, 5001)
    P = np.column_stack([t, 0.3 * t])
    w, hist = strip_width(P)
    assert w < 1e-10 and max(h for _, h in hist) < 1e-10
    assert width_plateau(hist)


def test_sinusoid_width_plateau():
    A = 0.7
    t = np.linspace(0, 4000, 400001)
    d = np.array([np.cos(0.4), np.sin(0.4)])
    n = np.array([-d[1], d[0]])
    P = t[:, None] * d + (A * np.sin(t))[:, None] * n
    w, hist = strip_width(P)
    assert w == pytest.approx(A, rel=0.02)
    assert width_plateau(hist)
    np.testing.assert_allclose(mean_direction(P), d, atol=1e-3)


def test_brownian_width_grows(rng):
    n = 1 << 17
    x = np.arange(n, dtype=float)
    y = np.cumsum(rng.normal(size=n))
    w, hist = strip_width(np.column_stack([x, y]))
    h = np.array(hist)
    keep = h[:, 0] >= h[-1, 0] / 100
    slope = np.polyfit(np.log(h[keep, 0]), np.log(h[keep, 1]), 1)[0]
    assert 0.3 < slope < 0.7
    assert not width_plateau(hist)


def test_too_short():
    P = np.column_stack([np.linspace(0, 10, 100), np.zeros(100)])
    with pytest.raises(TooShort):
        strip_width(P)
    with pytest.raises(TooShort):
        mean_direction(P)


def test_mean_direction_line():
    t = np.linspace(-200, 200, 4001)
    P = np.column_stack([t, np.pi - t])  # the line u + v = pi
    np.testing.assert_allclose(np.abs(mean_direction(P) @ np.array([1, -1]) / np.sqrt(2)), 1.0, atol=1e-12)


def test_periodic_open_direction():
    disp = ridge_model()
    st = FieldSetup.from_direction([0, 0, 1.0])
    tr = integrate_trajectory(disp, PlaneSlice(st, 0.3), np.array([np.pi / 2, 0.0, 0.3]), s_max=100.0)
    cls = classify_trajectory(tr)
    assert cls.kind == PERIODIC
    g = np.asarray(tr.closure.lattice_shift, float) @ disp.lattice.rows
    g_plane = g - (g @ st.b_hat) * st.b_hat
    assert np.linalg.norm(np.cross(cls.mean_direction, g_plane / np.linalg.norm(g_plane))) < 1e-6
    assert abs(cls.mean_direction @ st.b_hat) < 1e-9


# ---------------------------------------------------------------------------
# integer relation


def test_topological_numbers_formula():
    st = FieldSetup.from_direction([1.0, 0, 0])
    assert topological_numbers(np.array([0, 1.0, 0]), st, CUBIC) == (0, 0, 1)
    assert topological_numbers(np.array([0, -1.0, 0]), st, CUBIC) == (0, 0, 1)


def test_topological_numbers_stable_under_perturbation(rng):
    b = np.array([np.sin(0.1), 0, np.cos(0.1)])
    st = FieldSetup.from_direction(b)
    d = np.cross(b, [0, 0, 1.0])
    d /= np.linalg.norm(d)
    m0 = topological_numbers(d, st, CUBIC)
    for _ in range(20):
        ang = rng.uniform(-1, 1) * 0.1 * 1e-3
        dp = np.cos(ang) * d + np.sin(ang) * np.cross(b, d)
        assert topological_numbers(dp, st, CUBIC) == m0
        assert topological_numbers(-dp, st, CUBIC) == m0


def test_no_integral_plane_random_direction():
    """Pick seeded directions until the exhaustive oracle confirms none is within tolerance."""
    rng = np.random.default_rng(11)
    st = FieldSetup.from_direction([0.3, 0.5, 0.8])
    for _ in range(200):
        a = rng.uniform(0, np.pi)
        d = np.cos(a) * st.e1 + np.sin(a) * st.e2
        if _exhaustive_min_angle(d, st.b_hat, CUBIC.rows, 10) > 1e-3:
            break
    else:
        pytest.fail("no test direction found")
    with pytest.raises(NoIntegralPlane) as info:
        topological_numbers(d, st, CUBIC, m_max=10)
    assert info.value.angle == pytest.approx(_exhaustive_min_angle(d, st.b_hat, CUBIC.rows, 10), abs=1e-9)


def test_simplest_rule_against_argmin():
    """Near-rational b: argmin picks a high-index triple, the default rule keeps (0, 0, 1)."""
    b = np.array([0.2 * np.sqrt(3), 0.07 * np.sqrt(2), 1.0])
    st = FieldSetup.from_direction(b)
    d = np.cross(st.b_hat, [0, 0, 1.0])
    d /= np.linalg.norm(d)
    d = np.cos(-2e-4) * d + np.sin(-2e-4) * np.cross(st.b_hat, d)  # direction-estimate noise
    assert topological_numbers(d, st, CUBIC) == (0, 0, 1)
    m_arg, ang = topological_numbers(d, st, CUBIC, rule="argmin", return_angle=True)
    assert m_arg != (0, 0, 1) and ang < 2e-4
    assert ang == pytest.approx(_exhaustive_min_angle(d, st.b_hat, CUBIC.rows, 10), abs=1e-9)


def test_m_primitive_sign(rng):
    st = FieldSetup.from_direction([0.3, 0.5, 0.8])
    for m in [(1, 2, 0), (0, 1, -1), (1, -1, 1), (0, 0, 1)]:
        d = np.cross(st.b_hat, np.asarray(m, float))
        m_hat = topological_numbers(d / np.linalg.norm(d), st, CUBIC)
        assert m_hat == m
        assert np.gcd.reduce(np.abs(m_hat)) == 1 and next(x for x in m_hat if x) > 0


# ---------------------------------------------------------------------------
# classification of traced trajectories


def test_classify_closed(cubic):
    st = FieldSetup.from_direction([0, 0, 1.0])
    tr = integrate_trajectory(cubic, PlaneSlice(st, np.pi / 2), np.array([np.arccos(-0.5), 0, np.pi / 2]),
                              s_max=1e3, energy=0.5)
    cls = classify_trajectory(tr)
    assert cls.kind == CLOSED and cls.strip_width is None


def _long_trace(disp, b, level, l_max, h=0.0):
    st = FieldSetup.from_direction(b)
    sl = PlaneSlice(st, h / (st.b_hat @ [0, 0, 1.0]) if h else 0.0)
    r0 = contour_seeds(slice_function(disp, sl), level, (-4, 4, -4, 4), 128)[0].points[0]
    return integrate_trajectory(disp, sl, sl.to_space(r0), energy=level, l_max=l_max, tol=LONG)


def test_topological_numbers_corrugated_trace(corrugated):
    """b in the xz-plane is partially rational: the trace is periodic along y, and its numbers are (0, 0, 1)."""
    b = np.array([np.sin(0.1), 0, np.cos(0.1)])
    tr = _long_trace(corrugated, b, 0.0, 2e4, h=np.pi / 2)
    assert classify_trajectory(tr).kind == PERIODIC
    d = mean_direction(tr)
    assert topological_numbers(d, tr.slice.setup, CUBIC) == (0, 0, 1)


GENERIC_TILT = np.array([np.sin(0.1) * np.cos(0.3), np.sin(0.1) * np.sin(0.3), np.cos(0.1)])


def test_classify_corrugated_regular(corrugated):
    b = GENERIC_TILT
    tr = _long_trace(corrugated, b, 0.0, 2e4, h=np.pi / 2)
    cls = classify_trajectory(tr)
    assert cls.kind == REGULAR and cls.m == (0, 0, 1)
    # oracle: the carrier is a warped copy of p_z = const, so the mean direction is b x z
    c = np.cross(b, [0, 0, 1.0])
    c /= np.linalg.norm(c)
    assert np.arccos(min(abs(cls.mean_direction @ c), 1.0)) < 1e-3
    assert abs(cls.mean_direction @ tr.slice.setup.b_hat) < 1e-9
    assert np.isfinite(cls.strip_width)


def test_classify_chaotic_candidate(cubic):
    # single traces widen in bursts; 4e5 of arc gives a clear last-decade trend on this slice
    tr = _long_trace(cubic, [TAU ** 2, TAU, 1.0], 0.0, 4e5)
    cls = classify_trajectory(tr)
    assert cls.kind == CHAOTIC
    assert cls.diagnostics["width_power"] > 0.1
    assert cls.strip_width is None and cls.m is None


def test_classifier_estimator(cubic, corrugated):
    st = FieldSetup.from_direction([0, 0, 1.0])
    closed = integrate_trajectory(cubic, PlaneSlice(st, np.pi / 2), np.array([np.arccos(-0.5), 0, np.pi / 2]),
                                  s_max=1e3, energy=0.5)
    regular = _long_trace(corrugated, GENERIC_TILT, 0.0, 2e4, h=np.pi / 2)
    clf = TrajectoryClassifier().fit()
    assert list(clf.predict([closed, regular])) == [CLOSED, REGULAR]
    assert clf.get_params()["rule"] == "simplest"
    rep = clf.classify([regular])[0].to_json()
    assert set(rep) == {"kind", "mean_direction", "strip_width", "m", "residuals", "trace_length"}


def test_thresholds_default():
    th = Thresholds()
    assert (th.plateau, th.power, th.tol_angle, th.m_max) == (0.05, 0.1, 1e-3, 10)
