import numpy as np
import pytest

from magnetorbit.exceptions import DegenerateMoments, TooShort
from magnetorbit.exponents import (INCONCLUSIVE, MANY, DeviationExponentEstimator, FrameSpec, estimate_exponents,
                                   fbm, plane_component_census, principal_growth_directions,
                                   record_displacements, synthetic_walks, walk_records)
from magnetorbit.lattice import FieldSetup
from magnetorbit.tracer import PlaneSlice, integrate_trajectory, slice_function


def _angle_deg(u, v):
    return np.degrees(np.arccos(min(abs(u @ v) / np.linalg.norm(u) / np.linalg.norm(v), 1.0)))


def test_straight_line_record():
    d = np.array([0.6, 0.8])
    t = np.linspace(0, 300, 30001)
    rec = record_displacements(t[:, None] * d)
    np.testing.assert_allclose(rec.displacements, rec.frame_lengths[:, None] * d, atol=1e-9)
    assert rec.frame_lengths[-1] == 256


def test_closed_orbit_too_short(sphere):
    st = FieldSetup.from_direction([0, 0, 1.0])
    tr = integrate_trajectory(sphere, PlaneSlice(st, 0.0), np.array([1.0, 0, 0]), s_max=100.0)
    with pytest.raises(TooShort):
        record_displacements(tr)
    with pytest.raises(TooShort):
        record_displacements(np.column_stack([np.linspace(0, 10, 50), np.zeros(50)]), FrameSpec(k_min=6))


def test_fbm_increment_variance(rng):
    # oracle: Var X(n) = n^(2H) for unit-scale fBm
    for H in (0.3, 0.5, 0.8):
        X = np.array([fbm(1024, H, rng)[[63, 1023]] for _ in range(400)])
        ratio = X[:, 1].var() / X[:, 0].var()
        assert np.log(ratio) / np.log(16) / 2 == pytest.approx(H, abs=0.08)


def test_anisotropic_walk_record(rng):
    walks = synthetic_walks(1.0, 0.5, 64, 1 << 14, rng)
    recs = walk_records(walks)
    lk = recs[0].frame_lengths
    X = np.array([r.displacements[:, 0] for r in recs])
    Y = np.array([r.displacements[:, 1] for r in recs])
    # ballistic fBm: |dx| = |g| l_k exactly for each walk
    np.testing.assert_allclose(np.abs(X) / lk, np.broadcast_to(np.abs(X[:, -1:]) / lk[-1], X.shape), rtol=1e-9)
    slope = np.polyfit(np.log(lk[4:]), np.log(np.sqrt((Y[:, 4:] ** 2).mean(0))), 1)[0]
    assert slope == pytest.approx(0.5, abs=0.08)


@pytest.mark.parametrize("angle", [0.0, np.pi / 4])
def test_principal_directions(rng, angle):
    recs = walk_records(synthetic_walks(1.0, 0.5, 64, 1 << 14, rng, angle=angle))
    fast, slow = principal_growth_directions(recs)
    assert _angle_deg(fast, [np.cos(angle), np.sin(angle)]) < 2
    assert abs(fast @ slow) < 1e-12


def test_isotropic_degenerate(rng):
    recs = walk_records(synthetic_walks(0.5, 0.5, 4000, 1 << 8, rng))
    with pytest.raises(DegenerateMoments):
        principal_growth_directions(recs)


def test_estimate_ballistic_and_brownian(rng):
    recs = walk_records(synthetic_walks(1.0, 0.5, 64, 1 << 14, rng))
    est = estimate_exponents(recs)
    assert est.nu2 == pytest.approx(1.0, abs=0.02)
    assert est.nu3 == pytest.approx(0.5, abs=0.05)
    assert _angle_deg(est.dir_fast, [1, 0]) < 2
    assert set(est.to_json()) >= {"nu2", "nu3", "dir_fast", "dir_slow", "residuals"}


def test_affine_invariance(rng):
    walks = synthetic_walks(0.9, 0.4, 64, 1 << 14, rng, angle=0.3)
    base = estimate_exponents(walk_records(walks))
    R = np.array([[np.cos(1.1), -np.sin(1.1)], [np.sin(1.1), np.cos(1.1)]])
    scaled = estimate_exponents(walk_records([3.7 * w @ R.T for w in walks]))
    assert scaled.nu2 == pytest.approx(base.nu2, abs=1e-9)
    assert scaled.nu3 == pytest.approx(base.nu3, abs=1e-9)


def test_estimate_needs_records(rng):
    recs = walk_records(synthetic_walks(1.0, 0.5, 4, 1 << 14, rng))
    with pytest.raises(ValueError):
        estimate_exponents(recs)


def test_estimator_facade(rng):
    walks = synthetic_walks(1.0, 0.5, 32, 1 << 12, rng)
    # polylines: arc length differs from step count, but the ballistic axis still dominates
    est = DeviationExponentEstimator(max_residual=1.0).fit(walks)
    assert est.nu2_ > est.nu3_
    assert est.get_params()["gamma"] == 2.0


def test_census_parallel_lines(cubic):
    g = slice_function(cubic, PlaneSlice(FieldSetup.from_direction([0, 0, 1.0]), np.pi / 2))
    kind, counts = plane_component_census(g, 0.0, [20, 40, 80])
    assert kind == MANY
    assert counts[0] < counts[1] < counts[2]
    # oracle: a W x W window meets about W / pi lines of one diagonal family (the other family is
    # absorbed by the saddle resolution into the same staircases); count grows linearly in W
    for W, c in zip([20, 40, 80], counts):
        assert W / np.pi - 3 <= c <= 2 * W / np.pi + 3


def test_census_circle(sphere):
    g = slice_function(sphere, PlaneSlice(FieldSetup.from_direction([0, 0, 1.0]), 0.0))
    kind, counts = plane_component_census(g, 0.5, [4, 8, 16])
    assert kind == INCONCLUSIVE and counts == [0, 0, 0]
    with pytest.raises(ValueError):
        plane_component_census(g, 0.5, [4, 8])
