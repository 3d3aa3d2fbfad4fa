import numpy as np
import pytest

from magnetorbit.exceptions import DegenerateLattice
from magnetorbit.lattice import (DirectLattice, DispersionRelation, FieldSetup, energy_range, evaluate_energy,
                                 gradient_energy, reciprocal_from_direct, reduce_to_torus)


def test_reciprocal_cubic():
    rec = reciprocal_from_direct(DirectLattice.cubic())
    np.testing.assert_allclose(rec.rows, 2 * np.pi * np.eye(3), atol=1e-15)


def test_reciprocal_orthorhombic():
    rec = reciprocal_from_direct(DirectLattice(np.diag([1.0, 2.0, 3.0])))
    np.testing.assert_allclose(rec.rows, np.diag([2 * np.pi, np.pi, 2 * np.pi / 3]), rtol=1e-14)


def test_reciprocal_sheared_against_linear_solve():
    L = np.array([[1.0, 0, 0], [0.5, 1, 0], [0, 0, 1]])
    rec = reciprocal_from_direct(DirectLattice(L))
    # independent oracle: A L^T = 2 pi I
    A = np.linalg.solve(L, 2 * np.pi * np.eye(3)).T
    np.testing.assert_allclose(rec.rows, A, atol=1e-13)


def test_duality_random(rng):
    for _ in range(20):
        L = rng.normal(size=(3, 3))
        rec = reciprocal_from_direct(DirectLattice(L))
        assert np.abs(rec.rows @ L.T - 2 * np.pi * np.eye(3)).max() < 1e-12 * max(1, np.abs(rec.rows).max())


def test_degenerate_lattice():
    with pytest.raises(DegenerateLattice):
        reciprocal_from_direct(DirectLattice([[1, 0, 0], [0, 1, 0], [1, 1, 0]]))


@pytest.mark.parametrize("p,e", [((0, 0, 0), 3.0), ((np.pi,) * 3, -3.0), ((np.pi / 2,) * 3, 0.0)])
def test_cubic_energy_values(cubic, p, e):
    assert evaluate_energy(cubic, np.array(p, float)) == pytest.approx(e, abs=1e-14)


def test_cubic_gradient_values(cubic):
    np.testing.assert_allclose(gradient_energy(cubic, np.array([np.pi / 2, 0, 0])), [-1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(gradient_energy(cubic, np.zeros(3)), 0, atol=1e-15)


def _skew_model():
    L = np.array([[1.0, 0.2, 0.0], [0.1, 1.3, 0.0], [0.0, 0.3, 0.9]])
    harm = [{"k": [1, 0, 0], "amp": 1.0}, {"k": [0, 1, 1], "amp": 0.4, "phase": 0.3},
            {"k": [1, -2, 1], "amp": 0.2, "phase": -1.0}]
    return DispersionRelation.from_harmonics(harm, DirectLattice(L))


def test_gradient_finite_difference(rng):
    disp = _skew_model()
    h = 1e-5
    for p in rng.uniform(-5, 5, size=(20, 3)):
        fd = np.array([(disp.energy(p + h * e) - disp.energy(p - h * e)) / (2 * h) for e in np.eye(3)])
        g = disp.gradient(p)
        assert np.linalg.norm(g - fd) < 1e-6 * max(np.linalg.norm(g), 1e-3)


def test_hessian_finite_difference(rng):
    disp = _skew_model()
    h = 1e-5
    p = rng.uniform(-3, 3, 3)
    fd = np.array([(disp.gradient(p + h * e) - disp.gradient(p - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(disp.hessian(p), fd, atol=1e-8)


def test_periodicity(rng):
    disp = _skew_model()
    A = disp.lattice.rows
    p = rng.uniform(-4, 4, size=(50, 3))
    n = rng.integers(-5, 6, size=(50, 3))
    assert np.abs(disp.energy(p + n @ A) - disp.energy(p)).max() < 1e-12


@pytest.mark.parametrize("p,red,shift", [
    ((2 * np.pi + 0.1, 0, 0), (0.1, 0, 0), (1, 0, 0)),
    ((0.3, 1.0, 2.0), (0.3, 1.0, 2.0), (0, 0, 0)),
    ((-0.1, 4 * np.pi, 0), (2 * np.pi - 0.1, 0, 0), (-1, 2, 0)),
])
def test_reduce_to_torus(cubic, p, red, shift):
    r, s = reduce_to_torus(cubic.lattice, np.array(p, float))
    np.testing.assert_allclose(r, red, atol=1e-12)
    assert tuple(s) == shift


def test_reduce_roundtrip(rng):
    lat = _skew_model().lattice
    p = rng.uniform(-30, 30, size=(100, 3))
    r, s = reduce_to_torus(lat, p)
    np.testing.assert_allclose(r + s @ lat.rows, p, atol=1e-11)
    f = lat.fractional(r)
    assert f.min() >= 0 and f.max() < 1


def test_energy_range_cubic(cubic):
    lo, hi = energy_range(cubic, 4096)
    assert lo == pytest.approx(-3, abs=1e-3) and hi == pytest.approx(3, abs=1e-3)


def test_energy_range_single_harmonic():
    d = DispersionRelation([[0, 1, 0]], [0.7], [0.2], DirectLattice.cubic())
    lo, hi = energy_range(d, 1000)
    assert lo == pytest.approx(-0.7, abs=1e-3) and hi == pytest.approx(0.7, abs=1e-3)


def test_energy_range_dense_grid_oracle():
    d = DispersionRelation([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]], [1, 1, 1, 0.3], [0] * 4,
                           DirectLattice.cubic())
    lo, hi = energy_range(d)
    t = np.linspace(0, 2 * np.pi, 100, endpoint=False)
    X, Y, Z = np.meshgrid(t, t, t, indexing="ij")
    E = np.cos(X) + np.cos(Y) + np.cos(Z) + 0.3 * np.cos(X + Y)  # 10^6 points
    # refined extrema are at least as extreme as the grid and within grid resolution of it
    assert lo <= E.min() + 1e-12 and hi >= E.max() - 1e-12
    assert E.min() - lo < 2e-3 and hi - E.max() < 2e-3


def test_energy_range_needs_samples(cubic):
    with pytest.raises(ValueError):
        energy_range(cubic, 100)


def test_field_frame(rng):
    for b in list(rng.normal(size=(20, 3))) + [np.array([0, 1.0, 0]), np.array([0, 0, 1.0])]:
        s = FieldSetup.from_direction(b)
        assert abs(np.linalg.norm(s.b_hat) - 1) < 1e-12
        assert max(abs(s.e1 @ s.e2), abs(s.e1 @ s.b_hat), abs(s.e2 @ s.b_hat)) < 1e-12
        np.testing.assert_allclose(np.cross(s.e1, s.e2), s.b_hat, atol=1e-12)


def test_field_zero_rejected():
    with pytest.raises(ValueError):
        FieldSetup.from_direction([0, 0, 0])
