"""Reference dispersion laws used throughout the test corpus and the CLI."""
import numpy as np

from .lattice import DirectLattice, DispersionRelation

_UNIT = np.eye(3, dtype=int)


def cubic_model() -> DispersionRelation:
    """cos px + cos py + cos pz on the simple cubic lattice."""
    return DispersionRelation(_UNIT, np.ones(3), np.zeros(3), DirectLattice.cubic())


def spherical_model(mass: float = 1.0) -> DispersionRelation:
    """Free electrons, eps = |p|^2 / (2 m)."""
    return DispersionRelation(np.zeros((0, 3)), [], [], None, np.eye(3) / mass)


def corrugated_plane_model(c: float = 0.2) -> DispersionRelation:
    """cos pz + c (cos px + cos py): at eps = 0 two warped sheets near pz = +-pi/2."""
    return DispersionRelation(_UNIT[[2, 0, 1]], [1.0, c, c], np.zeros(3), DirectLattice.cubic())


def open_sheet_model(cx: float = 0.2, cz: float = 0.3) -> DispersionRelation:
    """cos py + cz cos pz + cx cos px.

    At eps = 0 and B along z every section is a pair of warped lines running
    along px, so all trajectories are periodic open ones with shift (1, 0, 0).
    """
    return DispersionRelation(_UNIT[[1, 2, 0]], [1.0, cz, cx], np.zeros(3), DirectLattice.cubic())


def ridge_model(c: float = 0.3) -> DispersionRelation:
    """cos(px + py) + c cos(px - py): open lines along (1, -1, 0) for B along z."""
    return DispersionRelation([[1, 1, 0], [1, -1, 0]], [1.0, c], [0.0, 0.0], DirectLattice.cubic())


def two_pocket_model() -> DispersionRelation:
    """cos 2px + cos py + cos pz: two hole-free maxima per cell, at px = 0 and pi."""
    return DispersionRelation([[2, 0, 0], [0, 1, 0], [0, 0, 1]], np.ones(3), np.zeros(3),
                              DirectLattice.cubic())


MODELS = {
    "cubic": cubic_model,
    "spherical": spherical_model,
    "corrugated_plane": corrugated_plane_model,
    "open_sheet": open_sheet_model,
    "ridge": ridge_model,
    "two_pocket": two_pocket_model,
}
