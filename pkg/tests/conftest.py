import numpy as np
import pytest
from scipy.spatial import cKDTree

from magnetorbit.models import MODELS


def densify(P, spacing=2e-4):
    """Linear resampling so vertex gaps do not dominate point-set distances."""
    P = np.asarray(P, float)
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    L = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.linspace(0, L[-1], max(int(L[-1] / spacing), 2))
    return np.column_stack([np.interp(t, L, P[:, k]) for k in range(P.shape[1])])


def _cloud(curves, spacing):
    if isinstance(curves, np.ndarray) and curves.ndim == 2:
        curves = [curves]
    return np.vstack([densify(c, spacing) for c in curves])


def closed(P):
    P = np.asarray(P, float)
    return np.vstack([P, P[:1]])


def hausdorff(A, B, spacing=2e-4):
    """Symmetric Hausdorff distance between two sets of polylines (arrays or lists of arrays)."""
    A, B = _cloud(A, spacing), _cloud(B, spacing)
    return max(cKDTree(B).query(A)[0].max(), cKDTree(A).query(B)[0].max())


@pytest.fixture(scope="session")
def cubic():
    return MODELS["cubic"]()


@pytest.fixture(scope="session")
def sphere():
    return MODELS["spherical"]()


@pytest.fixture(scope="session")
def corrugated():
    return MODELS["corrugated_plane"]()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
