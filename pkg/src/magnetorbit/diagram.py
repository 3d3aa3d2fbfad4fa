"""Angular diagrams: regime of the trajectories as a function of the field direction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, cKDTree
from sklearn.base import BaseEstimator

from .classifier import CHAOTIC, CLOSED, PERIODIC, REGULAR, Thresholds, classify_trajectory
from .contours import marching_squares
from .exceptions import EmptyLevelSet, MagnetorbitError
from .lattice import DispersionRelation, FieldSetup
from .tracer import PlaneSlice, StepControl, integrate_trajectory, slice_function

CLOSED_ONLY = "ClosedOnly"
PERIODIC_OPEN = "PeriodicOpen"
TOP_REGULAR = "TopologicallyRegular"
CHAOTIC_CANDIDATE = "ChaoticCandidate"
UNDETERMINED = "Undetermined"

_GOLDEN = np.pi * (3.0 - np.sqrt(5.0))


@dataclass
class DirectionGrid:
    points: np.ndarray
    resolution: int = 0

    def __post_init__(self):
        P = np.asarray(self.points, float).reshape(-1, 3)
        if len(P) == 0:
            raise ValueError("empty direction grid")
        nrm = np.linalg.norm(P, axis=1)
        if np.any(np.abs(nrm - 1.0) > 1e-9):
            raise ValueError("directions must be unit vectors")
        self.points = P
        self.resolution = len(P)

    def __len__(self):
        return len(self.points)

    def spherical(self):
        """(theta, phi) of every point."""
        P = self.points
        return np.arccos(np.clip(P[:, 2], -1, 1)), np.arctan2(P[:, 1], P[:, 0])


def _rotate_pole_to(P, center):
    c = np.asarray(center, float)
    c = c / np.linalg.norm(c)
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, c)
    s, co = np.linalg.norm(v), float(z @ c)
    if s < 1e-15:
        return P if co > 0 else P * np.array([1.0, -1.0, -1.0])
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]]) / s
    R = np.eye(3) + s * K + (1 - co) * K @ K
    return P @ R.T


def _drop_antipodes(P, tol=1e-9):
    keep = []
    tree = None
    for i, p in enumerate(P):
        if keep:
            tree = cKDTree(P[keep]) if tree is None or tree.n != len(keep) else tree
            d_same, _ = tree.query(p)
            if d_same < tol:
                raise ValueError(f"direction {i} duplicates an earlier one")
            d_anti, _ = tree.query(-p)
            if d_anti < tol:
                continue
        keep.append(i)
    return P[keep]


def direction_grid(resolution=None, points=None, center=None, cap=None) -> DirectionGrid:
    """Spherical Fibonacci layout, or an explicit list, or a Fibonacci cap.

    With ``cap`` (angular radius in rad) the points fill the cap around
    ``center`` with equal-area spacing.
    """
    if points is not None:
        P = np.asarray(points, float).reshape(-1, 3)
        return DirectionGrid(_drop_antipodes(P))
    if resolution is None or resolution < 12:
        raise ValueError("resolution must be at least 12")
    n = int(resolution)
    i = np.arange(n) + 0.5
    if cap is None:
        z = 1.0 - 2.0 * i / n
    else:
        if not 0 < cap < np.pi / 2:
            raise ValueError("cap radius must be in (0, pi/2)")
        z = 1.0 - (1.0 - np.cos(cap)) * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = _GOLDEN * np.arange(n)
    P = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    if center is not None:
        P = _rotate_pole_to(P, center)
    P /= np.linalg.norm(P, axis=1)[:, None]
    return DirectionGrid(_drop_antipodes(P))


def grid_adjacency(points):
    """Edges of the spherical Delaunay triangulation, long edges across holes removed."""
    P = np.asarray(points, float)
    n = len(P)
    if n < 4:
        return np.array([[i, j] for i in range(n) for j in range(i + 1, n)], dtype=int).reshape(-1, 2)
    try:
        simplices = ConvexHull(P).simplices
    except Exception:
        # degenerate layouts (all points on one great circle): nearest neighbours
        _, nb = cKDTree(P).query(P, k=min(5, n))
        simplices = [(i, j, j) for i in range(n) for j in nb[i, 1:]]
    E = set()
    for simplex in simplices:
        for a, b in ((0, 1), (1, 2), (0, 2)):
            i, j = int(simplex[a]), int(simplex[b])
            if i != j:
                E.add((min(i, j), max(i, j)))
    E = np.array(sorted(E), dtype=int).reshape(-1, 2)
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", P[E[:, 0]], P[E[:, 1]]), -1, 1))
    nn, _ = cKDTree(P).query(P, k=2)
    spacing = float(np.median(2 * np.arcsin(np.clip(nn[:, 1] / 2, 0, 1))))
    return E[ang <= 3.0 * spacing]


# ---------------------------------------------------------------------------
# rationality of a direction


_INT_CACHE = {}


def _integer_vectors(bound):
    if bound not in _INT_CACHE:
        r = np.arange(-bound, bound + 1)
        N = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
        first = N[np.arange(len(N)), np.argmax(N != 0, axis=1)]
        N = N[first > 0]
        q = np.abs(N).max(1)
        order = np.argsort(q, kind="stable")
        _INT_CACHE[bound] = (N[order], q[order])
    return _INT_CACHE[bound]


def rationality(b, rows, bound=50, tol_angle=1e-6):
    """Smallest q such that some reciprocal vector with integer coordinates of
    size <= q lies within ``tol_angle`` of the plane orthogonal to b; 0 if none."""
    b = np.asarray(b, float)
    b = b / np.linalg.norm(b)
    N, q = _integer_vectors(int(bound))
    G = N @ np.asarray(rows, float)
    s = np.abs(G @ b) / np.linalg.norm(G, axis=1)
    hit = np.nonzero(s < np.sin(tol_angle))[0]
    return int(q[hit[0]]) if len(hit) else 0


# ---------------------------------------------------------------------------
# per-direction scan


@dataclass(frozen=True)
class ScanBudget:
    l_max: float = 1e4
    n_slices: int = 8
    n_branches: int = 4
    grid_n: int = 128
    max_window: float = 1e3
    tracer: StepControl = StepControl(tol=1e-8, max_arc_step=0.5, saddle_policy="offset")
    thresholds: Thresholds = Thresholds()

    def __post_init__(self):
        if not (self.l_max > 0 and self.n_slices >= 1 and self.n_branches >= 1):
            raise ValueError("budget entries must be positive")


@dataclass
class DiagramCell:
    direction: np.ndarray
    regime: str
    m: tuple | None = None
    rationality: int = 0
    budget: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def theta(self):
        return float(np.arccos(np.clip(self.direction[2], -1, 1)))

    @property
    def phi(self):
        return float(np.arctan2(self.direction[1], self.direction[0]))


def _canonical(b):
    """Representative of {b, -b}: first nonzero component positive."""
    b = np.asarray(b, float)
    b = b / np.linalg.norm(b)
    k = int(np.argmax(np.abs(b) > 1e-15))
    return -b if b[k] < 0 else b


def _branch_seeds(pf, level, half, grid_n, max_half, max_nodes=512):
    """Contours in square windows around the slice origin, growing until one is found."""
    while half <= max_half:
        du = max(2.0 * np.pi / grid_n, 2.0 * half / max_nodes)
        u = np.arange(-half + 0.3819660112501051 * du, half, du)
        try:
            polys = marching_squares(pf, level, u, u)
        except EmptyLevelSet:
            half *= 4.0
            continue
        return sorted(polys, key=lambda p: (-p.length, p.points[0, 0], p.points[0, 1]))
    return []


def _aggregate(kinds, ms):
    if not kinds:
        return UNDETERMINED, None
    if CHAOTIC in kinds:
        return CHAOTIC_CANDIDATE, None
    regular = sorted({m for k, m in zip(kinds, ms) if k == REGULAR})
    if len(regular) == 1:
        return TOP_REGULAR, regular[0]
    if len(regular) > 1:
        return UNDETERMINED, None
    if PERIODIC in kinds:
        return PERIODIC_OPEN, None
    if all(k == CLOSED for k in kinds):
        return CLOSED_ONLY, None
    return UNDETERMINED, None


def scan_direction(disp: DispersionRelation, eps_f, b, budget: ScanBudget = ScanBudget()) -> DiagramCell:
    """Classify the trajectories of a stratified set of slices and branches for one direction."""
    b_in = np.asarray(b, float) / np.linalg.norm(b)
    setup = FieldSetup.from_direction(_canonical(b_in))
    lat = disp.lattice
    rows = lat.rows if lat is not None else None
    rat = rationality(setup.b_hat, rows) if rows is not None else 0
    diag = {"l_max": budget.l_max, "branches": []}
    try:
        if lat is None:
            thick, cell = 0.0, 2.0 * np.pi
        else:
            thick, cell = float(np.abs(rows @ setup.b_hat).max()), float(lat.cell_diameter)
        kinds, ms = [], []
        for k in range(budget.n_slices):
            sl = PlaneSlice(setup, thick * k / budget.n_slices)
            pf = slice_function(disp, sl)
            polys = _branch_seeds(pf, eps_f, cell / 2, budget.grid_n, budget.max_window)
            seen = None
            n_done = 0
            for p in polys:
                if n_done >= budget.n_branches:
                    break
                r0 = p.points[len(p.points) // 2]
                if seen is not None and seen.query(r0)[0] < budget.tracer.max_arc_step:
                    continue
                try:
                    tr = integrate_trajectory(disp, sl, sl.to_space(r0), tol=budget.tracer, energy=eps_f,
                                              l_max=budget.l_max)
                except MagnetorbitError as exc:
                    diag["branches"].append({"slice": k, "error": type(exc).__name__})
                    continue
                c = classify_trajectory(tr, thresholds=budget.thresholds)
                kinds.append(c.kind)
                ms.append(c.m)
                diag["branches"].append({"slice": k, "kind": c.kind, "m": c.m})
                pts = tr.plane if seen is None else np.vstack([seen.data, tr.plane])
                seen = cKDTree(pts)
                n_done += 1
        regime, m = _aggregate(kinds, ms)
    except MagnetorbitError as exc:
        regime, m = UNDETERMINED, None
        diag["error"] = f"{type(exc).__name__}: {exc}"
    return DiagramCell(b_in, regime, m, rat, budget.l_max, diag)


def scan_directions(disp, eps_f, grid, budget: ScanBudget = ScanBudget(), threads=1):
    """Order-preserving parallel map of :func:`scan_direction` over a grid."""
    if not isinstance(grid, DirectionGrid):
        grid = direction_grid(points=grid)
    jobs = (delayed(scan_direction)(disp, eps_f, b, budget) for b in grid.points)
    return list(Parallel(n_jobs=int(threads), backend="threading")(jobs))


# ---------------------------------------------------------------------------
# zones


@dataclass
class Zone:
    m: tuple
    members: list
    boundary: np.ndarray
    frontier: list = field(default_factory=list)


def _order_loop(Q):
    if len(Q) < 3:
        return Q
    c = Q.mean(0)
    c /= np.linalg.norm(c)
    e1 = np.cross(c, [0.0, 0.0, 1.0] if abs(c[2]) < 0.9 else [1.0, 0.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(c, e1)
    ang = np.arctan2(Q @ e2, Q @ e1)
    return Q[np.argsort(ang, kind="stable")]


def extract_zones(cells, adjacency=None):
    """Connected components of TopologicallyRegular cells sharing the same m."""
    P = np.array([c.direction for c in cells]).reshape(-1, 3)
    if adjacency is None:
        adjacency = grid_adjacency(P) if len(P) >= 2 else np.zeros((0, 2), int)
    E = np.asarray(adjacency, int).reshape(-1, 2)
    label = [c.m if c.regime == TOP_REGULAR else None for c in cells]
    n = len(cells)
    if n == 0:
        return []
    same = np.array([label[i] is not None and label[i] == label[j] for i, j in E], dtype=bool)
    G = coo_matrix((np.ones(same.sum()), (E[same, 0], E[same, 1])), shape=(n, n))
    _, comp = connected_components(G, directed=False)
    zones = []
    for c in np.unique(comp):
        members = [int(i) for i in np.nonzero(comp == c)[0] if label[i] is not None]
        if not members:
            continue
        mset = set(members)
        mids, frontier = [], set()
        for i, j in E:
            if (i in mset) != (j in mset):
                mid = P[i] + P[j]
                mids.append(mid / np.linalg.norm(mid))
                frontier.add(int(i if i in mset else j))
        assert all(label[i] == label[members[0]] for i in members)
        zones.append(Zone(label[members[0]], members, _order_loop(np.array(mids).reshape(-1, 3)),
                          sorted(frontier)))
    zones.sort(key=lambda z: (-len(z.members), z.members[0]))
    return zones


def interior_members(zone: Zone, adjacency, depth=1):
    """Members whose graph distance to the zone frontier exceeds ``depth``."""
    E = np.asarray(adjacency, int).reshape(-1, 2)
    nbr = {}
    for i, j in E:
        nbr.setdefault(int(i), set()).add(int(j))
        nbr.setdefault(int(j), set()).add(int(i))
    mset = set(zone.members)
    outer = {i for i in zone.members if any(k not in mset for k in nbr.get(i, ()))}
    ring, seen = set(outer), set(outer)
    for _ in range(depth):
        ring = {k for i in ring for k in nbr.get(i, ()) if k in mset and k not in seen}
        seen |= ring
    return sorted(mset - seen)


class AngularDiagram(BaseEstimator):
    """Fixed-energy scan of field directions; ``fit(disp)`` fills ``cells_`` and ``zones_``."""

    def __init__(self, eps_f=0.0, resolution=100, center=None, cap=None, l_max=1e4, n_slices=8,
                 n_branches=4, threads=1):
        self.eps_f = eps_f
        self.resolution = resolution
        self.center = center
        self.cap = cap
        self.l_max = l_max
        self.n_slices = n_slices
        self.n_branches = n_branches
        self.threads = threads

    def fit(self, disp, y=None):
        self.grid_ = direction_grid(self.resolution, center=self.center, cap=self.cap)
        budget = ScanBudget(l_max=self.l_max, n_slices=self.n_slices, n_branches=self.n_branches)
        self.cells_ = scan_directions(disp, self.eps_f, self.grid_, budget, self.threads)
        self.adjacency_ = grid_adjacency(self.grid_.points)
        self.zones_ = extract_zones(self.cells_, self.adjacency_)
        return self

    def predict(self, directions=None):
        return np.array([c.regime for c in self.cells_])
