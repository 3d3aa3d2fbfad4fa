"""Topological classification of open trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .exceptions import NoIntegralPlane, TooShort
from .lattice import DirectLattice, FieldSetup
from .tracer import ClosureTag, Trajectory

CLOSED = "Closed"
PERIODIC = "PeriodicOpen"
REGULAR = "TopologicallyRegular"
CHAOTIC = "Chaotic"
UNDETERMINED = "Undetermined"


@dataclass
class TrajectoryClass:
    kind: str
    mean_direction: np.ndarray | None = None
    strip_width: float | None = None
    m: tuple | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "kind": self.kind,
            "mean_direction": None if self.mean_direction is None else [float(x) for x in self.mean_direction],
            "strip_width": self.strip_width,
            "m": None if self.m is None else [int(x) for x in self.m],
            "residuals": self.diagnostics.get("residuals", {}),
            "trace_length": self.diagnostics.get("trace_length"),
        }


@dataclass(frozen=True)
class Thresholds:
    plateau: float = 0.05
    power: float = 0.1
    tol_angle: float = 1e-3
    m_max: int = 10
    spread: float = 0.05
    min_cells: float = 10.0
    rule: str = "simplest"


def _planar(traj):
    """Planar points, arc length and cell diameter of a trajectory or polyline."""
    if isinstance(traj, Trajectory):
        cell = traj.disp.lattice.cell_diameter if traj.disp is not None and traj.disp.lattice is not None else None
        return np.asarray(traj.plane, float), np.asarray(traj.arclength, float), cell
    P = np.asarray(traj, float)
    L = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(P, axis=0), axis=1))])
    return P, L, None


def _dyadic_prefixes(L, min_len):
    total = L[-1] - L[0]
    ls = []
    l = total
    while l >= min_len and len(ls) < 60:
        ls.append(l)
        l /= 2.0
    return np.array(ls[::-1])


def strip_width(traj, cell_diameter=None, n_resample=1 << 15):
    """Largest transverse deviation from the least-squares line, at dyadic prefixes.

    Returns (width, [(l, width_l), ...]).
    """
    P, L, cell = _planar(traj)
    cell = cell_diameter or cell or 2.0 * np.pi
    total = L[-1] - L[0]
    if total < 10.0 * cell:
        raise TooShort(f"arc length {total:.4g} below 10 cell diameters ({10 * cell:.4g})")
    lq = np.linspace(L[0], L[-1], min(n_resample, max(len(L), 1024)))
    Q = np.column_stack([np.interp(lq, L, P[:, 0]), np.interp(lq, L, P[:, 1])])
    hist = []
    for l in _dyadic_prefixes(L, cell):
        X = Q[lq <= L[0] + l * (1 + 1e-12)]
        c = X.mean(0)
        D = X - c
        w, V = np.linalg.eigh(D.T @ D)
        normal = V[:, 0]
        hist.append((float(l), float(np.abs(D @ normal).max())))
    return hist[-1][1], hist


def _secant(P, L, l):
    i = min(int(np.searchsorted(L, L[0] + l)), len(L) - 1)
    d = P[i] - P[0]
    return d / max(np.linalg.norm(d), 1e-300)


def mean_direction(traj, cell_diameter=None, return_spread=False, n_boot=4):
    """Unit secant direction in space; optional spread over the last dyadic prefixes."""
    if isinstance(traj, Trajectory) and traj.closure.kind == ClosureTag.PERIODIC:
        g = np.asarray(traj.closure.lattice_shift, float) @ traj.disp.lattice.rows
        d = g / np.linalg.norm(g)
        return (d, 0.0) if return_spread else d
    P, L, cell = _planar(traj)
    cell = cell_diameter or cell or 2.0 * np.pi
    total = L[-1] - L[0]
    if total < 10.0 * cell:
        raise TooShort(f"arc length {total:.4g} below 10 cell diameters")
    final = _secant(P, L, total)
    spread = 0.0
    for k in range(1, n_boot + 1):
        d = _secant(P, L, total / 2 ** k)
        spread = max(spread, float(np.arccos(np.clip(abs(d @ final), -1.0, 1.0))))
    if isinstance(traj, Trajectory):
        out = traj.slice.setup.frame @ final
    else:
        out = final
    return (out, spread) if return_spread else out


def _primitive_triples(m_max):
    r = np.arange(-m_max, m_max + 1)
    M = np.array(list(product(r, r, r)), dtype=np.int64)
    M = M[np.any(M != 0, axis=1)]
    g = np.gcd.reduce(np.abs(M), axis=1)
    M = M[g == 1]
    # sign: first nonzero component positive
    first = M[np.arange(len(M)), np.argmax(M != 0, axis=1)]
    return M[first > 0]


def topological_numbers(direction, setup: FieldSetup, direct, m_max=10, tol_angle=1e-3, return_angle=False,
                        rule="simplest"):
    """Primitive m whose plane N(m) = m @ direct.rows cuts the field plane along ``direction``.

    ``rule="simplest"`` returns the candidate of smallest sum |m_i| among
    those within ``tol_angle`` (then smallest angle, then lexicographic);
    ``rule="argmin"`` returns the closest candidate with the same tie order.
    """
    if not isinstance(direct, DirectLattice):
        direct = DirectLattice(direct)
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    M = _primitive_triples(m_max)
    N = M @ direct.rows
    C = np.cross(setup.b_hat, N)
    nc = np.linalg.norm(C, axis=1)
    ok = nc >= 1e-9
    M, C, nc = M[ok], C[ok], nc[ok]
    C = C / nc[:, None]
    cosang = np.clip(np.abs(C @ d), 0.0, 1.0)
    ang = np.arccos(cosang)
    height = np.abs(M).sum(1)
    key = np.round(ang / 1e-12)
    if rule == "simplest":
        inside = ang < tol_angle
        order = np.lexsort((M[:, 2], M[:, 1], M[:, 0], key, height, ~inside))
    elif rule == "argmin":
        order = np.lexsort((M[:, 2], M[:, 1], M[:, 0], height, key))
    else:
        raise ValueError("rule must be 'simplest' or 'argmin'")
    best = order[0]
    m = tuple(int(x) for x in M[best])
    if ang[best] >= tol_angle:
        best = int(np.argmin(ang))
        raise NoIntegralPlane(f"best angle {ang[best]:.3e} rad for m = {tuple(int(x) for x in M[best])}",
                              tuple(int(x) for x in M[best]), float(ang[best]))
    return (m, float(ang[best])) if return_angle else m


def width_plateau(hist, tol=0.05, atol=1e-9):
    """True when the last three dyadic widths agree within ``tol`` of the largest.

    Widths below ``atol`` (round-off of a straight line) count as zero.
    """
    last = np.array([w for _, w in hist[-3:]])
    if len(last) < 3:
        return False
    if last.max() <= atol:
        return True
    return bool(last.max() - last.min() <= tol * last.max())


def _power_exponent(hist):
    """Slope of log width against log l over the last decade of the history."""
    h = np.array(hist)
    l, w = h[:, 0], h[:, 1]
    keep = (l >= l[-1] / 10.0) & (w > 0)
    if keep.sum() < 2:
        return 0.0, np.inf
    A = np.column_stack([np.log(l[keep]), np.ones(keep.sum())])
    coef, *_ = np.linalg.lstsq(A, np.log(w[keep]), rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - np.log(w[keep])) ** 2)))
    return float(coef[0]), res


def classify_trajectory(traj: Trajectory, direct=None, setup: FieldSetup | None = None,
                        thresholds: Thresholds = Thresholds()) -> TrajectoryClass:
    setup = setup or traj.slice.setup
    direct = direct or traj.disp.direct
    length = float(traj.length)
    diag = {"trace_length": length, "residuals": {}}
    if traj.closure.kind == ClosureTag.CLOSED:
        return TrajectoryClass(CLOSED, diagnostics=diag)
    if traj.closure.kind == ClosureTag.PERIODIC:
        return TrajectoryClass(PERIODIC, mean_direction(traj), m=None,
                               diagnostics={**diag, "lattice_shift": list(traj.closure.lattice_shift)})
    try:
        width, hist = strip_width(traj)
        direction, spread = mean_direction(traj, return_spread=True)
    except TooShort as exc:
        diag["reason"] = str(exc)
        return TrajectoryClass(UNDETERMINED, diagnostics=diag)
    diag["width_history"] = hist
    diag["direction_spread"] = spread
    if width_plateau(hist, thresholds.plateau):
        try:
            m, ang = topological_numbers(direction, setup, direct, thresholds.m_max, thresholds.tol_angle,
                                         return_angle=True, rule=thresholds.rule)
            diag["residuals"]["angle"] = ang
            return TrajectoryClass(REGULAR, direction, float(width), m, diag)
        except NoIntegralPlane as exc:
            diag["residuals"]["angle"] = exc.angle
    power, res = _power_exponent(hist)
    diag["residuals"]["width_power"] = res
    diag["width_power"] = power
    if power > thresholds.power:
        diag["direction_unreliable"] = spread > thresholds.spread
        return TrajectoryClass(CHAOTIC, direction, None, None, diag)
    return TrajectoryClass(UNDETERMINED, direction, float(width), None, diag)


class TrajectoryClassifier(ClassifierMixin, BaseEstimator):
    """Rule-based classifier with sklearn's interface; ``fit`` only records the classes."""

    def __init__(self, plateau=0.05, power=0.1, tol_angle=1e-3, m_max=10, rule="simplest"):
        self.plateau = plateau
        self.power = power
        self.tol_angle = tol_angle
        self.m_max = m_max
        self.rule = rule

    def fit(self, X=None, y=None):
        self.classes_ = np.array([CLOSED, PERIODIC, REGULAR, CHAOTIC, UNDETERMINED])
        return self

    def _thresholds(self):
        return Thresholds(self.plateau, self.power, self.tol_angle, self.m_max, rule=self.rule)

    def classify(self, trajectories):
        th = self._thresholds()
        return [classify_trajectory(t, thresholds=th) for t in trajectories]

    def predict(self, trajectories):
        return np.array([c.kind for c in self.classify(trajectories)])
