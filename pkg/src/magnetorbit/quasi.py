"""Level lines of quasiperiodic functions on the plane."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .classifier import Thresholds, mean_direction, strip_width, width_plateau
from .exceptions import CriticalPointEncounter, NoIntegralPlane, SeedOffLevel, TooShort
from .planar import PlanarFourier
from .tracer import StepControl, trace_planar


@dataclass(frozen=True)
class QuasiperiodicFunction:
    """f(r) = F(r @ U + phi) with F(x) = sum_k amp_k cos(n_k . x + phase_k).

    ``U`` is 2 x N; its columns are the quasiperiod covectors.
    """

    harmonics: np.ndarray
    amplitudes: np.ndarray
    U: np.ndarray
    phi: np.ndarray = None
    phases: np.ndarray = None

    def __post_init__(self):
        H = np.asarray(self.harmonics)
        if H.ndim != 2 or not np.issubdtype(H.dtype, np.integer) and not np.all(H == np.round(H)):
            raise ValueError("harmonics must be an integer (K, N) array")
        H = H.astype(np.int64)
        U = np.asarray(self.U, float)
        if U.shape != (2, H.shape[1]):
            raise ValueError(f"U must be 2 x {H.shape[1]}")
        if np.linalg.matrix_rank(U) != 2:
            raise ValueError("U must have rank 2")
        a = np.asarray(self.amplitudes, float).reshape(-1)
        if len(a) != len(H):
            raise ValueError("one amplitude per harmonic")
        phi = np.zeros(H.shape[1]) if self.phi is None else np.asarray(self.phi, float).reshape(-1)
        ph = np.zeros(len(H)) if self.phases is None else np.asarray(self.phases, float).reshape(-1)
        if len(phi) != H.shape[1] or len(ph) != len(H):
            raise ValueError("phi needs N entries and phases one per harmonic")
        for name, val in (("harmonics", H), ("amplitudes", a), ("U", U), ("phi", phi), ("phases", ph)):
            object.__setattr__(self, name, val)

    @property
    def N(self) -> int:
        return self.harmonics.shape[1]

    @property
    def scale(self) -> float:
        """Longest quasiperiod in the plane, 2 pi / min |u_j|."""
        return float(2.0 * np.pi / np.linalg.norm(self.U, axis=0).min())

    def torus_value(self, x):
        x = np.asarray(x, float)
        return np.cos(x @ self.harmonics.T + self.phases) @ self.amplitudes

    def planar(self) -> PlanarFourier:
        W = self.harmonics @ self.U.T
        C = self.harmonics @ self.phi + self.phases
        return PlanarFourier(W, self.amplitudes, C, np.zeros((2, 2)), np.zeros(2))

    def with_phi(self, phi):
        return QuasiperiodicFunction(self.harmonics, self.amplitudes, self.U, phi, self.phases)

    @classmethod
    def from_slice(cls, disp, sl):
        """N = 3 reduction of a periodic dispersion restricted to a slice plane."""
        if not disp.is_periodic:
            raise ValueError("the dispersion has no lattice")
        rows = disp.direct.rows
        U = (rows @ sl.setup.frame).T
        return cls(np.asarray(disp.k, np.int64), disp.amp, U, rows @ sl.origin, disp.phase)


def evaluate_qp(qp: QuasiperiodicFunction, r):
    """F(r @ U + phi) by direct summation over the torus harmonics."""
    r = np.asarray(r, float)
    return qp.torus_value(r @ qp.U + qp.phi)


@dataclass
class LevelLine:
    points: np.ndarray
    arclength: np.ndarray
    level: float
    bounded: bool
    status: str = ""
    strip: dict | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def length(self):
        return float(self.arclength[-1] - self.arclength[0])


def trace_level_line(qp: QuasiperiodicFunction, level, seed, l_max, ctl: StepControl = None,
                     direction=1) -> LevelLine:
    """Follow dr/ds = rot90(grad f) on {f = level} from ``seed``."""
    ctl = ctl or StepControl()
    seed = np.asarray(seed, float).reshape(2)
    pf = qp.planar()
    f0 = float(pf.value(seed))
    if abs(f0 - level) > ctl.tol_energy:
        raise SeedOffLevel(f"|f(seed) - level| = {abs(f0 - level):.3e}")
    res = trace_planar(pf, float(level), seed, sign=float(direction), l_max=float(l_max), ctl=ctl, closure=True)
    line = LevelLine(res["R"], res["L"], float(level), res["status"] == "closed", res["status"],
                     diagnostics={"restarts": res["restarts"], "period": res["period"]})
    if res["status"] == "saddle":
        exc = CriticalPointEncounter(f"critical point near {res['R'][-1]}", line)
        raise exc
    return line


def strip_and_direction_test(line, scale=2.0 * np.pi, thresholds: Thresholds = Thresholds(), min_scales=100.0):
    """Strip width and mean direction of an unbounded line; passes when the width plateaus."""
    if isinstance(line, LevelLine):
        P = line.points
    else:
        P = np.asarray(line, float)
    L = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(P, axis=0), axis=1))])
    if L[-1] < min_scales * scale:
        raise TooShort(f"arc length {L[-1]:.4g} below {min_scales:g} quasiperiods ({min_scales * scale:.4g})")
    width, hist = strip_width(P, cell_diameter=scale)
    d = mean_direction(P, cell_diameter=scale)
    out = {"width": float(width), "mean_direction": d, "passes": width_plateau(hist, thresholds.plateau),
           "history": hist}
    if isinstance(line, LevelLine):
        line.strip = out
    return out


_MU_CACHE = {}


def _primitive_vectors(n, m_max):
    key = (n, m_max)
    if key not in _MU_CACHE:
        r = np.arange(-m_max, m_max + 1)
        M = np.array(list(product(r, repeat=n)), dtype=np.int64)
        M = M[np.any(M != 0, axis=1)]
        M = M[np.gcd.reduce(np.abs(M), axis=1) == 1]
        first = M[np.arange(len(M)), np.argmax(M != 0, axis=1)]
        _MU_CACHE[key] = M[first > 0]
    return _MU_CACHE[key]


def integral_plane_numbers(line, qp: QuasiperiodicFunction, m_max=10, tol_angle=1e-3, rule="simplest",
                           return_angle=False):
    """Primitive mu with mu . (d @ U) ~ 0 for the mean direction d of the line.

    ``rule="simplest"`` takes the smallest sum |mu_i| among candidates below
    the tolerance (then the smallest angle); ``rule="argmin"`` takes the
    smallest angle outright.
    """
    if qp.N != 4:
        raise ValueError("integral 3-planes are defined for N = 4 only")
    if isinstance(line, LevelLine):
        d = line.strip["mean_direction"] if line.strip else strip_and_direction_test(line, qp.scale)["mean_direction"]
    else:
        d = np.asarray(line, float)
        if d.ndim == 2:
            d = strip_and_direction_test(d, qp.scale)["mean_direction"]
    w = np.asarray(d, float) @ qp.U
    M = _primitive_vectors(4, int(m_max))
    ang = np.arcsin(np.clip(np.abs(M @ w) / (np.linalg.norm(M, axis=1) * np.linalg.norm(w)), 0.0, 1.0))
    height = np.abs(M).sum(1)
    key = np.round(ang / 1e-12)
    if rule == "simplest":
        ok = np.nonzero(ang < tol_angle)[0]
        if len(ok) == 0:
            b = int(np.argmin(ang))
            raise NoIntegralPlane(f"best angle {ang[b]:.3e} rad", tuple(int(x) for x in M[b]), float(ang[b]))
        sub = M[ok]
        order = np.lexsort((sub[:, 3], sub[:, 2], sub[:, 1], sub[:, 0], key[ok], height[ok]))
        best = ok[order[0]]
    elif rule == "argmin":
        best = np.lexsort((M[:, 3], M[:, 2], M[:, 1], M[:, 0], height, key))[0]
        if ang[best] >= tol_angle:
            raise NoIntegralPlane(f"best angle {ang[best]:.3e} rad", tuple(int(x) for x in M[best]),
                                  float(ang[best]))
    else:
        raise ValueError("rule must be 'simplest' or 'argmin'")
    mu = tuple(int(x) for x in M[best])
    return (mu, float(ang[best])) if return_angle else mu


# ---------------------------------------------------------------------------
# test constructions


def planted_construction(mu0=(1, 0, -1, 0), coupling=0.2, tilt=1e-2, phi=None, embed_seed=0,
                         span=((1, 1, 0, 0), (0, 0, 1, 1))):
    """F = cos(mu0 . x) + coupling * sum_j cos x_j on a plane tilted away from an integral one.

    The integral plane is spanned by the integer vectors ``span``; the
    embedding is rotated out of it by ``tilt`` rad along a direction drawn
    from ``embed_seed``.  Returns the function and the planted direction d0
    (unit, orthogonal to U mu0).
    """
    mu0 = np.asarray(mu0, np.int64)
    B = np.asarray(span, float)
    Qm, _ = np.linalg.qr(B.T)
    E = Qm.T  # orthonormal rows spanning the integral plane
    comp = np.linalg.svd(E, full_matrices=True)[2][2:]
    G = np.random.default_rng(embed_seed).standard_normal((2, 2)) @ comp
    G *= tilt / np.linalg.norm(G, 2)
    U = E + G
    H = np.vstack([mu0, np.eye(4, dtype=np.int64)])
    amps = np.concatenate([[1.0], np.full(4, coupling)])
    qp = QuasiperiodicFunction(H, amps, U, np.zeros(4) if phi is None else phi)
    n = U @ mu0
    d0 = np.array([-n[1], n[0]]) / np.linalg.norm(n)
    return qp, d0


def level_seed(qp: QuasiperiodicFunction, level, start=(0.0, 0.0), direction=None, reach=None):
    """Root of f - level on a ray from ``start`` (default along U mu-like gradient)."""
    from scipy import optimize
    pf = qp.planar()
    start = np.asarray(start, float)
    if direction is None:
        g = pf.gradient(start)
        direction = g if np.linalg.norm(g) > 0 else np.array([1.0, 0.0])
    d = np.asarray(direction, float) / np.linalg.norm(direction)
    reach = reach or qp.scale
    t = np.linspace(-reach, reach, 2049)
    vals = pf.value(start + t[:, None] * d) - level
    idx = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]
    if len(idx) == 0:
        raise SeedOffLevel("no level crossing on the seed ray")
    i = idx[np.argmin(np.abs(t[idx]))]
    x = optimize.brentq(lambda s: float(pf.value(start + s * d)) - level, t[i], t[i + 1], xtol=1e-15)
    return start + x * d
