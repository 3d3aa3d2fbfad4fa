"""Trajectories of the magnetic flow as level lines in planes orthogonal to B."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np
from scipy import optimize

from . import planar
from .exceptions import EmptyLevelSet, NewtonNoConvergence, OddEuler, SaddleEncounter, SeedOffSurface
from .lattice import DispersionRelation, FieldSetup, reduce_to_torus
from .planar import PlanarFourier


@dataclass(frozen=True)
class StepControl:
    """Integrator tolerances.

    ``tol`` bounds the local Dormand-Prince error of one step (absolute, in
    momentum units); ``max_arc_step`` caps the chord between stored samples.
    """

    tol: float = 1e-10
    max_arc_step: float = 0.05
    tol_energy: float = 1e-9
    tol_plane: float = 1e-9
    tol_sing: float = 1e-7
    tol_close: float = 1e-6
    tol_dir: float = 1e-6
    proj_tol: float = 1e-14
    saddle_policy: str = "stop"
    max_restarts: int = 10000

    def __post_init__(self):
        for name in ("tol", "max_arc_step", "tol_energy", "tol_plane", "tol_sing", "tol_close", "tol_dir"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.saddle_policy not in ("stop", "offset"):
            raise ValueError("saddle_policy must be 'stop' or 'offset'")


@dataclass(frozen=True)
class PlaneSlice:
    setup: FieldSetup
    h: float
    origin: np.ndarray = None

    def __post_init__(self):
        if self.origin is None:
            origin = self.h * self.setup.b_hat
        else:
            origin = np.asarray(self.origin, float)
            # keep only the in-plane part of a user offset
            origin = origin - (origin @ self.setup.b_hat - self.h) * self.setup.b_hat
        object.__setattr__(self, "origin", origin)

    def to_plane(self, p):
        return (np.asarray(p, float) - self.origin) @ self.setup.frame

    def to_space(self, r):
        return self.origin + np.asarray(r, float) @ self.setup.frame.T


@dataclass(frozen=True)
class ClosureTag:
    kind: str
    lattice_shift: tuple = (0, 0, 0)
    period_s: float | None = None

    CLOSED = "ClosedCompact"
    PERIODIC = "PeriodicOpen"
    OPEN = "OpenUndetermined"


@dataclass
class Trajectory:
    points: np.ndarray
    params: np.ndarray
    arclength: np.ndarray
    energy: float
    slice: PlaneSlice
    closure: ClosureTag
    plane: np.ndarray
    disp: DispersionRelation | None = None
    status: str = "s_max"
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.params)

    @property
    def velocities(self):
        if self.disp is None:
            raise ValueError("trajectory has no dispersion attached")
        v = self.__dict__.get("_vel")
        if v is None:
            v = self.disp.gradient(self.points)
            self.__dict__["_vel"] = v
        return v

    @property
    def length(self) -> float:
        return float(self.arclength[-1] - self.arclength[0])

    @property
    def is_periodic(self) -> bool:
        return self.closure.kind in (ClosureTag.CLOSED, ClosureTag.PERIODIC)


@dataclass(frozen=True)
class SingularPoint:
    location: np.ndarray
    kind: str
    index: int


def slice_function(disp: DispersionRelation, sl: PlaneSlice) -> PlanarFourier:
    """g(u, v) = eps(origin + u e1 + v e2) as a planar Fourier sum."""
    return PlanarFourier.from_dispersion(disp, sl.origin, sl.setup.frame)


def lattice_maps(disp: DispersionRelation, setup: FieldSetup, tol=1e-8):
    """Matrices used by the kernel to recognise in-plane lattice returns."""
    lat = disp.lattice
    if lat is None or not disp.is_periodic:
        return None
    E = setup.frame
    P = disp.direct.rows @ E / (2.0 * np.pi)
    AE = lat.rows @ E
    ab = lat.rows @ setup.b_hat
    return (np.ascontiguousarray(P), np.ascontiguousarray(AE), np.ascontiguousarray(ab),
            tol * float(np.abs(lat.rows).max()))


_NO_LAT = (np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), 0.0)


def _restart_past_saddle(pf: PlanarFourier, r_stop, r_prev, sign, ctl: StepControl, energy_sign=1.0):
    """Point on the outgoing separatrix branch just past a saddle.

    The branch is the one bounding the same sector of {g > level} as the
    incoming branch (``energy_sign`` > 0), i.e. the limit of level lines at
    level + 0 on the side of increasing g.
    """
    r = np.array(r_stop, float)
    for _ in range(20):
        H = pf.hessian(r)
        g = pf.gradient(r)
        try:
            d = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        r = r - d
        if np.linalg.norm(d) < 1e-15:
            break
    H = pf.hessian(r)
    J = sign * np.array([[H[1, 0], H[1, 1]], [-H[0, 0], -H[0, 1]]])
    w, V = np.linalg.eig(J)
    out = np.real(V[:, int(np.argmax(np.real(w)))])
    out /= np.linalg.norm(out)
    inc = np.asarray(r_stop, float) - np.asarray(r_prev, float)
    inc /= max(np.linalg.norm(inc), 1e-300)
    cross = inc[0] * out[1] - inc[1] * out[0]
    if cross * energy_sign * sign < 0:
        out = -out
    return r + 10.0 * ctl.tol_sing * out, r


def trace_planar(pf: PlanarFourier, level, start, *, sign=1.0, s_max=np.inf, l_max=np.inf,
                 ctl: StepControl = StepControl(), closure=True, maps=None, box=None, cap=4096):
    """Run the compiled kernel, restarting past saddles when the policy asks for it.

    Returns a dict with planar points, s, l, status name, shift, period and the
    list of saddle restarts.
    """
    W, A, C, Q, q, c0 = pf.args
    start = np.asarray(start, float)
    g0 = pf.gradient(start)
    sp0 = float(np.hypot(*g0))
    t_ref = sign * np.array([g0[1], -g0[0]]) / max(sp0, 1e-300)
    P, AE, ab, ab_tol = maps if maps is not None else _NO_LAT
    use_box = box is not None
    box_arr = np.asarray(box if use_box else (0.0, 0.0, 0.0, 0.0), float)
    pieces_R, pieces_S, pieces_L = [], [], []
    restarts = []
    cur = start.copy()
    s0 = l0 = 0.0
    while True:
        R, S, L, n, status, shift, period = planar.trace_kernel(
            W, A, C, Q, q, c0, float(level), cur, float(sign), s0, l0, float(s_max), float(l_max),
            ctl.tol, 0.0, ctl.max_arc_step, ctl.tol_sing, ctl.proj_tol,
            start, t_ref, bool(closure), maps is not None, P, AE, ab, ab_tol, ctl.tol_close, ctl.tol_dir,
            box_arr, use_box, int(cap))
        pieces_R.append(R if not pieces_R else R[1:])
        pieces_S.append(S if not pieces_S else S[1:])
        pieces_L.append(L if not pieces_L else L[1:])
        if status == planar.SADDLE and ctl.saddle_policy == "offset" and len(restarts) < ctl.max_restarts and n >= 2:
            nxt, saddle = _restart_past_saddle(pf, R[-1], R[-2], sign, ctl)
            restarts.append((float(S[-1]), saddle))
            cur = nxt
            s0, l0 = float(S[-1]), float(L[-1]) + float(np.hypot(*(nxt - R[-1])))
            pieces_R.append(nxt[None, :])
            pieces_S.append(np.array([s0 + 1e-12 * max(1.0, abs(s0))]))
            pieces_L.append(np.array([l0]))
            s0 = float(pieces_S[-1][0])
            continue
        break
    return {
        "R": np.concatenate(pieces_R), "S": np.concatenate(pieces_S), "L": np.concatenate(pieces_L),
        "status": planar.STATUS_NAMES[int(status)], "shift": np.array(shift, dtype=np.int64),
        "period": float(period), "restarts": restarts,
    }


def _primitive(v):
    v = [int(x) for x in v]
    g = 0
    for x in v:
        g = gcd(g, abs(x))
    if g == 0:
        return tuple(v), 0
    return tuple(x // g for x in v), g


def integrate_trajectory(disp: DispersionRelation, sl: PlaneSlice, seed, s_max=np.inf, tol: StepControl = None,
                         *, energy=None, l_max=np.inf, direction=1, closure=True, box=None):
    """Trace dp/ds = grad(eps) x b_hat from ``seed`` inside the slice plane.

    ``direction=-1`` integrates backwards in s.  ``box`` (umin, umax, vmin,
    vmax) in plane coordinates stops the trace where it leaves that window.
    """
    ctl = tol if tol is not None else StepControl()
    seed = np.asarray(seed, float)
    e_seed = float(disp.energy(seed))
    energy = e_seed if energy is None else float(energy)
    if abs(e_seed - energy) > ctl.tol_energy:
        raise SeedOffSurface(f"|eps(seed) - eps_F| = {abs(e_seed - energy):.3e} exceeds tol_energy")
    if abs(seed @ sl.setup.b_hat - sl.h) > ctl.tol_plane:
        raise SeedOffSurface("seed does not lie in the slice plane")
    if not (np.isfinite(s_max) or np.isfinite(l_max)):
        raise ValueError("either s_max or l_max must be finite")
    pf = slice_function(disp, sl)
    maps = lattice_maps(disp, sl.setup)
    r0 = sl.to_plane(seed)
    res = trace_planar(pf, energy, r0, sign=float(direction), s_max=s_max, l_max=l_max, ctl=ctl,
                       closure=closure, maps=maps, box=box)
    R = res["R"]
    pts = sl.to_space(R)
    if res["status"] == "closed":
        g, mult = _primitive(res["shift"])
        kind = ClosureTag.CLOSED if mult == 0 else ClosureTag.PERIODIC
        tag = ClosureTag(kind, g, res["period"])
    else:
        tag = ClosureTag(ClosureTag.OPEN, (0, 0, 0), None)
    traj = Trajectory(pts, res["S"], res["L"], energy, sl, tag, R, disp, res["status"],
                      {"restarts": res["restarts"], "direction": int(direction)})
    if res["status"] == "saddle":
        raise SaddleEncounter(f"|grad eps x b| < {ctl.tol_sing:g} at s = {res['S'][-1]:.6g}", traj)
    return traj


def detect_closure(traj: Trajectory, lattice=None, tol_close=1e-6) -> ClosureTag:
    """Smallest s-period with p(s + S) = p(s) + g, found by a section through the seed."""
    if traj.status == "closed" and traj.closure.kind != ClosureTag.OPEN:
        return traj.closure
    R = traj.plane
    setup = traj.slice.setup
    sgn = traj.diagnostics.get("direction", 1)
    # planar tangent of the flow at the seed
    fl = sgn * np.cross(traj.velocities[0], setup.b_hat) @ setup.frame
    t0 = fl / np.linalg.norm(fl)
    d = R - R[0]
    if traj.disp is not None and traj.disp.is_periodic:
        P, AE, ab, ab_tol = lattice_maps(traj.disp, setup)
        n = np.floor(d @ P.T + 0.5)
        inplane = np.abs(n @ ab) <= ab_tol * (1 + np.abs(n).sum(1))
        g2 = n @ AE
    else:
        n = np.zeros((len(R), 3))
        inplane = np.ones(len(R), bool)
        g2 = np.zeros_like(R)
    u = d - g2
    sig = u @ t0
    # compare consecutive samples against the same candidate shift
    sig_prev = (R[:-1] - R[0] - g2[1:]) @ t0
    chord = np.linalg.norm(np.diff(R, axis=0), axis=1)
    cand = np.nonzero(inplane[1:] & (sig_prev < 0) & (sig[1:] >= 0)
                      & (np.linalg.norm(u[1:], axis=1) <= 2 * chord + tol_close))[0] + 1
    for j in cand:
        # cubic Hermite location of the crossing between samples j-1 and j
        s_a, s_b = traj.params[j - 1], traj.params[j]
        fa = sgn * np.cross(traj.velocities[j - 1], setup.b_hat) @ setup.frame
        fb = sgn * np.cross(traj.velocities[j], setup.b_hat) @ setup.frame
        hs = s_b - s_a
        pa, pb = R[j - 1] - R[0] - g2[j], R[j] - R[0] - g2[j]

        def herm(t):
            h00 = 2 * t ** 3 - 3 * t ** 2 + 1
            h10 = t ** 3 - 2 * t ** 2 + t
            h01 = -2 * t ** 3 + 3 * t ** 2
            h11 = t ** 3 - t ** 2
            return h00 * pa + h10 * hs * fa + h01 * pb + h11 * hs * fb

        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if herm(mid) @ t0 < 0:
                lo = mid
            else:
                hi = mid
        x = herm(hi)
        if np.linalg.norm(x) < tol_close:
            g, mult = _primitive(n[j])
            kind = ClosureTag.CLOSED if mult == 0 else ClosureTag.PERIODIC
            return ClosureTag(kind, g, float(s_a + hi * hs - traj.params[0]))
    return ClosureTag(ClosureTag.OPEN, (0, 0, 0), None)


def _newton_singular(disp, setup, eps_f, P0, iters=60, tol=1e-12):
    e1, e2 = setup.e1, setup.e2
    p = np.array(P0, float)
    ok = np.zeros(len(p), bool)
    for _ in range(iters):
        g = disp.gradient(p)
        H = disp.hessian(p)
        F = np.stack([g @ e1, g @ e2, disp.energy(p) - eps_f], -1)
        J = np.stack([H @ e1, H @ e2, g], axis=1)
        ok = np.abs(F).max(-1) < tol
        try:
            step = np.linalg.solve(J, F[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(Ji, Fi, rcond=None)[0] for Ji, Fi in zip(J, F)])
        step = np.where(np.isfinite(step), step, 0.0)
        nrm = np.linalg.norm(step, axis=-1, keepdims=True)
        step = step * np.minimum(1.0, 0.5 / np.maximum(nrm, 1e-300))
        p = np.where(ok[:, None], p, p - step)
    g = disp.gradient(p)
    F = np.stack([g @ e1, g @ e2, disp.energy(p) - eps_f], -1)
    return p, np.abs(F).max(-1) < 1e-10


def find_singular_points(disp: DispersionRelation, setup: FieldSetup, eps_f, n_grid=10, box=None, dedupe_tol=1e-6,
                         return_diagnostics=False):
    """Zeros of grad(eps) x b_hat on {eps = eps_F} in one torus cell."""
    lat = disp.lattice if disp.is_periodic else None
    t = (np.arange(n_grid) + 0.37) / n_grid
    f = np.stack(np.meshgrid(t, t, t, indexing="ij"), -1).reshape(-1, 3)
    if lat is not None:
        P0 = lat.cartesian(f)
    else:
        if box is None:
            lam = np.linalg.eigvalsh(disp.quadratic).min()
            rad = 1.5 * np.sqrt(2.0 * max(eps_f, 0.0) / lam) + 1.0
            box = (-rad, rad)
        lo, hi = box
        P0 = lo + (hi - lo) * f
    p, conv = _newton_singular(disp, setup, eps_f, P0)
    failed = int((~conv).sum())
    found = []
    for pt in p[conv]:
        if lat is not None:
            pt, _ = reduce_to_torus(lat, pt)
            fr = lat.fractional(pt)
            dup = False
            for q in found:
                dq = fr - lat.fractional(q)
                dq -= np.round(dq)
                if np.linalg.norm(lat.cartesian(dq)) < dedupe_tol:
                    dup = True
                    break
        else:
            dup = any(np.linalg.norm(pt - q) < dedupe_tol for q in found)
        if not dup:
            found.append(pt)
    E = setup.frame
    out = []
    for pt in sorted(found, key=lambda x: tuple(np.round(x, 9))):
        H2 = E.T @ disp.hessian(pt) @ E
        det = np.linalg.det(H2)
        kind, idx = ("Center", 1) if det > 0 else ("Saddle", -1)
        out.append(SingularPoint(pt, kind, idx))
    if failed == len(P0):
        raise NewtonNoConvergence("no multi-start Newton run converged")
    if return_diagnostics:
        return out, {"starts": len(P0), "failed": failed}
    return out


def surface_euler_characteristic(singulars, n_components=1):
    """chi = #Centers - #Saddles and the total genus of ``n_components`` closed pieces."""
    n_c = sum(1 for s in singulars if s.kind == "Center")
    n_s = sum(1 for s in singulars if s.kind == "Saddle")
    chi = n_c - n_s
    if chi % 2:
        raise OddEuler(f"chi = {chi} is odd: singular set incomplete or misclassified")
    genus = n_components - chi // 2
    if genus < 0:
        raise OddEuler(f"chi = {chi} needs at least {chi // 2} components")
    return chi, genus


def random_level_point(pf: PlanarFourier, level, rng, radius, tries=200):
    """A point of {g = level} found on random chords of the disc of given radius."""
    t = np.linspace(-radius, radius, 1025)
    for _ in range(tries):
        c = rng.uniform(-radius, radius, 2)
        ang = rng.uniform(0.0, np.pi)
        d = np.array([np.cos(ang), np.sin(ang)])
        vals = pf.value(c + t[:, None] * d) - level
        idx = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]
        if len(idx):
            i = idx[rng.integers(len(idx))]
            x = optimize.brentq(lambda x: float(pf.value(c + x * d)) - level, t[i], t[i + 1], xtol=1e-15)
            return c + x * d
    return None


def random_surface_seed(disp: DispersionRelation, setup: FieldSetup, eps_f, rng, tries=50):
    """(PlaneSlice, seed) with the slice offset uniform over one lattice period along b."""
    lat = disp.lattice
    thick = float(np.abs(lat.rows @ setup.b_hat).max())
    for _ in range(tries):
        sl = PlaneSlice(setup, float(rng.uniform(0.0, thick)))
        r = random_level_point(slice_function(disp, sl), eps_f, rng, lat.cell_diameter)
        if r is not None:
            return sl, sl.to_space(r)
    raise EmptyLevelSet(f"no point of the level eps = {eps_f:g} found")


def trace_open_ensemble(disp: DispersionRelation, setup: FieldSetup, eps_f, n, length, rng_seed=0,
                        ctl: StepControl | None = None, stage="ensemble", max_attempts=50):
    """``n`` long trajectories started at random points, skipping seeds on closed orbits."""
    from ._rng import stream
    ctl = ctl or StepControl(tol=1e-9, max_arc_step=0.1, saddle_policy="offset")
    out = []
    for i in range(n):
        rng = stream(rng_seed, stage, i)
        for _ in range(max_attempts):
            sl, seed = random_surface_seed(disp, setup, eps_f, rng)
            probe = integrate_trajectory(disp, sl, seed, tol=ctl, energy=eps_f, l_max=min(200.0, length))
            if probe.closure.kind == ClosureTag.CLOSED:
                continue
            out.append(integrate_trajectory(disp, sl, seed, tol=ctl, energy=eps_f, l_max=length, closure=False))
            break
        else:
            raise EmptyLevelSet("no open trajectory found")
    return out
