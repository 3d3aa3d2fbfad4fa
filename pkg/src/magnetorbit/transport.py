"""Magneto-conductivity in the relaxation-time approximation.

Every carrier contributes sigma^{ik} = int dh int ds v^i(s) <v^k>_B(s), where
<v>_B is the exponentially weighted history average of the group velocity
along the orbit with memory Lambda (in units of the flow parameter s).  The
tensor is reported in units of the zero-field value sigma_0 = tr sigma(0) / 3
of the same surface sample.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial import cKDTree

from . import planar
from ._rng import stream
from .contours import marching_squares, torus_contours
from .exceptions import (EmptyLevelSet, EmptySurface, InsufficientHistory, NoCloseApproaches,
                         NotPeriodic)
from .fitting import asymptotic_slope
from .lattice import DispersionRelation, FieldSetup
from .tracer import (ClosureTag, PlaneSlice, StepControl, Trajectory, lattice_maps, random_level_point,
                     slice_function, trace_planar)
from .transport_kernels import exp_filter, filter_accumulate, window_filter

COMPONENTS = ("xx", "xy", "xz", "yx", "yy", "yz", "zx", "zy", "zz")


@dataclass(frozen=True)
class TransportParams:
    lambdas: tuple
    truncation: float = 1e-8
    kappa: float | None = None  # breakdown scale, delta_p = kappa * Lambda**alpha
    alpha: float = 0.5

    def __post_init__(self):
        lam = np.asarray(self.lambdas, float).reshape(-1)
        if len(lam) == 0:
            raise ValueError("lambdas must not be empty")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("lambdas must be finite and non-negative")
        if np.any(np.diff(lam) <= 0):
            raise ValueError("lambdas must be strictly increasing")
        if not 0 < self.truncation <= 1e-4:
            raise ValueError("truncation must lie in (0, 1e-4]")
        if self.kappa is not None and not self.kappa > 0:
            raise ValueError("kappa must be positive")
        object.__setattr__(self, "lambdas", tuple(float(x) for x in lam))


@dataclass(frozen=True)
class ConductivityTensor:
    sigma: np.ndarray
    lam: float

    def __post_init__(self):
        s = np.array(self.sigma, float).reshape(3, 3)
        if not np.all(np.isfinite(s)):
            raise ValueError("conductivity entries must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "sigma", s)

    @property
    def symmetric(self):
        return 0.5 * (self.sigma + self.sigma.T)

    @property
    def antisymmetric(self):
        return 0.5 * (self.sigma - self.sigma.T)

    def project(self, d1, d2=None):
        d2 = d1 if d2 is None else d2
        return float(np.asarray(d1) @ self.sigma @ np.asarray(d2))


@dataclass
class ConductivityCurve:
    samples: list
    fitted_slopes: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        lam = self.lambdas
        if np.any(np.diff(lam) <= 0):
            raise ValueError("lambdas must be strictly increasing")

    @property
    def lambdas(self):
        return np.array([t.lam for t in self.samples])

    @property
    def tensors(self):
        return np.array([t.sigma for t in self.samples])

    def component(self, comp):
        i, k = _index(comp)
        return self.tensors[:, i, k]

    def fit_slopes(self, window=None, components=COMPONENTS, floor=1e-12):
        """Envelope and least-squares slopes for every component that does not vanish."""
        lam = self.lambdas
        keep = lam > 0
        out = {}
        for comp in components:
            y = self.component(comp)[keep]
            if np.all(np.abs(y) > floor):
                out[comp] = asymptotic_slope(lam[keep], y, window)
        self.fitted_slopes = out
        return out


def _index(comp):
    if isinstance(comp, str):
        return "xyz".index(comp[0]), "xyz".index(comp[1])
    return tuple(comp)


def symmetric_part(obj):
    """(sigma + sigma^T) / 2 of a tensor, a curve (stacked) or a raw matrix."""
    if isinstance(obj, ConductivityCurve):
        t = obj.tensors
        return 0.5 * (t + np.swapaxes(t, 1, 2))
    s = obj.sigma if isinstance(obj, ConductivityTensor) else np.asarray(obj, float)
    return 0.5 * (s + np.swapaxes(s, -1, -2))


# ---------------------------------------------------------------------------
# history averages along a single trajectory


def _samples(traj):
    if isinstance(traj, Trajectory):
        return np.asarray(traj.params, float), np.asarray(traj.velocities, float)
    S, V = traj
    return np.asarray(S, float), np.asarray(V, float).reshape(len(S), -1)


def _advance(S, V, X, j, s, lam):
    """Carry the filter state from sample j to the parameter s inside segment j."""
    if s <= S[j] or lam == 0:
        return X
    t = (s - S[j]) / (S[j + 1] - S[j])
    vs = V[j] + t * (V[j + 1] - V[j])
    Y = exp_filter(np.array([S[j], s]), np.vstack([V[j], vs]), lam, X)
    return Y[-1]


def weighted_velocity_average(traj, lam, s, truncation=1e-8, windowed=False):
    """<v>_B(s) = (1/Lambda) int_{-inf}^s v(s') exp((s' - s)/Lambda) ds'.

    ``traj`` is a Trajectory or a pair (params, velocities).  The history
    before s - Lambda ln(1/truncation) is replaced by the velocity at that
    point, which keeps the kernel exactly normalised.  ``windowed=True``
    uses the flat window of length Lambda instead.
    """
    S, V = _samples(traj)
    if not S[0] <= s <= S[-1]:
        raise ValueError("s lies outside the stored trajectory")
    j = min(int(np.searchsorted(S, s, side="right")) - 1, len(S) - 2)
    if lam == 0:
        return _interp(S, V, j, s)
    if windowed:
        if s - lam < S[0]:
            raise InsufficientHistory(f"flat window needs history {lam:g} before s")
        Sx = np.append(S[:j + 1], s)
        Vx = np.vstack([V[:j + 1], _interp(S, V, j, s)])
        return window_filter(Sx, Vx, float(lam))[-1]
    hist = lam * np.log(1.0 / truncation)
    if s - hist < S[0] - 1e-12 * max(1.0, abs(S[0])):
        if isinstance(traj, Trajectory) and traj.is_periodic:
            return closed_orbit_average(traj, lam, s)
        raise InsufficientHistory(f"need history {hist:.4g} before s, have {s - S[0]:.4g}")
    j0 = max(int(np.searchsorted(S, s - hist, side="right")) - 1, 0)
    X = exp_filter(S[j0:j + 1], V[j0:j + 1], float(lam), V[j0].copy())[-1]
    return _advance(S, V, X, j, s, float(lam))


def _interp(S, V, j, s):
    t = (s - S[j]) / (S[j + 1] - S[j])
    return V[j] + t * (V[j + 1] - V[j])


def _one_period(traj):
    if not isinstance(traj, Trajectory) or not traj.is_periodic or traj.closure.period_s is None:
        raise NotPeriodic("orbit average needs a closed or periodic trajectory")
    S = np.asarray(traj.params, float)
    V = np.asarray(traj.velocities, float)
    s_end = S[0] + traj.closure.period_s
    n = int(np.searchsorted(S, s_end - 1e-12 * max(1.0, abs(s_end)), side="left"))
    S1 = np.append(S[:n], s_end)
    V1 = np.vstack([V[:n], V[0]])
    return S1, V1


def closed_orbit_average(traj: Trajectory, lam, s):
    """<v>_B on a periodic orbit, with the infinite history summed in closed form."""
    S1, V1 = _one_period(traj)
    period = S1[-1] - S1[0]
    s_loc = S1[0] + np.mod(s - S1[0], period)
    j = min(int(np.searchsorted(S1, s_loc, side="right")) - 1, len(S1) - 2)
    if lam == 0:
        return _interp(S1, V1, j, s_loc)
    lam = float(lam)
    Y = exp_filter(S1, V1, lam, np.zeros(V1.shape[1]))[-1]
    X0 = Y / (-np.expm1(-period / lam))
    X = exp_filter(S1[:j + 1], V1[:j + 1], lam, X0)[-1]
    return _advance(S1, V1, X, j, s_loc, lam)


# ---------------------------------------------------------------------------
# surface sampling


@dataclass(frozen=True)
class SliceSampling:
    """How the Fermi surface is cut into carrier orbits.

    mode: 'auto' picks 'torus' for rational directions of a periodic band,
    'quadric' for the free-electron band and 'window' otherwise; 'ergodic'
    follows a few long trajectories and time-averages.
    """

    mode: str = "auto"
    n_slices: int = 64
    grid_n: int = 256
    jitter: bool = False
    carriers: str = "all"  # or 'open'
    spectral_step: float = 0.02
    max_index: int = 10
    window_cells: int = 3
    span_cells: int = 32
    n_trajectories: int = 16
    trajectory_length: float = 8e4
    chunk_length: float = 5e3
    rng_seed: int = 0
    threads: int = 1
    tracer: StepControl = field(default_factory=StepControl)

    def __post_init__(self):
        if self.mode not in ("auto", "torus", "quadric", "window", "ergodic"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.carriers not in ("all", "open"):
            raise ValueError("carriers must be 'all' or 'open'")
        if self.n_slices < 1 or self.grid_n < 16:
            raise ValueError("need at least one slice and a 16-point grid")


def rational_direction(disp: DispersionRelation, b, max_index=10, tol=1e-9):
    """Primitive integer n with n @ direct.rows parallel to b, or None."""
    b = np.asarray(b, float)
    b = b / np.linalg.norm(b)
    coef = np.linalg.solve(disp.direct.rows.T, b)
    best = None
    m = int(np.argmax(np.abs(coef)))
    for k in range(1, max_index + 1):
        n = coef / abs(coef[m]) * k
        r = np.round(n)
        if np.all(np.abs(r) <= max_index) and np.abs(n - r).max() < tol * k * 1e3:
            N = r @ disp.direct.rows
            if np.linalg.norm(np.cross(N / np.linalg.norm(N), b)) < tol:
                best = r.astype(np.int64)
                break
    if best is None:
        return None
    g = np.gcd.reduce(np.abs(best))
    return best // g


def inplane_basis(disp: DispersionRelation, n, max_index=10):
    """Two reciprocal vectors spanning the lattice orthogonal to n @ direct.rows."""
    A = disp.lattice.rows
    rng = range(-max_index, max_index + 1)
    cand = [np.array(k) for k in product(rng, rng, rng) if any(k) and np.dot(k, n) == 0]
    cand.sort(key=lambda k: (np.linalg.norm(k @ A), tuple(k)))
    k1 = cand[0]
    for k2 in cand[1:]:
        c = np.cross(k1, k2)
        if np.array_equal(c, n) or np.array_equal(c, -n):
            if np.array_equal(c, -n):
                k2 = -k2
            return k1, k2
    raise ValueError("no in-plane lattice basis within the index range")


@dataclass
class OrbitSpectrum:
    """Fourier coefficients of v along one periodic orbit, sampled uniformly in s."""

    F: np.ndarray
    omega: np.ndarray
    period: float
    weight: float
    kind: str

    def vx(self, lam):
        """int_0^S v X^T ds on this orbit."""
        D = self.F / (1.0 + 1j * self.omega * lam)[:, None]
        return self.period * np.real(np.conj(self.F).T @ D)


def _orbit_spectrum(disp, sl, pf, level, start, period, sign, step, proj_tol):
    n = max(64, int(np.ceil(period / step)))
    n += n % 2
    h = period / n
    W, A, C, Q, q, c0 = pf.args
    R, _ = planar.uniform_kernel(W, A, C, Q, q, c0, float(level), np.asarray(start, float),
                                 float(sign), h, n - 1, proj_tol)
    V = disp.gradient(sl.to_space(R))
    F = np.fft.fft(V, axis=0) / n
    omega = 2.0 * np.pi * np.fft.fftfreq(n, h)
    return F, omega


def _trace_loop(disp, sl, pf, level, start, ctl, maps, s_cap):
    res = trace_planar(pf, level, start, sign=1.0, s_max=s_cap, l_max=np.inf, ctl=ctl, closure=True, maps=maps)
    if res["status"] != "closed":
        return None
    shift = res["shift"]
    kind = ClosureTag.CLOSED if not shift.any() else ClosureTag.PERIODIC
    return res["period"], kind


def _slice_orbits(disp, setup, level, h, weight, sampling, basis, n_cells=None):
    """Spectra of all periodic orbits in one slice (torus or quadric sampling)."""
    ctl = sampling.tracer
    sl = PlaneSlice(setup, h)
    pf = slice_function(disp, sl)
    out, warnings = [], 0
    if basis is not None:
        w1, w2 = basis
        maps = lattice_maps(disp, setup)
        try:
            loops = torus_contours(pf, level, (0.0, 0.0), w1, w2, n=sampling.grid_n)
        except EmptyLevelSet:
            return out, warnings
        s_cap = 1e4
    else:
        maps = None
        lo, hi = _quadric_window(pf, level)
        if lo is None:
            return out, warnings
        u = np.linspace(lo[0], hi[0], sampling.grid_n)
        v = np.linspace(lo[1], hi[1], sampling.grid_n)
        try:
            loops = [p for p in marching_squares(pf, level, u, v) if p.closed]
        except EmptyLevelSet:
            return out, warnings
        s_cap = 1e4
    for loop in loops:
        if not loop.closed:
            warnings += 1
            continue
        start = loop.points[0]
        got = _trace_loop(disp, sl, pf, level, start, ctl, maps, s_cap)
        if got is None:
            warnings += 1
            continue
        period, kind = got
        if sampling.carriers == "open" and kind != ClosureTag.PERIODIC:
            continue
        F, omega = _orbit_spectrum(disp, sl, pf, level, start, period, 1.0, sampling.spectral_step, ctl.proj_tol)
        out.append(OrbitSpectrum(F, omega, period, weight, kind))
    return out, warnings


def _quadric_window(pf, level):
    Q = pf.Q
    if not np.all(np.linalg.eigvalsh(Q) > 0):
        raise ValueError("quadric sampling needs a positive definite quadratic term")
    rc = -np.linalg.solve(Q, pf.q)
    gmin = float(pf.value(rc)) - float(np.sum(pf.A * 0))
    if pf.A.size:
        raise ValueError("quadric sampling does not support Fourier harmonics")
    if level <= gmin:
        return None, None
    ext = np.sqrt(2.0 * (level - gmin) * np.diag(np.linalg.inv(Q)))
    return rc - 1.1 * ext, rc + 1.1 * ext


@dataclass
class SurfaceSample:
    """Pre-computed orbit data from which sigma(Lambda) is evaluated."""

    mode: str
    orbits: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def raw(self, lam):
        acc = np.zeros((3, 3))
        for o in self.orbits:
            acc += o.weight * o.vx(lam)
        for seg in self.segments:
            acc += seg.weight * seg.vx(lam)
        return acc


def _slice_positions(n, span, rng=None):
    t = (np.arange(n) + 0.5) / n
    if rng is not None:
        t = (np.arange(n) + rng.uniform(0.0, 1.0, n)) / n
    return t * span


def sample_surface(disp: DispersionRelation, setup: FieldSetup, eps_f, sampling: SliceSampling,
                   lambdas=(0.0,), truncation=1e-8) -> SurfaceSample:
    mode = sampling.mode
    n_rat = None
    if disp.is_periodic:
        n_rat = rational_direction(disp, setup.b_hat, sampling.max_index)
    if mode == "auto":
        if not disp.is_periodic:
            mode = "quadric"
        elif n_rat is not None:
            mode = "torus"
        else:
            mode = "window"
    if mode == "ergodic":
        return _ergodic_sample(disp, setup, eps_f, sampling, lambdas, truncation)
    if mode == "window":
        return _window_sample(disp, setup, eps_f, sampling, lambdas, truncation)
    rng = stream(sampling.rng_seed, "slices") if sampling.jitter else None
    if mode == "torus":
        if n_rat is None:
            raise ValueError("torus sampling needs a rational field direction")
        N = n_rat @ disp.direct.rows
        H = 2.0 * np.pi / np.linalg.norm(N)
        k1, k2 = inplane_basis(disp, n_rat, sampling.max_index)
        A = disp.lattice.rows
        basis = (setup.to_plane(k1 @ A), setup.to_plane(k2 @ A))
        hs = _slice_positions(sampling.n_slices, H, rng)
        dh = H / sampling.n_slices
    else:
        Q = disp.quadratic
        hmax = np.sqrt(2.0 * eps_f * setup.b_hat @ np.linalg.solve(Q, setup.b_hat)) if eps_f > 0 else 0.0
        basis = None
        hs = -hmax + _slice_positions(sampling.n_slices, 2 * hmax, rng)
        dh = 2 * hmax / sampling.n_slices
    jobs = Parallel(n_jobs=sampling.threads, backend="threading")(
        delayed(_slice_orbits)(disp, setup, eps_f, float(h), dh, sampling, basis) for h in hs)
    orbits, warn = [], 0
    for o, w in jobs:
        orbits.extend(o)
        warn += w
    if not orbits:
        raise EmptySurface(f"no orbit found at eps_F = {eps_f:g}")
    return SurfaceSample(mode, orbits, [], {"skipped_loops": warn, "n_orbits": len(orbits),
                                             "slab": float(hs[-1] - hs[0] + dh) if len(hs) else 0.0})


# ---------------------------------------------------------------------------
# long-trajectory sampling


@dataclass
class TimeAverage:
    """Integrals of v X^T and X X^T per Lambda along traced pieces."""

    lambdas: np.ndarray
    VX: np.ndarray
    XX: np.ndarray
    T: np.ndarray
    weight: float = 1.0
    estimator: str = "split"

    def vx(self, lam):
        i = int(np.argmin(np.abs(self.lambdas - lam)))
        if abs(self.lambdas[i] - lam) > 1e-12 * max(1.0, lam):
            raise KeyError(f"Lambda = {lam:g} was not accumulated")
        VX = self.VX[i]
        if self.estimator == "split" and self.lambdas[i] > 0:
            # symmetric part from <X X^T>, which holds for a stationary history average
            return self.XX[i] + 0.5 * (VX - VX.T)
        return VX


def _chunks(pf, level, start, sign, total_l, chunk_l, ctl):
    """Yield successive pieces (R, S, L) of one long trace."""
    cur = np.asarray(start, float)
    s_off = l_off = 0.0
    done_l = 0.0
    first = True
    while done_l < total_l:
        res = trace_planar(pf, level, cur, sign=sign, s_max=np.inf, l_max=min(chunk_l, total_l - done_l),
                           ctl=ctl, closure=False)
        R, S, L = res["R"], res["S"] + s_off, res["L"] + l_off
        yield (R, S, L) if first else (R[1:], S[1:], L[1:]), res["status"]
        first = False
        if res["status"] not in ("l_max", "s_max") or len(R) < 2:
            return
        cur = R[-1]
        s_off, l_off = S[-1], L[-1]
        done_l = L[-1]


def trace_long(disp, setup, eps_f, seed_index, sampling: SliceSampling, lambdas, truncation, keep=False):
    """One long trajectory on an open carrier, accumulated for every Lambda.

    Returns (TimeAverage, zero-field integral of v v^T, total s, diagnostics,
    kept trace or None).
    """
    ctl = sampling.tracer
    rng = stream(sampling.rng_seed, "ergodic", seed_index)
    lat = disp.lattice
    thick = float(np.abs(lat.rows @ setup.b_hat).max())
    radius = np.pi * lat.cell_diameter / (2 * np.pi) * 2.0
    lam = np.asarray(lambdas, float)
    for attempt in range(50):
        h = rng.uniform(0.0, thick)
        sl = PlaneSlice(setup, h)
        pf = slice_function(disp, sl)
        start = random_level_point(pf, eps_f, rng, radius)
        if start is None:
            continue
        probe = trace_planar(pf, eps_f, start, sign=1.0, s_max=np.inf, l_max=min(200.0, sampling.trajectory_length),
                             ctl=ctl, closure=True, maps=lattice_maps(disp, setup))
        if probe["status"] == "closed":
            continue  # seed fell on a closed orbit, not an open carrier
        break
    else:
        raise EmptySurface("no open-carrier seed found")
    VX = np.zeros((len(lam), 3, 3))
    XX = np.zeros((len(lam), 3, 3))
    T = np.zeros(len(lam))
    X = None
    VV = np.zeros((3, 3))
    T0 = 0.0
    s_begin = None
    prev = None
    burn = lam * np.log(1.0 / truncation)
    kept = [] if keep else None
    status = "l_max"
    for (R, S, L), status in _chunks(pf, eps_f, start, 1.0, sampling.trajectory_length,
                                     sampling.chunk_length, ctl):
        V = np.ascontiguousarray(disp.gradient(sl.to_space(R)))
        if keep:
            kept.append(R)
        if prev is None:
            s_begin = S[0]
            X = np.tile(V[0], (len(lam), 1))
        else:
            # bridge the chunk boundary
            S = np.concatenate([[prev[0]], S])
            V = np.vstack([prev[1], V])
        prev = (S[-1], V[-1].copy())
        ds = np.diff(S)
        vv = np.einsum("j,ja,jb->ab", 0.5 * ds, V[:-1], V[:-1]) + np.einsum("j,ja,jb->ab", 0.5 * ds, V[1:], V[1:])
        VV += vv
        T0 += ds.sum()
        for i, L_ in enumerate(lam):
            if L_ == 0:
                VX[i] += vv
                XX[i] += vv
                T[i] += ds.sum()
                continue
            X[i], t_add = filter_accumulate(S, V, L_, X[i].copy(), s_begin + burn[i], VX[i], XX[i])
            T[i] += t_add
    ta = TimeAverage(lam, VX, XX, T, 1.0, "split")
    diag = {"h": float(h), "start": [float(x) for x in start], "status": status, "s_total": float(T0)}
    trace = np.vstack(kept) if keep else None
    return ta, VV, T0, diag, (sl, trace)


def _ergodic_sample(disp, setup, eps_f, sampling, lambdas, truncation):
    lam = np.asarray(sorted(set(float(x) for x in lambdas) | {0.0}))
    jobs = Parallel(n_jobs=sampling.threads, backend="threading")(
        delayed(trace_long)(disp, setup, eps_f, i, sampling, lam, truncation) for i in range(sampling.n_trajectories))
    VX = sum(j[0].VX for j in jobs)
    XX = sum(j[0].XX for j in jobs)
    T = sum(j[0].T for j in jobs)
    if np.any(T <= 0):
        raise InsufficientHistory("trajectories shorter than the kernel burn-in")
    ta = TimeAverage(lam, VX / T[:, None, None], XX / T[:, None, None], T, 1.0, "split")
    return SurfaceSample("ergodic", [], [ta], {"trajectories": [j[3] for j in jobs],
                                               "s_total": float(sum(j[2] for j in jobs))})


# ---------------------------------------------------------------------------
# window sampling for arbitrary directions


@dataclass
class _WindowSegments:
    lambdas: np.ndarray
    VX: np.ndarray
    weight: float = 1.0

    def vx(self, lam):
        i = int(np.argmin(np.abs(self.lambdas - lam)))
        if abs(self.lambdas[i] - lam) > 1e-12 * max(1.0, lam):
            raise KeyError(f"Lambda = {lam:g} was not accumulated")
        return self.VX[i]


def _window_slice(disp, setup, eps_f, h, weight, sampling, lam, truncation):
    ctl = StepControl(**{**ctl_dict(sampling.tracer), "saddle_policy": "offset"})
    sl = PlaneSlice(setup, h)
    pf = slice_function(disp, sl)
    lat = disp.lattice
    half = 0.5 * sampling.window_cells * lat.cell_diameter / np.sqrt(3.0)
    box = (-half, half, -half, half)
    n = int(np.ceil(2 * half / (2 * np.pi) * sampling.grid_n))
    u = np.linspace(-half, half, n)
    try:
        lines = marching_squares(pf, eps_f, u, u)
    except EmptyLevelSet:
        return [], np.zeros((len(lam), 3, 3)), 0
    orbits = []
    VX = np.zeros((len(lam), 3, 3))
    maps = lattice_maps(disp, setup)
    warn = 0
    for line in lines:
        start = line.points[len(line.points) // 2]
        if line.closed:
            got = _trace_loop(disp, sl, pf, eps_f, start, ctl, maps, 1e4)
            if got is None:
                warn += 1
                continue
            period, kind = got
            if sampling.carriers == "open" and kind != ClosureTag.PERIODIC:
                continue
            F, omega = _orbit_spectrum(disp, sl, pf, eps_f, start, period, 1.0, sampling.spectral_step, ctl.proj_tol)
            orbits.append(OrbitSpectrum(F, omega, period, weight, kind))
            continue
        # open piece of a longer curve: forward to the box edge, history behind it
        fwd = trace_planar(pf, eps_f, start, sign=1.0, l_max=1e5, ctl=ctl, closure=False, box=box)
        bwd = trace_planar(pf, eps_f, start, sign=-1.0, l_max=1e5, ctl=ctl, closure=False, box=box)
        entry = bwd["R"][-1]
        s_in = bwd["S"][-1]
        hist_s = float(lam.max()) * np.log(1.0 / truncation)
        back = trace_planar(pf, eps_f, entry, sign=-1.0, s_max=hist_s, ctl=ctl, closure=False)
        Rb = back["R"][::-1]
        Sb = -back["S"][::-1] - s_in
        Rf = np.vstack([bwd["R"][::-1][1:], fwd["R"][1:]])
        Sf = np.concatenate([-bwd["S"][::-1][1:], fwd["S"][1:]])
        R = np.vstack([Rb, Rf])
        S = np.concatenate([Sb, Sf])
        V = np.ascontiguousarray(disp.gradient(sl.to_space(R)))
        s_a = Sf[0]
        for i, L_ in enumerate(lam):
            XXd = np.zeros((3, 3))
            if L_ == 0:
                m = S >= s_a
                Sm, Vm = S[m], V[m]
                ds = np.diff(Sm)
                VX[i] += np.einsum("j,ja,jb->ab", 0.5 * ds, Vm[:-1], Vm[:-1]) + \
                    np.einsum("j,ja,jb->ab", 0.5 * ds, Vm[1:], Vm[1:])
                continue
            filter_accumulate(S, V, L_, V[0].copy(), s_a, VX[i], XXd)
        if back["status"] not in ("s_max",):
            warn += 1
    return orbits, VX * weight, warn


def ctl_dict(ctl: StepControl):
    return {k: getattr(ctl, k) for k in ctl.__dataclass_fields__}


def _window_sample(disp, setup, eps_f, sampling, lambdas, truncation):
    lam = np.asarray(sorted(set(float(x) for x in lambdas) | {0.0}))
    lat = disp.lattice
    span = sampling.span_cells * float(np.abs(lat.rows @ setup.b_hat).max())
    rng = stream(sampling.rng_seed, "slices") if sampling.jitter else None
    hs = _slice_positions(sampling.n_slices, span, rng)
    dh = span / sampling.n_slices
    jobs = Parallel(n_jobs=sampling.threads, backend="threading")(
        delayed(_window_slice)(disp, setup, eps_f, float(h), dh, sampling, lam, truncation) for h in hs)
    orbits, VX, warn = [], np.zeros((len(lam), 3, 3)), 0
    for o, v, w in jobs:
        orbits.extend(o)
        VX += v
        warn += w
    if not orbits and not np.any(VX):
        raise EmptySurface(f"no trajectory found at eps_F = {eps_f:g}")
    return SurfaceSample("window", orbits, [_WindowSegments(lam, VX)], {"warnings": warn})


# ---------------------------------------------------------------------------
# conductivity


def _calibration(sample: SurfaceSample):
    s0 = float(np.trace(sample.raw(0.0))) / 3.0
    if not s0 > 0:
        raise EmptySurface("zero-field conductivity vanishes")
    return s0


def conductivity_curve(disp: DispersionRelation, setup: FieldSetup, eps_f, params: TransportParams,
                       sampling: SliceSampling = SliceSampling(), sample: SurfaceSample | None = None,
                       breakdown_trace=None, fit_window=None) -> ConductivityCurve:
    lams = np.asarray(params.lambdas)
    diag = {}
    eff = lams.copy()
    if params.kappa is not None:
        if breakdown_trace is None:
            breakdown_trace = breakdown_probe(disp, setup, eps_f, sampling)
        pos = lams[lams > 0]
        # one gap profile serves every Lambda: probe up to the largest distance at the finest resolution
        t_max = params.kappa * pos.max() ** params.alpha
        res = params.kappa * pos.min() ** params.alpha
        eff = np.array([effective_tau(L_, breakdown_trace, params.kappa, params.alpha, t_max, res)
                        if L_ > 0 else 0.0 for L_ in lams])
        diag["lambda_eff"] = eff.tolist()
    if sample is None:
        sample = sample_surface(disp, setup, eps_f, sampling, tuple(eff) + tuple(lams), params.truncation)
    s0 = _calibration(sample)
    out = []
    for L_, Le in zip(lams, eff):
        raw = sample.raw(Le) / s0
        if L_ > 0 and Le != L_:
            raw = raw * (Le / L_)
        out.append(ConductivityTensor(raw, float(L_)))
    diag.update(sample.diagnostics)
    diag["sigma0_raw"] = s0
    curve = ConductivityCurve(out, {}, diag)
    if len(lams[lams > 0]) >= 8:
        try:
            curve.fit_slopes(fit_window)
        except Exception:  # noqa: BLE001 - slopes are optional decoration here
            pass
    return curve


def conductivity_tensor(disp, setup, eps_f, lam, sampling: SliceSampling = SliceSampling(),
                        truncation=1e-8) -> ConductivityTensor:
    curve = conductivity_curve(disp, setup, eps_f, TransportParams((float(lam),), truncation), sampling)
    return curve.samples[0]


# ---------------------------------------------------------------------------
# magnetic breakdown


@dataclass
class BreakdownTrace:
    """A long planar trace together with the slice function it lies on."""

    R: np.ndarray
    L: np.ndarray
    S: np.ndarray
    pf: object = None
    level: float = 0.0
    _gaps: dict = field(default_factory=dict, repr=False)

    @property
    def s_per_l(self):
        return float((self.S[-1] - self.S[0]) / (self.L[-1] - self.L[0]))

    def gap_profile(self, t_max, spacing=0.02, n_ray=64, chunk=4000):
        """Distance along the local normal to the nearest other branch of the level set.

        Samples farther than ``t_max`` from any other branch get +inf.
        """
        key = (float(t_max), float(spacing), int(n_ray))
        if key in self._gaps:
            return self._gaps[key]
        n = max(int(np.ceil((self.L[-1] - self.L[0]) / spacing)) + 1, 2)
        lq = np.linspace(self.L[0], self.L[-1], n)
        P = np.column_stack([np.interp(lq, self.L, self.R[:, k]) for k in range(2)])
        t = t_max * np.arange(1, n_ray + 1) / n_ray
        gap = np.full(n, np.inf)
        for i0 in range(0, n, chunk):
            p = P[i0:i0 + chunk]
            g = self.pf.gradient(p)
            nrm = g / np.linalg.norm(g, axis=1)[:, None]
            for side in (1.0, -1.0):
                pts = p[:, None, :] + side * t[None, :, None] * nrm[:, None, :]
                f = side * (self.pf.value(pts) - self.level)
                # the curve itself is the root at t = 0; a later sign flip is another strand
                bad = f <= 0
                first = np.where(bad.any(1), t[np.argmax(bad, axis=1)], np.inf)
                gap[i0:i0 + chunk] = np.minimum(gap[i0:i0 + chunk], first)
        self._gaps[key] = (lq, gap)
        return lq, gap


def breakdown_probe(disp, setup, eps_f, sampling: SliceSampling, length=2e4) -> BreakdownTrace:
    """Long open trajectory for the close-approach statistics."""
    ctl = sampling.tracer
    rng = stream(sampling.rng_seed, "breakdown")
    lat = disp.lattice
    thick = float(np.abs(lat.rows @ setup.b_hat).max())
    for _ in range(50):
        sl = PlaneSlice(setup, rng.uniform(0.0, thick))
        pf = slice_function(disp, sl)
        start = random_level_point(pf, eps_f, rng, lat.cell_diameter)
        if start is None:
            continue
        res = trace_planar(pf, eps_f, start, l_max=length, ctl=ctl, closure=True, maps=lattice_maps(disp, setup))
        if res["status"] != "closed":
            return BreakdownTrace(res["R"], res["L"], res["S"], pf, float(eps_f))
    raise EmptySurface("no open trajectory for the breakdown statistics")


def _runs_length(lq, hit, dense_fraction, delta_p, return_info):
    runs = np.flatnonzero(hit[1:] & ~hit[:-1]) + 1
    if hit[0]:
        runs = np.concatenate([[0], runs])
    info = {"events": int(len(runs)), "spacing": float(lq[1] - lq[0]), "dense": False}
    if hit.mean() >= dense_fraction:
        info["dense"] = True
        l1 = float(lq[1] - lq[0])
        return (l1, info) if return_info else l1
    if len(runs) < 2:
        raise NoCloseApproaches(f"fewer than two approaches within delta_p = {delta_p:g}")
    l1 = float(np.mean(np.diff(lq[runs])))
    return (l1, info) if return_info else l1


def close_approach_length(traj, delta_p, exclusion=5.0, dense_fraction=0.9, return_info=False, t_max=None,
                          resolution=None):
    """Mean arc length between successive close approaches.

    For a BreakdownTrace an approach is a stretch where another branch of the
    same level set (or a non-adjacent part of the trace) lies within delta_p
    along the normal.  For a Trajectory or an (n, d) polyline the curve is
    resampled at about delta_p / 3 and hashed into a k-d tree; pairs closer
    than delta_p count unless they are within ``exclusion * delta_p`` of
    each other along the curve.  An event is a maximal run of flagged
    samples.
    """
    if not delta_p > 0:
        raise ValueError("delta_p must be positive")
    if isinstance(traj, BreakdownTrace) and traj.pf is not None:
        t_max = max(t_max or 0.0, delta_p)
        res = resolution or delta_p
        lq, gap = traj.gap_profile(t_max, spacing=min(0.05, res / 6.0), n_ray=int(np.ceil(8.0 * t_max / res)))
        return _runs_length(lq, gap < delta_p, dense_fraction, delta_p, return_info)
    if isinstance(traj, BreakdownTrace):
        P, Lc = traj.R, traj.L
    elif isinstance(traj, Trajectory):
        P, Lc = traj.points, traj.arclength
    else:
        P = np.asarray(traj, float)
        Lc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(P, axis=0), axis=1))])
    spacing = delta_p / 3.0
    n = max(int(np.ceil((Lc[-1] - Lc[0]) / spacing)) + 1, 2)
    lq = np.linspace(Lc[0], Lc[-1], n)
    Q = np.column_stack([np.interp(lq, Lc, P[:, k]) for k in range(P.shape[1])])
    pairs = cKDTree(Q).query_pairs(delta_p, output_type="ndarray")
    if len(pairs):
        far = np.abs(lq[pairs[:, 0]] - lq[pairs[:, 1]]) > exclusion * delta_p
        pairs = pairs[far]
    hit = np.zeros(n, bool)
    hit[pairs.ravel()] = True
    return _runs_length(lq, hit, dense_fraction, delta_p, return_info)


def effective_tau(lam, traj, kappa, alpha=0.5, t_max=None, resolution=None):
    """Lambda_eff with 1/Lambda_eff = 1/Lambda + 1/Lambda_1, Lambda_1 = l1 in s units.

    The breakdown distance is delta_p = kappa * Lambda**alpha.
    """
    if not kappa > 0:
        return float(lam)
    delta_p = kappa * lam ** alpha
    try:
        l1 = close_approach_length(traj, delta_p, t_max=t_max, resolution=resolution)
    except NoCloseApproaches:
        return float(lam)
    if isinstance(traj, BreakdownTrace):
        ratio = traj.s_per_l
    elif isinstance(traj, Trajectory):
        ratio = float((traj.params[-1] - traj.params[0]) / max(traj.length, 1e-300))
    else:
        ratio = 1.0
    lam1 = l1 * ratio
    return float(1.0 / (1.0 / lam + 1.0 / lam1))


def effective_lambda(lam, lam1):
    return 1.0 / (1.0 / lam + 1.0 / lam1)


# ---------------------------------------------------------------------------
# estimator facade


class MagnetoConductivity:
    """sklearn-style wrapper: ``fit`` samples the surface, ``predict`` evaluates sigma(Lambda)."""

    def __init__(self, eps_f=0.0, sampling: SliceSampling | None = None, truncation=1e-8, lambdas=(0.0,)):
        self.eps_f = eps_f
        self.sampling = sampling
        self.truncation = truncation
        self.lambdas = lambdas

    def get_params(self, deep=True):
        return {"eps_f": self.eps_f, "sampling": self.sampling, "truncation": self.truncation,
                "lambdas": self.lambdas}

    def set_params(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)
        return self

    def fit(self, disp: DispersionRelation, setup: FieldSetup):
        sampling = self.sampling or SliceSampling()
        self.sample_ = sample_surface(disp, setup, self.eps_f, sampling, tuple(self.lambdas), self.truncation)
        self.sigma0_ = _calibration(self.sample_)
        return self

    def predict(self, lambdas):
        return np.array([self.sample_.raw(float(L_)) / self.sigma0_ for L_ in np.atleast_1d(lambdas)])

    def curve(self, lambdas) -> ConductivityCurve:
        return ConductivityCurve([ConductivityTensor(s, float(L_)) for s, L_ in zip(self.predict(lambdas), lambdas)])
