"""Growth exponents of planar displacements along open trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contours import marching_squares
from .exceptions import BadFit, DegenerateMoments, EmptyLevelSet, TooShort
from .tracer import ClosureTag, Trajectory


@dataclass(frozen=True)
class FrameSpec:
    l0: float = 1.0
    gamma: float = 2.0
    k_min: int = 6


@dataclass
class DisplacementRecord:
    frame_lengths: np.ndarray
    displacements: np.ndarray  # (k, 2) in the (e1, e2) frame
    trajectory_id: int = 0

    def __post_init__(self):
        self.frame_lengths = np.asarray(self.frame_lengths, float)
        self.displacements = np.asarray(self.displacements, float).reshape(-1, 2)
        if np.any(np.diff(self.frame_lengths) <= 0):
            raise ValueError("frame lengths must increase")
        if not np.all(np.isfinite(self.displacements)):
            raise ValueError("displacements must be finite")


@dataclass
class ExponentEstimate:
    nu2: float
    nu3: float
    dir_fast: np.ndarray
    dir_slow: np.ndarray
    envelope_residual: float
    n_trajectories: int
    diagnostics: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "nu2": self.nu2, "nu3": self.nu3,
            "dir_fast": [float(x) for x in self.dir_fast], "dir_slow": [float(x) for x in self.dir_slow],
            "residuals": {"fast": self.diagnostics.get("residual_fast"), "slow": self.diagnostics.get("residual_slow")},
            "frames": [float(x) for x in self.diagnostics.get("frames", [])],
            "census": self.diagnostics.get("census"),
        }


def record_displacements(traj, frame: FrameSpec = FrameSpec(), trajectory_id=0) -> DisplacementRecord:
    """Displacement from the start point at arc lengths l0 gamma^k."""
    if isinstance(traj, Trajectory):
        if traj.closure.kind == ClosureTag.CLOSED:
            raise TooShort("closed orbits have no growing displacement")
        P, L = np.asarray(traj.plane, float), np.asarray(traj.arclength, float)
    else:
        P = np.asarray(traj, float)
        L = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(P, axis=0), axis=1))])
    total = L[-1] - L[0]
    need = frame.l0 * frame.gamma ** frame.k_min
    if total < need * (1 - 1e-12):
        raise TooShort(f"arc length {total:.4g} below l0 gamma^k_min = {need:.4g}")
    k_max = int(np.floor(np.log(total / frame.l0) / np.log(frame.gamma) + 1e-12))
    lk = frame.l0 * frame.gamma ** np.arange(k_max + 1)
    D = np.column_stack([np.interp(L[0] + lk, L, P[:, i]) - P[0, i] for i in range(2)])
    return DisplacementRecord(lk, D, trajectory_id)


def _common(records):
    n = min(len(r.frame_lengths) for r in records)
    lk = records[0].frame_lengths[:n]
    for r in records:
        if not np.allclose(r.frame_lengths[:n], lk, rtol=1e-12):
            raise ValueError("records use different frame sequences")
    return lk, np.stack([r.displacements[:n] for r in records])


def principal_growth_directions(records, min_records=8, ratio=1.05, raise_on_degenerate=True):
    """Leading and trailing eigenvectors of the second moment of displacements / l at the last frame."""
    if len(records) < min_records:
        raise ValueError(f"need at least {min_records} records")
    lk, D = _common(records)
    u = D[:, -1] / lk[-1]
    M = u.T @ u / len(u)
    w, V = np.linalg.eigh(M)
    fast, slow = V[:, 1], V[:, 0]
    # deterministic orientation
    if fast[np.argmax(np.abs(fast))] < 0:
        fast = -fast
    slow = np.array([-fast[1], fast[0]])
    r = w[1] / max(w[0], 1e-300)
    if r < ratio and raise_on_degenerate:
        raise DegenerateMoments(f"eigenvalue ratio {r:.4f} below {ratio}", (fast, slow), float(r))
    return fast, slow


def _envelope_exponent(lk, D, direction, upper=0.0):
    proj = np.abs(D @ direction).max(axis=0)
    ll = np.log(lk)
    keep = ll >= ll[0] + upper * (ll[-1] - ll[0]) - 1e-12
    keep &= proj > 0
    if keep.sum() < 3:
        raise BadFit("fewer than three usable frames in the upper half", np.nan, np.nan)
    A = np.column_stack([ll[keep], np.ones(keep.sum())])
    coef, *_ = np.linalg.lstsq(A, np.log(proj[keep]), rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - np.log(proj[keep])) ** 2)))
    return float(coef[0]), res


def estimate_exponents(records, dirs=None, max_residual=0.25, min_records=8, min_decades=3.0,
                       upper=0.0) -> ExponentEstimate:
    """Envelope growth exponents along the fast and slow directions.

    The envelope is the ensemble maximum of |dp . dir| at every frame; its
    log-log slope is fitted over the frames whose log l lies in the top
    ``1 - upper`` fraction of the range.
    """
    if len(records) < min_records:
        raise ValueError(f"need at least {min_records} records")
    lk, D = _common(records)
    if np.log10(lk[-1] / lk[0]) < min_decades - 1e-9:
        raise ValueError(f"frames span less than {min_decades} decades")
    if dirs is None:
        dirs = principal_growth_directions(records, min_records, raise_on_degenerate=False)
    fast, slow = (np.asarray(x, float) for x in dirs)
    nu_f, r_f = _envelope_exponent(lk, D, fast, upper)
    nu_s, r_s = _envelope_exponent(lk, D, slow, upper)
    resid = max(r_f, r_s)
    if resid > max_residual:
        raise BadFit(f"envelope residual {resid:.3f} exceeds {max_residual}", (nu_f, nu_s), resid)
    nu2, nu3 = (min(max(x, 1e-12), 1.0) for x in (nu_f, nu_s))
    if nu3 > nu2:
        nu2, nu3, fast, slow = nu3, nu2, slow, fast
    return ExponentEstimate(nu2, nu3, fast, slow, resid, len(records),
                            {"residual_fast": r_f, "residual_slow": r_s, "frames": lk.tolist(),
                             "raw": (nu_f, nu_s)})


class DeviationExponentEstimator:
    """sklearn-style facade: ``fit`` on trajectories or polylines, results in ``estimate_``."""

    def __init__(self, l0=1.0, gamma=2.0, k_min=6, max_residual=0.25):
        self.l0 = l0
        self.gamma = gamma
        self.k_min = k_min
        self.max_residual = max_residual

    def get_params(self, deep=True):
        return {"l0": self.l0, "gamma": self.gamma, "k_min": self.k_min, "max_residual": self.max_residual}

    def set_params(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)
        return self

    def fit(self, trajectories, y=None):
        spec = FrameSpec(self.l0, self.gamma, self.k_min)
        self.records_ = [record_displacements(t, spec, i) for i, t in enumerate(trajectories)]
        self.estimate_ = estimate_exponents(self.records_, max_residual=self.max_residual)
        self.nu2_, self.nu3_ = self.estimate_.nu2, self.estimate_.nu3
        return self


# ---------------------------------------------------------------------------
# synthetic walks with planted exponents


def fbm(n, hurst, rng, scale=1.0):
    """Fractional Brownian motion at times 1..n (Davies-Harte circulant embedding)."""
    if hurst >= 1.0:
        return scale * rng.standard_normal() * np.arange(1, n + 1, dtype=float)
    k = np.arange(n + 1, dtype=float)
    gamma = 0.5 * (np.abs(k + 1) ** (2 * hurst) - 2 * k ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-8 * lam.max():
        raise ValueError("circulant embedding is not positive for this Hurst index")
    lam = np.clip(lam, 0.0, None)
    m = len(row)
    z = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    w = np.fft.fft(np.sqrt(lam / m) * z)
    incr = w.real[:n]
    return scale * np.cumsum(incr)


def synthetic_walks(nu_fast, nu_slow, n_walks, n_steps, rng, angle=0.0):
    """Planar walks whose coordinates are independent fBm with the given Hurst indices."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    out = []
    for _ in range(n_walks):
        x = fbm(n_steps, nu_fast, rng)
        y = fbm(n_steps, nu_slow, rng)
        out.append(np.vstack([[0.0, 0.0], np.column_stack([x, y]) @ rot.T]))
    return out


def walk_records(walks, l0=1.0, gamma=2.0):
    """Records indexed by step count (the walks' natural time)."""
    recs = []
    for i, w in enumerate(walks):
        n = len(w) - 1
        k_max = int(np.floor(np.log(n / l0) / np.log(gamma) + 1e-12))
        lk = l0 * gamma ** np.arange(k_max + 1)
        idx = np.rint(lk).astype(int)
        recs.append(DisplacementRecord(lk, w[idx] - w[0], i))
    return recs


# ---------------------------------------------------------------------------
# component census


SINGLE = "SingleComponent"
MANY = "ManyComponents"
INCONCLUSIVE = "Inconclusive"


def _open_components(g, level, half, grid_n, center):
    du = 2.0 * np.pi / grid_n
    u = center[0] + np.arange(-half + 0.381966 * du, half, du)
    v = center[1] + np.arange(-half + 0.381966 * du, half, du)
    try:
        return [p for p in marching_squares(g, level, u, v) if not p.closed]
    except EmptyLevelSet:
        return []


def plane_component_census(g, level, window_sizes, grid_n=64, merge_factor=4.0, center=(0.0, 0.0)):
    """Count distinct unbounded level-line components crossing growing square windows.

    Pieces inside a window of side W are merged when they belong to the same
    open polyline of a window ``merge_factor`` times larger.
    """
    sizes = [float(w) for w in window_sizes]
    if len(sizes) < 3 or np.any(np.diff(sizes) <= 0):
        raise ValueError("need at least three increasing window sizes")
    center = np.asarray(center, float)
    counts = []
    for W in sizes:
        small = _open_components(g, level, W / 2, grid_n, center)
        if not small:
            counts.append(0)
            continue
        big = _open_components(g, level, merge_factor * W / 2, grid_n, center)
        if not big:
            counts.append(len(small))
            continue
        owner = np.concatenate([np.full(len(p.points), i) for i, p in enumerate(big)])
        pts = np.vstack([p.points for p in big])
        from scipy.spatial import cKDTree
        tree = cKDTree(pts)
        ids = set()
        for p in small:
            _, j = tree.query(p.points[len(p.points) // 2])
            ids.add(int(owner[j]))
        counts.append(len(ids))
    counts = np.array(counts)
    if np.all(counts == 1):
        kind = SINGLE
    elif counts[0] > 0 and np.all(np.diff(counts) >= 0) and counts[-1] > counts[0]:
        kind = MANY
    else:
        kind = INCONCLUSIVE
    return kind, counts.tolist()
