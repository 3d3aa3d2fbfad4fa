"""Crystal lattices, reciprocal lattices and Fourier-series dispersion laws."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .exceptions import DegenerateLattice

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class DirectLattice:
    """Three real-space periods stored as the rows of ``rows``."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float).reshape(3, 3)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def l1(self):
        return self.rows[0]

    @property
    def l2(self):
        return self.rows[1]

    @property
    def l3(self):
        return self.rows[2]

    @property
    def triple(self) -> float:
        return float(np.dot(self.rows[0], np.cross(self.rows[1], self.rows[2])))

    @classmethod
    def cubic(cls, a=1.0):
        return cls(a * np.eye(3))


@dataclass(frozen=True)
class ReciprocalLattice:
    """Reciprocal basis a_1, a_2, a_3 as rows, with (a_i, l_j) = 2 pi delta_ij."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float).reshape(3, 3)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def a1(self):
        return self.rows[0]

    @property
    def a2(self):
        return self.rows[1]

    @property
    def a3(self):
        return self.rows[2]

    def fractional(self, p):
        """Coordinates f with p = f @ rows."""
        p = np.asarray(p, dtype=float)
        return np.linalg.solve(self.rows.T, p.reshape(-1, 3).T).T.reshape(p.shape)

    def cartesian(self, f):
        return np.asarray(f, dtype=float) @ self.rows

    @property
    def cell_diameter(self) -> float:
        corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float)
        pts = corners @ self.rows
        d = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())


def reciprocal_from_direct(direct: DirectLattice) -> ReciprocalLattice:
    l1, l2, l3 = direct.rows
    triple = direct.triple
    if abs(triple) < 1e-12:
        raise DegenerateLattice(f"triple product {triple:.3e} is numerically zero")
    a1 = TWO_PI * np.cross(l2, l3) / triple
    a2 = TWO_PI * np.cross(l3, l1) / triple
    a3 = TWO_PI * np.cross(l1, l2) / triple
    return ReciprocalLattice(np.vstack([a1, a2, a3]))


def reduce_to_torus(lattice: ReciprocalLattice, p):
    """Split p into a representative of the unit cell and an integer shift."""
    p = np.asarray(p, dtype=float)
    f = lattice.fractional(p)
    shift = np.floor(f)
    frac = f - shift
    # rounding can push a coordinate to exactly 1
    wrap = frac >= 1.0
    shift = shift + wrap
    frac = np.where(wrap, frac - 1.0, frac)
    return lattice.cartesian(frac), shift.astype(np.int64)


@dataclass(frozen=True)
class FieldSetup:
    """Direction of B together with a right-handed frame (e1, e2, b_hat)."""

    b_hat: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @classmethod
    def from_direction(cls, b) -> "FieldSetup":
        b = np.asarray(b, dtype=float)
        nb = np.linalg.norm(b)
        if not np.isfinite(nb) or nb == 0.0:
            raise ValueError("field direction must be a non-zero finite vector")
        b = b / nb
        ref = np.array([0.0, 1.0, 0.0])
        if abs(b[1]) > 0.9:
            ref = np.array([0.0, 0.0, 1.0])
        e1 = np.cross(ref, b)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(b, e1)
        e2 /= np.linalg.norm(e2)
        return cls(b, e1, e2)

    @property
    def frame(self) -> np.ndarray:
        """3x2 matrix with columns e1, e2."""
        return np.column_stack([self.e1, self.e2])

    def to_plane(self, p):
        p = np.asarray(p, dtype=float)
        return np.stack([p @ self.e1, p @ self.e2], axis=-1)

    def rotated(self, axis, angle) -> "FieldSetup":
        """Field direction rotated by ``angle`` about ``axis`` (Rodrigues)."""
        k = np.asarray(axis, float)
        k = k / np.linalg.norm(k)
        b = self.b_hat
        b_rot = b * np.cos(angle) + np.cross(k, b) * np.sin(angle) + k * np.dot(k, b) * (1 - np.cos(angle))
        return FieldSetup.from_direction(b_rot)


@dataclass(frozen=True)
class DispersionRelation:
    """eps(p) = sum_k A_k cos(K_k . p + phi_k) + p.Q.p / 2.

    K_k = k_1 l_1 + k_2 l_2 + k_3 l_3 is built from the direct periods, which
    makes eps invariant under every reciprocal-lattice shift.  The optional
    quadratic term breaks periodicity and is only meant for the free-electron
    (spherical) reference band, in which case ``direct`` is None.
    """

    k: np.ndarray
    amp: np.ndarray
    phase: np.ndarray
    direct: DirectLattice | None = None
    quadratic: np.ndarray | None = None
    K: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = np.array(self.k, dtype=np.int64).reshape(-1, 3)
        amp = np.array(self.amp, dtype=float).reshape(-1)
        phase = np.array(self.phase, dtype=float).reshape(-1)
        if not (len(k) == len(amp) == len(phase)):
            raise ValueError("k, amp and phase must have equal length")
        if len(k) and self.direct is None:
            raise ValueError("Fourier harmonics need a direct lattice")
        for arr in (k, amp, phase):
            arr.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "amp", amp)
        object.__setattr__(self, "phase", phase)
        if self.quadratic is not None:
            q = np.array(self.quadratic, dtype=float).reshape(3, 3)
            q = 0.5 * (q + q.T)
            q.setflags(write=False)
            object.__setattr__(self, "quadratic", q)
        K = k @ self.direct.rows if self.direct is not None else np.zeros((0, 3))
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    @classmethod
    def from_harmonics(cls, harmonics, direct, quadratic=None):
        """Build from records {"k": [..], "amp": A, "phase": phi}."""
        if not isinstance(direct, DirectLattice) and direct is not None:
            direct = DirectLattice(direct)
        k = [h["k"] for h in harmonics]
        amp = [h.get("amp", 1.0) for h in harmonics]
        phase = [h.get("phase", 0.0) for h in harmonics]
        return cls(np.reshape(k, (-1, 3)), amp, phase, direct, quadratic)

    @property
    def harmonics(self):
        return [{"k": [int(x) for x in k], "amp": float(a), "phase": float(ph)}
                for k, a, ph in zip(self.k, self.amp, self.phase)]

    @property
    def is_periodic(self) -> bool:
        return self.direct is not None and self.quadratic is None

    @property
    def lattice(self) -> ReciprocalLattice | None:
        if self.direct is None:
            return None
        return reciprocal_from_direct(self.direct)

    def _arg(self, p):
        return p @ self.K.T + self.phase

    def energy(self, p):
        p = np.asarray(p, dtype=float)
        out = np.cos(self._arg(p)) @ self.amp
        if self.quadratic is not None:
            out = out + 0.5 * np.einsum("...i,ij,...j->...", p, self.quadratic, p)
        return out

    def gradient(self, p):
        p = np.asarray(p, dtype=float)
        out = -(np.sin(self._arg(p)) * self.amp) @ self.K
        if self.quadratic is not None:
            out = out + p @ self.quadratic
        return out

    def hessian(self, p):
        p = np.asarray(p, dtype=float)
        c = np.cos(self._arg(p)) * self.amp
        out = -np.einsum("...m,mi,mj->...ij", c, self.K, self.K)
        if self.quadratic is not None:
            out = out + self.quadratic
        return out


def evaluate_energy(disp: DispersionRelation, p):
    return disp.energy(p)


def gradient_energy(disp: DispersionRelation, p):
    return disp.gradient(p)


def energy_range(disp: DispersionRelation, samples: int = 32768, n_refine: int = 8):
    """Band bottom and top from a dense grid of the unit cell plus local polishing."""
    if samples < 1000:
        raise ValueError("energy_range needs at least 10^3 samples")
    if not disp.is_periodic:
        raise ValueError("energy_range requires a periodic dispersion")
    lat = disp.lattice
    n = int(np.ceil(samples ** (1.0 / 3.0)))
    t = (np.arange(n) + 0.5) / n
    f = np.stack(np.meshgrid(t, t, t, indexing="ij"), -1).reshape(-1, 3)
    p = lat.cartesian(f)
    e = disp.energy(p)

    def polish(sign, starts):
        vals = []
        for p0 in starts:
            res = optimize.minimize(lambda x: sign * disp.energy(x), p0,
                                    jac=lambda x: sign * disp.gradient(x),
                                    method="BFGS", options={"gtol": 1e-12})
            vals.append(float(disp.energy(res.x)))
        return vals

    order = np.argsort(e)
    e_min = min([e[order[0]]] + polish(1.0, p[order[:n_refine]]))
    e_max = max([e[order[-1]]] + polish(-1.0, p[order[::-1][:n_refine]]))
    return float(e_min), float(e_max)
