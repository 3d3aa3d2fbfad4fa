"""Planar Fourier sums and the compiled level-line integrator.

Every trajectory problem in the package reduces to following a level line of

    g(r) = sum_m A_m cos(W_m . r + C_m) + r.Q.r / 2 + q . r + c0,   r in R^2,

along the Hamiltonian flow dr/ds = sign * (dg/dv, -dg/du).  A plane section of
a Fourier dispersion and a quasiperiodic function with N quasiperiods are both
of this form, so a single kernel serves the slicer and the quasilevel modules.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

# status codes returned by the kernel
S_MAX, L_MAX, CLOSED, SADDLE, BOX_EXIT, STEP_FAIL = 0, 1, 2, 3, 4, 5
STATUS_NAMES = {S_MAX: "s_max", L_MAX: "l_max", CLOSED: "closed", SADDLE: "saddle",
                BOX_EXIT: "box_exit", STEP_FAIL: "step_fail"}


@dataclass(frozen=True)
class PlanarFourier:
    W: np.ndarray
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    q: np.ndarray
    c0: float = 0.0

    def __post_init__(self):
        W = np.ascontiguousarray(np.asarray(self.W, float).reshape(-1, 2))
        A = np.ascontiguousarray(np.asarray(self.A, float).reshape(-1))
        C = np.ascontiguousarray(np.asarray(self.C, float).reshape(-1))
        Q = np.ascontiguousarray(np.asarray(self.Q, float).reshape(2, 2))
        q = np.ascontiguousarray(np.asarray(self.q, float).reshape(2))
        for name, val in zip("WACQq", (W, A, C, Q, q)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "c0", float(self.c0))

    @classmethod
    def from_dispersion(cls, disp, origin, frame) -> "PlanarFourier":
        """Restriction of a dispersion to the plane origin + frame @ r."""
        origin = np.asarray(origin, float)
        frame = np.asarray(frame, float)
        W = disp.K @ frame
        C = disp.K @ origin + disp.phase
        if disp.quadratic is not None:
            Q3 = disp.quadratic
            Q = frame.T @ Q3 @ frame
            q = frame.T @ Q3 @ origin
            c0 = 0.5 * origin @ Q3 @ origin
        else:
            Q, q, c0 = np.zeros((2, 2)), np.zeros(2), 0.0
        return cls(W, disp.amp, C, Q, q, c0)

    @property
    def args(self):
        return self.W, self.A, self.C, self.Q, self.q, self.c0

    @property
    def is_periodic_sum(self) -> bool:
        return not (self.Q.any() or self.q.any())

    def _phase(self, r):
        return np.asarray(r, float) @ self.W.T + self.C

    def value(self, r):
        r = np.asarray(r, float)
        out = np.cos(self._phase(r)) @ self.A + self.c0 + r @ self.q
        return out + 0.5 * np.einsum("...i,ij,...j->...", r, self.Q, r)

    def __call__(self, u, v):
        return self.value(np.stack(np.broadcast_arrays(u, v), axis=-1))

    def gradient(self, r):
        r = np.asarray(r, float)
        return -(np.sin(self._phase(r)) * self.A) @ self.W + r @ self.Q + self.q

    def hessian(self, r):
        c = np.cos(self._phase(r)) * self.A
        return -np.einsum("...m,mi,mj->...ij", c, self.W, self.W) + self.Q


# ---------------------------------------------------------------------------
# compiled kernels

@njit(cache=True, nogil=True)
def _val(W, A, C, Q, q, c0, x, y):
    out = c0 + q[0] * x + q[1] * y + 0.5 * (Q[0, 0] * x * x + 2.0 * Q[0, 1] * x * y + Q[1, 1] * y * y)
    for m in range(W.shape[0]):
        out += A[m] * np.cos(W[m, 0] * x + W[m, 1] * y + C[m])
    return out


@njit(cache=True, nogil=True)
def _grad(W, A, C, Q, q, x, y):
    gx = q[0] + Q[0, 0] * x + Q[0, 1] * y
    gy = q[1] + Q[0, 1] * x + Q[1, 1] * y
    for m in range(W.shape[0]):
        s = A[m] * np.sin(W[m, 0] * x + W[m, 1] * y + C[m])
        gx -= s * W[m, 0]
        gy -= s * W[m, 1]
    return gx, gy


@njit(cache=True, nogil=True)
def _val_grad(W, A, C, Q, q, c0, x, y):
    val = c0 + q[0] * x + q[1] * y + 0.5 * (Q[0, 0] * x * x + 2.0 * Q[0, 1] * x * y + Q[1, 1] * y * y)
    gx = q[0] + Q[0, 0] * x + Q[0, 1] * y
    gy = q[1] + Q[0, 1] * x + Q[1, 1] * y
    for m in range(W.shape[0]):
        ph = W[m, 0] * x + W[m, 1] * y + C[m]
        val += A[m] * np.cos(ph)
        s = A[m] * np.sin(ph)
        gx -= s * W[m, 0]
        gy -= s * W[m, 1]
    return val, gx, gy


@njit(cache=True, nogil=True)
def _project(W, A, C, Q, q, c0, level, x, y, tol):
    for _ in range(3):
        val, gx, gy = _val_grad(W, A, C, Q, q, c0, x, y)
        d = val - level
        if abs(d) <= tol:
            break
        n2 = gx * gx + gy * gy
        if n2 == 0.0:
            break
        x -= d * gx / n2
        y -= d * gy / n2
    return x, y


@njit(cache=True, nogil=True)
def _rhs(W, A, C, Q, q, sign, x, y):
    gx, gy = _grad(W, A, C, Q, q, x, y)
    return sign * gy, -sign * gx, np.sqrt(gx * gx + gy * gy)


@njit(cache=True, nogil=True)
def _dp_step(W, A, C, Q, q, sign, x, y, h):
    """One Dormand-Prince 5(4) step; returns new point, arc increment and error."""
    k1x, k1y, k1l = _rhs(W, A, C, Q, q, sign, x, y)
    k2x, k2y, k2l = _rhs(W, A, C, Q, q, sign, x + h * (k1x / 5.0), y + h * (k1y / 5.0))
    k3x, k3y, k3l = _rhs(W, A, C, Q, q, sign,
                         x + h * (3.0 / 40.0 * k1x + 9.0 / 40.0 * k2x),
                         y + h * (3.0 / 40.0 * k1y + 9.0 / 40.0 * k2y))
    k4x, k4y, k4l = _rhs(W, A, C, Q, q, sign,
                         x + h * (44.0 / 45.0 * k1x - 56.0 / 15.0 * k2x + 32.0 / 9.0 * k3x),
                         y + h * (44.0 / 45.0 * k1y - 56.0 / 15.0 * k2y + 32.0 / 9.0 * k3y))
    k5x, k5y, k5l = _rhs(W, A, C, Q, q, sign,
                         x + h * (19372.0 / 6561.0 * k1x - 25360.0 / 2187.0 * k2x
                                  + 64448.0 / 6561.0 * k3x - 212.0 / 729.0 * k4x),
                         y + h * (19372.0 / 6561.0 * k1y - 25360.0 / 2187.0 * k2y
                                  + 64448.0 / 6561.0 * k3y - 212.0 / 729.0 * k4y))
    k6x, k6y, k6l = _rhs(W, A, C, Q, q, sign,
                         x + h * (9017.0 / 3168.0 * k1x - 355.0 / 33.0 * k2x + 46732.0 / 5247.0 * k3x
                                  + 49.0 / 176.0 * k4x - 5103.0 / 18656.0 * k5x),
                         y + h * (9017.0 / 3168.0 * k1y - 355.0 / 33.0 * k2y + 46732.0 / 5247.0 * k3y
                                  + 49.0 / 176.0 * k4y - 5103.0 / 18656.0 * k5y))
    xn = x + h * (35.0 / 384.0 * k1x + 500.0 / 1113.0 * k3x + 125.0 / 192.0 * k4x
                  - 2187.0 / 6784.0 * k5x + 11.0 / 84.0 * k6x)
    yn = y + h * (35.0 / 384.0 * k1y + 500.0 / 1113.0 * k3y + 125.0 / 192.0 * k4y
                  - 2187.0 / 6784.0 * k5y + 11.0 / 84.0 * k6y)
    dl = h * (35.0 / 384.0 * k1l + 500.0 / 1113.0 * k3l + 125.0 / 192.0 * k4l
              - 2187.0 / 6784.0 * k5l + 11.0 / 84.0 * k6l)
    k7x, k7y, k7l = _rhs(W, A, C, Q, q, sign, xn, yn)
    ex = h * (71.0 / 57600.0 * k1x - 71.0 / 16695.0 * k3x + 71.0 / 1920.0 * k4x
              - 17253.0 / 339200.0 * k5x + 22.0 / 525.0 * k6x - 1.0 / 40.0 * k7x)
    ey = h * (71.0 / 57600.0 * k1y - 71.0 / 16695.0 * k3y + 71.0 / 1920.0 * k4y
              - 17253.0 / 339200.0 * k5y + 22.0 / 525.0 * k6y - 1.0 / 40.0 * k7y)
    return xn, yn, dl, np.sqrt(ex * ex + ey * ey)


@njit(cache=True, nogil=True)
def _outside(box, x, y):
    return max(box[0] - x, x - box[1], box[2] - y, y - box[3])


@njit(cache=True, nogil=True)
def _substep(W, A, C, Q, q, c0, level, sign, x, y, h, ptol):
    xn, yn, dl, err = _dp_step(W, A, C, Q, q, sign, x, y, h)
    xn, yn = _project(W, A, C, Q, q, c0, level, xn, yn, ptol)
    return xn, yn, dl


@njit(cache=True, nogil=True)
def trace_kernel(W, A, C, Q, q, c0, level, start, sign, s0, l0, s_max, l_max,
                 tol, h_init, max_arc_step, tol_sing, proj_tol,
                 ref, t_ref, use_closure, use_lattice, P, AE, ab, ab_tol, tol_close, tol_dir,
                 box, use_box, cap):
    """Integrate a level line of the planar sum.

    ``ref``/``t_ref`` define the Poincare section used for closure: a return
    p(s) = ref + g with g an in-plane lattice vector (P maps planar
    displacements to fractional coordinates, AE maps integer shifts back to
    the plane, ab holds (a_i . b) for the in-plane test).
    Returns (R, S, L, n, status, shift, period).
    """
    R = np.empty((cap, 2))
    S = np.empty(cap)
    L = np.empty(cap)
    shift = np.zeros(3, dtype=np.int64)
    period = np.nan
    x, y = start[0], start[1]
    s, l = s0, l0
    R[0, 0] = x
    R[0, 1] = y
    S[0] = s
    L[0] = l
    n = 1
    gx, gy = _grad(W, A, C, Q, q, x, y)
    sp = np.sqrt(gx * gx + gy * gy)
    if sp < tol_sing:
        return R[:n], S[:n], L[:n], n, SADDLE, shift, period
    h = h_init
    if h <= 0.0:
        h = 0.1 * max_arc_step / sp
    status = S_MAX
    nrm = np.empty(3)
    while True:
        if s >= s_max:
            status = S_MAX
            break
        if l >= l_max:
            status = L_MAX
            break
        if h * sp > max_arc_step:
            h = max_arc_step / sp
        last = False
        if s + h >= s_max:
            h = s_max - s
            last = True
        xn, yn, dl, err = _dp_step(W, A, C, Q, q, sign, x, y, h)
        if err > tol:
            h *= max(0.2, 0.9 * (tol / err) ** 0.2)
            if h < 1e-15 * (1.0 + abs(s)):
                status = STEP_FAIL
                break
            continue
        xn, yn = _project(W, A, C, Q, q, c0, level, xn, yn, proj_tol)
        sn = s_max if last else s + h
        ln = l + dl
        gx, gy = _grad(W, A, C, Q, q, xn, yn)
        spn = np.sqrt(gx * gx + gy * gy)
        done = False

        if use_closure:
            dx = xn - ref[0]
            dy = yn - ref[1]
            inplane = True
            g2x = 0.0
            g2y = 0.0
            if use_lattice:
                tot = 0.0
                mag = 0.0
                for i in range(3):
                    nrm[i] = np.floor(P[i, 0] * dx + P[i, 1] * dy + 0.5)
                    tot += nrm[i] * ab[i]
                    mag += abs(nrm[i])
                inplane = abs(tot) <= ab_tol * (1.0 + mag)
                if inplane:
                    for i in range(3):
                        g2x += nrm[i] * AE[i, 0]
                        g2y += nrm[i] * AE[i, 1]
            if inplane:
                ux = dx - g2x
                uy = dy - g2y
                sig_new = ux * t_ref[0] + uy * t_ref[1]
                sig_old = (x - ref[0] - g2x) * t_ref[0] + (y - ref[1] - g2y) * t_ref[1]
                if sig_old < 0.0 <= sig_new and np.sqrt(ux * ux + uy * uy) <= 2.0 * dl + tol_close:
                    # Illinois refinement of the section crossing inside this step
                    a, fa = 0.0, sig_old
                    b, fb = h, sig_new
                    xc, yc, dlc = xn, yn, dl
                    c = h
                    side = 0
                    for _ in range(60):
                        c = (a * fb - b * fa) / (fb - fa)
                        xc, yc, dlc = _substep(W, A, C, Q, q, c0, level, sign, x, y, c, proj_tol)
                        fc = (xc - ref[0] - g2x) * t_ref[0] + (yc - ref[1] - g2y) * t_ref[1]
                        if abs(fc) < 1e-14 * (1.0 + abs(ref[0]) + abs(ref[1])) or abs(b - a) < 1e-16 * h:
                            break
                        if fc * fb > 0.0:
                            b, fb = c, fc
                            if side == 1:
                                fa *= 0.5
                            side = 1
                        else:
                            a, fa = c, fc
                            if side == -1:
                                fb *= 0.5
                            side = -1
                    tx = xc - ref[0] - g2x
                    ty = yc - ref[1] - g2y
                    trans = np.sqrt(tx * tx + ty * ty)
                    vx, vy, vs = _rhs(W, A, C, Q, q, sign, xc, yc)
                    ang = np.arctan2(abs(vx * t_ref[1] - vy * t_ref[0]), vx * t_ref[0] + vy * t_ref[1])
                    if trans < tol_close and ang < tol_dir:
                        xn, yn = xc, yc
                        sn = s + c
                        ln = l + dlc
                        for i in range(3):
                            shift[i] = np.int64(nrm[i]) if use_lattice else 0
                        period = sn
                        status = CLOSED
                        done = True

        if not done and use_box and _outside(box, xn, yn) > 0.0:
            a, b = 0.0, h
            xc, yc, dlc = xn, yn, dl
            for _ in range(50):
                c = 0.5 * (a + b)
                xt, yt, dlt = _substep(W, A, C, Q, q, c0, level, sign, x, y, c, proj_tol)
                if _outside(box, xt, yt) > 0.0:
                    b = c
                    xc, yc, dlc = xt, yt, dlt
                else:
                    a = c
            xn, yn = xc, yc
            sn = s + b
            ln = l + dlc
            status = BOX_EXIT
            done = True

        if not done and spn < tol_sing:
            status = SADDLE
            done = True

        if n >= cap:
            cap2 = 2 * cap
            R2 = np.empty((cap2, 2))
            S2 = np.empty(cap2)
            L2 = np.empty(cap2)
            R2[:n] = R[:n]
            S2[:n] = S[:n]
            L2[:n] = L[:n]
            R, S, L, cap = R2, S2, L2, cap2
        R[n, 0] = xn
        R[n, 1] = yn
        S[n] = sn
        L[n] = ln
        n += 1
        if done:
            break
        x, y, s, l, sp = xn, yn, sn, ln, spn
        if err > 0.0:
            h *= min(5.0, 0.9 * (tol / err) ** 0.2)
        else:
            h *= 5.0
    return R[:n], S[:n], L[:n], n, status, shift, period


@njit(cache=True, nogil=True)
def refine_edge_roots(W, A, C, Q, q, c0, level, P0, P1, iters):
    """Level crossings on segments P0 -> P1 (bracketed), Illinois iteration."""
    m = P0.shape[0]
    out = np.empty((m, 2))
    for i in range(m):
        ax, ay = P0[i, 0], P0[i, 1]
        dx, dy = P1[i, 0] - ax, P1[i, 1] - ay
        a, b = 0.0, 1.0
        fa = _val(W, A, C, Q, q, c0, ax, ay) - level
        fb = _val(W, A, C, Q, q, c0, ax + dx, ay + dy) - level
        c = 0.5
        if fa == 0.0:
            c = 0.0
        elif fb == 0.0:
            c = 1.0
        elif fa * fb > 0.0:
            c = 0.5
        else:
            side = 0
            for _ in range(iters):
                c = (a * fb - b * fa) / (fb - fa)
                fc = _val(W, A, C, Q, q, c0, ax + c * dx, ay + c * dy) - level
                if fc == 0.0 or b - a < 1e-15:
                    break
                if fc * fb > 0.0:
                    b, fb = c, fc
                    if side == 1:
                        fa *= 0.5
                    side = 1
                else:
                    a, fa = c, fc
                    if side == -1:
                        fb *= 0.5
                    side = -1
        out[i, 0] = ax + c * dx
        out[i, 1] = ay + c * dy
    return out



@njit(cache=True, nogil=True)
def uniform_kernel(W, A, C, Q, q, c0, level, start, sign, h, nsteps, proj_tol):
    """Fixed-step Dormand-Prince integration with projection, nsteps + 1 samples."""
    R = np.empty((nsteps + 1, 2))
    L = np.empty(nsteps + 1)
    x, y = start[0], start[1]
    R[0, 0] = x
    R[0, 1] = y
    L[0] = 0.0
    for j in range(nsteps):
        x, y, dl = _substep(W, A, C, Q, q, c0, level, sign, x, y, h, proj_tol)
        R[j + 1, 0] = x
        R[j + 1, 1] = y
        L[j + 1] = L[j] + dl
    return R, L
