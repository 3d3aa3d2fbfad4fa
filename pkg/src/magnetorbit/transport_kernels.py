"""Compiled recursions for the exponential relaxation kernel."""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def segment_weights(x):
    """Exact kernel weights of a linear segment of length x (in units of Lambda).

    Returns (E, w0, w1) with X_next = E X + w0 v_left + w1 v_right.
    """
    if x < 1e-4:
        x2 = x * x
        E = 1.0 - x + 0.5 * x2 - x2 * x / 6.0 + x2 * x2 / 24.0
        w0 = 0.5 * x - x2 / 3.0 + x2 * x / 8.0 - x2 * x2 / 30.0
        w1 = 0.5 * x - x2 / 6.0 + x2 * x / 24.0 - x2 * x2 / 120.0
        return E, w0, w1
    E = np.exp(-x)
    a = -np.expm1(-x) / x
    return E, a - E, 1.0 - a


@njit(cache=True, nogil=True)
def exp_filter(S, V, lam, X0):
    """X(s) = (1/lam) int_{-inf}^s v e^{(s'-s)/lam} ds' for piecewise linear v."""
    n, d = V.shape
    X = np.empty((n, d))
    for k in range(d):
        X[0, k] = X0[k]
    for j in range(n - 1):
        E, w0, w1 = segment_weights((S[j + 1] - S[j]) / lam)
        for k in range(d):
            X[j + 1, k] = E * X[j, k] + w0 * V[j, k] + w1 * V[j + 1, k]
    return X


@njit(cache=True, nogil=True)
def filter_accumulate(S, V, lam, X0, s_start, VX, XX):
    """Run the filter and add trapezoid integrals of v X^T and X X^T over s >= s_start.

    Returns the final filter state and the integrated s-length.
    """
    n, d = V.shape
    X = np.empty(d)
    Xn = np.empty(d)
    for k in range(d):
        X[k] = X0[k]
    T = 0.0
    for j in range(n - 1):
        ds = S[j + 1] - S[j]
        E, w0, w1 = segment_weights(ds / lam)
        for k in range(d):
            Xn[k] = E * X[k] + w0 * V[j, k] + w1 * V[j + 1, k]
        if S[j] >= s_start:
            hw = 0.5 * ds
            T += ds
            for a in range(d):
                for b in range(d):
                    VX[a, b] += hw * (V[j, a] * X[b] + V[j + 1, a] * Xn[b])
                    XX[a, b] += hw * (X[a] * X[b] + Xn[a] * Xn[b])
        for k in range(d):
            X[k] = Xn[k]
    return X, T


@njit(cache=True, nogil=True)
def window_filter(S, V, lam):
    """Flat-window average (1/lam) int_{s-lam}^s v ds' by trapezoid; NaN without history."""
    n, d = V.shape
    C = np.zeros((n, d))
    for j in range(n - 1):
        hw = 0.5 * (S[j + 1] - S[j])
        for k in range(d):
            C[j + 1, k] = C[j, k] + hw * (V[j, k] + V[j + 1, k])
    X = np.full((n, d), np.nan)
    i = 0
    for j in range(n):
        target = S[j] - lam
        if target < S[0]:
            continue
        while i + 1 < n and S[i + 1] <= target:
            i += 1
        # cumulative integral at target by linear interpolation of v
        t = 0.0
        if i + 1 < n and S[i + 1] > S[i]:
            t = (target - S[i]) / (S[i + 1] - S[i])
        for k in range(d):
            vt = V[i, k] + t * (V[i + 1, k] - V[i, k]) if i + 1 < n else V[i, k]
            ct = C[i, k] + 0.5 * (target - S[i]) * (V[i, k] + vt)
            X[j, k] = (C[j, k] - ct) / lam
    return X
