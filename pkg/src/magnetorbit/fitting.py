"""Log-log power-law fits: ordinary least squares and the upper envelope."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from sklearn.base import BaseEstimator, RegressorMixin

from .exceptions import BadFit


@dataclass(frozen=True)
class SlopeFit:
    slope: float  # upper-envelope slope (limsup convention)
    residual: float
    ols_slope: float
    ols_residual: float
    intercept: float
    ols_intercept: float
    window: tuple


def _loglog(x, y, window, min_points, min_decades):
    x = np.asarray(x, float)
    y = np.abs(np.asarray(y, float))
    if window is not None:
        lo, hi = window
        keep = (x >= lo * (1 - 1e-12)) & (x <= hi * (1 + 1e-12))
        x, y = x[keep], y[keep]
    if len(x) < min_points:
        raise BadFit(f"need at least {min_points} samples, got {len(x)}", np.nan, np.nan)
    if not (np.all(x > 0) and np.all(np.isfinite(y))) or np.any(y <= 0):
        raise BadFit("log-log fit needs positive finite samples", np.nan, np.nan)
    lx, ly = np.log(x), np.log(y)
    if (lx.max() - lx.min()) / np.log(10) < min_decades - 1e-9:
        raise BadFit(f"samples span less than {min_decades} decades", np.nan, np.nan)
    return lx, ly


def envelope_line(lx, ly):
    """Line a + s x lying above every point with the least total gap."""
    n = len(lx)
    # variables (a, s); minimise sum(a + s x_i) s.t. -(a + s x_i) <= -y_i
    c = np.array([n, lx.sum()])
    A = -np.column_stack([np.ones(n), lx])
    res = linprog(c, A_ub=A, b_ub=-ly, bounds=[(None, None), (None, None)], method="highs")
    if not res.success:
        raise BadFit("envelope program failed: " + res.message, np.nan, np.nan)
    a, s = res.x
    return float(s), float(a)


def asymptotic_slope(x, y, window=None, min_points=8, min_decades=2.0) -> SlopeFit:
    """Envelope and least-squares slopes of log|y| against log x."""
    lx, ly = _loglog(x, y, window, min_points, min_decades)
    A = np.column_stack([lx, np.ones_like(lx)])
    (s_ols, a_ols), *_ = np.linalg.lstsq(A, ly, rcond=None)
    r_ols = float(np.sqrt(np.mean((ly - A @ [s_ols, a_ols]) ** 2)))
    s_env, a_env = envelope_line(lx, ly)
    r_env = float(np.sqrt(np.mean((a_env + s_env * lx - ly) ** 2)))
    win = (float(np.exp(lx.min())), float(np.exp(lx.max())))
    return SlopeFit(s_env, r_env, float(s_ols), r_ols, a_env, float(a_ols), win)


class PowerLawEnvelope(RegressorMixin, BaseEstimator):
    """y ~ C x^slope fitted on log-log axes.

    ``method='envelope'`` predicts with the upper-envelope line, ``'ols'``
    with the least-squares one.  Both are always stored after ``fit``.
    """

    def __init__(self, method="envelope", window=None, min_points=8, min_decades=2.0):
        self.method = method
        self.window = window
        self.min_points = min_points
        self.min_decades = min_decades

    def fit(self, X, y):
        x = np.asarray(X, float).reshape(-1)
        fit = asymptotic_slope(x, y, self.window, self.min_points, self.min_decades)
        self.fit_ = fit
        self.envelope_slope_ = fit.slope
        self.ols_slope_ = fit.ols_slope
        if self.method == "envelope":
            self.slope_, self.intercept_ = fit.slope, fit.intercept
        elif self.method == "ols":
            self.slope_, self.intercept_ = fit.ols_slope, fit.ols_intercept
        else:
            raise ValueError("method must be 'envelope' or 'ols'")
        return self

    def predict(self, X):
        x = np.asarray(X, float).reshape(-1)
        return np.exp(self.intercept_ + self.slope_ * np.log(x))
