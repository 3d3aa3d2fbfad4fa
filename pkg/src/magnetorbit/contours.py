"""Marching-squares extraction of level lines, on a window or on a 2-torus."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .exceptions import EmptyLevelSet
from .planar import PlanarFourier, refine_edge_roots


@dataclass
class Polyline:
    points: np.ndarray
    closed: bool
    # lattice winding of a loop traced on a torus, None for window contours
    winding: tuple | None = None

    def __len__(self):
        return len(self.points)

    @property
    def length(self) -> float:
        pts = np.vstack([self.points, self.points[:1]]) if self.closed else self.points
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def _evaluate(g, pts):
    if isinstance(g, PlanarFourier):
        return g.value(pts)
    return np.asarray(g(pts[..., 0], pts[..., 1]), float)


def _edge_roots(g, level, P0, P1, iters=40):
    if len(P0) == 0:
        return np.zeros((0, 2))
    if isinstance(g, PlanarFourier):
        W, A, C, Q, q, c0 = g.args
        return refine_edge_roots(W, A, C, Q, q, c0, float(level),
                                 np.ascontiguousarray(P0), np.ascontiguousarray(P1), iters)
    # vectorised Illinois for generic callables
    a = np.zeros(len(P0))
    b = np.ones(len(P0))
    d = P1 - P0
    fa = _evaluate(g, P0) - level
    fb = _evaluate(g, P1) - level
    c = 0.5 * (a + b)
    for _ in range(iters):
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(fb != fa, (a * fb - b * fa) / (fb - fa), 0.5 * (a + b))
        c = np.clip(np.nan_to_num(c, nan=0.5), 0.0, 1.0)
        fc = _evaluate(g, P0 + c[:, None] * d) - level
        same_b = fc * fb > 0
        # regula falsi with the Illinois halving of the retained end
        fa = np.where(same_b, 0.5 * fa, fc)
        a = np.where(same_b, a, c)
        b = np.where(same_b, c, b)
        fb = np.where(same_b, fc, fb)
    return P0 + c[:, None] * d


class _Grid:
    """Node layout shared by the window and torus variants."""

    def __init__(self, nodes, periodic):
        self.nodes = nodes  # (nx, ny, 2) planar positions
        self.periodic = periodic
        self.nx, self.ny = nodes.shape[:2]

    def h_id(self, i, j):
        return i * self.ny + j

    def v_id(self, i, j):
        return self.nx * self.ny + i * self.ny + j


def _cell_segments(G, B, grid: _Grid, g, level, sub=8):
    """Pairs of crossed edge ids per cell, with the ambiguous cases resolved."""
    nx, ny = grid.nx, grid.ny
    if grid.periodic:
        ci, cj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        ip, jp = (ci + 1) % nx, (cj + 1) % ny
    else:
        ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
        ip, jp = ci + 1, cj + 1
    b0, b1, b2, b3 = B[ci, cj], B[ip, cj], B[ip, jp], B[ci, jp]
    bottom, right = grid.h_id(ci, cj), grid.v_id(ip, cj)
    top, left = grid.h_id(ci, jp), grid.v_id(ci, cj)
    cb, cr, ct, cl = b0 != b1, b1 != b2, b2 != b3, b3 != b0
    ncross = cb.astype(int) + cr + ct + cl
    segs = []
    two = ncross == 2
    # each two-crossing cell: connect its crossed edges in fixed order
    E = np.stack([bottom, right, top, left], -1)[two]
    M = np.stack([cb, cr, ct, cl], -1)[two]
    order = np.argsort(~M, axis=1, kind="stable")[:, :2]
    pairs = np.take_along_axis(E, order, axis=1)
    segs.append(pairs)
    amb = ncross == 4
    n_amb = int(amb.sum())
    if n_amb:
        ai, aj = ci[amb], cj[amb]
        aip, ajp = ip[amb], jp[amb]
        p00 = grid.nodes[ai, aj]
        # periodic grids wrap node indices; use lattice-consistent offsets instead
        if grid.periodic:
            du = np.broadcast_to(grid.step_u, p00.shape)
            dv = np.broadcast_to(grid.step_v, p00.shape)
        else:
            du = grid.nodes[aip, aj] - p00
            dv = grid.nodes[ai, ajp] - p00
        t = np.linspace(0.0, 1.0, sub + 1)
        conn02 = np.zeros(n_amb, bool)
        for k in range(n_amb):
            pts = p00[k] + t[:, None, None] * du[k] + t[None, :, None] * dv[k]
            val = _evaluate(g, pts) >= level
            mask = val == b0[amb][k]
            lab, _ = ndimage.label(mask)
            conn02[k] = lab[0, 0] != 0 and lab[0, 0] == lab[sub, sub]
        eb, er, et, el = bottom[amb], right[amb], top[amb], left[amb]
        # corners 0 and 2 joined: cut off corners 1 and 3, otherwise cut off 0 and 2
        segs.append(np.where(conn02[:, None], np.stack([eb, er], -1), np.stack([eb, el], -1)))
        segs.append(np.where(conn02[:, None], np.stack([et, el], -1), np.stack([er, et], -1)))
    return np.concatenate(segs, axis=0) if segs else np.zeros((0, 2), int), n_amb


def _link(segs, n_ids):
    """Chain segment pairs into open and closed sequences of edge ids."""
    nbr = np.full((n_ids, 2), -1, dtype=np.int64)
    cnt = np.zeros(n_ids, dtype=np.int64)
    for a, b in segs:
        nbr[a, cnt[a]] = b
        cnt[a] += 1
        nbr[b, cnt[b]] = a
        cnt[b] += 1
    used = np.zeros(n_ids, bool)
    chains = []

    def walk(start):
        chain = [start]
        used[start] = True
        prev, cur = -1, start
        while True:
            nxt = -1
            for c in nbr[cur, :cnt[cur]]:
                if c != prev and not used[c]:
                    nxt = c
                    break
            if nxt < 0:
                closed = cnt[cur] == 2 and start in nbr[cur, :cnt[cur]] and len(chain) > 2
                return chain, closed
            chain.append(nxt)
            used[nxt] = True
            prev, cur = cur, nxt

    for e in np.nonzero(cnt == 1)[0]:
        if not used[e]:
            chains.append(walk(e))
    for e in np.nonzero(cnt == 2)[0]:
        if not used[e]:
            chains.append(walk(e))
    return chains


def _crossings(G, B, grid: _Grid, g, level):
    """Positions of all crossed edges, keyed by edge id."""
    nx, ny = grid.nx, grid.ny
    pos = np.full((2 * nx * ny, 2), np.nan)
    if grid.periodic:
        i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        hi, vj = (i + 1) % nx, (j + 1) % ny
        hmask = B[i, j] != B[hi, j]
        vmask = B[i, j] != B[i, vj]
        P0h = grid.nodes[i, j][hmask]
        P1h = P0h + grid.step_u
        P0v = grid.nodes[i, j][vmask]
        P1v = P0v + grid.step_v
        ih, jh, iv, jv = i[hmask], j[hmask], i[vmask], j[vmask]
    else:
        i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="ij")
        hmask = B[i, j] != B[i + 1, j]
        ih, jh = i[hmask], j[hmask]
        P0h, P1h = grid.nodes[ih, jh], grid.nodes[ih + 1, jh]
        i, j = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="ij")
        vmask = B[i, j] != B[i, j + 1]
        iv, jv = i[vmask], j[vmask]
        P0v, P1v = grid.nodes[iv, jv], grid.nodes[iv, jv + 1]
    pos[grid.h_id(ih, jh)] = _edge_roots(g, level, P0h, P1h)
    pos[grid.v_id(iv, jv)] = _edge_roots(g, level, P0v, P1v)
    return pos


def marching_squares(g, level, u, v, *, periodic_steps=None, sub=8):
    """Level lines of g on the tensor grid u x v.

    With ``periodic_steps=(step_u, step_v)`` the grid is read as a torus: node
    (i, j) sits at (u[0], v[0]) + i step_u + j step_v, ``len(u)`` steps close
    the first period, and the returned loops carry their winding numbers.
    """
    if periodic_steps is None:
        nodes = np.stack(np.meshgrid(u, v, indexing="ij"), -1)
        grid = _Grid(nodes, False)
    else:
        su, sv = (np.asarray(s, float) for s in periodic_steps)
        nu, nv = len(u), len(v)
        i, j = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
        origin = np.array([u[0], v[0]], float)
        nodes = origin + i[..., None] * su + j[..., None] * sv
        grid = _Grid(nodes, True)
        grid.step_u, grid.step_v = su, sv
    G = _evaluate(g, nodes)
    B = G >= level
    segs, n_amb = _cell_segments(G, B, grid, g, level, sub=sub)
    if len(segs) == 0:
        raise EmptyLevelSet(f"no sign change of g - {level:g} on the grid")
    pos = _crossings(G, B, grid, g, level)
    chains = _link(segs, 2 * grid.nx * grid.ny)
    out = []
    for chain, closed in chains:
        pts = pos[np.asarray(chain)]
        winding = None
        if grid.periodic:
            # lift the loop: consecutive crossings are within one cell of each other
            basis = np.column_stack([grid.step_u * grid.nx, grid.step_v * grid.ny])
            frac = np.linalg.solve(basis, (pts - nodes[0, 0]).T).T
            d = np.diff(np.vstack([frac, frac[:1]]), axis=0)
            jump = np.round(d)
            winding = tuple(int(x) for x in -jump.sum(0))
            lifted = np.vstack([frac[:1], frac[:1] + np.cumsum(d[:-1] - jump[:-1], axis=0)])
            pts = nodes[0, 0] + lifted @ basis.T
        out.append(Polyline(pts, bool(closed), winding))
    return out


def contour_seeds(g, level, window, grid_n=256, offset=0.3819660112501051):
    """Marching-squares contours of {g = level} inside ``window``.

    ``grid_n`` is the number of grid cells per 2 pi of plane coordinate.  The
    node lattice is shifted by ``offset`` of a spacing so symmetric saddles do
    not land on nodes.
    """
    if grid_n < 64:
        raise ValueError("grid_n must be at least 64 per 2 pi")
    umin, umax, vmin, vmax = window
    du = 2.0 * np.pi / grid_n
    u = np.arange(umin + offset * du, umax, du)
    v = np.arange(vmin + offset * du, vmax, du)
    return marching_squares(g, level, u, v)


def torus_contours(g, level, origin, w1, w2, n=256):
    """Closed level curves of a doubly periodic g on the torus spanned by w1, w2."""
    w1, w2 = np.asarray(w1, float), np.asarray(w2, float)
    u = origin[0] + np.zeros(n)
    v = origin[1] + np.zeros(n)
    return marching_squares(g, level, u, v, periodic_steps=(w1 / n, w2 / n))
