"""File emission: atomic CSV/JSON/SVG writers with deterministic formatting."""
from __future__ import annotations

import colorsys
import json
import os
import tempfile
import zlib
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
TRAJECTORY_HEADER = ("s", "px", "py", "pz", "branch_id")
CONDUCTIVITY_HEADER = ("lambda", "sxx", "sxy", "sxz", "syx", "syy", "syz", "szx", "szy", "szz")
DIAGRAM_HEADER = ("theta", "phi", "regime", "m1", "m2", "m3", "rationality")


class IoError(OSError):
    pass


def write_atomic(path, text: str):
    """Write ``text`` to a sibling temp file and rename it over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix="." + path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def fmt(x) -> str:
    """Shortest round-trip text of a number; integers stay integers, None is empty."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def _plain(obj):
    """numpy-free copy of ``obj`` suitable for json.dumps."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def json_text(kind: str, payload) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind}
    doc.update(_plain(payload))
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_csv(path, header, rows):
    return write_atomic(path, csv_text(header, rows))


def write_json(path, kind, payload):
    return write_atomic(path, json_text(kind, payload))


# ---------------------------------------------------------------------------
# row builders


def trajectory_rows(trajs):
    """(s, px, py, pz, branch_id) rows of a list of trajectories, concatenated."""
    for bid, t in enumerate(trajs):
        S = np.asarray(t.params, float)
        P = np.asarray(t.points, float)
        for s, p in zip(S, P):
            yield (s, p[0], p[1], p[2], bid)


def conductivity_rows(curve):
    for lam, sig in zip(curve.lambdas, curve.tensors):
        yield (lam, *sig.reshape(-1))


def diagram_rows(cells):
    for c in cells:
        m = c.m if c.m is not None else (None, None, None)
        yield (c.theta, c.phi, c.regime, *m, c.rationality)


# ---------------------------------------------------------------------------
# SVG


def _hue(key) -> str:
    h = (zlib.crc32(repr(key).encode()) % 360) / 360.0
    r, g, b = colorsys.hls_to_rgb(h, 0.55, 0.6)
    return "#%02x%02x%02x" % (int(r * 255), int(g * 255), int(b * 255))


def _svg(width, height, body) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n' + "\n".join(body) + "\n</svg>\n")


def _path(points, close=False) -> str:
    pts = " L ".join(f"{x:.3f} {y:.3f}" for x, y in points)
    return "M " + pts + (" Z" if close else "")


class _Frame:
    """Linear map of a data box into a pixel box with a margin."""

    def __init__(self, lo, hi, size=600, margin=40, equal=True):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        inner = size - 2 * margin
        sc = inner / span
        if equal:
            sc[:] = sc.min()
        self.lo, self.sc, self.margin, self.size = lo, sc, margin, size

    def __call__(self, P):
        P = np.asarray(P, float)
        x = self.margin + (P[..., 0] - self.lo[0]) * self.sc[0]
        y = self.size - self.margin - (P[..., 1] - self.lo[1]) * self.sc[1]
        return np.stack([x, y], -1)


def _thin(P, n=4000):
    if len(P) <= n:
        return P
    idx = np.unique(np.linspace(0, len(P) - 1, n).round().astype(int))
    return P[idx]


def trajectory_svg(planes, labels=None, size=600) -> str:
    """Polylines in slice-plane coordinates, one colour per branch."""
    planes = [np.asarray(P, float) for P in planes if len(P)]
    if not planes:
        return _svg(size, size, [])
    allp = np.vstack(planes)
    fr = _Frame(allp.min(0), allp.max(0), size)
    body = [f'<rect width="{size}" height="{size}" fill="white"/>']
    for i, P in enumerate(planes):
        lab = labels[i] if labels else str(i)
        body.append(f'<path class="trajectory" data-branch="{i}" data-label="{lab}" d="{_path(fr(_thin(P)))}" '
                    f'fill="none" stroke="{_hue(i)}" stroke-width="1"/>')
    return _svg(size, size, body)


def stereographic(P):
    """Project unit vectors (folded to z >= 0, since b and -b are equivalent) into the unit disk."""
    P = np.asarray(P, float).reshape(-1, 3)
    P = np.where(P[:, 2:3] < 0, -P, P)
    return P[:, :2] / (1.0 + P[:, 2:3])


def zone_map_svg(cells, zones, size=600) -> str:
    """Stereographic zone map: one filled path group per zone keyed by m, cells as dots."""
    fr = _Frame((-1.0, -1.0), (1.0, 1.0), size)
    c0 = fr(np.zeros(2))
    rad = fr(np.array([1.0, 0.0]))[0] - c0[0]
    body = [f'<rect width="{size}" height="{size}" fill="white"/>',
            f'<circle cx="{c0[0]:.3f}" cy="{c0[1]:.3f}" r="{rad:.3f}" fill="none" stroke="black"/>']
    for k, z in enumerate(zones):
        key = ",".join(str(int(x)) for x in z.m)
        col = _hue(tuple(int(x) for x in z.m))
        body.append(f'<g class="zone" id="zone-{k}" data-m="{key}">')
        if len(z.boundary) >= 3:
            body.append(f'  <path d="{_path(fr(stereographic(z.boundary)), close=True)}" fill="{col}" '
                        f'fill-opacity="0.5" stroke="{col}"/>')
        for i in z.members:
            x, y = fr(stereographic(cells[i].direction))[0]
            body.append(f'  <circle cx="{x:.3f}" cy="{y:.3f}" r="3" fill="{col}"/>')
        body.append("</g>")
    zoned = {i for z in zones for i in z.members}
    body.append('<g class="cells">')
    for i, c in enumerate(cells):
        if i in zoned:
            continue
        x, y = fr(stereographic(c.direction))[0]
        body.append(f'  <circle cx="{x:.3f}" cy="{y:.3f}" r="2" fill="{_hue(c.regime)}" data-regime="{c.regime}"/>')
    body.append("</g>")
    return _svg(size, size, body)


def conductivity_svg(curve, slopes=None, components=("xx", "yy", "zz", "xy"), size=600) -> str:
    """log-log |sigma_ij|(Lambda) with fitted trend lines."""
    lam = curve.lambdas
    keep = lam > 0
    series = []
    for comp in components:
        y = np.abs(curve.component(comp))[keep]
        if np.all(y > 0):
            series.append((comp, np.log10(lam[keep]), np.log10(y)))
    if not series:
        return _svg(size, size, [])
    X = np.concatenate([s[1] for s in series])
    Y = np.concatenate([s[2] for s in series])
    fr = _Frame((X.min(), Y.min()), (X.max(), Y.max()), size, equal=False)
    body = [f'<rect width="{size}" height="{size}" fill="white"/>']
    for comp, x, y in series:
        col = _hue(comp)
        body.append(f'<g class="component" data-component="{comp}">')
        body.append(f'  <path d="{_path(fr(np.column_stack([x, y])))}" fill="none" stroke="{col}"/>')
        fit = (slopes or {}).get(comp)
        if fit is not None:
            w = getattr(fit, "window", None) or (10 ** x.min(), 10 ** x.max())
            xs = np.log10(np.asarray(w, float))
            ys = (fit.ols_intercept + fit.ols_slope * xs * np.log(10)) / np.log(10)  # intercept is natural-log
            body.append(f'  <path class="trend" d="{_path(fr(np.column_stack([xs, ys])))}" fill="none" '
                        f'stroke="{col}" stroke-dasharray="4 3"/>')
        body.append("</g>")
    return _svg(size, size, body)
