"""Mode orchestration: config -> module chain -> files + manifest."""
from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import outputs as out
from ._rng import stream
from .classifier import TrajectoryClassifier
from .config import RunConfig
from .diagram import (ScanBudget, _branch_seeds, direction_grid, extract_zones, grid_adjacency, scan_directions)
from .exceptions import EmptyLevelSet, MagnetorbitError, SaddleEncounter
from .exponents import FrameSpec, estimate_exponents, plane_component_census, record_displacements
from .tracer import PlaneSlice, find_singular_points, integrate_trajectory, slice_function, trace_open_ensemble
from .transport import conductivity_curve

VERSION = "0.1.0"


@dataclass
class RunManifest:
    config_hash: str
    version: str
    mode: str
    stages: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({"schema_version": out.SCHEMA_VERSION, "kind": "manifest", **asdict(self)},
                          sort_keys=True, indent=2) + "\n"


class _Run:
    def __init__(self, cfg: RunConfig, out_dir, threads, svg):
        self.cfg = cfg
        self.dir = Path(out_dir)
        self.threads = max(1, int(threads))
        self.svg = bool(svg)
        self.manifest = RunManifest(cfg.hash, VERSION, cfg.mode)
        self.results = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except MagnetorbitError as exc:
            exc.stage = name
            raise
        finally:
            self.manifest.stages[name] = time.perf_counter() - t0

    def warn(self, msg):
        self.manifest.warnings.append(msg)

    def emit(self, name, text):
        out.write_atomic(self.dir / name, text)
        self.manifest.outputs.append(name)


# ---------------------------------------------------------------------------
# trace / classify


def _slice_heights(disp, setup, eps_f, tc):
    if tc.get("slices"):
        return [float(h) for h in tc["slices"]]
    n = tc["n_slices"]
    lat = disp.lattice
    if lat is not None:
        thick = float(np.abs(lat.rows @ setup.b_hat).max())
        return [thick * k / n for k in range(n)]
    # free-electron band: midpoints across the extent of the surface along b
    q = float(setup.b_hat @ np.linalg.inv(disp.quadratic) @ setup.b_hat)
    reach = np.sqrt(2.0 * max(eps_f, 0.0) * q)
    return [reach * (2.0 * (k + 0.5) / n - 1.0) for k in range(n)]


def trace_branches(disp, setup, eps_f, tc, ctl, warn=lambda m: None):
    """Up to ``branches`` distinct trajectories on each configured slice."""
    lat = disp.lattice
    half = lat.cell_diameter / 2 if lat is not None else 2.0
    found = []
    for k, h in enumerate(_slice_heights(disp, setup, eps_f, tc)):
        sl = PlaneSlice(setup, h)
        polys = _branch_seeds(slice_function(disp, sl), eps_f, half, tc["grid_n"], 1e3)
        if not polys:
            warn(f"slice {k} (h = {h!r}): empty level set")
            continue
        seen, n_done = None, 0
        for p in polys:
            if n_done >= tc["branches"]:
                break
            r0 = p.points[len(p.points) // 2]
            if seen is not None and seen.query(r0)[0] < ctl.max_arc_step:
                continue
            try:
                tr = integrate_trajectory(disp, sl, sl.to_space(r0), tc["s_max"], ctl, energy=eps_f,
                                          l_max=tc["l_max"])
            except SaddleEncounter as exc:
                warn(f"slice {k}: {exc}")
                tr = exc.trajectory
                if tr is None:
                    continue
            found.append((k, h, tr))
            seen = cKDTree(tr.plane if seen is None else np.vstack([seen.data, tr.plane]))
            n_done += 1
    if not found:
        raise EmptyLevelSet(f"no trajectory of the level {eps_f!r} on any configured slice")
    return found


def _run_trace(run: _Run, classify=False):
    cfg = run.cfg
    disp, setup, eps_f = cfg.dispersion(), cfg.setup(), cfg.eps_f
    ctl = cfg.step_control()
    with run.stage("trace"):
        branches = trace_branches(disp, setup, eps_f, cfg["trace"], ctl, run.warn)
    trajs = [t for _, _, t in branches]
    run.results["trajectories"] = trajs
    with run.stage("emit_trajectories"):
        run.emit("trajectories.csv", out.csv_text(out.TRAJECTORY_HEADER, out.trajectory_rows(trajs)))
        summary = [{"branch_id": i, "slice": k, "h": h, "closure": t.closure.kind,
                    "lattice_shift": list(t.closure.lattice_shift), "period_s": t.closure.period_s,
                    "status": t.status, "length": t.length, "points": len(t)}
                   for i, (k, h, t) in enumerate(branches)]
        run.emit("trajectories.json", out.json_text("trajectories", {"b_hat": setup.b_hat, "eps_f": eps_f,
                                                                      "branches": summary}))
        if run.svg:
            run.emit("trajectories.svg", out.trajectory_svg([t.plane for t in trajs]))
    if cfg["trace"]["singular_points"] and disp.is_periodic:
        with run.stage("singular_points"):
            sing = find_singular_points(disp, setup, eps_f)
            run.results["singular_points"] = sing
            run.emit("singular_points.json", out.json_text("singular_points", {
                "singular_points": [{"location": s.location, "kind": s.kind, "index": s.index} for s in sing]}))
    if classify:
        c = cfg["classify"]
        clf = TrajectoryClassifier(c["plateau"], c["power"], c["tol_angle"], c["m_max"], c["rule"]).fit()
        with run.stage("classify"):
            classes = clf.classify(trajs)
        run.results["classes"] = classes
        reports = [{"branch_id": i, "slice": k, **cl.to_json()} for i, ((k, _, _), cl) in
                   enumerate(zip(branches, classes))]
        run.emit("classification.json", out.json_text("classification", {"branches": reports}))


# ---------------------------------------------------------------------------
# exponents


def _run_exponents(run: _Run):
    cfg = run.cfg
    disp, setup, eps_f = cfg.dispersion(), cfg.setup(), cfg.eps_f
    e = cfg["exponents"]
    with run.stage("ensemble"):
        trajs = trace_open_ensemble(disp, setup, eps_f, e["n_trajectories"], e["length"], cfg.rng_seed,
                                    cfg.step_control())
    with run.stage("exponents"):
        spec = FrameSpec(e["l0"], e["gamma"], e["k_min"])
        recs = [record_displacements(t, spec, i) for i, t in enumerate(trajs)]
        est = estimate_exponents(recs, max_residual=e["max_residual"])
    with run.stage("census"):
        g = slice_function(disp, PlaneSlice(setup, 0.0))
        kind, counts = plane_component_census(g, eps_f, e["census_windows"])
        est.diagnostics["census"] = {"kind": kind, "counts": counts, "windows": e["census_windows"]}
    run.results["exponents"] = est
    run.emit("exponents.json", out.json_text("exponents", est.to_json()))


# ---------------------------------------------------------------------------
# conductivity


def _run_conductivity(run: _Run):
    cfg = run.cfg
    disp, setup, eps_f = cfg.dispersion(), cfg.setup(), cfg.eps_f
    t = cfg["transport"]
    with run.stage("conductivity"):
        curve = conductivity_curve(disp, setup, eps_f, cfg.transport_params(), cfg.sampling(run.threads),
                                   fit_window=tuple(t["fit_window"]) if t["fit_window"] else None)
    slopes = {}
    if (curve.lambdas > 0).sum() >= 8:
        try:
            slopes = curve.fit_slopes(tuple(t["fit_window"]) if t["fit_window"] else None)
        except MagnetorbitError as exc:
            run.warn(f"slope fit: {exc}")
    else:
        run.warn("fewer than 8 positive lambdas: no slopes fitted")
    run.results["curve"] = curve
    run.emit("conductivity.csv", out.csv_text(out.CONDUCTIVITY_HEADER, out.conductivity_rows(curve)))
    run.emit("slopes.json", out.json_text("slopes", {
        "components": {k: asdict(v) for k, v in slopes.items()},
        "lambda_eff": curve.diagnostics.get("lambda_eff")}))
    if run.svg:
        run.emit("conductivity.svg", out.conductivity_svg(curve, slopes))


# ---------------------------------------------------------------------------
# scan


def _run_scan(run: _Run):
    cfg = run.cfg
    f, s = cfg["field"], cfg["scan"]
    disp, eps_f = cfg.dispersion(), cfg.eps_f
    if f.get("directions"):
        grid = direction_grid(points=[np.asarray(d, float) / np.linalg.norm(d) for d in f["directions"]])
    else:
        grid = direction_grid(f["resolution"], center=f.get("center"), cap=f.get("cap"))
    budget = ScanBudget(l_max=s["l_max"], n_slices=s["n_slices"], n_branches=s["n_branches"])
    with run.stage("scan"):
        cells = scan_directions(disp, eps_f, grid, budget, run.threads)
    with run.stage("zones"):
        adj = grid_adjacency(grid.points) if len(grid) >= 4 else np.zeros((0, 2), int)
        zones = extract_zones(cells, adj)
    for i, c in enumerate(cells):
        if "error" in c.diagnostics:
            run.warn(f"direction {i}: {c.diagnostics['error']}")
    run.results.update(cells=cells, zones=zones)
    run.emit("diagram.csv", out.csv_text(out.DIAGRAM_HEADER, out.diagram_rows(cells)))
    run.emit("zones.json", out.json_text("zones", {"zones": [
        {"m": z.m, "members": z.members, "frontier": z.frontier, "boundary": z.boundary} for z in zones]}))
    if run.svg:
        run.emit("zones.svg", out.zone_map_svg(cells, zones))


# ---------------------------------------------------------------------------
# quasi


def _run_quasi(run: _Run):
    from .quasi import integral_plane_numbers, level_seed, strip_and_direction_test, trace_level_line
    cfg = run.cfg
    q = cfg["quasi"]
    base = cfg.quasiperiodic()
    ctl = cfg.step_control()
    lines, reports = [], []
    with run.stage("quasi"):
        for i in range(q["n_lines"]):
            qp = base if i == 0 else base.with_phi(base.phi + stream(cfg.rng_seed, "quasi", i).uniform(
                0.0, 2.0 * np.pi, base.N))
            seed = level_seed(qp, q["level"])
            line = trace_level_line(qp, q["level"], seed, q["l_max"], ctl)
            rep = {"line_id": i, "phi": qp.phi, "bounded": line.bounded, "length": line.length,
                   "status": line.status}
            if not line.bounded:
                try:
                    st = strip_and_direction_test(line, qp.scale)
                    rep.update(strip_width=st["width"], mean_direction=st["mean_direction"], passes=st["passes"])
                    if qp.N == 4 and st["passes"]:
                        mu, ang = integral_plane_numbers(line, qp, q["m_max"], q["tol_angle"],
                                                         cfg["classify"]["rule"], return_angle=True)
                        rep.update(mu=mu, angle=ang)
                except MagnetorbitError as exc:
                    rep["error"] = f"{type(exc).__name__}: {exc}"
                    run.warn(f"line {i}: {rep['error']}")
            lines.append(line)
            reports.append(rep)
    run.results.update(lines=lines, reports=reports)
    rows = ((s, p[0], p[1], 0.0, i) for i, ln in enumerate(lines) for s, p in zip(ln.arclength, ln.points))
    run.emit("quasi_lines.csv", out.csv_text(out.TRAJECTORY_HEADER, rows))
    run.emit("quasi.json", out.json_text("quasi", {"scale": base.scale, "lines": reports}))
    if run.svg:
        run.emit("quasi_lines.svg", out.trajectory_svg([ln.points for ln in lines]))


_MODES = {
    "trace": _run_trace,
    "classify": lambda r: _run_trace(r, classify=True),
    "exponents": _run_exponents,
    "conductivity": _run_conductivity,
    "scan": _run_scan,
    "quasi": _run_quasi,
}


def run_pipeline(cfg: RunConfig, out_dir=None, threads=1, svg=None):
    """Run the configured mode, write its files and ``manifest.json``; return (manifest, results)."""
    run = _Run(cfg, out_dir or cfg["output"]["dir"], threads, cfg["output"]["svg"] if svg is None else svg)
    run.dir.mkdir(parents=True, exist_ok=True)
    run.emit("config.json", cfg.to_json())
    t0 = time.perf_counter()
    try:
        _MODES[cfg.mode](run)
    finally:
        run.manifest.stages["total"] = time.perf_counter() - t0
        out.write_atomic(run.dir / "manifest.json", run.manifest.to_json())
    return run.manifest, run.results
