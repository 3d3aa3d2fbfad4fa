"""Run configuration: strict JSON schema, materialised defaults, typed accessors."""
from __future__ import annotations

import copy
import hashlib
import json
from functools import lru_cache
from importlib import resources

import jsonschema
import numpy as np

from .exceptions import SchemaError
from .lattice import DirectLattice, DispersionRelation, FieldSetup
from .models import MODELS

SCHEMA_VERSION = 1
MODES = ("trace", "classify", "exponents", "conductivity", "scan", "quasi")


@lru_cache(maxsize=1)
def schema():
    return json.loads(resources.files(__package__).joinpath("config_schema.json").read_text())


def _fill_defaults(sch, inst):
    """Insert schema defaults for missing keys, recursively through present objects."""
    if not isinstance(inst, dict):
        return inst
    for key, sub in sch.get("properties", {}).items():
        if key not in inst and "default" in sub:
            inst[key] = copy.deepcopy(sub["default"])
        if key in inst:
            if isinstance(inst[key], dict):
                _fill_defaults(sub, inst[key])
            elif isinstance(inst[key], list) and isinstance(sub.get("items"), dict):
                for item in inst[key]:
                    _fill_defaults(sub["items"], item)
    return inst


def _schema_error(err: jsonschema.ValidationError) -> SchemaError:
    path = list(err.absolute_path)
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        if extra:
            path.append(extra[0])
            where = ".".join(str(p) for p in path)
            return SchemaError(f"unknown key {extra[0]!r} at {where}", path)
    where = ".".join(str(p) for p in path) or "<root>"
    return SchemaError(f"{where}: {err.message}", path)


class RunConfig:
    """Validated configuration with every default filled in."""

    def __init__(self, data: dict):
        self.data = data

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_json() == other.to_json()

    def __repr__(self):
        return f"RunConfig(mode={self.mode!r}, hash={self.hash[:12]})"

    def __getitem__(self, key):
        return self.data[key]

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()

    @property
    def mode(self) -> str:
        return self.data["mode"]

    @property
    def rng_seed(self) -> int:
        return int(self.data["rng_seed"])

    @property
    def eps_f(self) -> float:
        return float(self.data["model"]["eps_f"])

    # -- model ---------------------------------------------------------------

    def dispersion(self) -> DispersionRelation:
        m = self.data["model"]
        if "name" in m:
            return MODELS[m["name"]]()
        direct = DirectLattice(np.asarray(m["direct"], float)) if "direct" in m else None
        quad = np.asarray(m["quadratic"], float) if "quadratic" in m else None
        return DispersionRelation.from_harmonics(m.get("harmonics", []), direct, quad)

    def quasiperiodic(self):
        from .quasi import QuasiperiodicFunction
        q = self.data["model"]["quasi"]
        H = [h["n"] for h in q["harmonics"]]
        return QuasiperiodicFunction(np.asarray(H, np.int64), [h["amp"] for h in q["harmonics"]], q["U"],
                                     q.get("phi"), [h["phase"] for h in q["harmonics"]])

    def setup(self) -> FieldSetup:
        return FieldSetup.from_direction(self.data["field"]["b_hat"])

    def step_control(self):
        from .tracer import StepControl
        return StepControl(**self.data["tracer"])

    def transport_params(self):
        from .transport import TransportParams
        t = self.data["transport"]
        return TransportParams(tuple(t["lambdas"]), t["truncation"], t["kappa"], t["alpha"])

    def sampling(self, threads=1):
        from .transport import SliceSampling
        s = dict(self.data["transport"]["sampling"])
        return SliceSampling(**s, rng_seed=self.rng_seed, threads=int(threads), tracer=self.step_control())


def _check_values(d):
    """Semantic checks the schema cannot express; raise ValueError naming the value."""
    m = d["model"]
    kinds = [k for k in ("name", "quasi") if k in m] + (["custom"] if ("harmonics" in m or "quadratic" in m) else [])
    if len(kinds) != 1:
        raise SchemaError("model needs exactly one of 'name', 'quasi' or custom harmonics/quadratic", ("model",))
    if "harmonics" in m and m["harmonics"] and "direct" not in m:
        raise SchemaError("custom harmonics need 'direct'", ("model", "direct"))
    if d["mode"] == "quasi" and "quasi" not in m:
        raise SchemaError("quasi mode needs model.quasi", ("model", "quasi"))
    if "quasi" in m:
        q = m["quasi"]
        N = q["N"]
        if any(len(row) != N for row in q["U"]):
            raise ValueError(f"U rows must have N = {N} entries, got {[len(r) for r in q['U']]}")
        if any(len(h["n"]) != N for h in q["harmonics"]):
            raise ValueError(f"harmonic vectors must have N = {N} entries")
        if "phi" in q and len(q["phi"]) != N:
            raise ValueError(f"phi must have N = {N} entries, got {len(q['phi'])}")
        if np.linalg.matrix_rank(np.asarray(q["U"], float)) != 2:
            raise ValueError(f"U = {q['U']} does not have rank 2")
    b = np.asarray(d["field"]["b_hat"], float)
    if not np.linalg.norm(b) > 0:
        raise ValueError(f"b_hat = {d['field']['b_hat']} is the zero vector")
    lam = d["transport"]["lambdas"]
    if any(b_ <= a for a, b_ in zip(lam, lam[1:])):
        raise ValueError(f"transport.lambdas must be strictly increasing: {lam}")
    win = d["transport"]["fit_window"]
    if win is not None and not 0 < win[0] < win[1]:
        raise ValueError(f"transport.fit_window must satisfy 0 < lo < hi: {win}")
    cw = d["exponents"]["census_windows"]
    if len(cw) < 3 or any(b_ <= a for a, b_ in zip(cw, cw[1:])):
        raise ValueError(f"exponents.census_windows needs three increasing sizes: {cw}")


def parse_config(text, mode=None) -> RunConfig:
    """Parse and validate a JSON config; ``mode`` (from the command line) fills or must match 'mode'."""
    try:
        data = json.loads(text) if isinstance(text, (str, bytes)) else copy.deepcopy(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", ()) from exc
    if not isinstance(data, dict):
        raise SchemaError("config must be a JSON object", ())
    if mode is not None:
        if mode not in MODES:
            raise SchemaError(f"unknown mode {mode!r}", ("mode",))
        if "mode" in data and data["mode"] != mode:
            raise SchemaError(f"config mode {data['mode']!r} differs from requested {mode!r}", ("mode",))
        data["mode"] = mode
    validator = jsonschema.Draft202012Validator(schema())
    err = jsonschema.exceptions.best_match(validator.iter_errors(data))
    if err is not None:
        raise _schema_error(err)
    if "mode" not in data:
        raise SchemaError("no mode given", ("mode",))
    _fill_defaults(schema(), data)
    _check_values(data)
    return RunConfig(data)


def emit_config(cfg: RunConfig) -> str:
    return cfg.to_json()
