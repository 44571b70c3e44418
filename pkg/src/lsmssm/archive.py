"""Model files, expansion archives and tables.

Model files are JSON.  Either a named reference model with parameters,

    {"model": "pendulum", "params": {"m": 0.1, "k": 0.1414}}

or an explicit polynomial system,

    {"model": "polynomial", "dim": 2, "L": [[0, -1], [1, 0]], "C": [[-1, 0], [0, -1]],
     "N": [[[2, 0], 0, [0, 1]]], "G": [], "I": [[[2, 0], 0, [0.5]], [[0, 2], 0, [0.5]]]}

where each polynomial term is [exponents, radial power, coefficient vector].
Archives are JSON written with sorted keys and shortest round-trip floats,
so equal inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import models
from .expansion import ManifoldExpansion, ReducedTerm
from .grid import DiskFunction, RadialFunction
from .lsm import Dynamics
from .system_model import Poly, SystemSpec

FORMAT = "lsmssm-expansion"
VERSION = 1


class ModelFileError(ValueError):
    def __init__(self, msg: str, path: str | None = None, line: int | None = None):
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + msg)
        self.msg = msg
        self.line = line


# ---------------------------------------------------------------------------
# JSON helpers

def plain(obj):
    """Recursively convert numpy and complex values into JSON-ready Python objects."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [plain(obj.real), plain(obj.imag)]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(plain(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> None:
    Path(path).write_text(dumps(obj))


def digest(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


# ---------------------------------------------------------------------------
# model files

CORPUS = ("pendulum", "pendulum_printed", "example1", "linear_decoupled", "hyper", "resonant_alpha2",
          "resonant_alpha3")


def corpus_path(name: str) -> Path:
    return Path(str(resources.files("lsmssm") / "corpus" / f"{name}.json"))


def resolve_model_path(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    if ref in CORPUS:
        return corpus_path(ref)
    raise ModelFileError(f"no such model file or corpus entry: {ref!r}")


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def load_model(ref: str) -> tuple[SystemSpec, dict]:
    path = resolve_model_path(ref)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"invalid JSON: {exc.msg} (column {exc.colno})", str(path), exc.lineno) from None
    try:
        return spec_from_dict(data), data
    except ModelFileError as exc:
        raise ModelFileError(exc.msg, str(path)) from None
    except KeyError as exc:
        key = str(exc.args[0])
        raise ModelFileError(f"missing or unknown entry {key!r}", str(path), _line_of(text, key)) from None
    except (TypeError, ValueError) as exc:
        raise ModelFileError(f"invalid model: {exc}", str(path)) from None


def _poly(terms, n: int, m: int, what: str) -> Poly:
    out = {}
    for t in terms:
        if len(t) != 3:
            raise ModelFileError(f"{what}: each term is [exponents, radial power, coefficients]")
        e, h, c = t
        if len(e) != n or len(c) != m:
            raise ModelFileError(f"{what}: term {t} does not match dimension {n} -> {m}")
        key = tuple(int(x) for x in e) + (int(h),)
        out[key] = np.asarray(out.get(key, np.zeros(m))) + np.asarray(c, dtype=float)
    return Poly(out, n, m)


def spec_from_dict(data: dict) -> SystemSpec:
    if not isinstance(data, dict) or "model" not in data:
        raise KeyError("model")
    kind = data["model"]
    params = data.get("params", {})
    if kind == "pendulum":
        return models.pendulum_system(models.PendulumParams(**params))
    if kind == "example1":
        return models.example1_system(**params)
    if kind == "linear_decoupled":
        return models.linear_decoupled(**params)
    if kind == "hyper":
        blocks = [[np.asarray(c, dtype=float) for c in bl] for bl in params["blocks"]]
        return models.hyper_system(blocks, bool(params.get("printed", False)))
    if kind == "resonant":
        F2 = params.get("F2", ((1.0, 1.0), (1.0, 1.0), (1.0, 1.0)))
        return models.resonant_system(params["lam"], params["mu"], params["alpha"], F2)
    if kind == "mechanical":
        n = len(params["M"])
        V = _poly(params["V"], n, 1, "V") if params.get("V") else None
        return models.mechanical_system(params["M"], params["C"], params["K"], V, data.get("name", "mechanical"))
    if kind == "polynomial":
        n = int(data["dim"])
        L = np.asarray(data["L"], dtype=float)
        C = np.asarray(data.get("C", np.zeros((n, n))), dtype=float)
        N = _poly(data.get("N", []), n, n, "N")
        G = tuple(_poly(g, n, n, f"G[{i}]") for i, g in enumerate(data.get("G", [])))
        I = _poly(data["I"], n, 1, "I") if data.get("I") else None
        return SystemSpec(L, C, N, G, I, bool(data.get("hamiltonian", False)), data.get("name", "polynomial"),
                          max_degree=int(data.get("max_degree", 6)))
    raise ModelFileError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# expansion archives

@dataclass
class FamilyRecord:
    """What later stages need from an orbit family once it is archived."""

    dyn: Dynamics
    delta: float
    grid: np.ndarray
    Omega: np.ndarray
    periods: np.ndarray
    energies: np.ndarray
    M: int

    def omega_function(self) -> RadialFunction:
        return RadialFunction.fit(self.grid, self.Omega, self.delta)


def expansion_record(exp: ManifoldExpansion) -> dict:
    fam = exp.family
    return {
        "order": exp.N,
        "degree": exp.degree,
        "d": exp.d,
        "basis": exp.dyn.S,
        "omega0": exp.dyn.omega0,
        "family": {"delta": fam.delta, "grid": fam.grid, "Omega": fam.Omega, "periods": fam.periods,
                   "energies": fam.energies, "M": fam.M},
        "K_terms": [k.to_json() for k in exp.K_terms],
        "R_terms": [{"radial": r.radial.to_json(), "angular": r.angular.to_json()} for r in exp.R_terms],
        "a": exp.a,
        "b": exp.b,
        "diagnostics": exp.diagnostics,
    }


def build_archive(exp: ManifoldExpansion, model: dict, config: dict, gates: list[dict], extra: dict) -> dict:
    return {
        "format": FORMAT, "version": VERSION, "model": model, "config": config, "gates": gates,
        "provenance": {"gate_report_sha256": digest(gates), "model_sha256": digest(model)},
        "expansion": expansion_record(exp), "refined": False, **extra,
    }


def load_archive(path: Path) -> tuple[dict, ManifoldExpansion]:
    data = json.loads(Path(path).read_text())
    if data.get("format") != FORMAT:
        raise ModelFileError("not an expansion archive", str(path))
    spec = spec_from_dict(data["model"])
    rec = data["expansion"]
    dyn = Dynamics(spec, np.asarray(rec["basis"]), rec["omega0"])
    f = rec["family"]
    fam = FamilyRecord(dyn, f["delta"], np.asarray(f["grid"]), np.asarray(f["Omega"]), np.asarray(f["periods"]),
                       np.asarray(f["energies"]), int(f["M"]))
    exp = ManifoldExpansion(fam, rec["degree"])
    exp.K_terms = [DiskFunction.from_json(k) for k in rec["K_terms"]]
    exp.R_terms = [ReducedTerm(RadialFunction.from_json(r["radial"]), RadialFunction.from_json(r["angular"]))
                   for r in rec["R_terms"]]
    exp.a = [np.asarray(a) for a in rec["a"]]
    exp.b = [np.asarray(b) for b in rec["b"]]
    exp.d = rec["d"]
    exp.diagnostics = rec["diagnostics"]
    exp.provenance = data["provenance"]
    return data, exp
