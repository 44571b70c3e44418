"""Command-line front end: ``lsmssm {gates,expand,refine,portrait}``.

Every subcommand writes plain files into ``--out``: JSON for reports and
archives, CSV for tables.  Exit codes are listed in ``EXIT``.
"""
from __future__ import annotations

import os

_threads = os.environ.get("LSMSSM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import archive, cohomology, expansion, fixedpoint, lsm, spectral

log = logging.getLogger("lsmssm")

EXIT = {"ok": 0, "parse": 2, "gate": 3, "convergence": 4, "numerical": 5}


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    model: str
    order: int = 2
    eps: list[complex] = field(default_factory=lambda: list(np.geomspace(1e-3, 1e-1, 8)))
    grid: tuple[int, int] = (12, 64)
    sample_grid: tuple[int, int] = (12, 32)
    delta: float = 0.05
    degree: int = 16
    tol: float = 1e-12
    stop_tol: float = 1e-10
    d: int | None = None
    out: str = "."
    seed: int = 0
    force: bool = False
    archive: str | None = None
    pair: float | None = None
    samples: int = 6
    periods: float = 50.0
    figures: bool = False

    def record(self) -> dict:
        rec = asdict(self)
        rec["eps"] = [[e.real, e.imag] for e in map(complex, self.eps)]
        return rec


# ---------------------------------------------------------------------------
# argument handling

def parse_eps(text) -> list[complex]:
    """``0.01,0.05,0.1+0.02j`` or ``geom:1e-3:1e-1:8`` or a JSON list."""
    if isinstance(text, (list, tuple)):
        items = [complex(*x) if isinstance(x, (list, tuple)) else complex(x) for x in text]
    elif isinstance(text, (int, float)):
        items = [complex(text)]
    elif text.startswith("geom:"):
        try:
            _, lo, hi, n = text.split(":")
            items = [complex(x) for x in np.geomspace(float(lo), float(hi), int(n))]
        except ValueError:
            raise UsageError(f"bad eps sweep {text!r}; expected geom:lo:hi:count") from None
    else:
        try:
            items = [complex(s.strip().replace(" ", "")) for s in text.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"bad eps list {text!r}") from None
    if not items:
        raise UsageError("empty eps list")
    return [e.real if e.imag == 0 else e for e in items]


def parse_pair(text, what: str) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        vals = text
    else:
        vals = str(text).split(",")
    try:
        J, M = (int(v) for v in vals)
    except ValueError:
        raise UsageError(f"{what} expects J,M") from None
    if J < 2 or M < 4 or M & (M - 1):
        raise UsageError(f"{what}: need J >= 2 and M a power of two >= 4, got {J},{M}")
    return J, M


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="model file or corpus name")
    common.add_argument("--config", help="JSON run configuration; flags override its entries")
    common.add_argument("--order", type=int, help="expansion order N")
    common.add_argument("--eps", help="comma list (complex allowed) or geom:lo:hi:count")
    common.add_argument("--grid", help="orbit family grid J,M")
    common.add_argument("--sample-grid", dest="sample_grid", help="fixed-point sample grid J,M")
    common.add_argument("--delta", type=float, help="disk radius in mode amplitude")
    common.add_argument("--degree", type=int, help="polynomial degree of disk fits")
    common.add_argument("--tol", type=float, help="integrator and Newton tolerance")
    common.add_argument("--stop-tol", dest="stop_tol", type=float, help="fixed-point stopping tolerance")
    common.add_argument("--d", type=int, help="override the vanishing order of the weighted norm")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", default=None, help="run past failed gates")
    common.add_argument("--archive", help="expansion archive (default OUT/expansion.json)")
    common.add_argument("--pair", type=float, help="frequency of the elliptic pair to follow")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lsmssm", description="Lyapunov subcenter manifolds under damping.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gates", parents=[common], help="spectral admission gates")
    sub.add_parser("expand", parents=[common], help="order-by-order expansion in eps")
    sub.add_parser("refine", parents=[common], help="fixed-point refinement of the expansion")
    por = sub.add_parser("portrait", parents=[common], help="reduced trajectories and backbone data")
    por.add_argument("--samples", type=int, help="number of initial conditions")
    por.add_argument("--periods", type=float, help="integration time in linear periods")
    por.add_argument("--figures", action="store_true", default=None, help="also render PNG figures")
    return p


def make_config(args: argparse.Namespace) -> RunConfig:
    conf = {}
    if args.config:
        try:
            conf = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(conf, dict):
            raise UsageError("config must be a JSON object")
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "verbose", "command")}
    merged = {**conf, **flags}
    unknown = set(merged) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown configuration entries: {sorted(unknown)}")
    if "model" not in merged:
        raise UsageError("--model is required")
    if "eps" in merged:
        merged["eps"] = parse_eps(merged["eps"])
    for key in ("grid", "sample_grid"):
        if key in merged:
            merged[key] = parse_pair(merged[key], "--" + key.replace("_", "-"))
    cfg = RunConfig(command=args.command, **merged)
    if cfg.order < 0:
        raise UsageError("--order must be non-negative")
    if cfg.delta <= 0:
        raise UsageError("--delta must be positive")
    return cfg


# ---------------------------------------------------------------------------
# pipeline pieces

def _load(cfg: RunConfig):
    spec, data = archive.load_model(cfg.model)
    eps_max = data.get("eps_max")
    if eps_max is not None:
        big = [e for e in cfg.eps if abs(e) > eps_max]
        if big:
            raise UsageError(f"eps samples {big} exceed the model's declared eps_max = {eps_max}")
    return spec, data


def _gates(spec, cfg: RunConfig) -> tuple[list[dict], bool, spectral.SpectralData]:
    results = spectral.run_gates(spec, cfg.pair)
    sd = spectral.decompose(spec.L, cfg.pair)
    records = [g.to_record() for g in results]
    if sd.has_pair:
        records.append({"gate": "resonance_scan", "verdict": "INFO",
                        "witness": {"omega0": sd.omega0, "complement": list(sd.complement),
                                    "table": spectral.resonance_scan(sd)}, "message": ""})
    return records, all(g.passed for g in results), sd


def _warn(msg: str, warnings: list[str]) -> None:
    warnings.append(msg)
    print(f"WARNING: {msg}", file=sys.stderr)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _archive_path(cfg: RunConfig) -> Path:
    return Path(cfg.archive) if cfg.archive else Path(cfg.out) / "expansion.json"


def _fmt_eps(e) -> tuple[float, float]:
    e = complex(e)
    return e.real, e.imag


# ---------------------------------------------------------------------------
# commands

def cmd_gates(cfg: RunConfig) -> int:
    spec, data = _load(cfg)
    records, ok, _ = _gates(spec, cfg)
    out = _outdir(cfg)
    archive.write_json(out / "gates.json", {"model": data, "gates": records, "all_passed": ok})
    for r in records:
        if r["verdict"] != "INFO":
            print(f"{r['gate']:24s} {r['verdict']}  {r['message']}".rstrip())
    return EXIT["ok"] if ok else EXIT["gate"]


def cmd_expand(cfg: RunConfig) -> int:
    spec, data = _load(cfg)
    records, ok, _ = _gates(spec, cfg)
    warnings: list[str] = []
    if not ok:
        failed = [r["gate"] for r in records if r["verdict"] == "FAIL"]
        if not cfg.force:
            print(f"gates failed: {', '.join(failed)} (use --force to run anyway)", file=sys.stderr)
            return EXIT["gate"]
        _warn(f"running past failed gates {failed}; the expansion carries no guarantee", warnings)
    J, M = cfg.grid
    dyn = lsm.Dynamics.from_spec(spec, pair=cfg.pair)
    fam = lsm.build_family(dyn, lsm.default_radii(J, cfg.delta), M=M, tol=cfg.tol)
    for note in fam.notes:
        _warn(note, warnings)
    exp = expansion.expand(fam, cfg.order, cfg.degree)
    out = _outdir(cfg)

    floor = expansion.noise_floor(exp)
    res_rows, slope_rows = [], []
    real_eps = [e for e in cfg.eps if not isinstance(e, complex) and e != 0]
    for n in range(cfg.order + 1):
        ev = expansion.assemble(exp, n)
        vals = []
        for e in cfg.eps:
            r = expansion.residual(ev, e, exp.d)
            vals.append(r)
            res_rows.append([n, *_fmt_eps(e), r])
            if not math.isfinite(r):
                _warn(f"non-finite residual at N={n}, eps={e}", warnings)
        if len(real_eps) >= 2:
            ys = [v for e, v in zip(cfg.eps, vals) if not isinstance(e, complex) and e != 0]
            s = expansion.slope(real_eps, ys)
            slope_rows.append([n, s, n + 1])
            if s < n + 0.8 and max(ys) > 100 * floor:
                _warn(f"residual slope {s:.3f} at N={n} is below the expected {n + 1}", warnings)
    archive.write_csv(out / "residuals.csv", ["N", "eps_re", "eps_im", "weighted_residual"], res_rows)
    archive.write_csv(out / "slopes.csv", ["N", "slope", "expected"], slope_rows)
    archive.write_csv(out / "coefficients.csv", ["eps_re", "eps_im", "name", "component", "value"],
                      _coefficient_rows(exp, cfg))

    extra = {"warnings": warnings, "noise_floor": floor}
    arc = archive.build_archive(exp, data, cfg.record(), records, extra)
    archive.write_json(_archive_path(cfg), arc)
    print(f"expansion of order {cfg.order} written to {_archive_path(cfg)}")
    for n, s, _ in slope_rows:
        print(f"N={n}: residual slope {s:.3f}")
    return EXIT["ok"]


def _coefficient_rows(exp, cfg: RunConfig) -> list[list]:
    """Graph coefficients over (q1, p1) for mechanical systems, reduced linear parts always."""
    rows = []
    n = exp.dyn.n
    order = min(exp.N, 1)
    half = n // 2
    for e in cfg.eps:
        if isinstance(e, complex):
            continue
        base = (0, half) if n >= 4 and n % 2 == 0 else (0, 1)
        if n >= 4 and n % 2 == 0:
            w = expansion.chart_graph(exp, e, order, base=base, graph=(1, half + 1))
            for name in ("w20", "w11", "w02"):
                for i, v in enumerate(np.atleast_1d(w[name])):
                    rows.append([e, 0.0, name, i, float(v)])
        lin = expansion.reduced_linear_physical(exp, e, order, base=base)
        for i in range(2):
            for j in range(2):
                rows.append([e, 0.0, "reduced_linear", f"{i}{j}", float(lin[i, j])])
    return rows


def cmd_refine(cfg: RunConfig) -> int:
    path = _archive_path(cfg)
    if not path.exists():
        raise UsageError(f"no expansion archive at {path}; run 'lsmssm expand' first")
    data, exp = archive.load_archive(path)
    records = data["gates"]
    warnings = list(data.get("warnings", []))
    if any(r["verdict"] == "FAIL" for r in records) and not cfg.force:
        print("the archived gate report has failures (use --force to run anyway)", file=sys.stderr)
        return EXIT["gate"]
    N = min(cfg.order, exp.N)
    alpha = next((r["witness"].get("alpha") for r in records if r["gate"] == "decay"), None)
    J, M = cfg.sample_grid
    out = _outdir(cfg)
    reports, rows, refinements = [], [], []
    code = EXIT["ok"]
    if cfg.d is not None:
        d, beta = cfg.d, None
    else:
        probe = min(1e-2, min(abs(e) for e in cfg.eps if e != 0) if any(e != 0 for e in cfg.eps) else 1e-2)
        beta = fixedpoint.growth_slope(exp, N, probe, J, M)[2]
        if alpha is not None and alpha > 0:
            d = fixedpoint.choose_d(alpha * exp.dyn.T0, beta)
        else:
            d = 1
            _warn("no positive decay rate alpha; using d = 1", warnings)
        print(f"growth slope beta = {beta:.4f}, alpha*T0 = {(alpha or 0.0) * exp.dyn.T0:.4f}, d = {d}")
    for e in cfg.eps:
        try:
            ref = fixedpoint.iterate(exp, e, N, d=d, stop_tol=cfg.stop_tol, J=J, M=M, tol=min(cfg.tol * 10, 1e-9),
                                     force=cfg.force)
        except fixedpoint.ContractionError as exc:
            rep = exc.report.to_record()
            rep["aborted"] = True
            reports.append(rep)
            print(f"eps={e}: aborted, {exc}", file=sys.stderr)
            code = EXIT["convergence"]
            break
        rep = ref.report.to_record()
        rep["aborted"] = False
        reports.append(rep)
        rows.append([*_fmt_eps(e), ref.report.distance_to_seed, ref.report.iterations, ref.report.effective_rate,
                     d, ref.report.final_residual])
        refinements.append({"eps": _fmt_eps(e), "d": d, "correction": ref.correction.fn.to_json(),
                            "jet": {"dK": ref.maps.jet.dK, "dR": ref.maps.jet.dR}, "report": rep})
        print(f"eps={e}: converged in {ref.report.iterations} iterations, rate {ref.report.effective_rate:.4f}, "
              f"distance {ref.report.distance_to_seed:.4e}")
    real = [(r[0], r[2]) for r in rows if r[1] == 0 and r[0] != 0]
    slope = expansion.slope(*zip(*real)) if len(real) >= 2 else None
    archive.write_json(out / "contraction.json", {"reports": reports, "distance_slope": slope, "order": N, "d": d,
                                                   "beta": beta, "alpha": alpha})
    archive.write_csv(out / "distance.csv", ["eps_re", "eps_im", "distance", "iterations", "effective_rate", "d",
                                             "final_residual"], rows)
    if refinements:
        refined = dict(data)
        refined.update({"refined": True, "refinements": refinements, "warnings": warnings,
                        "refine_config": cfg.record()})
        archive.write_json(out / "refined.json", refined)
    if slope is not None:
        print(f"distance slope {slope:.3f}")
    return code


def _reduced_flow(exp, N: int, eps: float, z0, t_end: float, t_eval):
    from scipy.integrate import solve_ivp

    ev = expansion.assemble(exp, N)
    delta = exp.delta

    def rhs(_t, z):
        return np.real(ev.R(z, eps))

    def leave(_t, z):
        return delta - math.hypot(z[0], z[1])

    leave.terminal = True
    return solve_ivp(rhs, (0.0, t_end), z0, method="DOP853", rtol=1e-11, atol=1e-14 * delta, t_eval=t_eval,
                     events=leave)


def cmd_portrait(cfg: RunConfig) -> int:
    path = _archive_path(cfg)
    if not path.exists():
        raise UsageError(f"no expansion archive at {path}; run 'lsmssm expand' first")
    _, exp = archive.load_archive(path)
    if any(isinstance(e, complex) for e in cfg.eps):
        raise UsageError("portraits need real eps values")
    N = min(cfg.order, exp.N)
    fam = exp.family
    T0 = exp.dyn.T0
    t_end = cfg.periods * T0
    t_eval = np.linspace(0.0, t_end, int(round(cfg.periods * 20)) + 1)
    radii = exp.delta * np.linspace(0.2, 0.9, cfg.samples)
    out = _outdir(cfg)
    rows, summary = [], []
    for e in cfg.eps:
        for i, r0 in enumerate(radii):
            sol = _reduced_flow(exp, N, e, np.array([r0, 0.0]), t_end, t_eval)
            rho = np.hypot(sol.y[0], sol.y[1])
            for t, z1, z2, rr in zip(sol.t, sol.y[0], sol.y[1], rho):
                rows.append([e, i, t, z1, z2, rr])
            live = rho > 1e-8 * r0     # beyond this the decay is below integrator resolution
            summary.append({"eps": e, "trajectory": i, "rho0": r0, "rho_end": rho[-1],
                            "max_radial_drift": float(np.max(np.abs(rho - r0))),
                            "monotone_decreasing": bool(np.all(np.diff(rho[live]) < 0)),
                            "left_disk": sol.status == 1})
    archive.write_csv(out / "trajectories.csv", ["eps", "trajectory", "t", "z1", "z2", "rho"], rows)
    omega = fam.omega_function()
    back = []
    for j, rho in enumerate(fam.grid):
        s = rho ** 2
        row = [rho, fam.Omega[j], float(np.real(omega(s))), fam.periods[j], fam.energies[j]]
        for e in cfg.eps:
            rate = sum(e ** n * float(np.real(exp.R_terms[n].radial(s))) for n in range(1, N + 1))
            freq = sum(e ** n * float(np.real(exp.R_terms[n].angular(s))) for n in range(N + 1))
            row += [freq, rate]
        back.append(row)
    header = ["rho", "omega_family", "omega_fit", "period", "energy"]
    for e in cfg.eps:
        header += [f"omega_eps={e!r}", f"decay_rate_eps={e!r}"]
    archive.write_csv(out / "backbone.csv", header, back)
    archive.write_json(out / "portrait.json", {"order": N, "T0": T0, "periods": cfg.periods, "trajectories": summary})
    if cfg.figures:
        _figures(out, rows, back, cfg.eps)
    return EXIT["ok"]


def _figures(out: Path, rows, back, eps_list) -> None:
    try:
        import matplotlib
    except ImportError:
        raise UsageError("--figures needs matplotlib; install the 'figures' extra") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(eps_list), figsize=(4 * len(eps_list), 4), squeeze=False)
    arr = np.array([r[:6] for r in rows], dtype=float)
    for ax, e in zip(axes[0], eps_list):
        sel = arr[arr[:, 0] == e]
        for i in np.unique(sel[:, 1]):
            tr = sel[sel[:, 1] == i]
            ax.plot(tr[:, 3], tr[:, 4], lw=0.7)
        ax.set_aspect("equal")
        ax.set_title(f"eps = {e:g}")
        ax.set_xlabel("z1")
        ax.set_ylabel("z2")
    fig.tight_layout()
    fig.savefig(out / "portrait.png", dpi=150)
    plt.close(fig)

    b = np.array(back, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(b[:, 1], b[:, 0], "o", label="orbit family")
    ax.plot(b[:, 2], b[:, 0], "-", label="fit")
    ax.set_xlabel("frequency")
    ax.set_ylabel("amplitude")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "backbone.png", dpi=150)
    plt.close(fig)


COMMANDS = {"gates": cmd_gates, "expand": cmd_expand, "refine": cmd_refine, "portrait": cmd_portrait}

NUMERICAL = (lsm.NewtonError, lsm.SectionError, lsm.FloquetGateError, cohomology.CohomologyError,
             expansion.ExpansionError, fixedpoint.DiskEscapeError, np.linalg.LinAlgError, FloatingPointError,
             RuntimeError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT["ok"] if exc.code == 0 else EXIT["parse"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = make_config(args)
        return COMMANDS[cfg.command](cfg)
    except (UsageError, archive.ModelFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT["parse"]
    except NUMERICAL as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT["numerical"]


if __name__ == "__main__":
    sys.exit(main())
