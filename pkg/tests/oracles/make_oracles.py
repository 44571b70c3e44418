"""Regenerate frozen.json.  Needs sympy; the package itself does not.

    python3 tests/oracles/make_oracles.py
"""
import json
from pathlib import Path

import numpy as np
import sympy as sp
from scipy.integrate import solve_ivp

PARAMS = {"m": 0.1, "k": 0.1414, "K": 0.4, "l0": 1.0}
EPS = [0.0, 0.05, 0.1]


def graph_oracle(vs):
    """Quadratic graph (q2, p2) = w(q1, p1) of the invariant manifold by undetermined coefficients."""
    e, m, k, K, l = sp.symbols("epsilon m k K l0", positive=True)
    q, p = sp.symbols("q p")
    a = 2 * k + 4 * K * l ** 2
    b = 2 * k + 12 * K * l ** 2
    W = sp.symbols("a20 a11 a02 b20 b11 b02")
    w1 = W[0] * q ** 2 + W[1] * q * p + W[2] * p ** 2
    w2 = W[3] * q ** 2 + W[4] * q * p + W[5] * p ** 2
    v = (vs * p / m, -a * q - e * p / m)
    E1 = sp.expand(sp.diff(w1, q) * v[0] + sp.diff(w1, p) * v[1] - vs * w2 / m)
    E2 = sp.expand(sp.diff(w2, q) * v[0] + sp.diff(w2, p) * v[1] - (-b * w1 - e * w2 / m + 4 * K * l * q ** 2))
    eqs = [sp.Poly(E, q, p).coeff_monomial(mm) for E in (E1, E2) for mm in (q ** 2, q * p, p ** 2)]
    sol = sp.solve(eqs, W, dict=True)[0]
    names = {"w20": (W[0], W[3]), "w11": (W[1], W[4]), "w02": (W[2], W[5])}
    subs = {m: PARAMS["m"], k: PARAMS["k"], K: PARAMS["K"], l: PARAMS["l0"]}
    full, trunc = {}, {}
    for name, (u, w) in names.items():
        exprs = [sp.simplify(sol[u].subs(subs)), sp.simplify(sol[w].subs(subs))]
        lin = [ex.subs(e, 0) + e * sp.diff(ex, e).subs(e, 0) for ex in exprs]
        full[name] = {str(x): [float(ex.subs(e, x)) for ex in exprs] for x in EPS}
        trunc[name] = {str(x): [float(ex.subs(e, x)) for ex in lin] for x in EPS}
    return full, trunc


def first_return(x0, field, T_guess):
    """Return time to the section {u1 = 0, u1' > 0} by Radau with event location."""
    def ev(t, y):
        return y[0]
    ev.direction = np.sign(field(x0)[0]) or 1.0
    sol = solve_ivp(lambda t, y: field(y), (0, 1.5 * T_guess), x0, method="Radau", rtol=1e-12, atol=1e-15,
                    events=ev)
    times = [t for t in sol.t_events[0] if t > 0.5 * T_guess]
    return float(times[0])


def main():
    out = {"params": PARAMS}
    for vs in (1, 2):
        full, trunc = graph_oracle(vs)
        out[f"graph_vs{vs}"] = {"full": full, "order1": trunc}

    from lsmssm import lsm, models
    spec = models.pendulum_system()
    dyn = lsm.Dynamics.from_spec(spec)
    orb = lsm.continue_orbit(dyn, 0.1)
    T = first_return(orb.initial_point, lambda u: dyn.field(u[None])[0], dyn.T0)
    out["pendulum_period"] = {"rho0": 0.1, "initial_point": orb.initial_point.tolist(), "period": T}
    path = Path(__file__).with_name("frozen.json")
    path.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    print("wrote", path)


if __name__ == "__main__":
    main()
