"""Independent reference computations, kept apart from the package code.

Running ``python3 tests/oracles.py`` regenerates ``oracle_values.json``;
the tests read the frozen file so that a later change to the package cannot
silently move both sides of a comparison.
"""

import itertools
import json
import math
from pathlib import Path

import numpy as np

FROZEN = Path(__file__).with_name("oracle_values.json")


def brute_force_ot(x, y, cost=lambda r: r):
    """Minimum over all permutations of the mean pairwise cost."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    n = len(x)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        d = np.linalg.norm(x - y[list(perm)], axis=1)
        best = min(best, float(np.mean(cost(d))))
    return best


def phi_piecewise(v, l1, l2, r0):
    v = np.asarray(v, dtype=float)
    mid = (l1 - (l1 + l2) * (v - r0) / r0) * v
    return np.where(v <= r0, l1 * v, np.where(v <= 2 * r0, mid, -l2 * v))


def trapezoid_C2(l1, l2, r0, alpha, s_max=60.0, nodes=1_000_000):
    """int_0^inf s exp(int_0^s phi / (2 alpha)) ds with both integrals by trapezoid."""
    s = np.linspace(0.0, s_max, nodes)
    ph = phi_piecewise(s, l1, l2, r0)
    prim = np.concatenate([[0.0], np.cumsum(0.5 * (ph[1:] + ph[:-1]) * np.diff(s))])
    f = s * np.exp(prim / (2 * alpha))
    return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(s)))


def grid_delta1(c0, lam0, K, t_max=20.0, points=1_000_000):
    """(min over a dense grid of sqrt((e^{2Kt}-1)/K) / (1 - c0 e^{-lam0 t}))^-2."""
    t_lo = math.log(c0) / lam0
    t = np.linspace(t_lo, t_max, points + 1)[1:]
    denom = 1 - c0 * np.exp(-lam0 * t)
    with np.errstate(over="ignore"):
        f = np.sqrt(np.expm1(2 * K * t) / K) / denom
    i = int(np.argmin(f))
    return float(f[i] ** -2), float(t[i])


def high_precision_constants():
    import mpmath as mp

    mp.mp.dps = 40
    c = mp.quad(lambda x: abs(x + 1) * mp.exp(-x * x), [-mp.inf, -1, mp.inf])
    eps_star = mp.sqrt(mp.pi) / c
    a_half = 1 / (1 - mp.mpf("0.5") * c / mp.sqrt(mp.pi))
    e_sqrt = {str(a): float(mp.gamma(1 - 1 / mp.mpf(a)) / mp.gamma(mp.mpf("0.5")))
              for a in ("1.2", "1.5", "1.8")}
    return {"interaction_constant": float(c), "epsilon_critical": float(eps_star),
            "a_star_half": float(a_half), "E_sqrt_S1": e_sqrt}


def generate():
    d1, t1 = grid_delta1(1.0, 1.0, 1.0)
    values = {
        "C2_l1_1_l2_1_r0_1_alpha_1": trapezoid_C2(1.0, 1.0, 1.0, 1.0),
        "C2_l1_2_l2_0.5_r0_0.7_alpha_1.5": trapezoid_C2(2.0, 0.5, 0.7, 1.5),
        "delta1_grid_c0_1_lam0_1_K_1": d1,
        "t_star1_grid_c0_1_lam0_1_K_1": t1,
        **high_precision_constants(),
    }
    FROZEN.write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    return values


def frozen():
    return json.loads(FROZEN.read_text())


if __name__ == "__main__":
    print(json.dumps(generate(), indent=2))
