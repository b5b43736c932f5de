"""Refinement tables for the flow-difference identities.

Prints, for each grid level, the scattering round-trip error, the commutator
residual and the two X-ray identity residuals, with observed orders.

    python scripts/refinement_study.py --levels 4 --metric "0.15*x + 0.1*y^2"
"""
import argparse
from dataclasses import dataclass

import numpy as np

from geotomo.bundle import scattering_relation
from geotomo.geometry import MetricField
from geotomo.hilbert import commutator_residual, xray_identities


@dataclass
class Study:
    metric: str = "0.15*x + 0.1*y^2 - 0.1*x*y"
    levels: int = 3
    ns0: int = 16
    dt0: float = 8e-2
    seed: int = 4


def fiber_function(seed):
    c = np.random.default_rng(seed).normal(size=(4, 3)) * 0.5

    def u(x, y, b):
        out = c[0, 0] * np.exp(c[0, 1] * x + c[0, 2] * y)
        for k in range(1, 4):
            out = out + (c[k, 0] + c[k, 1] * x + c[k, 2] * y * x) * np.cos(k * b + c[k, 2])
        return out
    return u


def order(prev, cur):
    return float("nan") if prev is None else np.log2(prev / cur)


def main(st: Study):
    m = MetricField.conformal(st.metric)
    u = fiber_function(st.seed)
    print("ns,dt,involution,order,commutator,order,identity_direct,order,identity_pullback,order")
    prev = [None] * 4
    for lev in range(st.levels):
        ns, dt = st.ns0 * 2**lev, st.dt0 / 2**lev
        inv = scattering_relation(m, ns, ns // 2).involution_error()
        com = commutator_residual(m, u, dt=dt).residual
        ids = xray_identities(m, u, ns, ns // 2, dt=dt)
        cur = [inv, com, ids.direct, ids.pullback]
        cols = [f"{v:.3e},{order(p, v):.2f}" for p, v in zip(prev, cur)]
        print(f"{ns},{dt:g}," + ",".join(cols), flush=True)
        prev = cur


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--metric", default=Study.metric, help="conformal exponent lambda(x, y)")
    p.add_argument("--levels", type=int, default=Study.levels)
    a = p.parse_args()
    main(Study(metric=a.metric, levels=a.levels))
