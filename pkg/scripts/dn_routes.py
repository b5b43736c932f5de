"""The DN map three ways on a few metrics.

For each metric the Fourier-mode matrix of the PDE route is compared with the
boundary-equation route (scattering data only) and, where the metric is
conformal with trivial boundary factor, with the multiplier k.
"""
import argparse
from dataclasses import dataclass, field

import numpy as np

from geotomo.dnmap import BoundaryTrace, DnConfig, dn_pde, extract_dn, radial_pullback, subspace_error
from geotomo.geometry import BoundaryChart, MetricField


@dataclass
class Routes:
    kmax: int = 4
    dn: DnConfig = field(default_factory=DnConfig)
    metrics: tuple = (
        ("euclidean", "0"),
        ("interior bump", "(1-x^2-y^2)*(0.2+0.15*x-0.1*y^2)"),
        ("off-centre bump", "0.3*(1-x^2-y^2)^2*exp(-4*((x-0.3)^2+y^2))"),
    )


def modes(chart, ns, kmax):
    out = []
    for k in range(1, kmax + 1):
        for fn in (np.cos, np.sin):
            out.append(BoundaryTrace.from_function(chart, ns, lambda t, k=k, fn=fn: fn(k * t)))
    return out


def main(r: Routes):
    print("metric,scattering_vs_multiplier,pde_vs_multiplier,scattering_vs_pde,rank")
    for name, lam in r.metrics:
        m = MetricField.conformal(lam)
        basis = modes(BoundaryChart(m), r.dn.ns, r.kmax)
        mult = [b.like(k * b.values) for b, k in zip(basis, np.repeat(np.arange(1, r.kmax + 1), 2))]
        ext = extract_dn(m, basis, r.dn)
        pde = [dn_pde(m, b).mean_zero() for b in basis]
        print(f"{name},{subspace_error(ext.images, mult, basis):.2e},{subspace_error(pde, mult, basis):.2e},"
              f"{subspace_error(ext.images, pde, basis):.2e},{ext.meta['rank']}", flush=True)
    # a general metric: only the PDE route applies, and invariance says it is the Euclidean map
    m = radial_pullback(0.2)
    basis = modes(BoundaryChart(m), 64, r.kmax)
    mult = [b.like(k * b.values) for b, k in zip(basis, np.repeat(np.arange(1, r.kmax + 1), 2))]
    pde = [dn_pde(m, b).mean_zero() for b in basis]
    print(f"radial pullback (general),,{subspace_error(pde, mult, basis):.2e},,")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--kmax", type=int, default=4)
    main(Routes(kmax=p.parse_args().kmax))
