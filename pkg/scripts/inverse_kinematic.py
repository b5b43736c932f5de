"""Closed-loop recovery of a conformal factor from boundary distances.

Distances are synthesised on a fine geodesic step, optionally perturbed by
symmetric relative noise, and inverted by Gauss-Newton on the polynomial
basis.  One row per noise level: error of exp(2 lambda), iterations, status.
"""
import argparse
from dataclasses import dataclass

import numpy as np

from geotomo.dnmap import InversionConfig, conformal_factor_error, invert_conformal
from geotomo.flow import FlowOptions, distance_matrix
from geotomo.geometry import MetricField


@dataclass
class Experiment:
    lam: str = "0.2*exp(-3*(x^2+y^2))"
    npoints: int = 24
    data_step: float = 1e-3
    noise: tuple = (0.0, 1e-4, 1e-3)
    seed: int = 7
    inversion: InversionConfig = InversionConfig()


def main(ex: Experiment):
    th = np.arange(ex.npoints) * 2 * np.pi / ex.npoints
    D = distance_matrix(MetricField.conformal(ex.lam), th, FlowOptions(step=ex.data_step))
    print("noise,error_exp2lambda,iterations,status,final_residual")
    for level in ex.noise:
        z = np.random.default_rng(ex.seed).normal(size=D.shape)
        data = D * (1 + level * (z + z.T) / np.sqrt(2))
        res = invert_conformal(data, ex.inversion, th)
        err = conformal_factor_error(res, ex.lam)
        print(f"{level:g},{err:.3e},{res.iterations},{res.status},{res.history[-1]:.2e}", flush=True)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--lam", default=Experiment.lam)
    p.add_argument("--npoints", type=int, default=Experiment.npoints)
    p.add_argument("--noise", type=float, nargs="+", default=list(Experiment.noise))
    a = p.parse_args()
    main(Experiment(lam=a.lam, npoints=a.npoints, noise=tuple(a.noise)))
