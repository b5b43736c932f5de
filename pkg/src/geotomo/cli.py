"""Command-line front end.

    geotomo <subcommand> [--config c.toml] [--threads N] [options] --out FILE

Every subcommand writes its artifact (CSV or JSON) and a sidecar
``FILE.meta.json`` with the config hash, the metric hash, library versions,
the parameters used and the residuals.  Output is deterministic: the same
config and seed give byte-identical files.

Exit codes: 0 success, 2 validation failure (bad config, malformed
expression, mismatched artifacts), 3 numerical failure (non-simple disk,
non-convergence, ill-posed solve), 64 unknown subcommand.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .expr import Expression, ExprError
from .geometry import BoundaryChart, SingularMetricError

log = logging.getLogger("geotomo")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_USAGE = 0, 2, 3, 64


class NumericalFailure(RuntimeError):
    pass


class Validation(ValueError):
    pass


# ------------------------------------------------------------------ output helpers


def _fmt(v) -> str:
    return repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating, int, np.integer)) else v for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else str(float(obj))
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _meta(cfg: ExperimentConfig, metric, command: str, params: dict, residuals: dict) -> dict:
    return {
        "command": command,
        "config_hash": cfg.hash,
        "metric_hash": metric.hash if metric is not None else None,
        "config": cfg.as_dict(),
        "params": params,
        "residuals": residuals,
        "versions": {"geotomo": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }


def _emit_meta(out, meta):
    write_json(f"{out}.meta.json", meta)


def _expression(src: str, what: str) -> Expression:
    try:
        return Expression(src)
    except ExprError as exc:
        raise Validation(f"malformed {what} expression {src!r}: {exc}") from None


def _fiber_test_function(seed: int):
    """A band-limited fiber function with smooth spatial coefficients, drawn from ``seed``."""
    c = np.random.default_rng(seed).normal(size=(4, 3)) * 0.5

    def u(x, y, b):
        out = c[0, 0] * np.exp(c[0, 1] * x + c[0, 2] * y)
        for k in range(1, 4):
            out = out + (c[k, 0] + c[k, 1] * x + c[k, 2] * y * x) * np.cos(k * b + c[k, 2])
        return out
    return u


def _mode_basis(chart: BoundaryChart, ns: int, kmax: int):
    from .dnmap import BoundaryTrace
    basis, labels = [], []
    for k in range(1, kmax + 1):
        for name, fn in (("cos", np.cos), ("sin", np.sin)):
            basis.append(BoundaryTrace.from_function(chart, ns, lambda t, k=k, fn=fn: fn(k * t)))
            labels.append(f"{name}{k}")
    return basis, labels


def _mode_matrix(images, basis) -> np.ndarray:
    """Coefficients of each image in the (orthogonal) mode basis: column j is Lambda(basis_j)."""
    M = np.full((len(basis), len(basis)), np.nan)
    for j, im in enumerate(images):
        if im is None:
            continue
        for i, b in enumerate(basis):
            M[i, j] = b.inner(im) / b.inner(b)
    return M


# ------------------------------------------------------------------ subcommands


def cmd_distances(cfg, m, a):
    from .flow import FlowOptions, distance_matrix
    ns = a.ns or cfg.ns
    chart = BoundaryChart(m)
    s = np.arange(ns) * chart.length / ns
    th = chart.theta(s)
    D = distance_matrix(m, th, FlowOptions(step=cfg.step))
    write_csv(a.out, [_fmt(v) for v in s], D)
    sym = float(np.abs(D - D.T).max())
    return {"ns": ns, "theta": th.tolist(), "step": cfg.step}, {"asymmetry": sym}


def cmd_scatter(cfg, m, a):
    from .bundle import scattering_relation
    t = scattering_relation(m, cfg.ns, cfg.nphi, cfg.step)
    S, P = np.meshgrid(t.s, t.phi, indexing="ij")
    recs = [{"s": float(s), "phi": float(p), "s_exit": float(se), "phi_exit": float(pe), "tau": float(tau)}
            for s, p, se, pe, tau in zip(S.ravel(), P.ravel(), t.s_exit.ravel(), t.p_exit.ravel(), t.tau.ravel())]
    write_json(a.out, recs)
    return {"ns": cfg.ns, "nphi": cfg.nphi, "step": cfg.step}, {"max_tau": float(t.tau.max())}


def _write_fiber_grid(path, grid):
    header = ["s"] + [_fmt(p) for p in grid.angles]
    write_csv(path, header, [[s, *row] for s, row in zip(grid.s, grid.values)])


def cmd_xray(cfg, m, a):
    from .transport import sinogram
    f = _expression(a.field, "field")
    sino = sinogram(m, f, cfg.ns, cfg.nphi, cfg.step)
    _write_fiber_grid(a.out, sino)
    return {"field": a.field, "ns": cfg.ns, "nphi": cfg.nphi, "step": cfg.step}, {}


def cmd_istar_solve(cfg, m, a):
    from .transport import IstarConfig, SimplicityError, solve_istar
    h = _expression(a.target, "target")
    icfg = IstarConfig(delta=cfg.delta, ns=cfg.ns, nphi=cfg.nphi)
    try:
        sol = solve_istar(m, h, icfg)
    except SimplicityError as exc:
        raise NumericalFailure(str(exc)) from exc
    _write_fiber_grid(a.out, sol.w)
    params = {"target": a.target, "delta": icfg.delta, "grid_n": list(icfg.grid_n),
              "nbeta_n": icfg.nbeta_n, "ns": icfg.ns, "nphi": icfg.nphi, "cg_tol": icfg.cg_tol}
    return params, sol.as_dict()


def _refinement_rows(reports, key):
    rows = [r.as_dict() for r in reports]
    for prev, row in zip([None] + rows[:-1], rows):
        row["ratio"] = prev[key] / row[key] if prev and row[key] > 0 else float("nan")
    return rows


def cmd_check_commutator(cfg, m, a):
    from .hilbert import commutator_residual
    u = _fiber_test_function(cfg.seed)
    dts = [cfg.dt * 2.0 ** (1 - i) for i in range(a.refine)]
    reps = [commutator_residual(m, u, dt=dt, nbeta=min(cfg.nbeta, 64)) for dt in dts]
    rows = _refinement_rows(reps, "residual")
    cols = ["dt", "residual", "split_plus", "split_minus", "scale", "ratio"]
    write_csv(a.out, cols, [[r[c] for c in cols] for r in rows])
    return {"refine": a.refine, "dt": dts, "seed": cfg.seed}, {"rows": rows}


def cmd_check_identities(cfg, m, a):
    from .hilbert import xray_identities
    u = _fiber_test_function(cfg.seed)
    levels = [(16 * 2**i, 8 * 2**i, 8e-2 / 2**i) for i in range(a.refine)]
    reps = [xray_identities(m, u, ns, nphi, dt, cfg.step) for ns, nphi, dt in levels]
    rows = _refinement_rows(reps, "direct")
    for prev, row in zip([None] + rows[:-1], rows):
        row["order_direct"] = float(np.log2(prev["direct"] / row["direct"])) if prev else float("nan")
        row["order_pullback"] = float(np.log2(prev["pullback"] / row["pullback"])) if prev else float("nan")
    cols = ["ns", "nphi", "dt", "direct", "pullback", "scale", "order_direct", "order_pullback"]
    write_csv(a.out, cols, [[r[c] for c in cols] for r in rows])
    return {"refine": a.refine, "seed": cfg.seed}, {"rows": rows}


def cmd_dn_extract(cfg, m, a):
    from .dnmap import DnConfig, PdeConfig, dn_pde, extract_dn
    chart = BoundaryChart(m)
    ns = max(cfg.ns, 4 * a.kmax)
    basis, labels = _mode_basis(chart, ns, a.kmax)
    if a.route == "scattering":
        dcfg = DnConfig(ns=ns, nphi=cfg.nphi, step=cfg.step, cutoff=cfg.cutoff)
        ext = extract_dn(m, basis, dcfg)
        images, failures = ext.images, [list(f) for f in ext.failures]
        params = {"route": a.route, **ext.meta}
    else:
        pcfg = PdeConfig()
        images = [dn_pde(m, b, pcfg).mean_zero() for b in basis]
        failures = []
        params = {"route": a.route, "method": pcfg.method, "nr": pcfg.nr, "ntheta": pcfg.ntheta,
                  "richardson": pcfg.richardson}
    M = _mode_matrix(images, basis)
    params.update(kmax=a.kmax, ns=ns, modes=labels)
    # for the Euclidean boundary length the mode k should map to k; report the deviation
    target = np.diag([k for k in range(1, a.kmax + 1) for _ in (0, 1)]).astype(float)
    resid = {"failures": failures, "deviation_from_euclidean": float(np.linalg.norm(np.nan_to_num(M) - target, 2)
                                                       / np.linalg.norm(target, 2))}
    write_json(a.out, {"modes": labels, "matrix": M, "metric_hash": m.hash, "route": a.route})
    if failures:
        log.error("%d basis traces gave ill-posed boundary solves", len(failures))
    return params, resid


def cmd_dn_compare(cfg, m, a):
    arts = []
    for p in (a.first, a.second):
        try:
            arts.append(json.loads(Path(p).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise Validation(f"cannot read DN artifact {p}: {exc}") from None
    h1, h2 = (art.get("metric_hash") for art in arts)
    if h1 is None or h1 != h2:
        raise Validation(f"refusing to compare DN maps of different metrics ({h1} vs {h2})")
    if arts[0]["modes"] != arts[1]["modes"]:
        raise Validation("DN artifacts use different mode bases")
    A, B = (np.array(art["matrix"], float) for art in arts)
    err = float(np.linalg.norm(A - B, 2) / np.linalg.norm(B, 2))
    per_mode = (np.abs(A - B).max(0)).tolist()
    write_json(a.out, {"metric_hash": h1, "relative_spectral_difference": err, "per_mode_max": per_mode,
                       "modes": arts[0]["modes"], "routes": [arts[0].get("route"), arts[1].get("route")]})
    return {"first": str(a.first), "second": str(a.second)}, {"relative_spectral_difference": err}


def _read_distances(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        s = np.array([float(v) for v in rows[0]])
        D = np.array([[float(v) for v in r] for r in rows[1:]])
    except (OSError, ValueError, IndexError) as exc:
        raise Validation(f"cannot read distance matrix {path}: {exc}") from None
    if D.shape != (s.size, s.size):
        raise Validation(f"distance matrix {path} is {D.shape}, header has {s.size} points")
    theta = None
    meta = Path(f"{path}.meta.json")
    if meta.exists():
        theta = json.loads(meta.read_text(encoding="utf-8")).get("params", {}).get("theta")
    # without a sidecar the boundary is taken to have Euclidean length, so theta = s
    return np.asarray(theta if theta is not None else s, float), D


def cmd_invert(cfg, m, a):
    from .dnmap import InversionConfig, NonConvergenceError, invert_conformal
    from .transport import PolarGrid
    th, D = _read_distances(a.data)
    icfg = InversionConfig(max_iter=a.max_iter)
    try:
        res = invert_conformal(D, icfg, th)
    except NonConvergenceError as exc:
        raise NumericalFailure(f"{exc}; residual history {exc.history}") from exc
    grid = PolarGrid(cfg.nr, cfg.ntheta)
    x, y = grid.points()
    lam = res.lam(x, y)
    write_csv(a.out, ["x", "y", "lambda"], zip(x.ravel(), y.ravel(), lam.ravel()))
    params = {"data": str(a.data), **icfg.as_dict(), "nr": cfg.nr, "ntheta": cfg.ntheta}
    resid = {"status": res.status, "iterations": res.iterations, "history": res.history,
             "coefficients": res.coefficients, "lambda_expression": res.basis.expression(res.coefficients)}
    return params, resid


def cmd_check_simple(cfg, m, a):
    from .flow import check_simple
    rep = check_simple(m, resolution=max(cfg.ns // 2, 16))
    out = {**rep.as_dict(), "simple": rep.simple}
    write_json(a.out, out)
    if not rep.simple:
        raise NumericalFailure(f"disk is not simple: {out}", out)
    return {"resolution": max(cfg.ns // 2, 16)}, out


def cmd_fold_scan(cfg, m, a):
    from .bundle import fold_scan
    sc = fold_scan(m, a.s, side=a.side, delta=cfg.delta, step=cfg.step)
    write_csv(a.out, ["eps", "sigma_min", "sigma_max"], zip(sc.eps, sc.sigma_min, sc.sigma_max))
    return ({"s": a.s, "side": a.side, "delta": cfg.delta},
            {"slope": sc.slope, "intercept": sc.intercept, "r_squared": sc.r_squared,
             "min_sigma_max": float(sc.sigma_max.min())})


COMMANDS = {
    "distances": cmd_distances,
    "scatter": cmd_scatter,
    "xray": cmd_xray,
    "istar-solve": cmd_istar_solve,
    "check-commutator": cmd_check_commutator,
    "check-identities": cmd_check_identities,
    "dn-extract": cmd_dn_extract,
    "dn-compare": cmd_dn_compare,
    "invert": cmd_invert,
    "check-simple": cmd_check_simple,
    "fold-scan": cmd_fold_scan,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config (defaults: Euclidean disk)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    common.add_argument("--out", type=Path, required=True, help="artifact path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="geotomo", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    q = sub.add_parser("distances", parents=[common])
    q.add_argument("--ns", type=int, default=None)
    sub.add_parser("scatter", parents=[common])
    q = sub.add_parser("xray", parents=[common])
    q.add_argument("--field", required=True)
    q = sub.add_parser("istar-solve", parents=[common])
    q.add_argument("--target", required=True)
    for name in ("check-commutator", "check-identities"):
        q = sub.add_parser(name, parents=[common])
        q.add_argument("--refine", type=int, default=3)
    q = sub.add_parser("dn-extract", parents=[common])
    q.add_argument("--kmax", type=int, default=4)
    q.add_argument("--route", choices=("scattering", "pde"), default="scattering")
    q = sub.add_parser("dn-compare", parents=[common])
    q.add_argument("first", type=Path)
    q.add_argument("second", type=Path)
    q = sub.add_parser("invert", parents=[common])
    q.add_argument("--data", type=Path, required=True)
    q.add_argument("--max-iter", type=int, default=50)
    sub.add_parser("check-simple", parents=[common])
    q = sub.add_parser("fold-scan", parents=[common])
    q.add_argument("--s", type=float, default=0.0)
    q.add_argument("--side", type=int, choices=(-1, 1), default=1)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        print(f"geotomo: unknown subcommand '{argv[0]}' (choose from {', '.join(COMMANDS)})", file=sys.stderr)
        return EXIT_USAGE
    try:
        a = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    threads = a.threads
    if threads is None and os.environ.get("GEOTOMO_THREADS"):
        try:
            threads = int(os.environ["GEOTOMO_THREADS"])
        except ValueError:
            print("geotomo: GEOTOMO_THREADS must be an integer", file=sys.stderr)
            return EXIT_INVALID
    if threads is not None and threads < 1:
        print("geotomo: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID

    try:
        cfg = load_config(a.config) if a.config else ExperimentConfig()
        m = cfg.metric.build()
    except OSError as exc:
        print(f"geotomo: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ExprError as exc:
        print(f"geotomo: invalid config: malformed metric expression: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, SingularMetricError, ValueError) as exc:
        print(f"geotomo: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID

    from .dnmap import IllPosedError
    from .flow import ShootingError
    a.out.parent.mkdir(parents=True, exist_ok=True)
    try:
        with _thread_limit(threads):
            params, resid = COMMANDS[a.command](cfg, m, a)
    except Validation as exc:
        print(f"geotomo: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalFailure as exc:
        print(f"geotomo: numerical failure: {exc.args[0]}", file=sys.stderr)
        report = exc.args[1] if len(exc.args) > 1 else {}
        _emit_meta(a.out, _meta(cfg, m, a.command, {}, {"error": exc.args[0], **report}))
        return EXIT_NUMERICAL
    except (ShootingError, IllPosedError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"geotomo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    params["threads"] = threads
    _emit_meta(a.out, _meta(cfg, m, a.command, params, resid))
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
