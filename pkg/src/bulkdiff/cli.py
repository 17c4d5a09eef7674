"""Command-line front end: ``bulkdiff <abar|two-point|green-kubo|selftest>``.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 self-test failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import List

import numpy as np
import pydantic
from scipy.integrate import trapezoid

from . import __version__
from .cells import BasisSpec, CellProblemSpec, SingularSystemError, estimate_abar, extrapolate_abar
from .core import CoefficientModel, Domain, ValidationError
from .experiment import (ExperimentConfig, RunManifest, load_config, run_directory, task_seed,
                         write_csv)
from .homogenized import GridFunction, TruncationError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_SELFTEST = 0, 2, 3, 4


class TaskError(RuntimeError):
    """Numerical failure tagged with the task that raised it."""


def _cell_spec(cfg: ExperimentConfig, m, seed, lam=None) -> CellProblemSpec:
    b = cfg.basis
    return CellProblemSpec(m=m, d=cfg.dim, rho=cfg.rho, model=cfg.model.build(),
                           basis=BasisSpec(b.spacing, b.degree, b.pairs, b.radial_spacing, b.n_radial,
                                           b.radial_degree),
                           M=cfg.samples.M, seed=task_seed(seed, m), lam=lam, eval_M=cfg.samples.eval_M,
                           control_variate=cfg.samples.control_variate)


def _abar_task(spec):
    try:
        return estimate_abar(spec)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        raise TaskError(f"abar task m={spec.m}: {exc}") from exc


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


def _upper(d):
    return [(i, j) for i in range(d) for j in range(i, d)]


def _alpha(cfg, ext):
    if cfg.alpha_override is not None:
        return cfg.alpha_override, "override"
    if ext is not None and ext.alpha_hat is not None and np.isfinite(ext.alpha_hat):
        return ext.alpha_hat, "fit"
    return None, "none"


def _finite(v):
    # strict JSON has no NaN
    return float(v) if v is not None and np.isfinite(v) else None


def _abar_estimates(cfg, seed, workers):
    specs = [_cell_spec(cfg, m, seed) for m in cfg.m_list]
    ests = _map(_abar_task, specs, workers)
    ext = extrapolate_abar(ests) if len(ests) >= 3 else None
    return specs, ests, ext


# ---------------------------------------------------------------------------
# commands

def cmd_abar(cfg: ExperimentConfig, workers=1, seed=None):
    seed = cfg.seed if seed is None else seed
    out = run_directory(cfg, "abar")
    man = RunManifest(cfg, "abar", out)
    specs, ests, ext = _abar_estimates(cfg, seed, workers)
    man.seeds = {f"m={s.m}": s.seed for s in specs}
    d = cfg.dim
    ij = _upper(d)
    header = (["m", "nu_e1", "nu_e1_se"] + [f"abar_{i+1}{j+1}" for i, j in ij] + [f"abar_se_{i+1}{j+1}" for i, j in ij]
              + [f"abar_star_{i+1}{j+1}" for i, j in ij] + [f"abar_star_se_{i+1}{j+1}" for i, j in ij]
              + [f"J_e{i+1}" for i in range(d)] + [f"J_se_e{i+1}" for i in range(d)])
    rows = []
    for e in ests:
        rows.append([e.m, 0.5 * e.abar[0, 0], 0.5 * e.abar_se[0, 0]]
                    + [e.abar[i, j] for i, j in ij] + [e.abar_se[i, j] for i, j in ij]
                    + [e.abar_star[i, j] for i, j in ij] + [e.abar_star_se[i, j] for i, j in ij]
                    + list(e.J) + list(e.J_se))
    meta = {"command": "abar", "version": __version__, "config_hash": cfg.config_hash(), "model": cfg.model.kind,
            "rho": cfg.rho, "d": d, "bounds": "abar upper; abar_star from restricted nu*"}
    write_csv(out / "abar.csv", header, rows, meta)
    man.add_file("abar.csv")
    if ext is not None:
        alpha, src = _alpha(cfg, ext)
        info = {"alpha_hat": _finite(ext.alpha_hat), "alpha_used": alpha, "alpha_source": src,
                "status": ext.extrapolation, "fit_residual": _finite(ext.fit_residual),
                "abar_inf": None if ext.abar_inf is None else np.asarray(ext.abar_inf).tolist(),
                "m_list": cfg.m_list}
        with open(out / "extrapolation.json", "w", encoding="utf-8") as fh:
            json.dump(info, fh, indent=2)
        man.add_file("extrapolation.json")
    man.write()
    return out


def _bump(b, dom: Domain, h):
    c = np.asarray(b.center, dtype=float)

    def fn(X):
        s = dom.displacement(c, X)
        return b.amplitude * np.exp(-np.sum(s ** 2, axis=1) / (2 * b.width ** 2))
    return GridFunction.from_function(fn, dom, h)


def cmd_two_point(cfg: ExperimentConfig, workers=1, seed=None):
    from .dynamics import ChainParams, correlation_table
    seed = cfg.seed if seed is None else seed
    dc = cfg.dynamics
    model = cfg.model.build()
    if dc.abar is None and not model.is_constant:
        raise ValidationError("two-point predictions for a non-constant model need dynamics.abar")
    dom = Domain.torus(dc.side, cfg.dim)
    f, g = _bump(dc.f, dom, dc.grid_h), _bump(dc.g, dom, dc.grid_h)
    params = ChainParams(dc.dt, dom, model, cfg.rho, dc.scheme)
    out = run_directory(cfg, "two-point")
    man = RunManifest(cfg, "two-point", out)
    s0 = task_seed(seed, 0)
    man.seeds = {"replicas": s0}
    res = correlation_table([tuple(p) for p in dc.pairs], f, g, params, cfg.samples.replicas, s0, dc.abar, workers)
    rows = [r.row() + [r.quad_error] for r in res]
    meta = {"command": "two-point", "version": __version__, "config_hash": cfg.config_hash(),
            "model": cfg.model.kind, "rho": cfg.rho, "dt": dc.dt, "side": dc.side, "scheme": dc.scheme,
            "replicas": cfg.samples.replicas}
    write_csv(out / "two_point.csv", ["t", "s", "estimate", "se", "prediction", "discrepancy", "quad_error"],
              rows, meta)
    man.add_file("two_point.csv")
    man.write()
    return out


def _gk_task(args):
    from .greenkubo import gk_report
    spec, lams, abar_ref, abar_ref_se, palm, alpha, src = args
    try:
        return [gk_report(spec, lam, abar_ref, abar_ref_se, palm, alpha, src) for lam in lams]
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        raise TaskError(f"green-kubo task m={spec.m}: {exc}") from exc


def cmd_green_kubo(cfg: ExperimentConfig, workers=1, seed=None):
    from .greenkubo import palm_flux
    seed = cfg.seed if seed is None else seed
    gk = cfg.green_kubo
    d = cfg.dim
    p = np.asarray(gk.direction if gk.direction is not None else np.eye(d)[0], dtype=float)
    p = p / np.linalg.norm(p)
    out = run_directory(cfg, "green-kubo")
    man = RunManifest(cfg, "green-kubo", out)
    specs, ests, ext = _abar_estimates(cfg, seed, workers)
    alpha, src = _alpha(cfg, ext)
    ps = task_seed(seed, 10_000)
    palm = palm_flux(cfg.model.build(), cfg.rho, p, cfg.samples.palm_M, ps)
    man.seeds = {**{f"m={s.m}": s.seed for s in specs}, "palm": ps}
    jobs = []
    for spec, e in zip(specs, ests):
        spec = replace(spec, p=tuple(p))
        if gk.abar_ref is not None:
            ref, ref_se = np.asarray(gk.abar_ref), None
        else:
            ref, ref_se = e.abar, e.abar_se
        jobs.append((spec, gk.lambdas, ref, ref_se, palm, alpha, src))
    reports = [r for batch in _map(_gk_task, jobs, workers) for r in batch]
    header = ["m", "lambda", "bracket", "se", "regime", "palm", "palm_se", "integral", "integral_se",
              "half_pap_ref", "reconstructed", "reconstructed_se", "mesoscale"]
    rows = [[r.m, r.lam, r.bracket, r.bracket_se, r.regime, r.palm, r.palm_se, r.integral, r.integral_se,
             r.half_pap, r.reconstructed, r.reconstructed_se, "" if r.mesoscale is None else r.mesoscale]
            for r in reports]
    meta = {"command": "green-kubo", "version": __version__, "config_hash": cfg.config_hash(),
            "model": cfg.model.kind, "rho": cfg.rho, "direction": ",".join(repr(float(v)) for v in p),
            "alpha": alpha, "alpha_source": src,
            "abar_ref": "config" if gk.abar_ref is not None else "per-cube estimate"}
    write_csv(out / "green_kubo.csv", header, rows, meta)
    with open(out / "green_kubo.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, ensure_ascii=False)
    man.add_file("green_kubo.csv")
    man.add_file("green_kubo.json")
    man.write()
    return out


# ---------------------------------------------------------------------------
# self-test

def _selftest_checks(inject_lambda=None):
    from .core import ellipticity_audit
    from .dynamics import discrete_transition_matrix
    from .homogenized import (HeatKernel, apply_homog_semigroup, gaussian_density, heat_kernel,
                              parabolic_parameters, solve_homog_dirichlet)
    from .greenkubo import palm_flux
    from .cells import solve_nu

    def heat():
        hk = HeatKernel.identity(1)
        x = np.linspace(-40, 40, 80001)
        mass = trapezoid(heat_kernel(hk, 2.0, x), x)
        return abs(heat_kernel(hk, 1.0, 0.0) - 1 / math.sqrt(2 * math.pi)) < 1e-12 and abs(mass - 1) < 1e-6

    def semigroup():
        dom = Domain.torus(40.0, 1)
        hk = HeatKernel.identity(1)
        g = GridFunction.from_function(lambda X: gaussian_density(X, [[1.0]]), dom, 0.05)
        a = apply_homog_semigroup(apply_homog_semigroup(g, 1.0, hk), 0.5, hk)
        b = apply_homog_semigroup(g, 1.5, hk)
        return np.abs(a.values - b.values).max() < 1e-6

    def dirichlet():
        errs = []
        dom = Domain.cube(1, 1)
        L = dom.side
        for n in (32, 64):
            f = GridFunction.from_function(lambda X: (math.pi / L) ** 2 * np.sin(math.pi * (X[:, 0] + L / 2) / L), dom, L / n)
            u = solve_homog_dirichlet(f, 1.0)
            errs.append(np.abs(u.values - np.sin(math.pi * (u.coords()[:, 0] + L / 2) / L)).max())
        return 3.5 < errs[0] / errs[1] < 4.5

    def parabolic():
        a = parabolic_parameters(1.0)
        b = parabolic_parameters(3.0 ** 16)
        return a.n == 0 and a.tau == 1.0 and b.n == 1 and b.tau == 3.0 ** 12

    def ellipticity():
        if inject_lambda is not None:
            model = CoefficientModel.unchecked(kind="count-indicator", Lambda=inject_lambda)
        else:
            model = CoefficientModel("count-indicator", 2.0)
        ok, _ = ellipticity_audit(model, 2000, 1, np.random.default_rng(0))
        return ok

    def detailed_balance():
        K, _ = discrete_transition_matrix(CoefficientModel("count-indicator", 2.0))
        return np.abs(K - K.T).max() < 1e-10

    def identity_nu():
        sol = solve_nu(CellProblemSpec(m=0, M=500, seed=11))
        return abs(sol.value - 0.5) <= 3 * sol.se

    def palm():
        r = palm_flux(CoefficientModel("count-indicator", 2.0), 1.0, [1.0], 4000, 3)
        return abs(r.value - 0.5 * (2 - math.exp(-2))) <= 3 * r.se

    return [("heat kernel normalization", heat), ("semigroup composition", semigroup),
            ("Dirichlet solver O(h^2)", dirichlet), ("parabolic parameters", parabolic),
            ("ellipticity: 1 <= xi.a xi <= Lambda", ellipticity), ("detailed balance", detailed_balance),
            ("identity nu = 1/2", identity_nu), ("palm flux void probability", palm)]


def cmd_selftest(inject_lambda=None, stream=None) -> bool:
    stream = stream or sys.stdout
    ok_all = True
    for name, fn in _selftest_checks(inject_lambda):
        try:
            ok = bool(fn())
            msg = ""
        except Exception as exc:  # report and keep going
            ok, msg = False, f" ({type(exc).__name__}: {exc})"
        ok_all &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}{msg}", file=stream)
    return ok_all


# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="bulkdiff", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("abar", "two-point", "green-kubo"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--alpha-override", type=float, default=None)
    st = sub.add_parser("selftest")
    st.add_argument("--config", default=None)
    st.add_argument("--workers", type=int, default=1)
    st.add_argument("--seed", type=int, default=None)
    st.add_argument("--alpha-override", type=float, default=None)
    st.add_argument("--inject-lambda", type=float, default=None,
                    help="corrupt the audited model with this Lambda (expected to fail)")
    return ap


def main(argv: List[str] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return EXIT_OK if cmd_selftest(args.inject_lambda) else EXIT_SELFTEST
        cfg = load_config(args.config)
        if args.alpha_override is not None:
            cfg = cfg.model_copy(update={"alpha_override": args.alpha_override})
            cfg = ExperimentConfig.model_validate(cfg.model_dump())
        if args.workers < 1:
            raise ValidationError("--workers must be at least 1")
        fn = {"abar": cmd_abar, "two-point": cmd_two_point, "green-kubo": cmd_green_kubo}[args.command]
        out = fn(cfg, args.workers, args.seed)
        print(out)
        return EXIT_OK
    except (pydantic.ValidationError, ValidationError, FileNotFoundError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TaskError, SingularSystemError, TruncationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
