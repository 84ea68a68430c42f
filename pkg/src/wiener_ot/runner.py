"""Batch experiment runner: executes configured jobs, writes a manifest.

Every job gets its own subdirectory under the run directory and produces
CSV/JSON artifacts through :mod:`wiener_ot.reporting`, so data files carry
no wall-clock content and repeated runs of one config are byte-identical;
timestamps and timings live only in the manifest (and, for solver
comparisons, in the summary JSON that declares them).  A failing job is
isolated: later jobs still execute, the manifest records the error, and the
process exit code reports the failure.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .calculus import dual_identity_residual, monge_ampere_residual
from .cascade import (
    DEFAULT_SCHEDULE_LEVELS,
    cascade_run,
    refinement_sweep,
    regularity_bound_check,
)
from .config import ExperimentConfig, JobSpec, build_density, build_grid_spec
from .densities import (
    PotentialDensity,
    QuadraticPotential,
    SeparablePotential,
    density_log_masses,
    quadratic_mean_cov,
)
from .entropic import (
    default_epsilon_schedule,
    discretize,
    epsilon_extrapolate,
    extract_potentials,
    primal_cost,
    sinkhorn_schedule,
)
from .errors import (
    ConvexityNotCertified,
    JobFailed,
    ManifestMissing,
    NoApplicableMethod,
)
from .grids import GAUSS_HERMITE, TRUNCATED_UNIFORM, QuadratureGrid, build_grid
from .inequalities import (
    catalog_1d,
    chain_check,
    default_inequality_grid,
    lsi_check,
    poincare_constant,
    talagrand_check,
)
from .oracles import GaussianPair, solve_1d, solve_gaussian, solve_separable
from .reporting import (
    CASCADE_COLUMNS,
    INEQUALITY_COLUMNS,
    RESIDUAL_COLUMNS,
    cascade_level_rows,
    cascade_stage_rows,
    residual_rows,
    sha256_file,
    write_csv,
    write_json,
)

MANIFEST_NAME = "manifest.json"

COMPARE_METHODS = ("gaussian", "1d", "separable", "entropic")

CASCADE_REQUIRED_MONOTONE = ("phi_gap", "psi_gap_L1", "grad_psi_gap_L2",
                             "hess_gap", "fisher_gap_f")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class JobRecord:
    """Execution record of one configured job."""

    name: str
    kind: str
    status: str = "pending"  # ok | failed | refused
    wall_time_s: float = 0.0
    error: str = ""
    files: list = dataclass_field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "status": self.status,
            "wall_time_s": self.wall_time_s,
            "error": self.error,
            "files": self.files,
        }


@dataclass(eq=False)
class RunManifest:
    """Self-describing record of one batch run.

    Every produced file is listed with a content digest; the fully-resolved
    config echo makes a report reproducible from the manifest alone.
    Wall-clock quantities appear here and nowhere in the data files.
    """

    config_hash: str
    version: str
    seed: int
    output_dir: str
    started_at: str
    finished_at: str = ""
    wall_time_s: float = 0.0
    jobs: list = dataclass_field(default_factory=list)
    config_echo: dict = dataclass_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "version": self.version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "wall_time_s": self.wall_time_s,
            "jobs": [j.to_dict() for j in self.jobs],
            "config_echo": self.config_echo,
        }


def load_manifest(run_dir) -> dict:
    import json

    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise ManifestMissing(f"no {MANIFEST_NAME} under {run_dir}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# shared job helpers
# ---------------------------------------------------------------------------

def _density_arg(cfg: ExperimentConfig, job: JobSpec, key: str) -> PotentialDensity:
    ref = job.options.get(key)
    if ref is None:
        raise JobFailed(f"job {job.name!r} needs a {key!r} density reference")
    return build_density(cfg.densities[ref])


def _grid_arg(cfg: ExperimentConfig, job: JobSpec, key: str) -> QuadratureGrid | None:
    ref = job.options.get(key)
    if ref is None:
        return None
    return build_grid_spec(cfg.grids[ref])


def _default_solve_grid(dim: int) -> QuadratureGrid:
    return build_grid(TRUNCATED_UNIFORM, dim, 801 if dim == 1 else 41,
                      truncation_radius=6.0 if dim == 1 else 4.0)


def _default_verify_grid(dim: int) -> QuadratureGrid:
    # narrower than the solve grid: FD residuals are meaningful only where
    # the quantile CDFs are far from saturation
    return build_grid(TRUNCATED_UNIFORM, dim, 401 if dim == 1 else 41,
                      truncation_radius=4.0 if dim == 1 else 3.0)


def _node_masses(density: PotentialDensity, grid: QuadratureGrid) -> np.ndarray:
    m = np.exp(density_log_masses(density, grid))
    return m / m.sum()


def _solve_oracle(rho: PotentialDensity, nu: PotentialDensity,
                  grid: QuadratureGrid | None = None,
                  target_grid: QuadratureGrid | None = None):
    """Structure-dispatched exact solve: Gaussian, 1-D quantile, separable."""
    if isinstance(rho, QuadraticPotential) and isinstance(nu, QuadraticPotential):
        m1, c1 = quadratic_mean_cov(rho)
        m2, c2 = quadratic_mean_cov(nu)
        return solve_gaussian(GaussianPair(m1, m2, c1, c2), grid=grid)
    if rho.dim == 1:
        g = grid if grid is not None else _default_solve_grid(1)
        return solve_1d(rho, nu, g, target_grid=target_grid)
    if isinstance(rho, SeparablePotential) and isinstance(nu, SeparablePotential):
        axis = build_grid(TRUNCATED_UNIFORM, 1, 801, truncation_radius=6.0)
        return solve_separable(rho, nu, [axis] * rho.dim)
    raise NoApplicableMethod(
        f"no oracle route for a non-quadratic, non-separable pair in dim {rho.dim}")


_ENTROPIC_RES = {1: 121, 2: 33, 3: 13}

_MOMENT_RES = {1: 96, 2: 40, 3: 16, 4: 10}


def _support_radius(density: PotentialDensity) -> float:
    """Half-width of a box holding about four standard deviations of mass.

    Truncating a wide marginal at the default radius biases the transport
    cost far more than the mesh does, so the grid must scale with spread.
    """
    if isinstance(density, QuadraticPotential):
        mean, cov = quadratic_mean_cov(density)
        sigma = np.sqrt(np.diag(cov))
    else:
        probe = build_grid(GAUSS_HERMITE, density.dim,
                           _MOMENT_RES.get(density.dim, 8))
        masses = _node_masses(density, probe)
        mean = masses @ probe.nodes
        second = masses @ probe.nodes ** 2
        sigma = np.sqrt(np.maximum(second - mean ** 2, 0.0))
    return float(max(4.0, np.max(np.abs(mean) + 4.0 * sigma)))


def _entropic_grid(density: PotentialDensity) -> QuadratureGrid:
    res = _ENTROPIC_RES.get(density.dim, 9)
    return build_grid(TRUNCATED_UNIFORM, density.dim, res,
                      truncation_radius=_support_radius(density))


def _mesh_epsilons(grid: QuadratureGrid, target_grid: QuadratureGrid,
                   mu_d, nu_d) -> list[float]:
    """Warm start, then three levels tied to the coarser mesh spacing.

    The extrapolation tail must reach eps of order h for the eps -> 0 fit
    to land within the discretization error of the grids themselves.
    """
    try:
        h = max(grid.spacing, target_grid.spacing)
    except Exception:  # non-uniform scheme: fall back to cost-scaled levels
        return default_epsilon_schedule(mu_d, nu_d, n_levels=6)
    return [0.3, 0.1, 0.5 * h, 0.25 * h, 0.125 * h]


def _solve_entropic(rho: PotentialDensity, nu: PotentialDensity,
                    grid: QuadratureGrid | None = None,
                    target_grid: QuadratureGrid | None = None,
                    epsilons: list[float] | None = None,
                    n_extrapolate: int = 3):
    """Sinkhorn schedule solve; attaches the eps -> 0 extrapolated cost.

    The returned solution's ``cost`` is the extrapolated squared distance so
    solver comparisons see the debiased value; the final-state cost stays in
    ``meta["cost_final_eps"]``.
    """
    if grid is None:
        grid = _entropic_grid(rho)
    if target_grid is None:
        target_grid = _entropic_grid(nu) if grid.scheme == TRUNCATED_UNIFORM else grid
    mu_d = discretize(rho, grid)
    nu_d = discretize(nu, target_grid)
    if epsilons is None:
        epsilons = _mesh_epsilons(grid, target_grid, mu_d, nu_d)
    states = sinkhorn_schedule(mu_d, nu_d, epsilons=epsilons)
    sol = extract_potentials(states[-1], mu_d, nu_d,
                             grid=grid, target_grid=target_grid)
    tail = states[-n_extrapolate:]
    costs = [(s.epsilon, primal_cost(s, mu_d, nu_d)) for s in tail]
    intercept, slope = epsilon_extrapolate(costs)
    sol.meta["cost_final_eps"] = sol.cost
    sol.meta["extrapolation_slope"] = slope
    sol.cost = 2.0 * intercept  # schedule costs use the 1/2 convention
    return sol


# ---------------------------------------------------------------------------
# solver comparison
# ---------------------------------------------------------------------------

def _method_applies(method: str, rho: PotentialDensity, nu: PotentialDensity) -> bool:
    if method == "gaussian":
        return isinstance(rho, QuadraticPotential) and isinstance(nu, QuadraticPotential)
    if method == "1d":
        return rho.dim == 1
    if method == "separable":
        return isinstance(rho, SeparablePotential) and isinstance(nu, SeparablePotential)
    if method == "entropic":
        return rho.dim <= 3  # dense cost matrix
    raise NoApplicableMethod(f"unknown method {method!r}")


def _solve_by_method(method: str, rho: PotentialDensity, nu: PotentialDensity):
    if method == "gaussian":
        m1, c1 = quadratic_mean_cov(rho)
        m2, c2 = quadratic_mean_cov(nu)
        return solve_gaussian(GaussianPair(m1, m2, c1, c2))
    if method == "1d":
        return solve_1d(rho, nu, _default_solve_grid(1))
    if method == "separable":
        axis = build_grid(TRUNCATED_UNIFORM, 1, 801, truncation_radius=6.0)
        return solve_separable(rho, nu, [axis] * rho.dim)
    return _solve_entropic(rho, nu)


def oracle_compare(rho: PotentialDensity, nu: PotentialDensity,
                   methods: list[str] | None = None,
                   probe_grid: QuadratureGrid | None = None) -> dict:
    """Cross-check every applicable solver on one pair.

    Returns ``{"rows": [...], "methods": [...]}`` where each row carries
    (method, cost, phi_gap_vs_first, runtime_s).  The potential gap is the
    rho-weighted mean absolute difference of recentered forward potentials
    against the first applicable method, evaluated on a shared probe grid.
    Needs at least two applicable methods.
    """
    methods = list(COMPARE_METHODS) if methods is None else list(methods)
    applicable = [m for m in methods if _method_applies(m, rho, nu)]
    if len(applicable) < 2:
        raise NoApplicableMethod(
            f"need at least 2 applicable methods for this pair, got {applicable}")
    if probe_grid is None:
        probe_grid = (_default_solve_grid(1) if rho.dim == 1
                      else _entropic_grid(rho))
    nodes = probe_grid.nodes
    masses = _node_masses(rho, probe_grid)

    rows = []
    base_phi: np.ndarray | None = None
    for method in applicable:
        t0 = time.perf_counter()
        sol = _solve_by_method(method, rho, nu)
        runtime = time.perf_counter() - t0
        with np.errstate(all="ignore"):
            phi = np.asarray(sol.phi(nodes), dtype=float).reshape(-1)
        if base_phi is None:
            base_phi = phi
            gap = 0.0
        else:
            ok = np.isfinite(phi) & np.isfinite(base_phi) & (masses > 1e-12)
            w = masses[ok] / masses[ok].sum()
            # potentials are defined up to an additive constant
            diff = (phi[ok] - w @ phi[ok]) - (base_phi[ok] - w @ base_phi[ok])
            gap = float(w @ np.abs(diff))
        rows.append({
            "method": method,
            "cost": float(sol.cost),
            "phi_gap_vs_first": gap,
            "runtime_s": runtime,
        })
    return {"rows": rows, "methods": applicable}


# ---------------------------------------------------------------------------
# job implementations
# ---------------------------------------------------------------------------

def _job_solve(cfg: ExperimentConfig, job: JobSpec, out: Path, seed: int) -> None:
    rho = _density_arg(cfg, job, "rho")
    nu = _density_arg(cfg, job, "nu")
    method = job.options.get("method", "oracle")
    grid = _grid_arg(cfg, job, "grid")
    target_grid = _grid_arg(cfg, job, "target_grid")
    if method == "oracle":
        sol = _solve_oracle(rho, nu, grid, target_grid)
    elif method == "entropic":
        sol = _solve_entropic(rho, nu, grid, target_grid)
    else:
        raise JobFailed(f"job {job.name!r}: unknown solve method {method!r}")

    rows = [("cost", sol.cost), ("solver", sol.solver_tag),
            ("dim", sol.dim), ("seed", seed)]
    if "cost_final_eps" in sol.meta:
        rows.insert(1, ("cost_final_eps", sol.meta["cost_final_eps"]))
    write_csv(out / "solve.csv", ("field", "value"), rows)

    if sol.dim == 1:
        axis = (np.asarray(sol.grid.axes[0])
                if sol.grid is not None and sol.grid.axes is not None
                else np.linspace(-6.0, 6.0, 801))
        pts = axis.reshape(-1, 1)
        with np.errstate(all="ignore"):
            table = np.column_stack([
                axis,
                np.asarray(sol.phi(pts), dtype=float).reshape(-1),
                np.asarray(sol.psi(pts), dtype=float).reshape(-1),
                np.asarray(sol.T_map(pts), dtype=float).reshape(-1),
                np.asarray(sol.S_map(pts), dtype=float).reshape(-1),
            ])
        write_csv(out / "potentials.csv", ("x", "phi", "psi", "T", "S"),
                  [tuple(r) for r in table])

    write_json(out / "summary.json", {
        "seed": seed,
        "cost": sol.cost,
        "solver": sol.solver_tag,
        "dim": sol.dim,
        "method": method,
    })


_MA_DIRECTIONS = ("forward", "backward")


def _job_verify_ma(cfg: ExperimentConfig, job: JobSpec, out: Path, seed: int) -> None:
    rho = _density_arg(cfg, job, "rho")
    nu = _density_arg(cfg, job, "nu")
    grid = _grid_arg(cfg, job, "grid")
    if grid is None:
        grid = _default_verify_grid(rho.dim)
    solve_grid = _grid_arg(cfg, job, "solve_grid")
    tol = float(job.options.get("tol", 1e-6))
    richardson = bool(job.options.get("richardson", True))
    direction = job.options.get("direction", "both")
    directions = _MA_DIRECTIONS if direction == "both" else (direction,)

    sol = _solve_oracle(rho, nu, solve_grid)
    reports = [monge_ampere_residual(d, sol, rho, nu, grid,
                                     tol=tol, richardson=richardson)
               for d in directions]
    rows = [row for rep in reports for row in residual_rows(rep)]
    write_csv(out / "residuals.csv", RESIDUAL_COLUMNS, rows)
    write_json(out / "summary.json", {
        "seed": seed,
        "checks": {rep.identity_name: rep.passed for rep in reports},
        "tolerances": {rep.identity_name: rep.tolerance_used for rep in reports},
    })
    bad = [rep.identity_name for rep in reports if not rep.passed]
    if bad:
        raise JobFailed(f"identity residual above tolerance: {', '.join(bad)}")


def _job_verify_dual(cfg: ExperimentConfig, job: JobSpec, out: Path, seed: int) -> None:
    rho = _density_arg(cfg, job, "rho")
    nu = _density_arg(cfg, job, "nu")
    grid = _grid_arg(cfg, job, "grid")
    if grid is None:
        grid = _default_verify_grid(rho.dim)
    solve_grid = _grid_arg(cfg, job, "solve_grid")
    tol = float(job.options.get("tol", 1e-6))
    richardson = bool(job.options.get("richardson", True))

    sol = _solve_oracle(rho, nu, solve_grid)
    rep = dual_identity_residual(sol, rho, nu, grid, tol=tol, richardson=richardson)
    write_csv(out / "residuals.csv", RESIDUAL_COLUMNS, residual_rows(rep))
    write_json(out / "summary.json", {
        "seed": seed,
        "checks": {rep.identity_name: rep.passed},
        "tolerances": {rep.identity_name: rep.tolerance_used},
    })
    if not rep.passed:
        raise JobFailed(f"identity residual above tolerance: {rep.identity_name}")


def _job_verify_bound(cfg: ExperimentConfig, job: JobSpec, out: Path, seed: int) -> None:
    rho = _density_arg(cfg, job, "rho")
    nu = _density_arg(cfg, job, "nu")
    c = float(job.options.get("c", 0.9))
    grid = _grid_arg(cfg, job, "grid")
    if grid is None:
        grid = default_inequality_grid(rho.dim)
    target_grid = _grid_arg(cfg, job, "target_grid")

    sol = _solve_oracle(rho, nu)
    try:
        rep = regularity_bound_check(rho, nu, sol, c, grid, target_grid=target_grid)
    except ConvexityNotCertified as exc:
        # refusal is not failure: record why, then let the runner mark it
        write_json(out / "summary.json", {
            "seed": seed, "c": c, "status": "refused", "reason": str(exc)})
        raise
    write_csv(out / "residuals.csv", RESIDUAL_COLUMNS, residual_rows(rep))
    write_json(out / "summary.json", {
        "seed": seed,
        "c": c,
        "status": "ok",
        "checks": {rep.identity_name: rep.passed},
        "moments": {k: rep.metadata[k] for k in
                    ("E_rho_grad_psi_sq", "E_nu_grad_g_sq",
                     "E_rho_grad_f_sq", "E_nu_hess_phi_sq")},
        "lhs": rep.norms["lhs"],
        "rhs": rep.norms["rhs"],
        "slack": rep.norms["slack"],
    })
    if not rep.passed:
        raise JobFailed("regularity bound violated")


def _monotone(seq: list[float]) -> bool:
    return all(b <= a for a, b in zip(seq, seq[1:]))


def _job_cascade(cfg: ExperimentConfig, job: JobSpec, out: Path, seed: int) -> None:
    rho = _density_arg(cfg, job, "rho")
    nu = _density_arg(cfg, job, "nu")
    solver = job.options.get("solver", "oracle")
    grid = _grid_arg(cfg, job, "grid")
    target_grid = _grid_arg(cfg, job, "target_grid")
    stride = int(job.options.get("entropic_stride", 8))
    levels_opt = job.options.get("levels")
    schedule = job.options.get("schedule")

    if schedule is not None:
        stages, report = cascade_run(
            rho, nu, schedule, solver=solver, grid=grid, target_grid=target_grid,
            entropic_stride=stride)
        write_csv(out / "stages.csv", CASCADE_COLUMNS, cascade_stage_rows(stages))
        payload = dict(report)
        payload["seed"] = seed
        payload["mode"] = "schedule"
        payload["stage_status"] = [s.status for s in stages]
        write_json(out / "report.json", payload)
        if report["n_failed"]:
            raise JobFailed(f"{report['n_failed']} cascade stage(s) failed: "
                            f"{'; '.join(report['failures'])}")
        return

    levels = (DEFAULT_SCHEDULE_LEVELS if levels_opt in (None, "default")
              else list(levels_opt))
    per_level, reports = refinement_sweep(
        rho, nu, levels=levels, solver=solver, grid=grid,
        target_grid=target_grid, entropic_stride=stride)
    write_csv(out / "levels.csv", CASCADE_COLUMNS, cascade_level_rows(per_level))
    monotone = {col: _monotone([m[col] for m in per_level])
                for col in CASCADE_REQUIRED_MONOTONE}
    write_json(out / "report.json", {
        "seed": seed,
        "mode": "levels",
        "n_levels": len(per_level),
        "monotone": monotone,
        "final_phi_gap": per_level[-1]["phi_gap"],
        "proxy_sup": max(m["L_psi_proxy"] for m in per_level),
        "uniform_bound_M": max(r["uniform_bound_M"] for r in reports),
        "proxy_within_M": all(r["proxy_within_M"] for r in reports),
        "levels": per_level,
    })
    if not all(monotone.values()):
        bad = [k for k, v in monotone.items() if not v]
        raise JobFailed(f"gap sequence not monotone: {', '.join(bad)}")


def _job_inequalities(cfg: ExperimentConfig, job: JobSpec, out: Path, seed: int) -> None:
    listed = job.options.get("densities", "catalog")
    if listed == "catalog":
        named = catalog_1d()
    else:
        named = [(name, build_density(cfg.densities[name])) for name in listed]
    checks = job.options.get("checks", ["talagrand", "lsi", "poincare"])
    do_chain = bool(job.options.get("chain", True))
    method = job.options.get("method", "oracle")
    tol = float(job.options.get("tol", 1e-9))

    rows: list[tuple] = []
    c_estimates: dict[str, float] = {}
    failing: list[str] = []

    def add_report(rep, case: str) -> None:
        rows.append((rep.name, rep.lhs, rep.rhs, rep.slack, rep.passed,
                     f"{case}; {rep.witnesses}"))
        if not rep.passed:
            failing.append(f"{rep.name}[{case}]")

    for name, density in named:
        if "talagrand" in checks:
            add_report(talagrand_check(density, method=method, tol=tol), name)
        if "lsi" in checks:
            add_report(lsi_check(density, tol=tol), name)
        if "poincare" in checks:
            c_est, rep = poincare_constant(density)
            c_estimates[name] = c_est
            add_report(rep, name)
    chain_results = {}
    if do_chain:
        for (name_a, da), (name_b, db) in zip(named, named[1:]):
            res = chain_check(da, db, method=method, tol=tol)
            case = f"{name_a}->{name_b}"
            rows.append(("chain-left", res["d2"], res["four_H"],
                         res["four_H"] - res["d2"], res["left_pass"], case))
            rows.append(("chain-right", res["four_H"], res["two_I"],
                         res["two_I"] - res["four_H"], res["right_pass"], case))
            chain_results[case] = res
            if not res["pass"]:
                failing.append(f"chain[{case}]")

    write_csv(out / "inequalities.csv", INEQUALITY_COLUMNS, rows)
    write_json(out / "summary.json", {
        "seed": seed,
        "n_rows": len(rows),
        "all_pass": not failing,
        "poincare_c_est": c_estimates,
        "chain": chain_results,
        "densities": [name for name, _ in named],
    })
    if failing:
        raise JobFailed(f"inequality rows failed: {', '.join(failing)}")


def _job_oracle_compare(cfg: ExperimentConfig, job: JobSpec, out: Path, seed: int) -> None:
    rho = _density_arg(cfg, job, "rho")
    nu = _density_arg(cfg, job, "nu")
    methods = job.options.get("methods")
    table = oracle_compare(rho, nu, methods=methods)
    # runtimes stay out of the CSV so its bytes depend only on the data
    write_csv(out / "compare.csv",
              ("method", "cost", "phi_gap_vs_first"),
              [(r["method"], r["cost"], r["phi_gap_vs_first"])
               for r in table["rows"]])
    write_json(out / "summary.json", {
        "seed": seed,
        "rows": table["rows"],
        "methods": table["methods"],
    })


_DISPATCH = {
    "solve": _job_solve,
    "verify-ma": _job_verify_ma,
    "verify-dual": _job_verify_dual,
    "verify-bound": _job_verify_bound,
    "cascade": _job_cascade,
    "inequalities": _job_inequalities,
    "oracle-compare": _job_oracle_compare,
}


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _inventory(job_dir: Path, root: Path) -> list[dict]:
    return [
        {"path": p.relative_to(root).as_posix(), "sha256": sha256_file(p)}
        for p in sorted(job_dir.rglob("*")) if p.is_file()
    ]


def run_config(cfg: ExperimentConfig,
               out_dir=None,
               seed: int | None = None,
               jobs_parallel: int = 1) -> tuple[RunManifest, int]:
    """Execute every configured job in order; write the manifest last.

    Returns (manifest, exit_code): 0 when no job failed (refusals count as
    handled), 1 when any job failed.  Config errors raise before anything
    is written and map to exit code 2 at the CLI boundary.
    """
    seed = cfg.seed if seed is None else int(seed)
    root = Path(out_dir) if out_dir is not None else Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)

    manifest = RunManifest(
        config_hash=cfg.content_hash(),
        version=__version__,
        seed=seed,
        output_dir=str(root),
        started_at=_utc_now(),
        config_echo=cfg.echo(),
    )
    records = [JobRecord(name=j.name, kind=j.kind) for j in cfg.jobs]
    manifest.jobs = records
    t_run = time.perf_counter()

    def execute(index: int) -> None:
        job = cfg.jobs[index]
        record = records[index]
        job_dir = root / job.name
        job_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        try:
            _DISPATCH[job.kind](cfg, job, job_dir, seed)
            record.status = "ok"
        except ConvexityNotCertified as exc:
            record.status = "refused"
            record.error = str(exc)
        except Exception as exc:  # noqa: BLE001  (isolation per job is the contract)
            record.status = "failed"
            record.error = f"{type(exc).__name__}: {exc}"
        record.wall_time_s = time.perf_counter() - t0
        record.files = _inventory(job_dir, root)

    indices = range(len(cfg.jobs))
    if jobs_parallel > 1 and len(cfg.jobs) > 1:
        with ThreadPoolExecutor(max_workers=jobs_parallel) as pool:
            list(pool.map(execute, indices))
    else:
        for i in indices:
            execute(i)

    manifest.finished_at = _utc_now()
    manifest.wall_time_s = time.perf_counter() - t_run
    write_json(root / MANIFEST_NAME, manifest.to_dict())
    exit_code = 1 if any(r.status == "failed" for r in records) else 0
    return manifest, exit_code
