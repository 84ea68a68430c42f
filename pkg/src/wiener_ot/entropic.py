"""Entropic regularization (Sinkhorn) on discretized measures.

The solver works entirely in the log domain on the cost ½|x−y|², so the
regularization can drop to 1e−3 on costs of order 10 without overflow.
Dual updates are plain vectorized log-sum-exp reductions with a fixed
order, which makes repeated runs bit-identical.

Unit conventions: Sinkhorn internals (cost matrix, primal/dual values,
state diagnostics) use ½|x−y|², matching the Kantorovich inequality
φ(x) + ψ(y) + ½|x−y|² ≥ 0 through φ = −u, ψ = −v.  The extracted
:class:`~wiener_ot.oracles.TransportSolution` reports ``cost`` as the
squared distance Σπ|x−y|² — twice the internal value — so costs compare
directly across solver backends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .densities import PotentialDensity
from .errors import (
    AllZeroMass,
    DimensionMismatch,
    InsufficientPoints,
    NotNormalized,
    UnusableState,
)
from .grids import QuadratureGrid
from .oracles import TransportSolution

__all__ = [
    "DiscreteMeasure",
    "SinkhornState",
    "default_epsilon_schedule",
    "discretize",
    "duality_gap",
    "dual_value",
    "epsilon_extrapolate",
    "extract_potentials",
    "merge_duplicates",
    "primal_cost",
    "sinkhorn",
    "sinkhorn_schedule",
    "state_diagnostics_row",
]

#: Σ masses must hit 1 within this
MASS_TOL = 1e-12
#: extraction refuses above this marginal violation
USABILITY_TOL = 1e-3


@dataclass(eq=False)
class DiscreteMeasure:
    """Finitely supported measure: locations and masses summing to 1."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if self.points.shape[0] != self.masses.shape[0]:
            raise DimensionMismatch(
                f"{self.points.shape[0]} points vs {self.masses.shape[0]} masses"
            )
        if np.any(self.masses < 0):
            raise ValueError("negative mass")
        total = float(np.sum(self.masses))
        if abs(total - 1.0) > MASS_TOL:
            raise NotNormalized(f"masses sum to {total}, not 1 ± {MASS_TOL}")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def merge_duplicates(m: DiscreteMeasure) -> DiscreteMeasure:
    """Sum masses over duplicate support points (sorted, deterministic)."""
    uniq, inverse = np.unique(m.points, axis=0, return_inverse=True)
    if uniq.shape[0] == m.points.shape[0]:
        order = np.lexsort(m.points.T[::-1])
        return DiscreteMeasure(points=m.points[order], masses=m.masses[order])
    masses = np.zeros(uniq.shape[0])
    np.add.at(masses, inverse, m.masses)
    return DiscreteMeasure(points=uniq, masses=masses)


def discretize(density: PotentialDensity, grid: QuadratureGrid) -> DiscreteMeasure:
    """Masses ∝ wᵢ·e^{−f(xᵢ)}, renormalized to sum 1."""
    f = density.evaluate(grid.nodes, 0)
    with np.errstate(divide="ignore"):
        logw = np.log(grid.weights)
    logm = logw - f
    finite = np.isfinite(logm)
    if not finite.any():
        raise AllZeroMass("density carries no mass on this grid")
    peak = float(np.max(logm[finite]))
    masses = np.where(finite, np.exp(np.where(finite, logm, peak) - peak), 0.0)
    total = float(np.sum(masses))
    if total <= 0:
        raise AllZeroMass("density carries no mass on this grid")
    return DiscreteMeasure(points=grid.nodes.copy(), masses=masses / total)


@dataclass(eq=False)
class SinkhornState:
    """Log-domain dual variables plus convergence diagnostics for one ε."""

    dual_u: np.ndarray
    dual_v: np.ndarray
    epsilon: float
    iterations: int
    marginal_err: float
    converged: bool
    checkpoints: list = field(default_factory=list)
    n_mu: int = 0
    n_nu: int = 0


def _cost_matrix(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    diff = xs[:, None, :] - ys[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", diff, diff)


def _log_coupling(u, v, C, log_a, log_b, eps):
    return (log_a[:, None] + log_b[None, :]
            + (u[:, None] + v[None, :] - C) / eps)


def _marginal_err(u, v, C, log_a, log_b, eps) -> float:
    lp = _log_coupling(u, v, C, log_a, log_b, eps)
    rows = np.exp(logsumexp(lp, axis=1))
    cols = np.exp(logsumexp(lp, axis=0))
    return float(max(np.max(np.abs(rows - np.exp(log_a))),
                     np.max(np.abs(cols - np.exp(log_b)))))


def sinkhorn(mu: DiscreteMeasure, nu: DiscreteMeasure, epsilon: float,
             tol: float = 1e-9, max_iter: int = 20000,
             warm_start: tuple[np.ndarray, np.ndarray] | None = None,
             check_every: int = 10) -> SinkhornState:
    """Alternating log-domain updates until the worst marginal violation
    drops below ``tol``.  Never raises on slow convergence: the returned
    state carries ``converged=False`` instead.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if mu.dim != nu.dim:
        raise DimensionMismatch(f"dims {mu.dim} vs {nu.dim}")
    mu = merge_duplicates(mu)
    nu = merge_duplicates(nu)
    keep_a = mu.masses > 0
    keep_b = nu.masses > 0
    xs, a = mu.points[keep_a], mu.masses[keep_a]
    ys, b = nu.points[keep_b], nu.masses[keep_b]
    C = _cost_matrix(xs, ys)
    log_a, log_b = np.log(a), np.log(b)
    if warm_start is not None:
        u = np.asarray(warm_start[0], dtype=float).copy()
        v = np.asarray(warm_start[1], dtype=float).copy()
    else:
        u = np.zeros(a.shape[0])
        v = np.zeros(b.shape[0])

    err = math.inf
    checkpoints = []
    it = 0
    while it < max_iter:
        u = -epsilon * logsumexp((v[None, :] - C) / epsilon + log_b[None, :], axis=1)
        v = -epsilon * logsumexp((u[:, None] - C) / epsilon + log_a[:, None], axis=0)
        it += 1
        if it % check_every == 0 or it == max_iter:
            err = _marginal_err(u, v, C, log_a, log_b, epsilon)
            checkpoints.append((it, err))
            if err < tol:
                break
    if err is math.inf:
        err = _marginal_err(u, v, C, log_a, log_b, epsilon)
        checkpoints.append((it, err))

    full_u = np.full(mu.n_points, np.nan)
    full_v = np.full(nu.n_points, np.nan)
    full_u[keep_a] = u
    full_v[keep_b] = v
    return SinkhornState(
        dual_u=full_u, dual_v=full_v, epsilon=float(epsilon), iterations=it,
        marginal_err=float(err), converged=bool(err < tol),
        checkpoints=checkpoints, n_mu=mu.n_points, n_nu=nu.n_points,
    )


def default_epsilon_schedule(mu: DiscreteMeasure, nu: DiscreteMeasure,
                             n_levels: int = 6) -> list[float]:
    """Geometric {1, ½, ¼, …}·0.1·median(cost matrix)."""
    mu = merge_duplicates(mu)
    nu = merge_duplicates(nu)
    C = _cost_matrix(mu.points, nu.points)
    base = 0.1 * float(np.median(C))
    if base <= 0:
        base = 0.1
    return [base * 0.5**k for k in range(n_levels)]


def sinkhorn_schedule(mu: DiscreteMeasure, nu: DiscreteMeasure,
                      epsilons: list[float] | None = None,
                      n_levels: int = 6, tol: float = 1e-9,
                      max_iter: int = 20000) -> list[SinkhornState]:
    """Run the ε schedule with warm-started duals; one state per level."""
    if epsilons is None:
        epsilons = default_epsilon_schedule(mu, nu, n_levels)
    states = []
    warm = None
    for eps in epsilons:
        state = sinkhorn(mu, nu, eps, tol=tol, max_iter=max_iter, warm_start=warm)
        states.append(state)
        warm = (state.dual_u, state.dual_v)
    return states


def _solver_arrays(state: SinkhornState, mu: DiscreteMeasure, nu: DiscreteMeasure):
    mu = merge_duplicates(mu)
    nu = merge_duplicates(nu)
    if mu.n_points != state.n_mu or nu.n_points != state.n_nu:
        raise DimensionMismatch(
            "state was produced from measures of different support size"
        )
    C = _cost_matrix(mu.points, nu.points)
    with np.errstate(divide="ignore"):
        log_a = np.log(mu.masses)
        log_b = np.log(nu.masses)
    return mu, nu, C, log_a, log_b


def primal_cost(state: SinkhornState, mu: DiscreteMeasure,
                nu: DiscreteMeasure) -> float:
    """Σπ·½|x−y|² for the current coupling (½-convention)."""
    mu, nu, C, log_a, log_b = _solver_arrays(state, mu, nu)
    lp = _log_coupling(state.dual_u, state.dual_v, C, log_a, log_b, state.epsilon)
    lp = np.where(np.isfinite(lp), lp, -np.inf)
    return float(np.sum(np.exp(lp) * C))


def dual_value(state: SinkhornState, mu: DiscreteMeasure,
               nu: DiscreteMeasure) -> float:
    """⟨u,a⟩ + ⟨v,b⟩ − ε(Σπ − 1) for the KL-regularized dual."""
    mu, nu, C, log_a, log_b = _solver_arrays(state, mu, nu)
    u = np.where(np.isfinite(state.dual_u), state.dual_u, 0.0)
    v = np.where(np.isfinite(state.dual_v), state.dual_v, 0.0)
    lp = _log_coupling(u, v, C, log_a, log_b, state.epsilon)
    lp = np.where(np.isfinite(lp), lp, -np.inf)
    mass = float(np.sum(np.exp(lp)))
    return float(u @ mu.masses + v @ nu.masses - state.epsilon * (mass - 1.0))


def duality_gap(state: SinkhornState, mu: DiscreteMeasure,
                nu: DiscreteMeasure) -> float:
    """Primal entropic objective minus dual value (≥ 0 at optimality).

    primal = Σπ·C + ε·KL(π | a⊗b) = Σπ·C + Σπ(u+v−C) computed in the
    log domain; the difference collapses to the marginal defects paired
    with the duals plus ε(Σπ − 1).
    """
    mu, nu, C, log_a, log_b = _solver_arrays(state, mu, nu)
    u = np.where(np.isfinite(state.dual_u), state.dual_u, 0.0)
    v = np.where(np.isfinite(state.dual_v), state.dual_v, 0.0)
    lp = _log_coupling(u, v, C, log_a, log_b, state.epsilon)
    lp = np.where(np.isfinite(lp), lp, -np.inf)
    pi = np.exp(lp)
    rows = pi.sum(axis=1)
    cols = pi.sum(axis=0)
    return float(u @ (rows - mu.masses) + v @ (cols - nu.masses)
                 + state.epsilon * (pi.sum() - 1.0))


def state_diagnostics_row(state: SinkhornState, mu: DiscreteMeasure,
                          nu: DiscreteMeasure) -> dict:
    """CSV-log row: (epsilon, iterations, marginal_err, cost)."""
    return {
        "epsilon": state.epsilon,
        "iterations": state.iterations,
        "marginal_err": state.marginal_err,
        "cost": primal_cost(state, mu, nu),
    }


def _nearest_lookup(points: np.ndarray, values: np.ndarray):
    tree = cKDTree(points)
    dim = points.shape[1]

    def lookup(q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.ndim == 0:
            q = q.reshape(1, 1)
        elif q.ndim == 1:
            q = q.reshape(-1, 1) if dim == 1 else q.reshape(1, -1)
        _, idx = tree.query(q)
        return values[idx]

    return lookup


def extract_potentials(state: SinkhornState, mu: DiscreteMeasure,
                       nu: DiscreteMeasure,
                       grid: QuadratureGrid | None = None,
                       target_grid: QuadratureGrid | None = None,
                       usability_tol: float = USABILITY_TOL) -> TransportSolution:
    """Kantorovich potentials φ = −u, ψ = −v and the barycentric map.

    The sign flip makes φ(x) + ψ(y) + ½|x−y|² ≥ 0 hold (up to ε-slack);
    φ is recentered to E_ρ[φ] = 0 with the opposite shift on ψ.  T and S
    are barycenters of the conditional couplings; all four fields look up
    nearest support points, so they are exact on the discretization nodes.
    """
    if not state.converged and state.marginal_err > usability_tol:
        raise UnusableState(
            f"marginal violation {state.marginal_err:.3e} above usability "
            f"threshold {usability_tol:g}"
        )
    mu, nu, C, log_a, log_b = _solver_arrays(state, mu, nu)
    u = np.where(np.isfinite(state.dual_u), state.dual_u, 0.0)
    v = np.where(np.isfinite(state.dual_v), state.dual_v, 0.0)
    shift = float(mu.masses @ u)
    phi_vals = -(u - shift)
    psi_vals = -(v + shift)

    lp = _log_coupling(u, v, C, log_a, log_b, state.epsilon)
    lp = np.where(np.isfinite(lp), lp, -np.inf)
    row_norm = lp - logsumexp(lp, axis=1, keepdims=True)
    col_norm = lp - logsumexp(lp, axis=0, keepdims=True)
    T_points = np.exp(row_norm) @ nu.points
    S_points = np.exp(col_norm).T @ mu.points
    cost_half = float(np.sum(np.exp(lp) * C))

    return TransportSolution(
        dim=mu.dim,
        phi=_nearest_lookup(mu.points, phi_vals),
        psi=_nearest_lookup(nu.points, psi_vals),
        T_map=_nearest_lookup(mu.points, T_points),
        S_map=_nearest_lookup(nu.points, S_points),
        cost=2.0 * cost_half,
        solver_tag="sinkhorn-entropic",
        grid=grid,
        target_grid=target_grid if target_grid is not None else grid,
        derivatives=None,
        meta={
            "epsilon": state.epsilon,
            "iterations": state.iterations,
            "marginal_err": state.marginal_err,
            "cost_half_convention": cost_half,
            "duality_gap": duality_gap(state, mu, nu),
            "phi_values": phi_vals,
            "psi_values": psi_vals,
            "T_points": T_points,
            "S_points": S_points,
            "support_mu": mu.points,
            "support_nu": nu.points,
            "masses_mu": mu.masses,
            "masses_nu": nu.masses,
        },
    )


def epsilon_extrapolate(costs: list[tuple[float, float]]) -> tuple[float, float]:
    """Linear-in-ε extrapolation of entropic cost to ε = 0.

    Returns (intercept, rms fit residual).  Requires at least three
    distinct decreasing ε values.
    """
    if len(costs) < 3:
        raise InsufficientPoints(f"{len(costs)} points; need ≥ 3")
    eps = np.array([float(e) for e, _ in costs])
    vals = np.array([float(c) for _, c in costs])
    if len(np.unique(eps)) < 3:
        raise InsufficientPoints("need ≥ 3 distinct regularization values")
    if np.any(np.diff(eps) >= 0):
        order = np.argsort(eps)[::-1]
        eps, vals = eps[order], vals[order]
        if np.any(np.diff(eps) >= 0):
            raise InsufficientPoints("ε values must be strictly decreasing")
    slope, intercept = np.polyfit(eps, vals, 1)
    fitted = slope * eps + intercept
    residual = float(np.sqrt(np.mean((vals - fitted) ** 2)))
    return float(intercept), residual
