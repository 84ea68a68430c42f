"""Finite-dimensional Malliavin-style operators and identity checkers.

The reference measure is the standard Gaussian β on ℝⁿ.  The operators are
the gradient (finite differences on uniform meshes), the divergence
δξ = ⟨x, ξ⟩ − div ξ and its weighted version δ_ρξ = δξ + ⟨∇f, ξ⟩ for
ρ = e⁻ᶠdβ, the Ornstein-Uhlenbeck semigroup by Mehler quadrature, its
generator ℒ = x·∇ − Δ, the Carleman-Fredholm determinant
det₂(I+M) = det(I+M)e^{−tr M}, and the Gaussian Jacobian
Λ = det₂(I+∇²φ)·exp(−ℒφ − ½|∇φ|²).

Identity checkers sample a transport solution's potentials on a mesh,
differentiate by finite differences only, and report weighted residual
norms over interior nodes.  A Richardson pass at half the spacing
estimates the discretization floor so that pass tolerances never punish
the stencil for being a stencil.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .densities import PotentialDensity
from .errors import (
    DimensionMismatch,
    ExtrapolationOutsideMesh,
    GridNotUniform,
    NonInvertibleJacobian,
)
from .grids import GAUSS_HERMITE, TRUNCATED_UNIFORM, QuadratureGrid, build_grid

__all__ = [
    "FieldOnGrid",
    "ResidualReport",
    "ScalarTestField",
    "VectorTestField",
    "adjointness_check",
    "carleman_fredholm_det2",
    "divergence",
    "dual_identity_residual",
    "fd_derivatives",
    "gaussian_jacobian",
    "interior_mask",
    "inverse_relation_residual",
    "matrix_divergence",
    "monge_ampere_residual",
    "ou_generator",
    "ou_semigroup",
    "ou_semigroup_callable",
    "second_moment_identity_check",
    "trace_positivity_check",
    "test_field_dictionary",
]

_KIND_NDIM = {"scalar": 1, "vector": 2, "matrix": 3, "tensor3": 4}


@dataclass(eq=False)
class FieldOnGrid:
    """Node-wise values of a scalar, vector, matrix, or 3-tensor field."""

    grid: QuadratureGrid
    values: np.ndarray
    kind: str
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in _KIND_NDIM:
            raise ValueError(f"unknown field kind {self.kind!r}")
        want = _KIND_NDIM[self.kind]
        n, d = self.grid.n_nodes, self.grid.dim
        if self.values.ndim != want or self.values.shape[0] != n \
                or self.values.shape[1:] != (d,) * (want - 1):
            raise DimensionMismatch(
                f"{self.kind} field values {self.values.shape} do not match "
                f"grid ({n} nodes, dim {d})"
            )


@dataclass(eq=False)
class ResidualReport:
    """Outcome of one identity check.

    ``norms`` maps {"L1_nu", "L2_rho", "sup_grid"} to reals; the designated
    norm (named in metadata) is the one compared against
    ``tolerance_used``.  ``passed`` serializes under the key "pass".
    """

    identity_name: str
    norms: dict
    tolerance_used: float
    passed: bool
    metadata: dict = dc_field(default_factory=dict)


# --- finite differences ---


def _require_uniform(grid: QuadratureGrid) -> float:
    if grid.axes is None or grid.scheme == GAUSS_HERMITE:
        raise GridNotUniform(f"finite differences need a uniform mesh, got {grid.scheme}")
    return grid.spacing


def _mesh_gradient(grid: QuadratureGrid, values: np.ndarray) -> np.ndarray:
    """(N, d) gradient: central interior, second-order one-sided edges."""
    h = _require_uniform(grid)
    mesh = grid.reshape(values)
    cols = [np.gradient(mesh, h, axis=i, edge_order=2).reshape(-1)
            for i in range(grid.dim)]
    return np.stack(cols, axis=-1)


def fd_derivatives(field: FieldOnGrid, order: int) -> FieldOnGrid:
    """∇, ∇², or ∇³ of a scalar field on its uniform mesh, O(h²).

    Second derivatives are repeated first differences (quadratics stay
    exact at interior nodes); the third-order tensor is symmetrized over
    index permutations, which matters downstream: it makes sums of squares
    built from it true sums of squares.
    """
    if field.kind != "scalar":
        raise DimensionMismatch("fd_derivatives expects a scalar field")
    if order not in (1, 2, 3):
        raise ValueError(f"order must be 1, 2, or 3, got {order}")
    grid = field.grid
    d = grid.dim
    grad = _mesh_gradient(grid, field.values)
    if order == 1:
        return FieldOnGrid(grid, grad, "vector")
    hess = np.empty((grid.n_nodes, d, d))
    for j in range(d):
        hess[:, j, :] = _mesh_gradient(grid, grad[:, j])
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    if order == 2:
        return FieldOnGrid(grid, hess, "matrix")
    third = np.empty((grid.n_nodes, d, d, d))
    for j in range(d):
        for k in range(d):
            third[:, j, k, :] = _mesh_gradient(grid, hess[:, j, k])
    sym = np.zeros_like(third)
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        sym += np.transpose(third, (0, 1 + perm[0], 1 + perm[1], 1 + perm[2]))
    return FieldOnGrid(grid, sym / 6.0, "tensor3")


def interior_mask(grid: QuadratureGrid, shells: int = 2) -> np.ndarray:
    """Boolean node mask excluding ``shells`` layers at every mesh face."""
    if grid.axes is None:
        raise GridNotUniform("interior masking needs a tensor mesh")
    shape = grid.mesh_shape
    mask = np.ones(shape, dtype=bool)
    for i, n in enumerate(shape):
        if 2 * shells >= n:
            raise ValueError(f"mesh axis {i} too short for {shells} boundary shells")
        sl = [slice(None)] * len(shape)
        sl[i] = slice(0, shells)
        mask[tuple(sl)] = False
        sl[i] = slice(n - shells, n)
        mask[tuple(sl)] = False
    return mask.reshape(-1)


# --- Ornstein-Uhlenbeck semigroup and generator ---

_MEHLER_RES = {1: 64, 2: 24, 3: 12, 4: 8}


def ou_semigroup_callable(f: Callable[[np.ndarray], np.ndarray], t: float,
                          dim: int, quad_resolution: int | None = None):
    """P_t f as a closure: (P_t f)(x) = ∫ f(e^{−t}x + √(1−e^{−2t}) y) dβ(y)."""
    if t < 0:
        raise ValueError(f"semigroup time must be ≥ 0, got {t}")
    if t == 0.0:
        return f
    res = quad_resolution or _MEHLER_RES.get(dim, 8)
    gh = build_grid(GAUSS_HERMITE, dim, res)
    decay = math.exp(-t)
    spread = math.sqrt(1.0 - decay * decay)

    def pt(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
        shifted = decay * x[:, None, :] + spread * gh.nodes[None, :, :]
        vals = f(shifted.reshape(-1, dim)).reshape(x.shape[0], gh.n_nodes)
        return vals @ gh.weights

    return pt


def ou_semigroup(f: Callable[[np.ndarray], np.ndarray], t: float,
                 grid: QuadratureGrid,
                 quad_resolution: int | None = None) -> FieldOnGrid:
    """Mehler average of a callable field, tabulated on ``grid``."""
    pt = ou_semigroup_callable(f, t, grid.dim, quad_resolution)
    return FieldOnGrid(grid, np.asarray(pt(grid.nodes), dtype=float), "scalar")


def ou_generator(field: FieldOnGrid,
                 gradient: FieldOnGrid | None = None,
                 hessian: FieldOnGrid | None = None) -> FieldOnGrid:
    """ℒf = ⟨x, ∇f⟩ − trace ∇²f node-wise; −ℒ generates P_t.

    Derivatives default to finite differences; pass analytic ``gradient``
    and ``hessian`` fields to bypass the stencil error entirely.
    """
    grad = gradient.values if gradient is not None else fd_derivatives(field, 1).values
    hess = hessian.values if hessian is not None else fd_derivatives(field, 2).values
    x = field.grid.nodes
    vals = np.einsum("ni,ni->n", x, grad) - np.trace(hess, axis1=1, axis2=2)
    return FieldOnGrid(field.grid, vals, "scalar")


# --- divergences ---


def divergence(xi: FieldOnGrid, rho: PotentialDensity | None = None,
               jacobian: FieldOnGrid | None = None) -> FieldOnGrid:
    """δξ = ⟨x, ξ⟩ − div ξ, plus ⟨∇f, ξ⟩ when a density ρ = e⁻ᶠdβ is given.

    ``jacobian`` (values J[n,i,j] = ∂ξᵢ/∂xⱼ) bypasses finite differences.
    """
    if xi.kind != "vector":
        raise DimensionMismatch("divergence expects a vector field")
    grid = xi.grid
    if jacobian is not None:
        div = np.trace(jacobian.values, axis1=1, axis2=2)
    else:
        div = np.zeros(grid.n_nodes)
        for i in range(grid.dim):
            div += _mesh_gradient(grid, xi.values[:, i])[:, i]
    vals = np.einsum("ni,ni->n", grid.nodes, xi.values) - div
    if rho is not None:
        _, df = rho.evaluate(grid.nodes, 1)
        vals = vals + np.einsum("ni,ni->n", df, xi.values)
    return FieldOnGrid(grid, vals, "scalar")


def matrix_divergence(M: FieldOnGrid, rho: PotentialDensity | None = None) -> FieldOnGrid:
    """Column-wise weighted divergence: (δ_ρM)_j = δ_ρ(M·e_j)."""
    if M.kind != "matrix":
        raise DimensionMismatch("matrix_divergence expects a matrix field")
    d = M.grid.dim
    cols = [divergence(FieldOnGrid(M.grid, M.values[:, :, j], "vector"), rho).values
            for j in range(d)]
    return FieldOnGrid(M.grid, np.stack(cols, axis=-1), "vector")


# --- determinants and the Gaussian Jacobian ---


def carleman_fredholm_det2(M: np.ndarray) -> float:
    """det₂(I+M) = det(I+M)·e^{−tr M}; 0 when I+M is singular."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got {M.shape}")
    sign, logabs = np.linalg.slogdet(np.eye(M.shape[0]) + M)
    if sign == 0.0:
        return 0.0
    return float(sign * np.exp(logabs - np.trace(M)))


def _log_det2_batch(hess: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(sign, log|det₂(I+H)|) per node for a stack of matrices."""
    d = hess.shape[-1]
    eye = np.eye(d)
    sign, logabs = np.linalg.slogdet(eye + hess)
    tr = np.trace(hess, axis1=-2, axis2=-1)
    return sign, logabs - tr


def gaussian_jacobian(grad: FieldOnGrid, hess: FieldOnGrid,
                      L: FieldOnGrid) -> FieldOnGrid:
    """Λ = det₂(I+∇²φ)·exp(−ℒφ − ½|∇φ|²), computed in log space.

    Nodes where det(I+∇²φ) ≤ 0 are flagged in ``meta["noninvertible"]``
    rather than raised: residual checkers may legitimately touch them in
    boundary shells.
    """
    sign, log2 = _log_det2_batch(hess.values)
    sq = 0.5 * np.einsum("ni,ni->n", grad.values, grad.values)
    log_lambda = log2 - L.values - sq
    vals = np.where(sign > 0, np.exp(np.where(sign > 0, log_lambda, 0.0)), 0.0)
    bad = sign <= 0
    return FieldOnGrid(grad.grid, vals, "scalar",
                       meta={"noninvertible": bad, "log_values": log_lambda,
                             "signs": sign})


# --- residual helpers ---


def _density_masses(density: PotentialDensity | None, grid: QuadratureGrid) -> np.ndarray:
    if density is None:
        return np.asarray(grid.weights, dtype=float)
    f = density.evaluate(grid.nodes, 0)
    m = np.zeros(grid.n_nodes)
    finite = np.isfinite(f)
    m[finite] = grid.weights[finite] * np.exp(-f[finite])
    return m


def _norms(residual: np.ndarray, grid: QuadratureGrid, mask: np.ndarray,
           l1_density: PotentialDensity | None,
           l2_density: PotentialDensity | None) -> dict:
    r = np.abs(residual[mask])
    m1 = _density_masses(l1_density, grid)[mask]
    m2 = _density_masses(l2_density, grid)[mask]
    z1, z2 = np.sum(m1), np.sum(m2)
    return {
        "L1_nu": float(np.sum(m1 * r) / z1) if z1 > 0 else math.inf,
        "L2_rho": float(math.sqrt(np.sum(m2 * r * r) / z2)) if z2 > 0 else math.inf,
        "sup_grid": float(np.max(r)) if r.size else 0.0,
    }


def _refined(grid: QuadratureGrid) -> QuadratureGrid:
    """Same box, half the spacing (resolution 2n−1): nodes nest exactly."""
    res = 2 * len(grid.axes[0]) - 1
    return build_grid(TRUNCATED_UNIFORM, grid.dim, res,
                      truncation_radius=float(grid.axes[0][-1]))


def _coarse_indices(fine: QuadratureGrid, dim: int) -> np.ndarray:
    """Flat indices of the coarse nodes inside the nested fine mesh."""
    n_fine = len(fine.axes[0])
    idx_1d = np.arange(0, n_fine, 2)
    grids = np.meshgrid(*([idx_1d] * dim), indexing="ij")
    flat = np.zeros_like(grids[0])
    for g in grids:
        flat = flat * n_fine + g
    return flat.reshape(-1)


def _richardson_tolerance(residual_fn, grid: QuadratureGrid, coarse_residual,
                          user_tol: float, mask: np.ndarray) -> tuple[float, float]:
    """Floor = sup over common interior nodes of |r_h − r_{h/2}|."""
    fine = _refined(grid)
    fine_residual = residual_fn(fine)
    take = _coarse_indices(fine, grid.dim)
    diff = np.abs(coarse_residual - fine_residual[take])
    floor = float(np.max(diff[mask])) if np.any(mask) else 0.0
    return max(user_tol, 10.0 * floor), floor


# --- identity checkers ---


def monge_ampere_residual(direction: str, solution, rho: PotentialDensity,
                          nu: PotentialDensity, grid: QuadratureGrid,
                          tol: float = 1e-6,
                          richardson: bool = True) -> ResidualReport:
    """Log-form Monge-Ampère residual, forward or backward.

    forward:  (−f) − [−g∘T + log det₂(I+∇²φ) − ℒφ − ½|∇φ|²] on a ρ-side grid
    backward: (−g) − [−f∘S + log det₂(I+∇²ψ) − ℒψ − ½|∇ψ|²] on a ν-side grid

    with T = id + ∇φ (resp. S = id + ∇ψ) rebuilt from the finite-difference
    gradient, so the check exercises the tabulated potential alone.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    fwd = direction == "forward"
    potential = solution.phi if fwd else solution.psi
    own, other = (rho, nu) if fwd else (nu, rho)

    last_signs: list[np.ndarray] = []

    def residual_on(g: QuadratureGrid) -> np.ndarray:
        values = potential(g.nodes)
        f_field = FieldOnGrid(g, values, "scalar")
        grad = fd_derivatives(f_field, 1)
        hess = fd_derivatives(f_field, 2)
        Lf = ou_generator(f_field, gradient=grad, hessian=hess)
        mapped = g.nodes + grad.values
        f_own = own.evaluate(g.nodes, 0)
        f_other = other.evaluate(mapped, 0)
        sign, log2 = _log_det2_batch(hess.values)
        last_signs.append(sign)
        return (-f_own) - (-f_other + log2 - Lf.values - 0.5 *
                           np.einsum("ni,ni->n", grad.values, grad.values))

    r = residual_on(grid)
    mask = interior_mask(grid)
    n_flat = int(np.sum(last_signs[0][mask] <= 0))

    norms = _norms(r, grid, mask, own, own)
    if richardson:
        tolerance, floor = _richardson_tolerance(residual_on, grid, r, tol, mask)
    else:
        tolerance, floor = tol, 0.0
    return ResidualReport(
        identity_name=f"monge-ampere-{direction}",
        norms=norms,
        tolerance_used=tolerance,
        passed=bool(norms["sup_grid"] <= tolerance and n_flat == 0),
        metadata={
            "designated_norm": "sup_grid",
            "weighting": "nu" if not fwd else "rho",
            "excluded_nodes": int(np.sum(~mask)),
            "noninvertible_nodes": n_flat,
            "richardson_floor": floor,
            "spacing": grid.spacing,
        },
    )


def dual_identity_residual(solution, rho: PotentialDensity, nu: PotentialDensity,
                           grid: QuadratureGrid, tol: float = 1e-6,
                           richardson: bool = True) -> ResidualReport:
    """∇φ + ∇g∘T − ∇f  vs  δ_ρ[(I+∇²φ)⁻¹ − I], L²(ρ) designated.

    The matrix field's divergence is taken column-wise; its entries are
    differentiated by the same stencils as everything else.
    """

    def residual_on(g: QuadratureGrid) -> np.ndarray:
        values = solution.phi(g.nodes)
        f_field = FieldOnGrid(g, values, "scalar")
        grad = fd_derivatives(f_field, 1)
        hess = fd_derivatives(f_field, 2)
        eye = np.eye(g.dim)
        mat = eye + hess.values
        det = np.linalg.det(mat)
        if np.any(det <= 0):
            raise NonInvertibleJacobian(
                f"I+∇²φ singular or negative at {int(np.sum(det <= 0))} nodes"
            )
        K = np.linalg.inv(mat)
        mapped = g.nodes + grad.values
        _, dg = nu.evaluate(mapped, 1)
        _, df = rho.evaluate(g.nodes, 1)
        lhs = grad.values + dg - df
        rhs = matrix_divergence(FieldOnGrid(g, K - eye, "matrix"), rho).values
        return np.sqrt(np.sum((lhs - rhs) ** 2, axis=1))

    r = residual_on(grid)
    mask = interior_mask(grid)
    norms = _norms(r, grid, mask, rho, rho)
    if richardson:
        tolerance, floor = _richardson_tolerance(residual_on, grid, r, tol, mask)
    else:
        tolerance, floor = tol, 0.0
    return ResidualReport(
        identity_name="dual-potential-identity",
        norms=norms,
        tolerance_used=tolerance,
        passed=bool(norms["L2_rho"] <= tolerance),
        metadata={
            "designated_norm": "L2_rho",
            "weighting": "rho",
            "excluded_nodes": int(np.sum(~mask)),
            "richardson_floor": floor,
            "spacing": grid.spacing,
        },
    )


def _psi_hessian_interpolant(solution, grid: QuadratureGrid):
    """FD Hessian of ψ on a ν-side mesh wide enough to hold T(interior)."""
    t_nodes = solution.T_map(grid.nodes)
    h = grid.spacing
    lo = float(np.min(t_nodes)) - 4 * h
    hi = float(np.max(t_nodes)) + 4 * h
    radius = max(abs(lo), abs(hi))
    res = max(len(grid.axes[0]), int(math.ceil(2 * radius / h)) + 1)
    if res % 2 == 0:
        res += 1
    tgrid = build_grid(TRUNCATED_UNIFORM, grid.dim, res, truncation_radius=radius)
    psi_field = FieldOnGrid(tgrid, solution.psi(tgrid.nodes), "scalar")
    hess = fd_derivatives(psi_field, 2)
    d = grid.dim
    axes = tgrid.axes
    interior_lo = axes[0][2]
    interior_hi = axes[0][-3]
    comps = []
    mesh_shape = tgrid.mesh_shape
    for j in range(d):
        for k in range(d):
            comps.append(RegularGridInterpolator(
                axes, hess.values[:, j, k].reshape(mesh_shape),
                method="linear", bounds_error=False, fill_value=np.nan,
            ))

    def hess_at(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        inside = np.all((pts >= interior_lo) & (pts <= interior_hi), axis=1)
        out = np.full((pts.shape[0], d, d), np.nan)
        vals = [c(pts) for c in comps]
        for j in range(d):
            for k in range(d):
                out[:, j, k] = vals[j * d + k]
        return out, inside

    return hess_at


def inverse_relation_residual(solution, grid: QuadratureGrid,
                              tol: float = 1e-6,
                              richardson: bool = True) -> ResidualReport:
    """(I+∇²φ)⁻¹ vs (I+∇²ψ)∘T, Frobenius residual per node.

    ∇²ψ is finite-differenced on its own ν-side mesh and interpolated at
    T(x); nodes mapping outside that mesh are flagged, excluded, counted.
    """
    excluded_extrapolated = 0

    def residual_on(g: QuadratureGrid) -> np.ndarray:
        nonlocal excluded_extrapolated
        values = solution.phi(g.nodes)
        f_field = FieldOnGrid(g, values, "scalar")
        hess = fd_derivatives(f_field, 2)
        eye = np.eye(g.dim)
        mat = eye + hess.values
        det = np.linalg.det(mat)
        if np.any(det <= 0):
            raise NonInvertibleJacobian(
                f"I+∇²φ singular or negative at {int(np.sum(det <= 0))} nodes"
            )
        K = np.linalg.inv(mat)
        hess_at = _psi_hessian_interpolant(solution, g)
        t_nodes = solution.T_map(g.nodes)
        psi_h, inside = hess_at(t_nodes)
        excluded_extrapolated = int(np.sum(~inside))
        rhs = eye + psi_h
        r = np.sqrt(np.sum((K - rhs) ** 2, axis=(1, 2)))
        r[~inside] = 0.0
        return r

    r = residual_on(grid)
    n_extrap = excluded_extrapolated
    mask = interior_mask(grid)
    norms = _norms(r, grid, mask, None, None)
    if richardson:
        tolerance, floor = _richardson_tolerance(residual_on, grid, r, tol, mask)
    else:
        tolerance, floor = tol, 0.0
    report = ResidualReport(
        identity_name="hessian-inverse-relation",
        norms=norms,
        tolerance_used=tolerance,
        passed=bool(norms["sup_grid"] <= tolerance),
        metadata={
            "designated_norm": "sup_grid",
            "weighting": "grid",
            "excluded_nodes": int(np.sum(~mask)),
            "extrapolated_nodes": n_extrap,
            "richardson_floor": floor,
            "spacing": grid.spacing,
        },
    )
    if n_extrap > 0:
        report.metadata["extrapolation_flag"] = ExtrapolationOutsideMesh.__name__
    return report


def trace_positivity_check(solution, directions: Sequence[np.ndarray],
                           grid: QuadratureGrid,
                           tol: float = 1e-8) -> ResidualReport:
    """min over nodes and directions of trace(K∇³φ[Kh]·K∇³φ[Kh]) ≥ −tol.

    With the FD third-derivative tensor symmetrized, the contraction
    C = ∇³φ[Kh] is symmetric, K is SPD on the checked nodes, and
    trace(KCKC) = ‖K^{1/2}CK^{1/2}‖²_F is a sum of squares: the check can
    only fail by genuine non-convexity, not by stencil noise.
    """
    directions = [np.asarray(h, dtype=float).reshape(-1) for h in directions]
    values = solution.phi(grid.nodes)
    f_field = FieldOnGrid(grid, values, "scalar")
    hess = fd_derivatives(f_field, 2)
    third = fd_derivatives(f_field, 3)
    eye = np.eye(grid.dim)
    mat = eye + hess.values
    det = np.linalg.det(mat)
    mask = interior_mask(grid) & (det > 0)
    K = np.linalg.inv(mat[mask])
    T3 = third.values[mask]
    worst = math.inf
    per_direction = []
    for h_arr in directions:
        h_arr = h_arr / np.linalg.norm(h_arr)
        kh = np.einsum("nij,j->ni", K, h_arr)
        C = np.einsum("nijk,nk->nij", T3, kh)
        B = np.einsum("nij,njk->nik", K, C)
        traces = np.einsum("nij,nji->n", B, B)
        m = float(np.min(traces)) if traces.size else 0.0
        per_direction.append([h_arr.tolist(), m])
        worst = min(worst, m)
    if not per_direction:
        worst = 0.0
    violation = max(0.0, -worst)
    return ResidualReport(
        identity_name="third-derivative-trace-positivity",
        norms={"L1_nu": violation, "L2_rho": violation, "sup_grid": violation},
        tolerance_used=tol,
        passed=bool(worst >= -tol),
        metadata={
            "designated_norm": "sup_grid",
            "min_trace": worst,
            "per_direction": per_direction,
            "excluded_nodes": int(np.sum(~mask)),
            "directions": len(directions),
        },
    )


# --- analytic test fields for the adjointness identities ---


@dataclass(eq=False)
class ScalarTestField:
    """Scalar field with exact gradient, for quadrature-only checks."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]


@dataclass(eq=False)
class VectorTestField:
    """Vector field with exact Jacobian J[n,i,j] = ∂ξᵢ/∂xⱼ."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]


def test_field_dictionary(dim: int) -> tuple[list[ScalarTestField], list[VectorTestField]]:
    """Polynomial and damped-exponential fields with exact derivatives."""

    def basis(i):
        e = np.zeros(dim)
        e[i] = 1.0
        return e

    scalars = [
        ScalarTestField("one", lambda x: np.ones(x.shape[0]),
                        lambda x: np.zeros_like(x)),
        ScalarTestField("x1", lambda x: x[:, 0],
                        lambda x: np.tile(basis(0), (x.shape[0], 1))),
        ScalarTestField("norm-sq", lambda x: np.sum(x * x, axis=1),
                        lambda x: 2.0 * x),
        ScalarTestField("cubic", lambda x: x[:, 0] ** 3,
                        lambda x: np.column_stack(
                            [3.0 * x[:, 0] ** 2] + [np.zeros(x.shape[0])] * (dim - 1))),
        ScalarTestField("soft-exp", lambda x: np.exp(0.3 * x[:, 0] - 0.1 * np.sum(x * x, axis=1)),
                        lambda x: np.exp(0.3 * x[:, 0] - 0.1 * np.sum(x * x, axis=1))[:, None]
                        * (0.3 * np.tile(basis(0), (x.shape[0], 1)) - 0.2 * x)),
    ]
    if dim >= 2:
        scalars.append(ScalarTestField(
            "x1x2", lambda x: x[:, 0] * x[:, 1],
            lambda x: np.column_stack(
                [x[:, 1], x[:, 0]] + [np.zeros(x.shape[0])] * (dim - 2)),
        ))

    vectors = [
        VectorTestField("const-e1", lambda x: np.tile(basis(0), (x.shape[0], 1)),
                        lambda x: np.zeros((x.shape[0], dim, dim))),
        VectorTestField("radial", lambda x: x.copy(),
                        lambda x: np.tile(np.eye(dim), (x.shape[0], 1, 1))),
        VectorTestField("x1-e1", lambda x: np.column_stack(
            [x[:, 0]] + [np.zeros(x.shape[0])] * (dim - 1)),
            lambda x: np.tile(np.outer(basis(0), basis(0)), (x.shape[0], 1, 1))),
        VectorTestField("sq-e1", lambda x: np.column_stack(
            [x[:, 0] ** 2] + [np.zeros(x.shape[0])] * (dim - 1)),
            lambda x: np.einsum(
                "n,ij->nij", 2.0 * x[:, 0], np.outer(basis(0), basis(0)))),
    ]
    if dim >= 2:
        def rot(x):
            out = np.zeros_like(x)
            out[:, 0] = -x[:, 1]
            out[:, 1] = x[:, 0]
            return out

        J = np.zeros((dim, dim))
        J[0, 1] = -1.0
        J[1, 0] = 1.0
        vectors.append(VectorTestField(
            "rotation", rot, lambda x: np.tile(J, (x.shape[0], 1, 1))))
    return scalars, vectors


def _delta_rho(xi: VectorTestField, rho: PotentialDensity | None,
               grid: QuadratureGrid) -> np.ndarray:
    x = grid.nodes
    v = xi.value(x)
    J = xi.jacobian(x)
    vals = np.einsum("ni,ni->n", x, v) - np.trace(J, axis1=1, axis2=2)
    if rho is not None:
        _, df = rho.evaluate(x, 1)
        vals = vals + np.einsum("ni,ni->n", df, v)
    return vals


def _expect(rho: PotentialDensity | None, grid: QuadratureGrid,
            values: np.ndarray) -> float:
    m = _density_masses(rho, grid)
    return float(np.sum(m * values))


def adjointness_check(F: ScalarTestField, xi: VectorTestField,
                      rho: PotentialDensity, grid: QuadratureGrid,
                      tol: float = 1e-8) -> ResidualReport:
    """E_ρ⟨∇F, ξ⟩ = E_ρ[F·δ_ρξ], the integration-by-parts duality."""
    lhs = _expect(rho, grid, np.einsum("ni,ni->n", F.grad(grid.nodes),
                                       xi.value(grid.nodes)))
    rhs = _expect(rho, grid, F.value(grid.nodes) * _delta_rho(xi, rho, grid))
    r = abs(lhs - rhs)
    return ResidualReport(
        identity_name="divergence-adjointness",
        norms={"L1_nu": r, "L2_rho": r, "sup_grid": r},
        tolerance_used=tol,
        passed=bool(r <= tol),
        metadata={"designated_norm": "sup_grid", "lhs": lhs, "rhs": rhs,
                  "F": F.name, "xi": xi.name, "excluded_nodes": 0},
    )


def second_moment_identity_check(xi: VectorTestField, rho: PotentialDensity,
                                 grid: QuadratureGrid,
                                 tol: float = 1e-8) -> ResidualReport:
    """E_ρ[(δ_ρξ)²] = E_ρ[⟨(I+∇²f)ξ, ξ⟩ + trace(∇ξ·∇ξ)].

    The Jacobian square is the unsymmetrized trace Σᵢⱼ JᵢⱼJⱼᵢ, and the
    Hessian is that of the measure's own potential f.
    """
    x = grid.nodes
    v = xi.value(x)
    J = xi.jacobian(x)
    lhs = _expect(rho, grid, _delta_rho(xi, rho, grid) ** 2)
    _, _, hf = rho.evaluate(x, 2)
    quad = np.einsum("ni,nij,nj->n", v, np.eye(grid.dim)[None, :, :] + hf, v)
    jj = np.einsum("nij,nji->n", J, J)
    rhs = _expect(rho, grid, quad + jj)
    r = abs(lhs - rhs)
    return ResidualReport(
        identity_name="divergence-second-moment",
        norms={"L1_nu": r, "L2_rho": r, "sup_grid": r},
        tolerance_used=tol,
        passed=bool(r <= tol),
        metadata={"designated_norm": "sup_grid", "lhs": lhs, "rhs": rhs,
                  "xi": xi.name, "excluded_nodes": 0},
    )
