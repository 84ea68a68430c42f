"""Operator calculus: finite differences, OU semigroup, divergences,
Carleman-Fredholm determinants, and the transport identity checkers."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wiener_ot import calculus as C
from wiener_ot.densities import (
    QuadraticPotential,
    gaussian_1d,
    normalize,
    standard_gaussian,
)
from wiener_ot.errors import DimensionMismatch, GridNotUniform, NonInvertibleJacobian
from wiener_ot.grids import GAUSS_HERMITE, TRUNCATED_UNIFORM, build_grid
from wiener_ot.oracles import GaussianPair, solve_1d, solve_gaussian


def ugrid(dim=1, res=201, radius=6.0):
    return build_grid(TRUNCATED_UNIFORM, dim, res, truncation_radius=radius)


def scalar_field(grid, fn):
    return C.FieldOnGrid(grid, fn(grid.nodes), "scalar")


# --- FieldOnGrid / mask plumbing ---


def test_field_shape_validation():
    g = ugrid(res=11)
    with pytest.raises(DimensionMismatch):
        C.FieldOnGrid(g, np.zeros((g.n_nodes, 2)), "scalar")
    with pytest.raises(DimensionMismatch):
        C.FieldOnGrid(g, np.zeros(g.n_nodes), "vector")
    with pytest.raises(ValueError):
        C.FieldOnGrid(g, np.zeros(g.n_nodes), "spinor")


def test_fd_requires_uniform_mesh():
    gh = build_grid(GAUSS_HERMITE, 1, 32)
    field = C.FieldOnGrid(gh, np.zeros(32), "scalar")
    with pytest.raises(GridNotUniform):
        C.fd_derivatives(field, 1)


def test_interior_mask_counts():
    g = ugrid(dim=2, res=11, radius=1.0)
    mask = C.interior_mask(g, shells=2)
    assert mask.sum() == 7 * 7
    assert not mask[0]
    mesh = mask.reshape(11, 11)
    assert mesh[5, 5]
    assert not mesh[1, 5]
    with pytest.raises(ValueError):
        C.interior_mask(ugrid(res=4, radius=1.0), shells=2)


# --- finite differences ---


def test_fd_quadratic_exact_at_interior():
    g = ugrid(res=101, radius=2.0)
    field = scalar_field(g, lambda x: x[:, 0] ** 2)
    grad = C.fd_derivatives(field, 1)
    hess = C.fd_derivatives(field, 2)
    inner = C.interior_mask(g, shells=1)
    assert np.allclose(grad.values[inner, 0], 2.0 * g.nodes[inner, 0], atol=1e-12)
    assert np.allclose(hess.values[inner, 0, 0], 2.0, atol=1e-10)


def test_fd_observed_order_at_least_1_9():
    errs = []
    for res in (151, 301):
        g = ugrid(res=res, radius=3.0)
        field = scalar_field(g, lambda x: np.sin(x[:, 0]))
        grad = C.fd_derivatives(field, 1)
        inner = C.interior_mask(g)
        errs.append(np.max(np.abs(grad.values[inner, 0] - np.cos(g.nodes[inner, 0]))))
    order = math.log2(errs[0] / errs[1])
    assert order >= 1.9


def test_fd_mixed_partials_symmetric():
    g = ugrid(dim=2, res=61, radius=2.0)
    field = scalar_field(g, lambda x: x[:, 0] ** 2 * x[:, 1] + x[:, 1] ** 3)
    hess = C.fd_derivatives(field, 2)
    inner = C.interior_mask(g)
    assert np.allclose(hess.values[:, 0, 1], hess.values[:, 1, 0], atol=1e-12)
    assert np.allclose(hess.values[inner, 0, 1], 2.0 * g.nodes[inner, 0], atol=1e-8)


def test_fd_third_derivative_cubic():
    g = ugrid(res=201, radius=2.0)
    field = scalar_field(g, lambda x: x[:, 0] ** 3)
    third = C.fd_derivatives(field, 3)
    inner = C.interior_mask(g, shells=3)
    assert np.allclose(third.values[inner, 0, 0, 0], 6.0, atol=1e-8)


def test_fd_rejects_bad_order():
    g = ugrid(res=11)
    field = scalar_field(g, lambda x: x[:, 0])
    with pytest.raises(ValueError):
        C.fd_derivatives(field, 4)


# --- OU semigroup and generator ---


def test_semigroup_t0_is_identity():
    fn = lambda x: np.cos(x[:, 0])
    assert C.ou_semigroup_callable(fn, 0.0, 1) is fn


def test_semigroup_on_coordinate():
    g = ugrid(res=51, radius=3.0)
    t = 0.7
    out = C.ou_semigroup(lambda x: x[:, 0], t, g)
    assert np.allclose(out.values, math.exp(-t) * g.nodes[:, 0], atol=1e-12)


def test_semigroup_on_square():
    g = ugrid(res=51, radius=3.0)
    t = 0.3
    out = C.ou_semigroup(lambda x: x[:, 0] ** 2, t, g)
    expect = math.exp(-2 * t) * g.nodes[:, 0] ** 2 + (1.0 - math.exp(-2 * t))
    assert np.allclose(out.values, expect, atol=1e-12)


def test_semigroup_law():
    g = ugrid(res=31, radius=2.0)
    fn = lambda x: np.cos(x[:, 0]) + 0.2 * x[:, 0] ** 2
    s, t = 0.4, 0.9
    pt = C.ou_semigroup_callable(fn, t, 1)
    via_composition = C.ou_semigroup(pt, s, g).values
    direct = C.ou_semigroup(fn, s + t, g).values
    assert np.allclose(via_composition, direct, atol=1e-9)


def test_semigroup_rejects_negative_time():
    with pytest.raises(ValueError):
        C.ou_semigroup_callable(lambda x: x[:, 0], -0.1, 1)


def test_generator_on_half_square():
    g = ugrid(res=601, radius=6.0)
    field = scalar_field(g, lambda x: 0.5 * x[:, 0] ** 2)
    out = C.ou_generator(field)
    inner = C.interior_mask(g)
    assert np.allclose(out.values[inner], g.nodes[inner, 0] ** 2 - 1.0, atol=1e-9)


def test_generator_on_coordinate():
    g = ugrid(res=201, radius=4.0)
    field = scalar_field(g, lambda x: x[:, 0])
    out = C.ou_generator(field)
    inner = C.interior_mask(g)
    assert np.allclose(out.values[inner], g.nodes[inner, 0], atol=1e-10)


def hermite(k, x):
    if k == 1:
        return x
    if k == 2:
        return x**2 - 1.0
    return x**3 - 3.0 * x


def hermite_grad(k, x):
    if k == 1:
        return np.ones_like(x)
    if k == 2:
        return 2.0 * x
    return 3.0 * x**2 - 3.0


def hermite_hess(k, x):
    if k == 1:
        return np.zeros_like(x)
    if k == 2:
        return np.full_like(x, 2.0)
    return 6.0 * x


@pytest.mark.parametrize("k", [1, 2, 3])
def test_hermite_eigenrelation_fd(k):
    """ℒH_k = k·H_k to stencil accuracy, with observed O(h²) decay."""
    sups = []
    for res in (601, 1201):
        g = ugrid(res=res, radius=6.0)
        x = g.nodes[:, 0]
        field = C.FieldOnGrid(g, hermite(k, x), "scalar")
        out = C.ou_generator(field)
        inner = C.interior_mask(g)
        sups.append(np.max(np.abs(out.values[inner] - k * hermite(k, x)[inner])))
    h = 12.0 / 600.0
    assert sups[0] <= 2.0 * h**2 * 6.0
    if sups[0] > 1e-10:
        assert math.log2(sups[0] / sups[1]) >= 1.9


@pytest.mark.parametrize("k", [1, 2, 3])
def test_hermite_eigenrelation_analytic(k):
    """With analytic derivatives the eigenrelation holds to 1e-8 and beyond."""
    g = ugrid(res=201, radius=6.0)
    x = g.nodes[:, 0]
    field = C.FieldOnGrid(g, hermite(k, x), "scalar")
    grad = C.FieldOnGrid(g, hermite_grad(k, x)[:, None], "vector")
    hess = C.FieldOnGrid(g, hermite_hess(k, x)[:, None, None], "matrix")
    out = C.ou_generator(field, gradient=grad, hessian=hess)
    assert np.max(np.abs(out.values - k * hermite(k, x))) < 1e-8


@pytest.mark.parametrize("k", [1, 2, 3])
def test_hermite_semigroup_eigenrelation(k):
    """P_t H_k = e^{−kt} H_k, exact under Gauss-Hermite quadrature."""
    g = ugrid(res=101, radius=4.0)
    t = 0.55
    out = C.ou_semigroup(lambda x, k=k: hermite(k, x[:, 0]), t, g)
    expect = math.exp(-k * t) * hermite(k, g.nodes[:, 0])
    assert np.max(np.abs(out.values - expect)) < 1e-8


# --- divergences ---


def test_divergence_constant_field_under_beta():
    g = ugrid(res=101, radius=4.0)
    xi = C.FieldOnGrid(g, np.ones((g.n_nodes, 1)), "vector")
    out = C.divergence(xi)
    assert np.allclose(out.values, g.nodes[:, 0], atol=1e-12)


def test_divergence_radial_field():
    g = ugrid(res=101, radius=4.0)
    xi = C.FieldOnGrid(g, g.nodes.copy(), "vector")
    out = C.divergence(xi)
    inner = C.interior_mask(g)
    assert np.allclose(out.values[inner], g.nodes[inner, 0] ** 2 - 1.0, atol=1e-10)


def test_weighted_divergence_steep_gaussian():
    """ρ = N(0, 1/4): δ_ρ of the constant field is x + 3x = 4x."""
    g = ugrid(res=101, radius=4.0)
    rho = gaussian_1d(0.0, 0.25)
    xi = C.FieldOnGrid(g, np.ones((g.n_nodes, 1)), "vector")
    out = C.divergence(xi, rho=rho)
    assert np.allclose(out.values, 4.0 * g.nodes[:, 0], atol=1e-12)


def test_divergence_with_analytic_jacobian():
    g = ugrid(res=51, radius=3.0)
    vals = np.column_stack([g.nodes[:, 0] ** 2])
    jac = np.zeros((g.n_nodes, 1, 1))
    jac[:, 0, 0] = 2.0 * g.nodes[:, 0]
    xi = C.FieldOnGrid(g, vals, "vector")
    out = C.divergence(xi, jacobian=C.FieldOnGrid(g, jac, "matrix"))
    expect = g.nodes[:, 0] ** 3 - 2.0 * g.nodes[:, 0]
    assert np.allclose(out.values, expect, atol=1e-12)


def test_matrix_divergence_columnwise():
    g = ugrid(dim=2, res=61, radius=2.0)
    x1, x2 = g.nodes[:, 0], g.nodes[:, 1]
    M = np.zeros((g.n_nodes, 2, 2))
    M[:, 0, 0] = x1**2
    M[:, 0, 1] = x1 * x2
    M[:, 1, 1] = x2**2
    out = C.matrix_divergence(C.FieldOnGrid(g, M, "matrix"))
    inner = C.interior_mask(g)
    col1 = x1 * x1**2 - 2.0 * x1
    col2 = x1 * x1 * x2 + x2 * x2**2 - (x2 + 2.0 * x2)
    assert np.allclose(out.values[inner, 0], col1[inner], atol=1e-3)
    assert np.allclose(out.values[inner, 1], col2[inner], atol=1e-3)


def test_divergence_rejects_scalar_field():
    g = ugrid(res=11)
    with pytest.raises(DimensionMismatch):
        C.divergence(scalar_field(g, lambda x: x[:, 0]))


# --- adjointness and the second-moment identity ---


def test_adjointness_constant_F():
    g = build_grid(GAUSS_HERMITE, 1, 96)
    rho = standard_gaussian(1)
    scalars, vectors = C.test_field_dictionary(1)
    F = scalars[0]
    xi = vectors[0]
    rep = C.adjointness_check(F, xi, rho, g)
    assert rep.passed
    assert abs(rep.metadata["lhs"]) < 1e-12
    assert abs(rep.metadata["rhs"]) < 1e-12


def test_adjointness_coordinate_pair():
    """F = x, ξ = e: both sides equal E[x²] = 1."""
    g = build_grid(GAUSS_HERMITE, 1, 96)
    rho = standard_gaussian(1)
    scalars, vectors = C.test_field_dictionary(1)
    rep = C.adjointness_check(scalars[1], vectors[0], rho, g)
    assert rep.passed
    assert abs(rep.metadata["lhs"] - 1.0) < 1e-12
    assert abs(rep.metadata["rhs"] - 1.0) < 1e-12


def test_adjointness_square_pair():
    """F = |x|², ξ = x·e: both sides equal 2 under β in 1-D."""
    g = build_grid(GAUSS_HERMITE, 1, 96)
    rho = standard_gaussian(1)
    scalars, vectors = C.test_field_dictionary(1)
    rep = C.adjointness_check(scalars[2], vectors[2], rho, g)
    assert rep.passed
    assert abs(rep.metadata["lhs"] - 2.0) < 1e-12
    assert abs(rep.metadata["rhs"] - 2.0) < 1e-12


def test_adjointness_whole_dictionary_nongaussian_weight():
    g = build_grid(GAUSS_HERMITE, 1, 96)
    rho = gaussian_1d(0.3, 0.5)
    scalars, vectors = C.test_field_dictionary(1)
    for F in scalars:
        for xi in vectors:
            rep = C.adjointness_check(F, xi, rho, g, tol=1e-8)
            assert rep.passed, (F.name, xi.name, rep.metadata)


def test_adjointness_dictionary_2d():
    g = build_grid(GAUSS_HERMITE, 2, 40)
    rho = standard_gaussian(2)
    scalars, vectors = C.test_field_dictionary(2)
    for F in scalars:
        for xi in vectors:
            rep = C.adjointness_check(F, xi, rho, g, tol=1e-8)
            assert rep.passed, (F.name, xi.name, rep.metadata)


def test_second_moment_constant_field_beta():
    g = build_grid(GAUSS_HERMITE, 1, 96)
    rho = standard_gaussian(1)
    _, vectors = C.test_field_dictionary(1)
    rep = C.second_moment_identity_check(vectors[0], rho, g)
    assert rep.passed
    assert abs(rep.metadata["lhs"] - 1.0) < 1e-12
    assert abs(rep.metadata["rhs"] - 1.0) < 1e-12


def test_second_moment_linear_field_beta():
    """ξ = x·e under β: E[(x²−1)²] = 2 = E[x²] + 1."""
    g = build_grid(GAUSS_HERMITE, 1, 96)
    rho = standard_gaussian(1)
    _, vectors = C.test_field_dictionary(1)
    rep = C.second_moment_identity_check(vectors[2], rho, g)
    assert rep.passed
    assert abs(rep.metadata["lhs"] - 2.0) < 1e-12
    assert abs(rep.metadata["rhs"] - 2.0) < 1e-12


def test_second_moment_steep_gaussian():
    """ξ ≡ e, ρ = N(0, 1/4): both sides equal 4."""
    g = build_grid(GAUSS_HERMITE, 1, 96)
    rho = gaussian_1d(0.0, 0.25)
    _, vectors = C.test_field_dictionary(1)
    rep = C.second_moment_identity_check(vectors[0], rho, g)
    assert rep.passed
    assert abs(rep.metadata["lhs"] - 4.0) < 1e-10
    assert abs(rep.metadata["rhs"] - 4.0) < 1e-10


def test_second_moment_whole_dictionary():
    g = build_grid(GAUSS_HERMITE, 1, 96)
    rho = normalize(
        QuadraticPotential(dim=1, quad=[[1.5]], lin=[0.2]),
        build_grid(GAUSS_HERMITE, 1, 96),
    )
    _, vectors = C.test_field_dictionary(1)
    for xi in vectors:
        rep = C.second_moment_identity_check(xi, rho, g, tol=1e-8)
        assert rep.passed, (xi.name, rep.metadata)


# --- Carleman-Fredholm determinant ---


def test_det2_frozen_values():
    assert C.carleman_fredholm_det2(np.zeros((2, 2))) == pytest.approx(1.0, abs=1e-14)
    assert C.carleman_fredholm_det2(np.diag([1.0])) == pytest.approx(
        2.0 * math.exp(-1.0), abs=1e-12
    )
    assert C.carleman_fredholm_det2(np.diag([1.0, -0.5])) == pytest.approx(
        math.exp(-0.5), abs=1e-12
    )


def test_det2_singular_matrix_is_zero():
    assert C.carleman_fredholm_det2(np.diag([-1.0, 0.3])) == 0.0


def test_det2_rejects_nonsquare():
    with pytest.raises(DimensionMismatch):
        C.carleman_fredholm_det2(np.zeros((2, 3)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-0.28, 0.28), min_size=9, max_size=9))
def test_det2_eigenvalue_factorization(entries):
    """det₂(I+M) = Π(1+λᵢ)e^{−λᵢ} over the (possibly complex) spectrum."""
    M = np.array(entries).reshape(3, 3)
    lam = np.linalg.eigvals(M)
    via_spectrum = np.prod((1.0 + lam) * np.exp(-lam))
    assert abs(via_spectrum.imag) < 1e-12
    assert C.carleman_fredholm_det2(M) == pytest.approx(
        float(via_spectrum.real), abs=1e-12
    )


# --- Gaussian Jacobian and change of variables ---


def af_pair(a, b):
    return GaussianPair(
        mean1=[0.0], mean2=[0.0], cov1=[[1.0 / a]], cov2=[[1.0 / b]]
    )


def analytic_fields(sol, grid):
    x = grid.nodes
    phi = C.FieldOnGrid(grid, sol.phi(x), "scalar")
    grad = C.FieldOnGrid(grid, sol.derivatives.phi_grad(x), "vector")
    hess = C.FieldOnGrid(grid, sol.derivatives.phi_hess(x), "matrix")
    L = C.ou_generator(phi, gradient=grad, hessian=hess)
    return phi, grad, hess, L


def test_change_of_variables_gaussian_pair():
    """e^{−g∘T}·Λ_φ = e^{−f} in log form, machine-exact for affine transport."""
    from wiener_ot.oracles import gaussian_pair_densities

    pair = af_pair(1.0, 4.0)
    sol = solve_gaussian(pair)
    f_rho, f_nu = gaussian_pair_densities(pair)
    g = ugrid(res=201, radius=6.0)
    _, grad, hess, L = analytic_fields(sol, g)
    lam = C.gaussian_jacobian(grad, hess, L)
    log_lambda = lam.meta["log_values"]
    lhs = -f_nu.evaluate(sol.T_map(g.nodes), 0) + log_lambda
    rhs = -f_rho.evaluate(g.nodes, 0)
    assert np.max(np.abs(lhs - rhs)) < 1e-10
    assert not lam.meta["noninvertible"].any()
    assert np.all(lam.values > 0)


def test_gaussian_jacobian_flags_noninvertible():
    g = ugrid(res=51, radius=2.0)
    x = g.nodes
    phi = C.FieldOnGrid(g, -x[:, 0] ** 2, "scalar")
    grad = C.FieldOnGrid(g, -2.0 * x, "vector")
    hess = C.FieldOnGrid(g, np.full((g.n_nodes, 1, 1), -2.0), "matrix")
    L = C.ou_generator(phi, gradient=grad, hessian=hess)
    lam = C.gaussian_jacobian(grad, hess, L)
    assert lam.meta["noninvertible"].all()
    assert np.all(lam.values == 0.0)


# --- Monge-Ampère residuals ---


def quartic_density(c2, c4, grid_res=96):
    from wiener_ot.densities import SeparablePotential

    gh = build_grid(GAUSS_HERMITE, 1, grid_res)
    raw = SeparablePotential(dim=1, coeffs=([0.0, 0.0, c2, 0.0, c4],))
    return normalize(raw, gh)


def test_monge_ampere_backward_gaussian_pair():
    """Variance 1 → 1/4: backward residual supremum below 1e-6 at h = 0.01."""
    rho = standard_gaussian(1)
    nu = gaussian_1d(0.0, 0.25)
    sol = solve_1d(rho, nu, ugrid(res=601, radius=6.0))
    grid = ugrid(res=601, radius=3.0)
    rep = C.monge_ampere_residual("backward", sol, rho, nu, grid, tol=1e-6)
    assert rep.passed
    assert rep.norms["sup_grid"] < 1e-6
    assert rep.metadata["noninvertible_nodes"] == 0
    assert rep.metadata["excluded_nodes"] == 4


def test_monge_ampere_forward_gaussian_pair():
    rho = standard_gaussian(1)
    nu = gaussian_1d(0.0, 0.25)
    sol = solve_1d(rho, nu, ugrid(res=601, radius=6.0))
    grid = ugrid(res=601, radius=6.0)
    rep = C.monge_ampere_residual("forward", sol, rho, nu, grid, tol=1e-6)
    assert rep.passed
    assert rep.norms["sup_grid"] < 1e-6


def test_monge_ampere_affine_solution_machine_exact():
    """Affine oracle potentials are quadratic, so stencils are exact."""
    pair = af_pair(1.0, 4.0)
    sol = solve_gaussian(pair)
    from wiener_ot.oracles import gaussian_pair_densities

    f_rho, f_nu = gaussian_pair_densities(pair)
    grid = ugrid(res=301, radius=3.0)
    rep = C.monge_ampere_residual("backward", sol, f_rho, f_nu, grid, tol=1e-6)
    assert rep.passed
    assert rep.norms["sup_grid"] < 1e-10


def test_monge_ampere_quartic_pair_within_richardson_floor():
    rho = quartic_density(0.1, 0.02)
    nu = quartic_density(-0.05, 0.03)
    sol = solve_1d(rho, nu, ugrid(res=801, radius=6.0))
    grid = ugrid(res=401, radius=4.0)
    rep = C.monge_ampere_residual("forward", sol, rho, nu, grid, tol=1e-9)
    assert rep.passed
    assert rep.metadata["richardson_floor"] > 0
    assert rep.tolerance_used >= 10.0 * rep.metadata["richardson_floor"]
    assert rep.norms["sup_grid"] <= rep.tolerance_used
    for key in ("L1_nu", "L2_rho", "sup_grid"):
        assert rep.norms[key] >= 0.0


def test_monge_ampere_rejects_unknown_direction():
    rho = standard_gaussian(1)
    nu = gaussian_1d(0.0, 0.25)
    sol = solve_gaussian(af_pair(1.0, 4.0))
    with pytest.raises(ValueError):
        C.monge_ampere_residual("sideways", sol, rho, nu, ugrid(res=21))


# --- dual potential identity ---


def test_dual_identity_contraction_pair():
    """a=1, b=4: both sides of the identity equal x; residual is stencil-exact."""
    pair = af_pair(1.0, 4.0)
    sol = solve_gaussian(pair)
    from wiener_ot.oracles import gaussian_pair_densities

    f_rho, f_nu = gaussian_pair_densities(pair)
    grid = ugrid(res=301, radius=5.0)
    rep = C.dual_identity_residual(sol, f_rho, f_nu, grid, tol=1e-6)
    assert rep.passed
    assert rep.norms["L2_rho"] < 1e-10
    assert rep.metadata["designated_norm"] == "L2_rho"


def test_dual_identity_expansion_pair():
    """a=4, b=1: both sides equal −2x."""
    pair = af_pair(4.0, 1.0)
    sol = solve_gaussian(pair)
    from wiener_ot.oracles import gaussian_pair_densities

    f_rho, f_nu = gaussian_pair_densities(pair)
    grid = ugrid(res=301, radius=5.0)
    rep = C.dual_identity_residual(sol, f_rho, f_nu, grid, tol=1e-6)
    assert rep.passed
    assert rep.norms["L2_rho"] < 1e-10


def test_dual_identity_both_sides_match_closed_form():
    """Check the two sides separately against x for the a=1,b=4 pair."""
    pair = af_pair(1.0, 4.0)
    sol = solve_gaussian(pair)
    from wiener_ot.oracles import gaussian_pair_densities

    f_rho, f_nu = gaussian_pair_densities(pair)
    grid = ugrid(res=201, radius=4.0)
    x = grid.nodes
    _, dphi = sol.phi(x), sol.derivatives.phi_grad(x)
    _, dg = f_nu.evaluate(sol.T_map(x), 1)
    _, df = f_rho.evaluate(x, 1)
    lhs = dphi + dg - df
    hess = sol.derivatives.phi_hess(x)
    K = np.linalg.inv(np.eye(1)[None] + hess)
    rhs = C.matrix_divergence(
        C.FieldOnGrid(grid, K - np.eye(1)[None], "matrix"), f_rho
    ).values
    assert np.allclose(lhs[:, 0], x[:, 0], atol=1e-10)
    inner = C.interior_mask(grid)
    assert np.allclose(rhs[inner, 0], x[inner, 0], atol=1e-10)


def test_dual_identity_quartic_pair_within_floor():
    rho = quartic_density(0.1, 0.02)
    nu = quartic_density(-0.05, 0.03)
    sol = solve_1d(rho, nu, ugrid(res=801, radius=6.0))
    grid = ugrid(res=401, radius=4.0)
    rep = C.dual_identity_residual(sol, rho, nu, grid, tol=1e-9)
    assert rep.passed
    assert rep.norms["L2_rho"] <= rep.tolerance_used


def test_dual_identity_raises_on_nonconvex_potential():
    class Bad:
        def phi(self, x):
            return -x[:, 0] ** 2

    rho = standard_gaussian(1)
    nu = standard_gaussian(1)
    with pytest.raises(NonInvertibleJacobian):
        C.dual_identity_residual(Bad(), rho, nu, ugrid(res=101, radius=2.0))


# --- Hessian inverse relation ---


def test_inverse_relation_gaussian_half_map():
    """A = 1/2: (I+∇²φ)⁻¹ = 2 and (I+∇²ψ)∘T = 1+1 = 2 node-wise."""
    pair = af_pair(1.0, 4.0)
    sol = solve_gaussian(pair)
    grid = ugrid(res=301, radius=4.0)
    rep = C.inverse_relation_residual(sol, grid, tol=1e-6)
    assert rep.passed
    assert rep.norms["sup_grid"] < 1e-8
    assert rep.metadata["extrapolated_nodes"] == 0


def test_inverse_relation_quantile_solution():
    rho = standard_gaussian(1)
    nu = gaussian_1d(0.0, 0.25)
    sol = solve_1d(rho, nu, ugrid(res=601, radius=6.0))
    grid = ugrid(res=401, radius=4.0)
    rep = C.inverse_relation_residual(sol, grid, tol=1e-5)
    assert rep.passed
    assert rep.norms["sup_grid"] < 1e-5


def test_inverse_relation_quartic_within_floor():
    rho = quartic_density(0.1, 0.02)
    nu = quartic_density(-0.05, 0.03)
    sol = solve_1d(rho, nu, ugrid(res=801, radius=6.0))
    grid = ugrid(res=401, radius=4.0)
    rep = C.inverse_relation_residual(sol, grid, tol=1e-9)
    assert rep.passed
    assert rep.norms["sup_grid"] <= rep.tolerance_used


# --- third-derivative trace positivity ---


def test_trace_positivity_1d_square():
    """(K²φ‴h)² can only be nonnegative; the checker should agree."""
    rho = quartic_density(0.1, 0.02)
    nu = quartic_density(-0.05, 0.03)
    sol = solve_1d(rho, nu, ugrid(res=801, radius=6.0))
    grid = ugrid(res=401, radius=4.0)
    rep = C.trace_positivity_check(sol, [np.array([1.0])], grid, tol=1e-8)
    assert rep.passed
    assert rep.metadata["min_trace"] >= -1e-8


def test_trace_positivity_gaussian_thirds_vanish():
    pair = af_pair(1.0, 4.0)
    sol = solve_gaussian(pair)
    grid = ugrid(res=201, radius=4.0)
    rep = C.trace_positivity_check(sol, [np.array([1.0])], grid)
    assert rep.passed
    assert abs(rep.metadata["min_trace"]) < 1e-10


def test_trace_positivity_2d_separable_quartic():
    from wiener_ot.densities import SeparablePotential
    from wiener_ot.oracles import solve_separable

    gh2 = build_grid(GAUSS_HERMITE, 2, 48)
    rho = normalize(
        SeparablePotential(dim=2, coeffs=([0.0, 0.0, 0.1, 0.0, 0.02],) * 2), gh2
    )
    nu = normalize(
        SeparablePotential(dim=2, coeffs=([0.0, 0.0, -0.05, 0.0, 0.03],) * 2), gh2
    )
    g1 = ugrid(res=401, radius=6.0)
    sol = solve_separable(rho, nu, [g1, g1])
    grid = ugrid(dim=2, res=81, radius=3.0)
    dirs = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0])]
    rep = C.trace_positivity_check(sol, dirs, grid, tol=1e-8)
    assert rep.passed
    assert rep.metadata["min_trace"] >= -1e-8
    assert rep.metadata["directions"] == 3


# --- report plumbing ---


def test_report_pass_follows_designated_norm():
    rho = standard_gaussian(1)
    nu = gaussian_1d(0.0, 0.25)
    sol = solve_1d(rho, nu, ugrid(res=601, radius=6.0))
    grid = ugrid(res=301, radius=3.0)
    strict = C.monge_ampere_residual(
        "backward", sol, rho, nu, grid, tol=1e-300, richardson=False
    )
    assert strict.tolerance_used == 1e-300
    assert (strict.norms["sup_grid"] <= strict.tolerance_used) == strict.passed
    assert not strict.passed
