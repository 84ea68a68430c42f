"""Approximation-operator and cascade-sweep tests.

Covers the radial bump and its gradient certificate, the four density
operators (projection, semigroup smoothing, smooth cutoff, reference
mixing), composed cascade runs with per-stage gap metrics, the refinement
sweep, and the cross-moment Hessian regularity bound.
"""

import math

import numpy as np
import pytest

import wiener_ot.cascade as C
from wiener_ot.densities import (
    MixtureLogPotential,
    SeparablePotential,
    gaussian_1d,
    gaussian_potential,
    log_partition,
    normalize,
    quadratic_mean_cov,
    relative_entropy,
    standard_gaussian,
)
from wiener_ot.errors import (
    ConvexityNotCertified,
    DegenerateCutoff,
    DimensionMismatch,
)
from wiener_ot.grids import GAUSS_HERMITE, TRUNCATED_UNIFORM, build_grid
from wiener_ot.oracles import GaussianPair, solve_1d, solve_gaussian

QUARTIC_RHO = [0.0, 0.0, 0.1, 0.0, 0.02]
QUARTIC_NU = [0.0, 0.3, -0.05, 0.0, 0.03]


def ugrid(res: int = 801, radius: float = 6.0, dim: int = 1):
    return build_grid(TRUNCATED_UNIFORM, dim, res, truncation_radius=radius)


def ghgrid(res: int = 96, dim: int = 1):
    return build_grid(GAUSS_HERMITE, dim, res)


def quartic_pair():
    gh = ghgrid()
    rho = normalize(SeparablePotential(dim=1, coeffs=(QUARTIC_RHO,)), gh)
    nu = normalize(SeparablePotential(dim=1, coeffs=(QUARTIC_NU,)), gh)
    return rho, nu


# ---------------------------------------------------------------------------
# bump profile and certificate
# ---------------------------------------------------------------------------


def test_bump_profile_values():
    bump = C.CutoffBump(3)
    pts = np.array([[0.0], [1.9], [2.5], [3.0], [4.0]])
    theta = bump.theta(pts)
    assert theta[0] == 1.0 and theta[1] == 1.0
    assert theta[3] == 0.0 and theta[4] == 0.0
    # quintic midpoint of the transition
    assert theta[2] == pytest.approx(0.5, abs=1e-12)
    mesh = np.linspace(0.0, 4.0, 10_000).reshape(-1, 1)
    vals = bump.theta(mesh)
    assert np.all(vals >= 0.0) and np.all(vals <= 1.0)


def test_bump_validation():
    with pytest.raises(ValueError):
        C.CutoffBump(0)
    with pytest.raises(ValueError):
        C.CutoffBump(1.5)
    with pytest.raises(ValueError):
        C.CutoffBump(2, width=0.0)
    with pytest.raises(ValueError):
        C.CutoffBump(2, width=1.2)


def test_bump_gradient_matches_finite_differences():
    bump = C.CutoffBump(2)
    pts = np.array([[1.3, 0.4], [1.7, -0.9], [0.3, 0.2], [2.5, 0.1]])
    grad = bump.theta_grad(pts)
    h = 1e-6
    for i, p in enumerate(pts):
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (bump.theta((p + e)[None]) - bump.theta((p - e)[None])) / (2 * h)
            assert grad[i, j] == pytest.approx(float(fd[0]), abs=1e-6)
    # identically zero off the transition shell
    assert np.all(grad[2] == 0.0) and np.all(grad[3] == 0.0)


def test_certificate_sup_frozen():
    assert C.CutoffBump(4, 1.0).certificate_sup() == pytest.approx(
        10.804903702548067, rel=1e-12)
    # ratio scales as 1/width^2
    assert C.CutoffBump(4, 0.5).certificate_sup() == pytest.approx(
        4.0 * 10.804903702548067, rel=1e-12)


@pytest.mark.xfail(
    strict=True,
    reason="stated gradient-certificate bound 1 is unattainable on a unit "
    "shell: sqrt(theta) climbs from 0 to 1 over width <= 1, so its slope "
    "reaches 1 somewhere and (theta')^2/theta = 4 (sqrt(theta)')^2 >= 4; "
    "the quintic profile attains about 10.8 and widening cannot pass")
def test_certificate_bound_one():
    bump = C.certified_bump(4)
    assert bump.certificate_sup() <= 1.0 + 1e-9


def test_certified_bump_widens_to_unit_shell_and_reports():
    bump = C.certified_bump(4, start_width=0.5)
    assert bump.width == 1.0
    assert not bump.is_certified(1.0)
    assert bump.is_certified(11.0)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def test_projection_full_dim_is_identity():
    rho = standard_gaussian(2)
    assert C.cyl_project(rho, 2, ugrid(res=41, radius=4.0, dim=2)) is rho


def test_projection_dimension_validation():
    rho = standard_gaussian(2)
    g = ugrid(res=41, radius=4.0)
    with pytest.raises(DimensionMismatch):
        C.cyl_project(rho, 3, g)
    with pytest.raises(DimensionMismatch):
        C.cyl_project(rho, 0, g)


def test_projection_of_flat_potential_is_flat():
    g = ugrid(res=201, radius=4.0)
    proj = C.cyl_project(standard_gaussian(2), 1, g)
    vals = proj.evaluate(g.nodes, 0)
    # constant offset comes only from renormalizing on the truncated grid
    assert float(np.max(vals) - np.min(vals)) < 1e-12
    assert float(np.max(np.abs(proj.grad_evaluator(g.nodes)))) < 1e-12


def test_projection_of_separable_density_is_its_component():
    g = ugrid(res=201, radius=4.0)
    cu = [0.0, 0.0, 0.08, 0.0, 0.015]
    cv = [0.0, 0.25, -0.03, 0.0, 0.02]
    sep = normalize(SeparablePotential(dim=2, coeffs=(cu, cv)), ghgrid(48, dim=2))
    proj = C.cyl_project(sep, 1, g)
    comp = normalize(SeparablePotential(dim=1, coeffs=(cu,)), ghgrid())
    diff = proj.evaluate(g.nodes, 0) - comp.evaluate(g.nodes, 0)
    assert float(np.max(diff) - np.min(diff)) < 1e-9
    assert float(np.max(np.abs(diff))) < 1e-5
    grad_diff = proj.grad_evaluator(g.nodes)[:, 0] - comp.evaluate(g.nodes, 1)[1][:, 0]
    assert float(np.max(np.abs(grad_diff))) < 1e-12


def test_projection_gaussian_marginal_coefficient():
    # covariance block (0.6, 1.2; corr 0.3): the first marginal has variance
    # 0.6, so the projected potential is x^2 (1/0.6 - 1) / 2 up to a constant
    cov = np.array([[0.6, 0.3], [0.3, 1.2]])
    g = ugrid(res=201, radius=4.0)
    proj = C.cyl_project(gaussian_potential(np.zeros(2), cov), 1, g)
    x = g.nodes[:, 0]
    expected = (1.0 / 0.6 - 1.0) / 2.0 * x**2
    got = proj.evaluate(g.nodes, 0)
    centered = got - got[100] + expected[100]
    assert float(np.max(np.abs(centered - expected))) < 1e-12


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def test_smoothing_validation():
    g = ugrid(res=101, radius=4.0)
    with pytest.raises(ValueError):
        C.ou_smooth(standard_gaussian(1), 0, g)
    with pytest.raises(ValueError):
        C.ou_smooth(standard_gaussian(1), 2.5, g)


def test_smoothing_contracts_linear_slope_exactly():
    g = ugrid(res=401, radius=5.0)
    lin = normalize(SeparablePotential(dim=1, coeffs=([0.0, 0.7],)), ghgrid())
    sm = C.ou_smooth(lin, 3, g)
    slope = math.exp(-1.0 / 3.0) * 0.7
    assert float(np.max(np.abs(sm.grad_evaluator(g.nodes)[:, 0] - slope))) < 1e-12


def test_smoothing_converges_on_compact_as_m_grows():
    g = ugrid(res=401, radius=5.0)
    rho, _ = quartic_pair()
    mask = np.abs(g.nodes[:, 0]) <= 2.0
    base = rho.evaluate(g.nodes, 0)[mask]
    sups = []
    for m in (4, 16, 64):
        vals = C.ou_smooth(rho, m, g).evaluate(g.nodes, 0)[mask]
        diff = vals - base
        diff = diff - diff.mean()
        sups.append(float(np.max(np.abs(diff))))
    assert sups[0] > sups[1] > sups[2]
    assert sups[2] < 0.05


# ---------------------------------------------------------------------------
# cutoff
# ---------------------------------------------------------------------------


def test_cutoff_far_bump_changes_nothing():
    g = ugrid(res=401, radius=4.0)
    rho = normalize(gaussian_1d(0.2, 0.9), g)
    out = C.cutoff(rho, C.certified_bump(5), g)
    # theta = 1 on the whole grid, so only the mass renormalization moves
    diff = out.evaluate(g.nodes, 0) - rho.evaluate(g.nodes, 0)
    assert float(np.max(np.abs(diff))) < 1e-10


def test_cutoff_mass_frozen_and_cross_checked():
    beta = standard_gaussian(1)
    mass = C.theta_mass(beta, C.CutoffBump(1), ugrid())
    assert mass == pytest.approx(0.37675605320727945, rel=1e-12)
    # independent quadrature family agrees to its own accuracy; the bump is
    # only C^2 so polynomial quadrature converges slowly
    mass_gh = C.theta_mass(beta, C.CutoffBump(1), ghgrid())
    assert mass_gh == pytest.approx(mass, abs=1e-3)


def test_cutoff_normalizers_decrease_to_one():
    beta = standard_gaussian(1)
    g = ugrid()
    a = [1.0 / C.theta_mass(beta, C.CutoffBump(k), g) for k in range(1, 6)]
    assert all(a[i] > a[i + 1] for i in range(len(a) - 1))
    assert all(v > 1.0 for v in a)
    assert a[0] == pytest.approx(2.65423738, rel=1e-7)
    assert a[-1] == pytest.approx(1.0, abs=1e-4)


def test_cutoff_degenerate_mass_refuses():
    g = ugrid()
    far = normalize(gaussian_potential(np.array([3.5]), np.array([[0.04]])), g)
    with pytest.raises(DegenerateCutoff):
        C.cutoff(far, C.CutoffBump(1), g)


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


def test_mix_validation():
    g = ugrid(res=101, radius=4.0)
    with pytest.raises(ValueError):
        C.eps_mix(standard_gaussian(1), 0.0, g)
    with pytest.raises(ValueError):
        C.eps_mix(standard_gaussian(1), -0.1, g)


def test_mix_floor_holds_on_every_node():
    g = ugrid(res=401, radius=5.0)
    rho, _ = quartic_pair()
    eps = 0.05
    out = C.eps_mix(rho, eps, g)
    dens = np.exp(-out.evaluate(g.nodes, 0))
    floor = eps / (1.0 + eps)
    assert float(np.min(dens - floor)) >= -1e-15
    # exact mixing formula at the grid edge
    edge = float(np.exp(-rho.evaluate(g.nodes[:1], 0)[0]))
    assert dens[0] == pytest.approx((edge + eps) / (1.0 + eps), rel=1e-12)


def test_mix_flat_density_is_fixed_point():
    g = ugrid(res=401, radius=5.0)
    out = C.eps_mix(standard_gaussian(1), 0.3, g)
    assert float(np.max(np.abs(out.evaluate(g.nodes, 0)))) < 1e-14
    assert float(np.max(np.abs(out.grad_evaluator(g.nodes)))) < 1e-14


def test_mix_contracts_relative_entropy():
    g = ugrid(res=801, radius=8.0)
    rho = normalize(standard_gaussian(1), g)
    nu = normalize(gaussian_1d(0.7, 1.3), g)
    h0 = relative_entropy(rho, nu, g)
    h1 = relative_entropy(
        normalize(C.eps_mix(rho, 0.3, g), g), normalize(C.eps_mix(nu, 0.3, g), g), g)
    assert 0.0 < h1 < h0


def test_mix_converges_in_l1_as_eps_vanishes():
    g = ugrid(res=401, radius=5.0)
    rho, _ = quartic_pair()
    base = np.exp(-rho.evaluate(g.nodes, 0))
    errs = []
    for eps in (1e-1, 1e-2, 1e-3):
        dens = np.exp(-C.eps_mix(rho, eps, g).evaluate(g.nodes, 0))
        errs.append(float(np.mean(np.abs(dens - base))))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 2e-3


# ---------------------------------------------------------------------------
# operator dispatch and normalization invariant
# ---------------------------------------------------------------------------


def test_apply_operator_unknown_name():
    with pytest.raises(ValueError):
        C.apply_operator(standard_gaussian(1), "sharpen", 2, ugrid(res=101, radius=4.0))


def test_operators_preserve_normalization():
    g = ugrid(res=801, radius=8.0)
    nu = normalize(gaussian_1d(0.7, 1.3), g)
    outputs = {
        "smooth": C.ou_smooth(nu, 3, g),
        "cutoff": C.cutoff(nu, C.certified_bump(5), g),
        "mix": C.eps_mix(nu, 0.3, g),
    }
    for name, out in outputs.items():
        assert abs(log_partition(out, g)) < 1e-10, name
    g1 = ugrid(res=81, radius=5.0)
    proj = C.cyl_project(
        gaussian_potential(np.zeros(2), np.array([[0.8, 0.2], [0.2, 1.1]])), 1, g1)
    assert abs(log_partition(proj, g1)) < 1e-10


# ---------------------------------------------------------------------------
# cascade runs
# ---------------------------------------------------------------------------


def test_cascade_identical_pair_has_null_gaps():
    beta = standard_gaussian(1)
    stages, report = C.cascade_run(beta, beta, [
        {"op": "cyl_project", "param": 1},
        {"op": "ou_smooth", "param": 4},
        {"op": "cutoff", "param": 4},
        {"op": "eps_mix", "param": 1e-2},
    ])
    assert report["n_failed"] == 0
    assert report["reference_is_surrogate"] is True
    for stage in stages:
        assert stage.status == "ok"
        assert stage.metrics["phi_gap"] < 1e-5
        assert stage.metrics["psi_gap_L1"] < 1e-10
        assert stage.metrics["grad_psi_gap_L2"] < 1e-5
        assert stage.metrics["hess_gap"] < 1e-5
        # density-drift rows stay finite but need not vanish: the operators
        # genuinely move the potential even when rho = nu
        assert math.isfinite(stage.metrics["fisher_gap_f"])
    assert report["final_phi_gap"] < 1e-5


def test_cascade_failing_stage_is_isolated():
    rho = standard_gaussian(1)
    nu = gaussian_1d(0.6, 0.8)
    stages, report = C.cascade_run(rho, nu, [
        {"op": "ou_smooth", "param": 4},
        {"op": "cyl_project", "param": 0},
        {"op": "eps_mix", "param": 1e-2},
    ])
    assert [s.status for s in stages] == ["ok", "failed", "ok"]
    assert report["n_failed"] == 1
    assert "projection" in stages[1].message
    # later stages consumed the last good density and still solved
    assert math.isfinite(stages[2].metrics["phi_gap"])
    assert stages[2].metrics["cost"] > 0.0


def test_cascade_entropic_mix_levels_refine():
    rho = standard_gaussian(1)
    nu = gaussian_1d(0.6, 0.8)
    levels = [{"eps_mix": e} for e in (1e-1, 3e-2, 1e-2)]
    g = ugrid()
    per_level, reports = C.refinement_sweep(
        rho, nu, levels=levels, solver="entropic", grid=g, target_grid=g,
        entropic_stride=4, entropic_levels=9)
    gaps = [lv["phi_gap"] for lv in per_level]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[-1] < 1e-2
    assert reports[-1]["reference_solver"] == "gaussian-bures"
    assert reports[-1]["stage_solver"] == "entropic"


def test_refinement_sweep_quartic_gaps_decrease():
    rho, nu = quartic_pair()
    per_level, reports = C.refinement_sweep(
        rho, nu, levels=C.DEFAULT_SCHEDULE_LEVELS[:4])
    for col in C.METRIC_COLUMNS:
        if col == "L_psi_proxy":
            continue  # bounded by M, not required to decrease
        seq = [lv[col] for lv in per_level]
        assert all(seq[i] > seq[i + 1] for i in range(len(seq) - 1)), (col, seq)
    last = reports[-1]
    assert last["n_failed"] == 0
    assert last["L_psi_proxy_sup"] <= last["uniform_bound_M"]
    assert per_level[-1]["excluded_rho_nodes"] >= 0
    assert per_level[-1]["excluded_nu_nodes"] >= 0


# ---------------------------------------------------------------------------
# regularity bound
# ---------------------------------------------------------------------------


def gaussian_solution(var: float):
    rho = standard_gaussian(1)
    nu = gaussian_1d(0.0, var)
    m1, c1 = quadratic_mean_cov(rho)
    m2, c2 = quadratic_mean_cov(nu)
    return rho, nu, solve_gaussian(GaussianPair(m1, m2, c1, c2))


def test_regularity_bound_frozen_gaussian_case():
    rho, nu, sol = gaussian_solution(4.0)
    rep = C.regularity_bound_check(rho, nu, sol, 0.9, ghgrid())
    assert rep.passed
    assert rep.norms["lhs"] == pytest.approx(0.9, abs=1e-6)
    assert rep.norms["rhs"] == pytest.approx(7.5, abs=1e-6)
    assert rep.norms["slack"] == pytest.approx(6.6, abs=1e-6)
    assert rep.identity_name == "transport-hessian-regularity-bound"


def test_regularity_bound_trivial_pair():
    rho, _, _ = gaussian_solution(4.0)
    m1, c1 = quadratic_mean_cov(rho)
    sol = solve_gaussian(GaussianPair(m1, m1, c1, c1))
    rep = C.regularity_bound_check(rho, rho, sol, 0.5, ghgrid())
    assert rep.passed
    assert rep.norms["lhs"] == pytest.approx(0.0, abs=1e-12)


def test_regularity_bound_2d_anisotropic():
    rho = standard_gaussian(2)
    cov = np.array([[2.0, 0.5], [0.5, 1.5]])
    nu = gaussian_potential(np.zeros(2), cov)
    sol = solve_gaussian(GaussianPair(np.zeros(2), np.zeros(2), np.eye(2), cov))
    rep = C.regularity_bound_check(rho, nu, sol, 0.5, ghgrid(40, dim=2))
    assert rep.passed
    assert rep.norms["lhs"] > 0.0
    assert rep.norms["slack"] > 0.0


def test_regularity_bound_quartic_pair():
    gh = ghgrid()
    rho = normalize(SeparablePotential(dim=1, coeffs=([0.0, 0.0, 0.05, 0.0, 0.01],)), gh)
    nu = normalize(SeparablePotential(dim=1, coeffs=([0.0, 0.2, -0.02, 0.0, 0.02],)), gh)
    sol = solve_1d(rho, nu, ugrid())
    rep = C.regularity_bound_check(rho, nu, sol, 0.5, gh, target_grid=gh)
    assert rep.passed
    assert 0.0 < rep.norms["lhs"] < rep.norms["rhs"]


def test_regularity_bound_refuses_uncertified_source():
    mix = MixtureLogPotential(dim=1, shifts=[[-0.8], [0.8]], weights=[0.5, 0.5])
    gh = ghgrid()
    nu = normalize(gaussian_1d(0.0, 1.2), gh)
    sol = solve_1d(normalize(mix, gh), nu, ugrid())
    with pytest.raises(ConvexityNotCertified):
        C.regularity_bound_check(normalize(mix, gh), nu, sol, 0.9, gh)


def test_regularity_bound_c_validation():
    rho, nu, sol = gaussian_solution(4.0)
    with pytest.raises(ValueError):
        C.regularity_bound_check(rho, nu, sol, 1.0, ghgrid())
    with pytest.raises(ValueError):
        C.regularity_bound_check(rho, nu, sol, -0.2, ghgrid())


def test_regularity_bound_certified_suite():
    count = 0
    for c in (0.1, 0.5, 0.9):
        for dim in (1, 2, 3):
            for scale in (0.5, 1.6, 2.5):
                cov = np.eye(dim) * scale
                cov[0, 0] = scale * 1.3
                rho = standard_gaussian(dim)
                g = ghgrid({1: 96, 2: 40, 3: 16}[dim], dim=dim)
                nu = normalize(gaussian_potential(np.zeros(dim), cov), g)
                sol = solve_gaussian(
                    GaussianPair(np.zeros(dim), np.zeros(dim), np.eye(dim), cov))
                rep = C.regularity_bound_check(rho, nu, sol, c, g)
                assert rep.passed, (c, dim, scale, rep.norms)
                count += 1
    assert count == 27
