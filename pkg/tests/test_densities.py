"""Density families: exact derivatives, normalization, entropy, Fisher, convexity.

Closed-form oracles used throughout (standard Gaussian calculus):

* ∫e^{−x²/2}dβ = 1/√2, so f = ½x² normalizes with log_norm = −½log2.
* H(N(0,σ²) | N(0,1)) = ½(σ² − 1 − log σ²);  H(N(b,1) | N(0,1)) = b²/2.
* Fisher of N(0,1/a) relative to β: ∫|f′|²e⁻ᶠdβ = (a−1)²·E[x²] = (a−1)²/a.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wiener_ot.densities import (
    MixtureLogPotential,
    QuadraticPotential,
    SeparablePotential,
    TabulatedPotential,
    convexity_modulus,
    expectation,
    fisher_information,
    gaussian_1d,
    gaussian_potential,
    log_partition,
    normalize,
    quadratic_mean_cov,
    read_density_csv,
    relative_entropy,
    require_normalized,
    standard_gaussian,
    tabulate,
    write_density_csv,
)
from wiener_ot.errors import (
    DimensionMismatch,
    NotNormalized,
    UnsupportedOrder,
)
from wiener_ot.grids import build_grid

GRID = build_grid("gauss-hermite-tensor", 1, 96)
GRID2 = build_grid("gauss-hermite-tensor", 2, 40)


# --- normalization ---

def test_normalize_reference_unchanged():
    d = normalize(standard_gaussian(1), GRID)
    assert d.log_norm == pytest.approx(0.0, abs=1e-13)


def test_normalize_half_x_squared():
    d = QuadraticPotential(dim=1, quad=[[1.0]])
    dn = normalize(d, GRID)
    assert dn.log_norm == pytest.approx(-0.5 * math.log(2.0), abs=1e-12)


def test_normalize_tabulated_constant():
    axes = (np.linspace(-6, 6, 101),)
    t = TabulatedPotential(dim=1, axes=axes, values=np.full(101, 2.5))
    g = build_grid("truncated-uniform", 1, 101)
    tn = normalize(t, g)
    f = tn.evaluate(np.array([[0.3]]))
    assert f[0] == pytest.approx(math.log(float(np.sum(g.weights))), abs=1e-10)


def test_normalize_idempotent():
    d = QuadraticPotential(dim=1, quad=[[1.0]], lin=[0.3], const=0.2)
    once = normalize(d, GRID)
    twice = normalize(once, GRID)
    assert abs(twice.log_norm - once.log_norm) < 1e-12


# --- evaluation and derivatives ---

def test_evaluate_quadratic_identity_hessian():
    d = QuadraticPotential(dim=2, quad=np.eye(2))
    _, _, h = d.evaluate(np.array([[0.7, -1.2]]), 2)
    assert np.allclose(h[0], np.eye(2))


def test_evaluate_scaled_gaussian_pair_values():
    # f(y) = 3y²/2 − log 2 is the exactly-normalized potential of N(0, ¼)
    g = gaussian_1d(0.0, 0.25)
    f, grad, hess = g.evaluate(np.array([[1.0]]), 2)
    assert f[0] == pytest.approx(1.5 - math.log(2.0), abs=1e-12)
    assert grad[0, 0] == pytest.approx(3.0, abs=1e-12)
    assert hess[0, 0, 0] == pytest.approx(3.0, abs=1e-12)


def test_separable_hessian_diagonal():
    d = SeparablePotential(dim=2, coeffs=([0.0, 0.0, 0.75], [0.0, 0.0, 0.5, 0.0, 0.1]))
    pts = np.array([[0.5, -1.0], [1.5, 2.0]])
    _, _, h = d.evaluate(pts, 2)
    assert np.allclose(h[:, 0, 1], 0.0) and np.allclose(h[:, 1, 0], 0.0)
    assert h[0, 0, 0] == pytest.approx(1.5)
    assert h[1, 1, 1] == pytest.approx(1.0 + 1.2 * 4.0)


@given(st.floats(min_value=-3, max_value=3), st.floats(min_value=-3, max_value=3))
@settings(max_examples=40, deadline=None)
def test_mixture_density_matches_direct_sum(x, b):
    m = MixtureLogPotential(dim=1, shifts=[[b], [-b]], weights=[0.5, 0.5])
    f = m.evaluate(np.array([[x]]))[0]
    direct = 0.5 * math.exp(b * x - b * b / 2) + 0.5 * math.exp(-b * x - b * b / 2)
    assert math.exp(-f) == pytest.approx(direct, rel=1e-12)


def _fd_gradient_slope(density, pts):
    """Log-log slope of |analytic ∇f − central difference| under h-refinement."""
    errs = []
    hs = [1e-2, 5e-3]
    _, g = density.evaluate(pts, 1)
    for h in hs:
        worst = 0.0
        for i in range(density.dim):
            e = np.zeros(density.dim)
            e[i] = h
            fp = density.evaluate(pts + e, 0)
            fm = density.evaluate(pts - e, 0)
            worst = max(worst, float(np.max(np.abs((fp - fm) / (2 * h) - g[:, i]))))
        errs.append(worst)
    if errs[1] < 1e-10:
        return 2.0  # polynomial exactness: only roundoff left
    return math.log(errs[0] / errs[1]) / math.log(hs[0] / hs[1])


@pytest.mark.parametrize(
    "density",
    [
        QuadraticPotential(dim=2, quad=[[2.0, 0.5], [0.5, 1.0]], lin=[0.1, -0.2]),
        SeparablePotential(dim=1, coeffs=([0.0, 0.2, 0.5, 0.0, 0.05],)),
        MixtureLogPotential(dim=2, shifts=[[1.0, 0.0], [-0.5, 0.8]], weights=[0.4, 0.6]),
    ],
)
def test_gradient_matches_finite_differences(density):
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(12, density.dim))
    assert _fd_gradient_slope(density, pts) > 1.9


def test_tabulated_order_two_refused():
    axes = (np.linspace(-4, 4, 81),)
    t = tabulate(gaussian_1d(0.0, 1.0), axes)
    with pytest.raises(UnsupportedOrder):
        t.evaluate(np.array([[0.0]]), 2)


def test_tabulated_interpolation_accuracy():
    src = gaussian_1d(0.3, 0.8)
    axes = (np.linspace(-6, 6, 401),)
    t = tabulate(src, axes, with_gradient=True)
    pts = np.linspace(-3, 3, 57).reshape(-1, 1)
    f_t, g_t = t.evaluate(pts, 1)
    f_s, g_s = src.evaluate(pts, 1)
    assert np.max(np.abs(f_t - f_s)) < 1e-8
    assert np.max(np.abs(g_t - g_s)) < 1e-7


# --- relative entropy ---

def test_entropy_self_zero():
    rho = gaussian_1d(0.2, 0.7)
    assert relative_entropy(rho, rho, GRID) == pytest.approx(0.0, abs=1e-12)


def test_entropy_variance_two():
    m = gaussian_1d(0.0, 2.0)
    expect = 0.5 * (2.0 - 1.0 - math.log(2.0))
    assert relative_entropy(m, standard_gaussian(1), GRID) == pytest.approx(
        expect, abs=1e-10
    )
    assert expect == pytest.approx(0.15343, abs=5e-6)


def test_entropy_mean_shift():
    m = gaussian_1d(1.0, 1.0)
    assert relative_entropy(m, standard_gaussian(1), GRID) == pytest.approx(0.5, abs=1e-12)


def test_entropy_nonnegative_on_pairs():
    pairs = [
        (gaussian_1d(0.0, 0.25), gaussian_1d(0.5, 1.5)),
        (gaussian_1d(-0.4, 1.2), standard_gaussian(1)),
        (
            normalize(MixtureLogPotential(dim=1, shifts=[[1.2], [-1.2]], weights=[0.5, 0.5]), GRID),
            standard_gaussian(1),
        ),
    ]
    for m1, m2 in pairs:
        assert relative_entropy(m1, m2, GRID) >= -1e-12


def test_entropy_infinite_sentinel():
    # m2 vanishes (f = +∞) on a region where m1 has mass
    axes = (np.linspace(-6, 6, 601),)
    vals = np.where(np.abs(axes[0]) < 2.0, 0.0, np.inf)
    g = build_grid("truncated-uniform", 1, 601)
    m2 = normalize(TabulatedPotential(dim=1, axes=axes, values=vals), g)
    m1 = normalize(standard_gaussian(1), g)
    assert math.isinf(relative_entropy(m1, m2, g))


def test_entropy_requires_normalization():
    un = QuadraticPotential(dim=1, quad=[[1.0]])
    with pytest.raises(NotNormalized):
        relative_entropy(un, standard_gaussian(1), GRID)


def test_entropy_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        relative_entropy(standard_gaussian(1), standard_gaussian(2), GRID)


# --- Fisher information ---

def test_fisher_reference_zero():
    assert fisher_information(standard_gaussian(1), GRID) == pytest.approx(0.0, abs=1e-14)


def test_fisher_scaled_gaussian():
    rho = gaussian_1d(0.0, 0.25)  # precision a = 4
    assert fisher_information(rho, GRID) == pytest.approx(9.0 / 4.0, abs=1e-9)


def test_fisher_mean_shift():
    rho = gaussian_1d(1.0, 1.0)
    assert fisher_information(rho, GRID) == pytest.approx(1.0, abs=1e-10)


@given(
    st.floats(min_value=0.3, max_value=3.0),
    st.floats(min_value=-1.0, max_value=1.0),
)
@settings(max_examples=25, deadline=None)
def test_fisher_matches_gaussian_closed_form(var, mean):
    # f′(x) = (a−1)x − am with a = 1/σ²; under x = m + σz this is −m + (a−1)σz,
    # so E_ρ|f′|² = m² + (a−1)²/a.
    rho = gaussian_1d(mean, var)
    a = 1.0 / var
    expect = mean**2 + (a - 1.0) ** 2 / a
    assert fisher_information(rho, GRID) == pytest.approx(expect, rel=1e-7, abs=1e-9)


# --- convexity modulus ---

def test_convexity_zero_matrix():
    cert = convexity_modulus(QuadraticPotential(dim=2, quad=np.zeros((2, 2))))
    assert cert.alpha == 0.0 and cert.exact
    assert cert.is_one_minus_c_convex(0.99)


def test_convexity_indefinite_quadratic():
    cert = convexity_modulus(QuadraticPotential(dim=2, quad=np.diag([3.0, -0.5])))
    assert cert.alpha == pytest.approx(0.5, abs=1e-14)
    assert cert.is_one_minus_c_convex(0.5)
    assert not cert.is_one_minus_c_convex(0.51)


def test_convexity_strongly_convex():
    cert = convexity_modulus(gaussian_1d(0.0, 0.25))  # f″ = 3
    assert cert.alpha == pytest.approx(-3.0, abs=1e-14)
    assert cert.is_one_minus_c_convex(0.9999)


def test_convexity_mixture_probed():
    m = MixtureLogPotential(dim=1, shifts=[[2.0], [-2.0]], weights=[0.5, 0.5])
    cert = convexity_modulus(m)
    assert not cert.exact and cert.probe_points > 0
    # softmax covariance at the midpoint is |b|² = 4: decisively non-log-concave
    assert cert.alpha == pytest.approx(4.0, abs=1e-6)
    assert not cert.is_one_minus_c_convex(0.1)


def test_convexity_tabulated_refused():
    t = tabulate(gaussian_1d(0.0, 1.0), (np.linspace(-4, 4, 41),))
    with pytest.raises(UnsupportedOrder):
        convexity_modulus(t)


# --- helpers and round trips ---

def test_gaussian_potential_roundtrip():
    mean = np.array([0.3, -0.7])
    cov = np.array([[1.5, 0.4], [0.4, 0.8]])
    d = gaussian_potential(mean, cov)
    assert abs(log_partition(d, GRID2)) < 1e-10
    m, c = quadratic_mean_cov(d)
    assert np.allclose(m, mean, atol=1e-12)
    assert np.allclose(c, cov, atol=1e-12)


def test_expectation_matches_moments():
    rho = gaussian_1d(0.5, 2.0)
    require_normalized(rho, GRID)
    assert expectation(rho, GRID, GRID.nodes[:, 0]) == pytest.approx(0.5, abs=1e-9)


def test_density_csv_roundtrip(tmp_path):
    axes = (np.linspace(-2, 2, 9), np.linspace(-1, 1, 5))
    t = tabulate(gaussian_potential([0.1, 0.0], np.diag([1.0, 0.5])), axes)
    path = tmp_path / "density.csv"
    write_density_csv(path, t)
    back = read_density_csv(path)
    assert back.dim == 2
    assert np.allclose(back.values, t.values, atol=1e-15)
    header = path.read_text().splitlines()[0]
    assert header == "x_1,x_2,f"
