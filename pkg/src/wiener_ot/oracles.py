"""Reference solvers for the quadratic-cost Monge problem.

Three regimes admit essentially exact solutions: one dimension, where the
monotone rearrangement T = F_ν⁻¹∘F_ρ is optimal; Gaussian to Gaussian,
where the map is affine with matrix from the Bures geometry; and separable
products, which reduce coordinatewise.  Everything downstream (residual
checks, entropic solvers, the approximation pipeline) is judged against
these.

Potentials follow the ½-convention: φ(x)+ψ(y)+½|x−y|² ≥ 0 with equality on
the graph of T, while ``cost`` is the squared distance d₂² without the ½.
φ is pinned by E_ρ[φ] = 0; ψ is then fixed by the conjugacy
ψ(y) = −φ(S(y)) − ½|S(y)−y|².
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .densities import (
    PotentialDensity,
    SeparablePotential,
    expectation,
    normalize,
)
from .errors import (
    DimensionMismatch,
    NotNormalized,
    NotSeparable,
    NotSPD,
    ZeroDensityRegion,
)
from .grids import (
    GAUSS_HERMITE,
    QuadratureGrid,
    build_grid,
)

__all__ = [
    "GaussianPair",
    "TransportDerivatives",
    "TransportSolution",
    "gaussian_pair_densities",
    "solve_1d",
    "solve_gaussian",
    "solve_separable",
    "transport_solution_to_dict",
    "write_transport_json",
]

# 5-point Gauss-Legendre panel rule on [-1, 1]; exact through degree 9, so
# panel integrals of smooth densities at h ≈ 0.02 are accurate to roundoff.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)

# density values below this are treated as zero when extending CDF meshes
_PDF_FLOOR = 1e-34

_ORACLE_MASS_TOL = 1e-6


@dataclass(eq=False)
class TransportDerivatives:
    """Closed-form derivative fields attached to an oracle solution.

    All callables take an (N, dim) point array.  ``phi_grad`` returns
    (N, dim), ``phi_hess`` (N, dim, dim), and the optional third-order
    fields (N, dim, dim, dim).  The ψ-side fields are functions on the
    target (ν) side.
    """

    phi_grad: Callable[[np.ndarray], np.ndarray]
    phi_hess: Callable[[np.ndarray], np.ndarray]
    psi_grad: Callable[[np.ndarray], np.ndarray]
    psi_hess: Callable[[np.ndarray], np.ndarray]
    phi_third: Callable[[np.ndarray], np.ndarray] | None = None
    psi_third: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(eq=False)
class TransportSolution:
    """Monge potentials (φ, ψ) with maps T = id + ∇φ and S = id + ∇ψ.

    ``phi``/``psi`` map (N, dim) points to (N,) values; ``T_map``/``S_map``
    map points to points.  ``grid`` is the ρ-side sampling grid and
    ``target_grid`` the ν-side one; both are carried for reporting and are
    not needed to evaluate the callables.
    """

    dim: int
    phi: Callable[[np.ndarray], np.ndarray]
    psi: Callable[[np.ndarray], np.ndarray]
    T_map: Callable[[np.ndarray], np.ndarray]
    S_map: Callable[[np.ndarray], np.ndarray]
    cost: float
    solver_tag: str
    grid: QuadratureGrid | None = None
    target_grid: QuadratureGrid | None = None
    derivatives: TransportDerivatives | None = None
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class GaussianPair:
    mean1: np.ndarray
    mean2: np.ndarray
    cov1: np.ndarray
    cov2: np.ndarray

    def __post_init__(self):
        for name in ("mean1", "mean2"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        for name in ("cov1", "cov2"):
            m = np.atleast_2d(np.asarray(getattr(self, name), float))
            try:
                np.linalg.cholesky(m)
            except np.linalg.LinAlgError as exc:
                raise NotSPD(f"{name} is not symmetric positive-definite") from exc
            object.__setattr__(self, name, m)
        d = self.mean1.shape[0]
        if not (self.mean2.shape[0] == d and self.cov1.shape == (d, d)
                and self.cov2.shape == (d, d)):
            raise DimensionMismatch("GaussianPair fields disagree on dimension")

    @property
    def dim(self) -> int:
        return self.mean1.shape[0]


def _pts(x, dim: int) -> np.ndarray:
    p = np.asarray(x, dtype=float)
    if dim == 1 and p.ndim == 1:
        p = p.reshape(-1, 1)
    if p.ndim != 2 or p.shape[1] != dim:
        raise DimensionMismatch(f"expected points of shape (N, {dim}), got {p.shape}")
    return p


# --- one-dimensional quantile machinery ---


class _Cdf1D:
    """Tail-extended CDF table built from Gauss-Legendre panel integrals.

    The quantile map feeds finite-difference second derivatives downstream,
    which amplify node errors by 4/h²; the table therefore has to be
    accurate to near machine precision.  Panel quadrature on a mesh that is
    extended until the density underflows achieves that, where spline
    interpolation of coarse CDF samples would not.
    """

    def __init__(self, density: PotentialDensity, lo: float, hi: float, h: float):
        self.density = density
        mesh = self._extended_mesh(lo, hi, h)
        inc = self._panel(mesh[:-1], mesh[1:])
        node_cdf = np.concatenate([[0.0], np.cumsum(inc)])
        self.mesh = mesh
        self.mass = float(node_cdf[-1])
        if self.mass <= 0.0:
            raise ZeroDensityRegion("density integrates to zero on the working mesh")
        self.node_u = node_cdf / self.mass
        self._check_support()
        keep = np.concatenate([[True], np.diff(self.node_u) > 0.0])
        self._guess = PchipInterpolator(self.node_u[keep], self.mesh[keep])

    def _pdf(self, x: np.ndarray) -> np.ndarray:
        # Lebesgue density of e^{-f}dβ: the Gaussian reference factor matters
        x = np.asarray(x, float)
        f = self.density.evaluate(x.reshape(-1, 1))
        out = np.zeros(f.shape)
        finite = np.isfinite(f)
        logpdf = -f[finite] - 0.5 * x.ravel()[finite] ** 2 - 0.5 * math.log(2.0 * math.pi)
        out[finite] = np.exp(logpdf)
        return out

    def _extended_mesh(self, lo: float, hi: float, h: float) -> np.ndarray:
        n_core = int(math.ceil((hi - lo) / h)) + 1
        core = np.linspace(lo, hi, n_core)
        h = core[1] - core[0]
        left, right = [], []
        x = lo
        while len(left) < 4000 and self._pdf(np.array([x - h]))[0] > _PDF_FLOOR:
            x -= h
            left.append(x)
        x = hi
        while len(right) < 4000 and self._pdf(np.array([x + h]))[0] > _PDF_FLOOR:
            x += h
            right.append(x)
        return np.concatenate([left[::-1], core, right])

    def _panel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # ∫_a^b e^{-f}, one 5-point panel per (a_i, b_i)
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        pts = mid[:, None] + half[:, None] * _GL_X[None, :]
        vals = self._pdf(pts.ravel()).reshape(pts.shape)
        return half * (vals @ _GL_W)

    def _check_support(self) -> None:
        core = (self.node_u > 1e-9) & (self.node_u < 1.0 - 1e-9)
        if not np.any(core):
            return
        pdf = self._pdf(self.mesh[core])
        if np.min(pdf) < 1e-15 * max(np.max(pdf), _PDF_FLOOR):
            raise ZeroDensityRegion(
                "density vanishes inside its bulk; the CDF is flat there and "
                "the quantile map is ill-defined"
            )

    def scale(self) -> float:
        """Interquantile half-width, a robust stand-in for the std dev."""
        q = self.quantile(np.array([0.1587, 0.8413]))
        return 0.5 * float(q[1] - q[0])

    def integrate_against(self, func: Callable[[np.ndarray], np.ndarray]) -> float:
        """∫ func dμ over the working mesh, panel rule, unnormalized."""
        a, b = self.mesh[:-1], self.mesh[1:]
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        pts = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
        vals = func(pts) * self._pdf(pts)
        return float(np.sum((vals.reshape(-1, 5) @ _GL_W) * half))

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        c = np.clip(x, self.mesh[0], self.mesh[-1])
        idx = np.clip(np.searchsorted(self.mesh, c, side="right") - 1, 0, len(self.mesh) - 2)
        partial = self._panel(self.mesh[idx], c)
        u = (self.node_u[idx] * self.mass + partial) / self.mass
        return np.clip(u, 0.0, 1.0)

    def quantile(self, u) -> np.ndarray:
        u = np.clip(np.asarray(u, float), 0.0, 1.0)
        shape = u.shape
        u = u.ravel()
        j = np.clip(np.searchsorted(self.node_u, u, side="right") - 1, 0, len(self.mesh) - 2)
        lo = self.mesh[j].copy()
        hi = self.mesh[j + 1].copy()
        x = np.clip(self._guess(u), lo, hi)
        for _ in range(60):
            fx = self.cdf(x) - u
            above = fx > 0.0
            hi = np.where(above, x, hi)
            lo = np.where(above, lo, x)
            pdf = self._pdf(x)
            step_ok = pdf > _PDF_FLOOR
            newton = np.where(step_ok, x - fx / np.where(step_ok, pdf, 1.0), x)
            inside = (newton > lo) & (newton < hi)
            x_new = np.where(inside, newton, 0.5 * (lo + hi))
            delta = np.abs(x_new - x)
            x = x_new
            if np.max(delta) < 1e-15 * max(1.0, float(np.max(np.abs(x)))):
                break
        return x.reshape(shape)


class _CumulativeIntegral:
    """Antiderivative of a smooth integrand, anchored node table + panels."""

    def __init__(self, axis: np.ndarray, integrand: Callable[[np.ndarray], np.ndarray],
                 offset: float = 0.0):
        self.axis = axis
        self.integrand = integrand
        self.offset = offset
        inc = self._panel(axis[:-1], axis[1:])
        values = np.concatenate([[0.0], np.cumsum(inc)])
        # anchor so the antiderivative vanishes at the origin
        values -= self._value_at(axis, values, np.array([0.0]))[0]
        self.values = values

    def _panel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        pts = mid[:, None] + half[:, None] * _GL_X[None, :]
        vals = self.integrand(pts.ravel()).reshape(pts.shape)
        return half * (vals @ _GL_W)

    def _value_at(self, axis, values, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape)
        inside = (x >= axis[0]) & (x <= axis[-1])
        if np.any(inside):
            xi = x[inside]
            idx = np.clip(np.searchsorted(axis, xi, side="right") - 1, 0, len(axis) - 2)
            out[inside] = values[idx] + self._panel(axis[idx], xi)
        for i in np.nonzero(~inside)[0]:
            # rare off-mesh query: integrate out from the nearest end in steps
            t = x[i]
            if t < axis[0]:
                anchor, total = axis[0], values[0]
            else:
                anchor, total = axis[-1], values[-1]
            n = max(1, int(math.ceil(abs(t - anchor) / (axis[1] - axis[0]))))
            steps = np.linspace(anchor, t, n + 1)
            out[i] = total + float(np.sum(self._panel(steps[:-1], steps[1:])))
        return out

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return self._value_at(self.axis, self.values, x.ravel()).reshape(x.shape) + self.offset


def _axis_for(grid: QuadratureGrid) -> np.ndarray:
    if grid.axes is not None and grid.scheme != GAUSS_HERMITE:
        return grid.axes[0]
    span = float(np.max(np.abs(grid.nodes)))
    n = max(grid.nodes.shape[0], 601)
    return np.linspace(-span, span, n if n % 2 == 1 else n + 1)


def solve_1d(rho: PotentialDensity, nu: PotentialDensity, grid: QuadratureGrid,
             target_grid: QuadratureGrid | None = None) -> TransportSolution:
    """Monotone-rearrangement transport between 1-D densities.

    T = F_ν⁻¹∘F_ρ from tail-extended CDF tables; φ by integrating T − id
    and recentering to E_ρ[φ] = 0; ψ by conjugacy.  Both maps, both
    potentials, and exact first/second/third derivative fields come back as
    callables valid anywhere the densities are finite.
    """
    if rho.dim != 1 or nu.dim != 1:
        raise DimensionMismatch("solve_1d needs one-dimensional densities")
    axis = _axis_for(grid)
    lo, hi = float(axis[0]), float(axis[-1])

    def build(density: PotentialDensity) -> _Cdf1D:
        c = _Cdf1D(density, lo, hi, 0.02)
        s = c.scale()
        if s < 0.4:  # narrow density: refine panels to keep them resolved
            c = _Cdf1D(density, lo, hi, max(s / 25.0, 1e-4))
        return c

    F_rho = build(rho)
    F_nu = build(nu)
    for name, c in (("rho", F_rho), ("nu", F_nu)):
        if abs(c.mass - 1.0) > _ORACLE_MASS_TOL:
            raise NotNormalized(f"{name} has mass {c.mass:.3e}; normalize it first")

    def T1(x: np.ndarray) -> np.ndarray:
        return F_nu.quantile(F_rho.cdf(x))

    def S1(y: np.ndarray) -> np.ndarray:
        return F_rho.quantile(F_nu.cdf(y))

    phi_table = _CumulativeIntegral(axis, lambda s: T1(s) - s)
    xg = grid.nodes[:, 0]
    pin = expectation(rho, grid, phi_table(xg))
    grid_mass = expectation(rho, grid, np.ones_like(xg))
    phi_table.offset -= pin / grid_mass

    def phi(p):
        return phi_table(_pts(p, 1)[:, 0])

    def psi(p):
        y = _pts(p, 1)[:, 0]
        s = S1(y)
        return -phi_table(s) - 0.5 * (s - y) ** 2

    def T_map(p):
        return T1(_pts(p, 1)[:, 0]).reshape(-1, 1)

    def S_map(p):
        return S1(_pts(p, 1)[:, 0]).reshape(-1, 1)

    # Inverse function theorem for the Lebesgue densities e^{-f-x²/2} and
    # e^{-g-y²/2}: log T′(x) = g(T)+T²/2 − f(x)−x²/2 + log(Z_ν/Z_ρ), exact
    # given the map itself
    log_zr = math.log(F_rho.mass)
    log_zn = math.log(F_nu.mass)

    def t_prime(x: np.ndarray) -> np.ndarray:
        t = T1(x)
        f = rho.evaluate(x.reshape(-1, 1))
        g = nu.evaluate(t.reshape(-1, 1))
        return np.exp(g + 0.5 * t**2 - f - 0.5 * x**2 + log_zn - log_zr)

    def s_prime(y: np.ndarray) -> np.ndarray:
        s = S1(y)
        f = rho.evaluate(s.reshape(-1, 1))
        g = nu.evaluate(y.reshape(-1, 1))
        return np.exp(f + 0.5 * s**2 - g - 0.5 * y**2 + log_zr - log_zn)

    def phi_grad(p):
        x = _pts(p, 1)[:, 0]
        return (T1(x) - x).reshape(-1, 1)

    def phi_hess(p):
        x = _pts(p, 1)[:, 0]
        return (t_prime(x) - 1.0).reshape(-1, 1, 1)

    def phi_third(p):
        x = _pts(p, 1)[:, 0]
        t = T1(x)
        tp = t_prime(x)
        _, df = rho.evaluate(x.reshape(-1, 1), 1)
        _, dg = nu.evaluate(t.reshape(-1, 1), 1)
        return (tp * ((dg[:, 0] + t) * tp - (df[:, 0] + x))).reshape(-1, 1, 1, 1)

    def psi_grad(p):
        y = _pts(p, 1)[:, 0]
        return (S1(y) - y).reshape(-1, 1)

    def psi_hess(p):
        y = _pts(p, 1)[:, 0]
        return (s_prime(y) - 1.0).reshape(-1, 1, 1)

    def psi_third(p):
        y = _pts(p, 1)[:, 0]
        s = S1(y)
        sp = s_prime(y)
        _, df = rho.evaluate(s.reshape(-1, 1), 1)
        _, dg = nu.evaluate(y.reshape(-1, 1), 1)
        return (sp * ((df[:, 0] + s) * sp - (dg[:, 0] + y))).reshape(-1, 1, 1, 1)

    cost = F_rho.integrate_against(lambda s: (T1(s) - s) ** 2) / F_rho.mass
    cost_backward = F_nu.integrate_against(lambda s: (S1(s) - s) ** 2) / F_nu.mass

    if target_grid is None:
        u_edge = F_nu.quantile(np.array([9.9e-10, 1.0 - 9.9e-10]))  # ±6σ analogue
        r = float(np.max(np.abs(u_edge)))
        res = len(axis)
        target_grid = build_grid("truncated-uniform", 1,
                                 res if res % 2 == 1 else res + 1,
                                 truncation_radius=max(r, 1e-2))

    with np.errstate(all="ignore"):  # tail nodes where a CDF saturates
        slopes = t_prime(axis)
    finite = slopes[np.isfinite(slopes)]
    min_slope = float(finite.min()) if finite.size else math.nan
    return TransportSolution(
        dim=1, phi=phi, psi=psi, T_map=T_map, S_map=S_map, cost=cost,
        solver_tag="quantile-1d", grid=grid, target_grid=target_grid,
        derivatives=TransportDerivatives(
            phi_grad=phi_grad, phi_hess=phi_hess,
            psi_grad=psi_grad, psi_hess=psi_hess,
            phi_third=phi_third, psi_third=psi_third,
        ),
        meta={"rho_mass": F_rho.mass, "nu_mass": F_nu.mass,
              "min_T_slope": min_slope,
              "cost_backward": cost_backward},
    )


# --- Gaussian-to-Gaussian ---


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if np.min(vals) <= 0.0:
        raise NotSPD("matrix square root needs positive eigenvalues")
    return (vecs * np.sqrt(vals)) @ vecs.T


def _sym_inv_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if np.min(vals) <= 0.0:
        raise NotSPD("matrix inverse square root needs positive eigenvalues")
    return (vecs / np.sqrt(vals)) @ vecs.T


_DEFAULT_GH_RES = {1: 96, 2: 40, 3: 16, 4: 10}


def solve_gaussian(pair: GaussianPair, grid: QuadratureGrid | None = None,
                   target_grid: QuadratureGrid | None = None) -> TransportSolution:
    """Affine optimal transport between Gaussian measures.

    T(x) = m₂ + A(x − m₁) with
    A = Σ₁^{−1/2}(Σ₁^{1/2}Σ₂Σ₁^{1/2})^{1/2}Σ₁^{−1/2}, and
    cost = |m₁−m₂|² + tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2}Σ₂Σ₁^{1/2})^{1/2}).
    """
    d = pair.dim
    root1 = _sym_sqrt(pair.cov1)
    inv_root1 = _sym_inv_sqrt(pair.cov1)
    middle = _sym_sqrt(root1 @ pair.cov2 @ root1)
    A = inv_root1 @ middle @ inv_root1
    A = 0.5 * (A + A.T)
    A_inv = np.linalg.inv(A)
    A_inv = 0.5 * (A_inv + A_inv.T)

    dm = pair.mean2 - pair.mean1
    cost = float(dm @ dm + np.trace(pair.cov1 + pair.cov2 - 2.0 * middle))

    H = A - np.eye(d)
    # pin E_ρ[φ] = 0: the quadratic part contributes ½tr(HΣ₁), the linear
    # part (m₂−m₁)·m₁
    c0 = -0.5 * float(np.trace(H @ pair.cov1)) - float(dm @ pair.mean1)

    m1, m2 = pair.mean1, pair.mean2

    def T_map(p):
        x = _pts(p, d)
        return m2 + (x - m1) @ A.T

    def S_map(p):
        y = _pts(p, d)
        return m1 + (y - m2) @ A_inv.T

    def phi(p):
        x = _pts(p, d)
        xc = x - m1
        return 0.5 * np.einsum("ni,ij,nj->n", xc, H, xc) + x @ dm + c0

    def psi(p):
        y = _pts(p, d)
        s = m1 + (y - m2) @ A_inv.T
        return -phi(s) - 0.5 * np.sum((s - y) ** 2, axis=1)

    Hb = A_inv - np.eye(d)

    def phi_grad(p):
        x = _pts(p, d)
        return (x - m1) @ H.T + dm

    def phi_hess(p):
        x = _pts(p, d)
        return np.broadcast_to(H, (x.shape[0], d, d)).copy()

    def psi_grad(p):
        y = _pts(p, d)
        return (y - m2) @ Hb.T - dm

    def psi_hess(p):
        y = _pts(p, d)
        return np.broadcast_to(Hb, (y.shape[0], d, d)).copy()

    def zero_third(p):
        n = _pts(p, d).shape[0]
        return np.zeros((n, d, d, d))

    if grid is None and d in _DEFAULT_GH_RES:
        grid = build_grid(GAUSS_HERMITE, d, _DEFAULT_GH_RES[d])
    if target_grid is None:
        target_grid = grid

    return TransportSolution(
        dim=d, phi=phi, psi=psi, T_map=T_map, S_map=S_map, cost=cost,
        solver_tag="gaussian-bures", grid=grid, target_grid=target_grid,
        derivatives=TransportDerivatives(
            phi_grad=phi_grad, phi_hess=phi_hess,
            psi_grad=psi_grad, psi_hess=psi_hess,
            phi_third=zero_third, psi_third=zero_third,
        ),
        meta={"A": A.tolist()},
    )


def gaussian_pair_densities(pair: GaussianPair):
    """Exactly-normalized potential densities (f, g) for the pair."""
    from .densities import gaussian_potential

    return (gaussian_potential(pair.mean1, pair.cov1),
            gaussian_potential(pair.mean2, pair.cov2))


# --- separable products ---


def _tensor_from_1d(grids: Sequence[QuadratureGrid]) -> QuadratureGrid | None:
    from .grids import TENSOR_NODE_CAP, _tensor_nodes, _tensor_weights

    total = 1
    for g in grids:
        total *= g.nodes.shape[0]
    if total > TENSOR_NODE_CAP:
        return None
    axes = tuple(g.nodes[:, 0] for g in grids)
    w1d = [g.weights for g in grids]
    return QuadratureGrid(
        scheme=grids[0].scheme, dim=len(grids),
        nodes=_tensor_nodes(axes), weights=_tensor_weights(w1d), axes=axes,
        truncation_radius=grids[0].truncation_radius,
        is_probabilistic=all(g.is_probabilistic for g in grids),
    )


def solve_separable(rho: PotentialDensity, nu: PotentialDensity,
                    grids: Sequence[QuadratureGrid]) -> TransportSolution:
    """Coordinatewise transport between separable densities.

    Product measures couple coordinate by coordinate under quadratic cost:
    T_i solves the 1-D problem for the i-th marginals, φ(x) = Σφ_i(x_i),
    cost = Σ cost_i.  Components are renormalized individually on a
    Gauss-Hermite grid before the 1-D solves.
    """
    if not isinstance(rho, SeparablePotential) or not isinstance(nu, SeparablePotential):
        raise NotSeparable("solve_separable needs SeparablePotential inputs")
    if rho.dim != nu.dim:
        raise DimensionMismatch(f"dim {rho.dim} vs {nu.dim}")
    d = rho.dim
    if len(grids) != d:
        raise DimensionMismatch(f"need {d} per-coordinate grids, got {len(grids)}")

    gh = build_grid(GAUSS_HERMITE, 1, 96)
    parts = []
    for i in range(d):
        r_i = normalize(rho.component(i), gh)
        n_i = normalize(nu.component(i), gh)
        parts.append(solve_1d(r_i, n_i, grids[i]))

    def phi(p):
        x = _pts(p, d)
        return sum(parts[i].phi(x[:, i]) for i in range(d))

    def psi(p):
        y = _pts(p, d)
        return sum(parts[i].psi(y[:, i]) for i in range(d))

    def T_map(p):
        x = _pts(p, d)
        return np.column_stack([parts[i].T_map(x[:, i])[:, 0] for i in range(d)])

    def S_map(p):
        y = _pts(p, d)
        return np.column_stack([parts[i].S_map(y[:, i])[:, 0] for i in range(d)])

    def _diag(fields, p, order):
        x = _pts(p, d)
        n = x.shape[0]
        if order == 1:
            out = np.zeros((n, d))
            for i in range(d):
                out[:, i] = fields[i](x[:, i])[:, 0]
            return out
        if order == 2:
            out = np.zeros((n, d, d))
            for i in range(d):
                out[:, i, i] = fields[i](x[:, i])[:, 0, 0]
            return out
        out = np.zeros((n, d, d, d))
        for i in range(d):
            out[:, i, i, i] = fields[i](x[:, i])[:, 0, 0, 0]
        return out

    der = [parts[i].derivatives for i in range(d)]
    derivs = TransportDerivatives(
        phi_grad=lambda p: _diag([q.phi_grad for q in der], p, 1),
        phi_hess=lambda p: _diag([q.phi_hess for q in der], p, 2),
        psi_grad=lambda p: _diag([q.psi_grad for q in der], p, 1),
        psi_hess=lambda p: _diag([q.psi_hess for q in der], p, 2),
        phi_third=lambda p: _diag([q.phi_third for q in der], p, 3),
        psi_third=lambda p: _diag([q.psi_third for q in der], p, 3),
    )

    return TransportSolution(
        dim=d, phi=phi, psi=psi, T_map=T_map, S_map=S_map,
        cost=float(sum(q.cost for q in parts)),
        solver_tag="separable-product",
        grid=_tensor_from_1d(grids),
        target_grid=_tensor_from_1d([q.target_grid for q in parts]),
        derivatives=derivs,
        meta={"coordinate_costs": [q.cost for q in parts]},
    )


# --- serialization ---


def _grid_ref(grid: QuadratureGrid | None) -> str:
    if grid is None:
        return "none"
    res = len(grid.axes[0]) if grid.axes is not None else grid.nodes.shape[0]
    r = grid.truncation_radius
    return f"{grid.scheme}:d{grid.dim}:n{res}" + ("" if r is None else f":r{r:g}")


def transport_solution_to_dict(sol: TransportSolution) -> dict:
    if sol.grid is None:
        raise ValueError("solution carries no grid; attach one before serializing")
    tg = sol.target_grid if sol.target_grid is not None else sol.grid
    ref = _grid_ref(sol.grid)
    if tg is not sol.grid:
        ref += ";" + _grid_ref(tg)
    return {
        "solver_tag": sol.solver_tag,
        "cost": sol.cost,
        "grid_ref": ref,
        "phi": np.asarray(sol.phi(sol.grid.nodes)).tolist(),
        "psi": np.asarray(sol.psi(tg.nodes)).tolist(),
        "T": np.asarray(sol.T_map(sol.grid.nodes)).tolist(),
        "S": np.asarray(sol.S_map(tg.nodes)).tolist(),
    }


def write_transport_json(path, sol: TransportSolution) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(transport_solution_to_dict(sol), fh, sort_keys=True)
        fh.write("\n")
