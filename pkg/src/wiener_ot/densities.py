"""Densities e⁻ᶠ relative to the standard Gaussian reference β = N(0, Iₙ).

A density is stored potential-first: we keep f (and its analytic derivatives),
never e⁻ᶠ, so tails stay representable in log space.  Four families:

* ``quadratic`` — f(x) = ½xᵀQx + bᵀx + c, Q symmetric.  Exact derivatives,
  exact convexity modulus, closed-form Gaussian helpers.
* ``separable-1d-list`` — f(x) = Σᵢ pᵢ(xᵢ) with pᵢ a 1-D polynomial
  (ascending coefficients).  Diagonal Hessian.
* ``gaussian-mixture-log`` — e⁻ᶠ = Σₖ wₖ·exp(bₖ·x − |bₖ|²/2), a mixture of
  unit-variance mean shifts (each component integrates to 1 against β, so
  Σwₖ = 1 gives exact normalization).  Softmax derivatives; generically
  non-log-concave for separated shifts.
* ``grid-tabulated`` — f sampled on a tensor mesh, piecewise-cubic
  interpolation for f and (when tabulated) its gradient.  Order-2 evaluation
  always raises: Hessians of tabulated fields come from the finite-difference
  operator, never from interpolation.

Functionals (normalization constant, relative entropy, Fisher information)
all integrate against a shared :class:`~wiener_ot.grids.QuadratureGrid` in
log space.  Relative entropy reports +∞ as ``float("inf")`` — a sentinel,
never an overflow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.special import logsumexp

from .errors import (
    DimensionMismatch,
    NonIntegrable,
    NotNormalized,
    UnsupportedOrder,
)
from .grids import QuadratureGrid

QUADRATIC = "quadratic"
SEPARABLE = "separable-1d-list"
MIXTURE_LOG = "gaussian-mixture-log"
GRID_TABULATED = "grid-tabulated"

#: a density counts as normalized when |log ∫e⁻ᶠdβ| is below this
NORMALIZATION_TOL = 1e-8


def _as_points(x, dim: int) -> np.ndarray:
    """Coerce input to an (N, dim) float array; 1-D input allowed when dim=1."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionMismatch(f"points shape {x.shape} incompatible with dim {dim}")
    return x


@dataclass(eq=False)
class PotentialDensity:
    """Base class: a potential f with an additive normalization constant.

    ``log_norm`` is the constant added to the family's raw potential so that
    the effective f = f_raw + log_norm satisfies ∫e⁻ᶠdβ = 1 after
    :func:`normalize`.
    """

    dim: int
    log_norm: float = 0.0
    family: str = field(init=False, default="")

    # subclasses implement the raw (log_norm-free) evaluation
    def _raw(self, pts: np.ndarray, order: int):
        raise NotImplementedError

    def evaluate(self, x, order: int = 0):
        """Return f, (f, ∇f), or (f, ∇f, ∇²f) at the given points."""
        if order not in (0, 1, 2):
            raise UnsupportedOrder(f"order must be 0, 1, or 2; got {order}")
        pts = _as_points(x, self.dim)
        out = self._raw(pts, order)
        if order == 0:
            return out + self.log_norm
        if order == 1:
            f, g = out
            return f + self.log_norm, g
        f, g, h = out
        return f + self.log_norm, g, h

    def with_log_norm(self, log_norm: float) -> "PotentialDensity":
        return replace(self, log_norm=float(log_norm))

    def supports_order(self, order: int) -> bool:
        return order <= 2


@dataclass(eq=False)
class QuadraticPotential(PotentialDensity):
    """f(x) = ½xᵀQx + bᵀx + c (plus log_norm)."""

    quad: np.ndarray = None
    lin: np.ndarray = None
    const: float = 0.0

    def __post_init__(self):
        self.quad = np.atleast_2d(np.asarray(self.quad, dtype=float))
        if self.lin is None:
            self.lin = np.zeros(self.dim)
        self.lin = np.asarray(self.lin, dtype=float).reshape(-1)
        if self.quad.shape != (self.dim, self.dim) or self.lin.shape != (self.dim,):
            raise DimensionMismatch(
                f"quadratic params shapes {self.quad.shape}, {self.lin.shape} "
                f"for dim {self.dim}"
            )
        if not np.allclose(self.quad, self.quad.T, atol=1e-12):
            raise ValueError("quadratic coefficient matrix must be symmetric")
        self.quad = 0.5 * (self.quad + self.quad.T)
        self.family = QUADRATIC

    def _raw(self, pts, order):
        qx = pts @ self.quad
        f = 0.5 * np.einsum("ni,ni->n", pts, qx) + pts @ self.lin + self.const
        if order == 0:
            return f
        g = qx + self.lin
        if order == 1:
            return f, g
        h = np.broadcast_to(self.quad, (pts.shape[0], self.dim, self.dim)).copy()
        return f, g, h


@dataclass(eq=False)
class SeparablePotential(PotentialDensity):
    """f(x) = Σᵢ pᵢ(xᵢ), each pᵢ a polynomial with ascending coefficients."""

    coeffs: tuple = ()

    def __post_init__(self):
        if len(self.coeffs) != self.dim:
            raise DimensionMismatch(
                f"{len(self.coeffs)} coordinate profiles for dim {self.dim}"
            )
        self.coeffs = tuple(np.asarray(c, dtype=float).reshape(-1) for c in self.coeffs)
        self.family = SEPARABLE

    @cached_property
    def _dcoeffs(self):
        return tuple(P.polyder(c) for c in self.coeffs)

    @cached_property
    def _ddcoeffs(self):
        return tuple(P.polyder(c, 2) for c in self.coeffs)

    def _raw(self, pts, order):
        f = np.zeros(pts.shape[0])
        for i, c in enumerate(self.coeffs):
            f += P.polyval(pts[:, i], c)
        if order == 0:
            return f
        g = np.stack(
            [P.polyval(pts[:, i], dc) for i, dc in enumerate(self._dcoeffs)], axis=-1
        )
        if order == 1:
            return f, g
        h = np.zeros((pts.shape[0], self.dim, self.dim))
        for i, ddc in enumerate(self._ddcoeffs):
            h[:, i, i] = P.polyval(pts[:, i], ddc)
        return f, g, h

    def component(self, i: int) -> "SeparablePotential":
        """The 1-D profile of coordinate i (normalization not split)."""
        return SeparablePotential(dim=1, coeffs=(self.coeffs[i],))


@dataclass(eq=False)
class MixtureLogPotential(PotentialDensity):
    """f = −log Σₖ wₖ·exp(bₖ·x − |bₖ|²/2) (plus log_norm).

    Each mean-shift component integrates to exactly 1 against β, so the raw
    density is normalized whenever Σwₖ = 1.
    """

    shifts: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        self.shifts = np.atleast_2d(np.asarray(self.shifts, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.shifts.shape[1] != self.dim:
            raise DimensionMismatch(
                f"shift dimension {self.shifts.shape[1]} != dim {self.dim}"
            )
        if self.shifts.shape[0] != self.weights.shape[0]:
            raise DimensionMismatch("one weight per shift required")
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        self.family = MIXTURE_LOG

    def _component_logs(self, pts):
        # log wₖ + bₖ·x − |bₖ|²/2, shape (N, K)
        return (
            np.log(self.weights)[None, :]
            + pts @ self.shifts.T
            - 0.5 * np.sum(self.shifts**2, axis=1)[None, :]
        )

    def _raw(self, pts, order):
        logs = self._component_logs(pts)
        lse = logsumexp(logs, axis=1)
        f = -lse
        if order == 0:
            return f
        s = np.exp(logs - lse[:, None])  # softmax responsibilities (N, K)
        mean_b = s @ self.shifts  # (N, dim)
        g = -mean_b
        if order == 1:
            return f, g
        second = np.einsum("nk,ki,kj->nij", s, self.shifts, self.shifts)
        h = -(second - np.einsum("ni,nj->nij", mean_b, mean_b))
        return f, g, h


@dataclass(eq=False)
class TabulatedPotential(PotentialDensity):
    """f sampled on a tensor mesh; +∞ entries mark zero-density regions.

    ``evaluator``/``grad_evaluator`` are optional exact closures (used by the
    approximation-cascade operators, whose outputs have closed-form pointwise
    values); when absent, piecewise-cubic interpolation of ``values`` (and of
    ``grad_values`` when tabulated) is used.  Order 2 always raises
    :class:`UnsupportedOrder`.
    """

    axes: tuple = ()
    values: np.ndarray = None
    grad_values: tuple | None = None
    evaluator: object = None
    grad_evaluator: object = None

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float).reshape(-1) for a in self.axes)
        if len(self.axes) != self.dim:
            raise DimensionMismatch(f"{len(self.axes)} axes for dim {self.dim}")
        shape = tuple(len(a) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float).reshape(shape)
        if self.grad_values is not None:
            self.grad_values = tuple(
                np.asarray(g, dtype=float).reshape(shape) for g in self.grad_values
            )
            if len(self.grad_values) != self.dim:
                raise DimensionMismatch("one gradient component per axis required")
        if np.any(np.isneginf(self.values)) or np.any(np.isnan(self.values)):
            raise ValueError("tabulated potential must be > −∞ and not NaN")
        self.family = GRID_TABULATED

    def supports_order(self, order: int) -> bool:
        return order <= 1

    @cached_property
    def _finite_box(self):
        """Index slices of the largest axis-aligned box of finite values."""
        finite = np.isfinite(self.values)
        if finite.all():
            return tuple(slice(0, len(a)) for a in self.axes)
        slices = []
        for ax in range(self.dim):
            other = tuple(i for i in range(self.dim) if i != ax)
            has = finite.any(axis=other) if other else finite
            idx = np.nonzero(has)[0]
            if idx.size == 0:
                raise NonIntegrable("tabulated potential is +∞ everywhere")
            slices.append(slice(idx[0], idx[-1] + 1))
        return tuple(slices)

    @cached_property
    def _interp(self):
        box = self._finite_box
        sub_axes = [a[s] for a, s in zip(self.axes, box)]
        sub_vals = self.values[box]
        if not np.isfinite(sub_vals).all():
            # non-rectangular support: fall back to linear with +inf passthrough
            return None
        if self.dim == 1:
            if len(sub_axes[0]) < 4:
                return lambda q: np.interp(q[:, 0], sub_axes[0], sub_vals)
            spl = CubicSpline(sub_axes[0], sub_vals)
            return lambda q: spl(q[:, 0])
        method = "cubic" if min(len(a) for a in sub_axes) >= 4 else "linear"
        rgi = RegularGridInterpolator(
            sub_axes, sub_vals, method=method, bounds_error=False, fill_value=None
        )
        return rgi

    @cached_property
    def _grad_interp(self):
        if self.grad_values is None:
            return None
        box = self._finite_box
        sub_axes = [a[s] for a, s in zip(self.axes, box)]
        comps = []
        for gv in self.grad_values:
            sub = gv[box]
            if self.dim == 1:
                spl = CubicSpline(sub_axes[0], sub)
                comps.append(lambda q, s=spl: s(q[:, 0]))
            else:
                rgi = RegularGridInterpolator(
                    sub_axes, sub, method="cubic" if min(len(a) for a in sub_axes) >= 4 else "linear",
                    bounds_error=False, fill_value=None,
                )
                comps.append(rgi)
        return comps

    def _inside_box(self, pts):
        box = self._finite_box
        ok = np.ones(pts.shape[0], dtype=bool)
        for i, (a, s) in enumerate(zip(self.axes, box)):
            lo, hi = a[s][0], a[s][-1]
            ok &= (pts[:, i] >= lo - 1e-12) & (pts[:, i] <= hi + 1e-12)
        return ok

    def _raw(self, pts, order):
        if order >= 2:
            raise UnsupportedOrder(
                "grid-tabulated densities expose orders 0 and 1 only; "
                "Hessians come from the finite-difference operator"
            )
        if self.evaluator is not None:
            f = np.asarray(self.evaluator(pts), dtype=float).reshape(-1)
        else:
            f = np.full(pts.shape[0], np.inf)
            ok = self._inside_box(pts)
            if ok.any():
                interp = self._interp
                if interp is None:
                    raise UnsupportedOrder(
                        "tabulated support is not a tensor box; cannot interpolate"
                    )
                f[ok] = interp(pts[ok])
        if order == 0:
            return f
        g = self._gradient(pts)
        return f, g

    def _gradient(self, pts):
        if self.grad_evaluator is not None:
            return np.asarray(self.grad_evaluator(pts), dtype=float).reshape(
                pts.shape[0], self.dim
            )
        if self._grad_interp is not None:
            cols = [np.asarray(c(pts), dtype=float).reshape(-1) for c in self._grad_interp]
            return np.stack(cols, axis=-1)
        if self.dim == 1 and self.evaluator is None:
            box = self._finite_box
            sub_axes = self.axes[0][box[0]]
            sub_vals = self.values[box[0]]
            if len(sub_axes) >= 4:
                spl = CubicSpline(sub_axes, sub_vals)
                g = spl(pts[:, 0], 1)
                g[~self._inside_box(pts)] = np.nan
                return g.reshape(-1, 1)
        # central differences of the interpolant at half the local mesh step
        h = np.array([0.5 * float(np.min(np.diff(a))) for a in self.axes])
        g = np.empty((pts.shape[0], self.dim))
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = h[i]
            fp = self._raw(pts + e, 0)
            fm = self._raw(pts - e, 0)
            g[:, i] = (fp - fm) / (2 * h[i])
        return g


@dataclass(frozen=True)
class ConvexityCertificate:
    """Largest α with ∇²f ⪰ −α·I over the probe set (exact for quadratics)."""

    alpha: float
    probe_points: int
    exact: bool

    def is_one_minus_c_convex(self, c: float) -> bool:
        return self.alpha <= 1.0 - c


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------

def evaluate(density: PotentialDensity, x, order: int = 0):
    return density.evaluate(x, order)


def log_partition(density: PotentialDensity, grid: QuadratureGrid) -> float:
    """log ∫e⁻ᶠdβ over the grid, computed fully in log space."""
    f = density.evaluate(grid.nodes, 0)
    with np.errstate(divide="ignore"):
        logw = np.log(grid.weights)
    ln_z = float(logsumexp(logw - f))
    if not np.isfinite(ln_z):
        raise NonIntegrable(f"log partition {ln_z} on {grid.scheme} grid")
    return ln_z


def normalize(density: PotentialDensity, grid: QuadratureGrid) -> PotentialDensity:
    """Shift log_norm so that ∫e⁻ᶠdβ = 1 on the given grid."""
    ln_z = log_partition(density, grid)
    return density.with_log_norm(density.log_norm + ln_z)


def require_normalized(density: PotentialDensity, grid: QuadratureGrid,
                       tol: float = NORMALIZATION_TOL) -> None:
    ln_z = log_partition(density, grid)
    if abs(ln_z) > tol:
        raise NotNormalized(
            f"∫e⁻ᶠdβ = exp({ln_z:.3e}) differs from 1 beyond tol {tol:g}"
        )


def density_log_masses(density: PotentialDensity, grid: QuadratureGrid) -> np.ndarray:
    """log(wᵢ·e⁻ᶠ⁽ˣⁱ⁾) per node — the log-domain integrand of E_ρ."""
    f = density.evaluate(grid.nodes, 0)
    with np.errstate(divide="ignore"):
        logw = np.log(grid.weights)
    return logw - f


def expectation(density: PotentialDensity, grid: QuadratureGrid,
                values: np.ndarray) -> float:
    """E_ρ[h] = Σᵢ wᵢ e⁻ᶠ⁽ˣⁱ⁾ h(xᵢ) for a normalized density."""
    lm = density_log_masses(density, grid)
    values = np.asarray(values, dtype=float)
    mass = np.exp(lm)
    return float(np.sum(mass * values))


def relative_entropy(m1: PotentialDensity, m2: PotentialDensity,
                     grid: QuadratureGrid) -> float:
    """H(m1|m2) = ∫ log(dm1/dm2) dm1 = Σ w·e^{−f₁}·(f₂ − f₁).

    Returns ``float("inf")`` when m1 carries mass where m2 vanishes.
    """
    if m1.dim != m2.dim:
        raise DimensionMismatch(f"dims {m1.dim} vs {m2.dim}")
    require_normalized(m1, grid)
    require_normalized(m2, grid)
    f1 = m1.evaluate(grid.nodes, 0)
    f2 = m2.evaluate(grid.nodes, 0)
    with np.errstate(divide="ignore"):
        logw = np.log(grid.weights)
    t = np.exp(logw - f1)
    carrying = t > 0
    if np.any(carrying & np.isposinf(f2)):
        return math.inf
    diff = np.where(carrying, f2 - f1, 0.0)
    h = float(np.sum(t * np.where(carrying, diff, 0.0)))
    if math.isnan(h):
        return math.inf
    return h


def fisher_information(density: PotentialDensity, grid: QuadratureGrid) -> float:
    """∫|∇f|² e⁻ᶠ dβ ≥ 0."""
    require_normalized(density, grid)
    f, g = density.evaluate(grid.nodes, 1)
    with np.errstate(divide="ignore"):
        logw = np.log(grid.weights)
    t = np.exp(logw - f)
    sq = np.einsum("ni,ni->n", g, g)
    return float(np.sum(t * np.where(t > 0, sq, 0.0)))


def default_probes(dim: int, radius: float = 4.0, per_axis: int = 9) -> np.ndarray:
    """Tensor probe lattice in [−radius, radius]^dim for convexity scans."""
    axis = np.linspace(-radius, radius, per_axis)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def convexity_modulus(density: PotentialDensity,
                      probes: np.ndarray | None = None) -> ConvexityCertificate:
    """α = max over probes of −λ_min(∇²f); exact and probe-free for quadratics."""
    if density.family == QUADRATIC:
        eig = np.linalg.eigvalsh(density.quad)
        return ConvexityCertificate(alpha=float(-eig[0]), probe_points=0, exact=True)
    if not density.supports_order(2):
        raise UnsupportedOrder(
            f"{density.family} family has no Hessian available for convexity probing"
        )
    if probes is None:
        probes = default_probes(density.dim)
    probes = _as_points(probes, density.dim)
    _, _, h = density.evaluate(probes, 2)
    lam_min = np.linalg.eigvalsh(h)[:, 0]
    return ConvexityCertificate(
        alpha=float(np.max(-lam_min)), probe_points=probes.shape[0], exact=False
    )


# ---------------------------------------------------------------------------
# Gaussian helpers
# ---------------------------------------------------------------------------

def standard_gaussian(dim: int) -> QuadraticPotential:
    """f ≡ 0: the reference measure itself."""
    return QuadraticPotential(dim=dim, quad=np.zeros((dim, dim)))


def gaussian_potential(mean, cov) -> QuadraticPotential:
    """Exactly-normalized potential of N(mean, cov) relative to β.

    f(x) = ½(x−m)ᵀΣ⁻¹(x−m) − ½|x|² + ½ log det Σ.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    dim = mean.shape[0]
    prec = np.linalg.inv(cov)
    prec = 0.5 * (prec + prec.T)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance must be positive-definite")
    quad = prec - np.eye(dim)
    lin = -prec @ mean
    const = 0.5 * float(mean @ prec @ mean) + 0.5 * float(logdet)
    return QuadraticPotential(dim=dim, quad=quad, lin=lin, const=const)


def gaussian_1d(mean: float = 0.0, var: float = 1.0) -> QuadraticPotential:
    return gaussian_potential([mean], [[var]])


def quadratic_mean_cov(density: QuadraticPotential) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the Gaussian with potential ½xᵀQx + bᵀx + c."""
    if density.family != QUADRATIC:
        raise ValueError("mean/covariance extraction needs the quadratic family")
    prec = density.quad + np.eye(density.dim)
    eig = np.linalg.eigvalsh(prec)
    if eig[0] <= 0:
        raise NonIntegrable("quadratic potential is not integrable against β")
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = -cov @ density.lin
    return mean, cov


def tabulate(density: PotentialDensity, axes: tuple[np.ndarray, ...],
             with_gradient: bool = False) -> TabulatedPotential:
    """Sample a density onto a tensor mesh as a grid-tabulated family member."""
    axes = tuple(np.asarray(a, dtype=float).reshape(-1) for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    shape = tuple(len(a) for a in axes)
    if with_gradient:
        f, g = density.evaluate(pts, 1)
        grads = tuple(g[:, i].reshape(shape) for i in range(len(axes)))
    else:
        f = density.evaluate(pts, 0)
        grads = None
    return TabulatedPotential(
        dim=len(axes), axes=axes, values=f.reshape(shape), grad_values=grads
    )


# ---------------------------------------------------------------------------
# CSV interchange: header x_1,...,x_n,f — rows in C order over a tensor mesh
# ---------------------------------------------------------------------------

def write_density_csv(path, density: TabulatedPotential) -> None:
    if density.family != GRID_TABULATED:
        raise ValueError("CSV export is defined for grid-tabulated densities")
    mesh = np.meshgrid(*density.axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    flat = (density.values + density.log_norm).reshape(-1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{i + 1}" for i in range(density.dim)] + ["f"])
        for row, val in zip(pts, flat):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(val))])


def read_density_csv(path) -> TabulatedPotential:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    dim = len(header) - 1
    if dim < 1 or header[-1] != "f" or header[:-1] != [f"x_{i + 1}" for i in range(dim)]:
        raise ValueError(f"unexpected density CSV header {header}")
    data = np.asarray(rows, dtype=float)
    axes = tuple(np.unique(data[:, i]) for i in range(dim))
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != data.shape[0]:
        raise ValueError("density CSV rows do not form a full tensor mesh")
    order = np.lexsort(tuple(data[:, i] for i in reversed(range(dim))))
    values = data[order, -1].reshape(shape)
    return TabulatedPotential(dim=dim, axes=axes, values=values)
