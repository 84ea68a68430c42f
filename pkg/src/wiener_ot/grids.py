"""Quadrature grids for integration against the standard Gaussian on ℝⁿ.

Three schemes:

* ``gauss-hermite-tensor`` — tensor product of 1-D Gauss–Hermite rules,
  transformed to the probabilists' weight: nodes z = √2·x, weights w/√π,
  so that Σᵢ wᵢ h(zᵢ) ≈ ∫ h dβ with β = N(0, Iₙ).  Weights sum to 1.
* ``truncated-uniform`` — a uniform tensor mesh on [−R, R]ⁿ carrying
  trapezoid × Gaussian-density weights.  These grids exist for tabulating
  fields for finite differences; their weights are deliberately *not*
  renormalized (the truncation and O(h²) trapezoid defects stay visible).
* ``monte-carlo`` — seeded standard-normal draws with equal weights 1/N.

All grids are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import DimensionTooLarge, GridNotUniform, ResolutionTooSmall

GAUSS_HERMITE = "gauss-hermite-tensor"
TRUNCATED_UNIFORM = "truncated-uniform"
MONTE_CARLO = "monte-carlo"
SCHEMES = (GAUSS_HERMITE, TRUNCATED_UNIFORM, MONTE_CARLO)

#: tensor grids refuse above this dimension (desk scale)
TENSOR_DIM_CAP = 4
#: and above this total node count
TENSOR_NODE_CAP = 2_000_000
#: Monte-Carlo handles moderately higher dimensions
MONTE_CARLO_DIM_CAP = 10

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Nodes and weights discretizing ∫·dβ in dimension ``dim``.

    ``axes`` is set for tensor-structured schemes and gives the per-axis 1-D
    node arrays; ``nodes`` is always the full (N, dim) array in C order
    (last axis fastest), matching ``np.meshgrid(..., indexing="ij")``.
    """

    scheme: str
    dim: int
    nodes: np.ndarray
    weights: np.ndarray
    axes: tuple[np.ndarray, ...] | None = None
    truncation_radius: float | None = None
    seed: int | None = None
    is_probabilistic: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def mesh_shape(self) -> tuple[int, ...]:
        if self.axes is None:
            raise GridNotUniform(f"{self.scheme} grid has no tensor mesh structure")
        return tuple(len(a) for a in self.axes)

    @cached_property
    def spacing(self) -> float:
        """Uniform mesh spacing h; raises for non-uniform schemes."""
        if self.scheme != TRUNCATED_UNIFORM or self.axes is None:
            raise GridNotUniform(f"spacing undefined for scheme {self.scheme!r}")
        h = float(self.axes[0][1] - self.axes[0][0])
        for a in self.axes:
            d = np.diff(a)
            if not np.allclose(d, h, rtol=1e-10, atol=1e-14):
                raise GridNotUniform("mesh spacing differs across axes")
        return h

    def reshape(self, values: np.ndarray) -> np.ndarray:
        """View flat node-indexed values as a mesh-shaped array."""
        values = np.asarray(values)
        return values.reshape(self.mesh_shape + values.shape[1:])


def _tensor_nodes(axes: tuple[np.ndarray, ...]) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def _tensor_weights(w1d: list[np.ndarray]) -> np.ndarray:
    w = w1d[0]
    for wi in w1d[1:]:
        w = np.multiply.outer(w, wi)
    return w.reshape(-1)


def build_grid(
    scheme: str,
    dim: int,
    resolution: int,
    truncation_radius: float = 6.0,
    seed: int | None = None,
) -> QuadratureGrid:
    """Construct a quadrature grid.

    ``resolution`` is the node count per axis for tensor schemes and the
    sample count for Monte-Carlo.  Monte-Carlo requires an explicit seed so
    that every run is reproducible from its config.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown grid scheme {scheme!r}; expected one of {SCHEMES}")
    if dim < 1:
        raise ValueError(f"dim must be ≥ 1, got {dim}")
    if resolution < 2:
        raise ResolutionTooSmall(f"resolution {resolution} < 2")

    if scheme == GAUSS_HERMITE:
        _check_tensor_caps(dim, resolution)
        x, w = hermgauss(resolution)
        axis = np.sqrt(2.0) * x
        w1 = w / np.sqrt(np.pi)
        axes = tuple(axis.copy() for _ in range(dim))
        nodes = _tensor_nodes(axes)
        weights = _tensor_weights([w1] * dim)
        return QuadratureGrid(
            scheme=scheme, dim=dim, nodes=nodes, weights=weights, axes=axes,
            is_probabilistic=True,
        )

    if scheme == TRUNCATED_UNIFORM:
        if truncation_radius <= 0:
            raise ValueError("truncation_radius must be positive")
        _check_tensor_caps(dim, resolution)
        axis = np.linspace(-truncation_radius, truncation_radius, resolution)
        h = axis[1] - axis[0]
        trap = np.full(resolution, h)
        trap[0] = trap[-1] = h / 2.0
        gauss = np.exp(-0.5 * axis**2 - 0.5 * _LOG_2PI)
        w1 = trap * gauss
        axes = tuple(axis.copy() for _ in range(dim))
        nodes = _tensor_nodes(axes)
        weights = _tensor_weights([w1] * dim)
        return QuadratureGrid(
            scheme=scheme, dim=dim, nodes=nodes, weights=weights, axes=axes,
            truncation_radius=float(truncation_radius), is_probabilistic=False,
        )

    # monte-carlo
    if dim > MONTE_CARLO_DIM_CAP:
        raise DimensionTooLarge(f"monte-carlo dim {dim} > cap {MONTE_CARLO_DIM_CAP}")
    if seed is None:
        raise ValueError("monte-carlo grids require an explicit seed")
    rng = np.random.default_rng(seed)
    nodes = rng.standard_normal((resolution, dim))
    weights = np.full(resolution, 1.0 / resolution)
    return QuadratureGrid(
        scheme=scheme, dim=dim, nodes=nodes, weights=weights, axes=None,
        seed=int(seed), is_probabilistic=True,
    )


def _check_tensor_caps(dim: int, resolution: int) -> None:
    if dim > TENSOR_DIM_CAP:
        raise DimensionTooLarge(f"tensor grid dim {dim} > cap {TENSOR_DIM_CAP}")
    if resolution**dim > TENSOR_NODE_CAP:
        raise DimensionTooLarge(
            f"tensor grid would hold {resolution**dim} nodes > cap {TENSOR_NODE_CAP}"
        )


def integrate(grid: QuadratureGrid, values: np.ndarray) -> float:
    """Σᵢ wᵢ·valuesᵢ — the grid's approximation of ∫ values dβ."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != grid.n_nodes:
        raise ValueError(f"got {values.shape[0]} values for {grid.n_nodes} nodes")
    return float(np.dot(grid.weights, values))


def subsample_uniform(grid: QuadratureGrid, stride: int) -> QuadratureGrid:
    """Every ``stride``-th node per axis of a truncated-uniform grid.

    Requires (resolution − 1) divisible by stride so endpoints are kept; used
    for Richardson error-floor passes at spacing stride·h.
    """
    if grid.scheme != TRUNCATED_UNIFORM or grid.axes is None:
        raise GridNotUniform("subsampling is defined for truncated-uniform grids only")
    for a in grid.axes:
        if (len(a) - 1) % stride != 0:
            raise ValueError(
                f"axis length {len(a)} incompatible with stride {stride}"
            )
    res = (len(grid.axes[0]) - 1) // stride + 1
    return build_grid(
        TRUNCATED_UNIFORM, grid.dim, res, truncation_radius=float(grid.truncation_radius)
    )


def gauss_hermite_1d(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """1-D probabilists' Gauss–Hermite rule: nodes z, weights summing to 1."""
    x, w = hermgauss(resolution)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)
