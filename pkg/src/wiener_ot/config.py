"""Experiment configuration: TOML parsing, validation, and object building.

A config names a catalog of densities and grids, then an ordered job list
referencing them by name.  Validation happens up front so a bad config never
starts a run; every defaulted field is echoed back so the manifest fully
describes what executed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .densities import (
    MixtureLogPotential,
    PotentialDensity,
    SeparablePotential,
    gaussian_potential,
    normalize,
    standard_gaussian,
)
from .errors import ConfigInvalid
from .grids import GAUSS_HERMITE, TRUNCATED_UNIFORM, QuadratureGrid, build_grid

JOB_KINDS = ("solve", "verify-ma", "verify-dual", "verify-bound", "cascade",
             "inequalities", "oracle-compare")

DENSITY_KINDS = ("standard", "gaussian", "separable", "mixture")

GRID_KINDS = (GAUSS_HERMITE, TRUNCATED_UNIFORM)

_NORMALIZE_RES = {1: 96, 2: 40, 3: 16, 4: 10}


@dataclass(eq=False)
class JobSpec:
    name: str
    kind: str
    options: dict = field(default_factory=dict)


@dataclass(eq=False)
class ExperimentConfig:
    densities: dict
    grids: dict
    jobs: list[JobSpec]
    seed: int = 0
    output_dir: str = "runs"

    def echo(self) -> dict:
        """Fully-resolved form of the config with all defaults filled in."""
        return {
            "densities": self.densities,
            "grids": self.grids,
            "jobs": [
                {"name": j.name, "kind": j.kind, "options": j.options}
                for j in self.jobs
            ],
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    def content_hash(self) -> str:
        canonical = json.dumps(self.echo(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigInvalid(f"config does not parse: {exc}") from exc
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    densities = raw.get("densities", {})
    grids = raw.get("grids", {})
    jobs_raw = raw.get("jobs", [])
    seed = raw.get("seed", 0)
    output_dir = raw.get("output_dir", "runs")

    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigInvalid(f"seed must be a nonnegative integer, got {seed!r}")
    if not isinstance(densities, dict) or not isinstance(grids, dict):
        raise ConfigInvalid("densities and grids must be tables keyed by name")
    if not isinstance(jobs_raw, list):
        raise ConfigInvalid("jobs must be an array of tables")

    jobs = []
    seen = set()
    for i, entry in enumerate(jobs_raw):
        if not isinstance(entry, dict):
            raise ConfigInvalid(f"job #{i} is not a table")
        name = entry.get("name", f"job{i}")
        kind = entry.get("kind")
        if not _safe_name(name):
            raise ConfigInvalid(
                f"job name {name!r} must match [A-Za-z0-9_-]+ for file paths")
        if name in seen:
            raise ConfigInvalid(f"duplicate job name {name!r}")
        seen.add(name)
        if kind not in JOB_KINDS:
            raise ConfigInvalid(
                f"job {name!r} has unknown kind {kind!r}; choose from {JOB_KINDS}")
        options = {k: v for k, v in entry.items() if k not in ("name", "kind")}
        jobs.append(JobSpec(name=name, kind=kind, options=options))

    cfg = ExperimentConfig(densities=densities, grids=grids, jobs=jobs,
                           seed=seed, output_dir=str(output_dir))
    _validate_references(cfg)
    for name, spec in densities.items():
        _validate_density_spec(name, spec)
    for name, spec in grids.items():
        _validate_grid_spec(name, spec)
    return cfg


def _safe_name(name) -> bool:
    return (isinstance(name, str) and 0 < len(name) <= 80
            and all(c.isalnum() or c in "_-" for c in name))


_DENSITY_REF_KEYS = ("rho", "nu")
_GRID_REF_KEYS = ("grid", "target_grid", "solve_grid")


def _validate_references(cfg: ExperimentConfig) -> None:
    for job in cfg.jobs:
        for key in _DENSITY_REF_KEYS:
            ref = job.options.get(key)
            if ref is not None and ref not in cfg.densities:
                raise ConfigInvalid(
                    f"job {job.name!r} references unknown density {ref!r}")
        for key in _GRID_REF_KEYS:
            ref = job.options.get(key)
            if ref is not None and ref not in cfg.grids:
                raise ConfigInvalid(
                    f"job {job.name!r} references unknown grid {ref!r}")
        listed = job.options.get("densities")
        if listed is not None and listed != "catalog":
            if not isinstance(listed, list):
                raise ConfigInvalid(
                    f"job {job.name!r}: densities must be a list of names or 'catalog'")
            for ref in listed:
                if ref not in cfg.densities:
                    raise ConfigInvalid(
                        f"job {job.name!r} references unknown density {ref!r}")


def _validate_density_spec(name: str, spec) -> None:
    if not isinstance(spec, dict):
        raise ConfigInvalid(f"density {name!r} is not a table")
    kind = spec.get("kind")
    if kind not in DENSITY_KINDS:
        raise ConfigInvalid(
            f"density {name!r} has unknown kind {kind!r}; choose from {DENSITY_KINDS}")
    if kind == "standard" and int(spec.get("dim", 0)) < 1:
        raise ConfigInvalid(f"density {name!r}: standard needs dim >= 1")
    if kind == "gaussian" and ("mean" not in spec or "cov" not in spec):
        raise ConfigInvalid(f"density {name!r}: gaussian needs mean and cov")
    if kind == "separable" and not spec.get("coeffs"):
        raise ConfigInvalid(f"density {name!r}: separable needs coeffs")
    if kind == "mixture" and ("shifts" not in spec or "weights" not in spec):
        raise ConfigInvalid(f"density {name!r}: mixture needs shifts and weights")


def _validate_grid_spec(name: str, spec) -> None:
    if not isinstance(spec, dict):
        raise ConfigInvalid(f"grid {name!r} is not a table")
    kind = spec.get("kind")
    if kind not in GRID_KINDS:
        raise ConfigInvalid(
            f"grid {name!r} has unknown kind {kind!r}; choose from {GRID_KINDS}")
    if int(spec.get("dim", 0)) < 1 or int(spec.get("resolution", 0)) < 2:
        raise ConfigInvalid(f"grid {name!r} needs dim >= 1 and resolution >= 2")
    if kind == TRUNCATED_UNIFORM and float(spec.get("radius", 0.0)) <= 0.0:
        raise ConfigInvalid(f"grid {name!r} needs a positive radius")


def build_density(spec: dict) -> PotentialDensity:
    """Instantiate a density spec; non-closed-form families are normalized
    on a dimension-matched Gauss-Hermite grid."""
    kind = spec["kind"]
    if kind == "standard":
        return standard_gaussian(int(spec["dim"]))
    if kind == "gaussian":
        return gaussian_potential(np.asarray(spec["mean"], dtype=float),
                                  np.asarray(spec["cov"], dtype=float))
    if kind == "separable":
        coeffs = tuple([float(c) for c in comp] for comp in spec["coeffs"])
        density = SeparablePotential(dim=len(coeffs), coeffs=coeffs)
    elif kind == "mixture":
        shifts = [[float(v) for v in row] for row in spec["shifts"]]
        density = MixtureLogPotential(
            dim=len(shifts[0]), shifts=shifts,
            weights=[float(w) for w in spec["weights"]])
    else:  # pragma: no cover - rejected during validation
        raise ConfigInvalid(f"unknown density kind {kind!r}")
    res = _NORMALIZE_RES.get(density.dim, 8)
    return normalize(density, build_grid(GAUSS_HERMITE, density.dim, res))


def build_grid_spec(spec: dict) -> QuadratureGrid:
    kind = spec["kind"]
    dim = int(spec["dim"])
    resolution = int(spec["resolution"])
    if kind == TRUNCATED_UNIFORM:
        return build_grid(kind, dim, resolution,
                          truncation_radius=float(spec["radius"]))
    return build_grid(kind, dim, resolution)
