"""Weights, finite positive measures, mollification and weighted norms."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .frac_ops import Grid, cell_average_power

PROFILES = ("pure_power", "two_regime", "regularized")


class HypothesisError(ValueError):
    """Parameters outside the admissible range of the model; ``clause`` names the violated condition."""

    def __init__(self, clause: str, detail: str = ""):
        self.clause = clause
        super().__init__(f"hypothesis violated: {clause}" + (f" ({detail})" if detail else ""))


def check_hypotheses(d: int, s: float, m: float | None = None, gamma: float = 0.0, gamma0: float = 0.0):
    """Raise :class:`HypothesisError` unless d > 2s, γ ∈ [0,2s) ∩ [0,d-2s], γ0 ∈ [0,γ], m > 1."""
    if not 0 < s < 1:
        raise HypothesisError("s ∈ (0,1)", f"s={s}")
    if not d > 2 * s:
        raise HypothesisError("d > 2s", f"d={d}, s={s}")
    if not (0 <= gamma < 2 * s):
        raise HypothesisError("γ ∈ [0,2s)", f"γ={gamma}, s={s}")
    if gamma > d - 2 * s + 1e-15:
        raise HypothesisError("γ ∈ [0,d-2s]", f"γ={gamma}, d-2s={d - 2 * s}")
    if not (0 <= gamma0 <= gamma):
        raise HypothesisError("γ0 ∈ [0,γ]", f"γ0={gamma0}, γ={gamma}")
    if m is not None and not m > 1:
        raise HypothesisError("m > 1", f"m={m}")


@dataclass(frozen=True)
class WeightSpec:
    """Radial weight with inner exponent ``gamma0`` on the unit ball and outer exponent ``gamma``.

    ``pure_power`` is ``|x|^{-γ}`` (so ``γ0 = γ``); ``two_regime`` switches from
    ``|x|^{-γ0}`` to ``|x|^{-γ}`` at ``|x| = 1``; ``regularized`` (or any profile
    with ``eta > 0``) replaces the inner singularity by ``(|x|²+η²)^{-γ0/2}``.
    The profiles have unit prefactor, so the bands require ``c <= 1 <= C``.
    """

    gamma0: float = 0.0
    gamma: float = 0.0
    c: float = 1.0
    C: float = 1.0
    profile: str = "pure_power"
    eta: float = 0.0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown weight profile {self.profile!r}; choose from {PROFILES}")
        if not (0 < self.c <= 1 <= self.C):
            raise ValueError(f"bounds must satisfy 0 < c <= 1 <= C, got c={self.c}, C={self.C}")
        if self.eta < 0:
            raise ValueError("regularization level must be nonnegative")
        if self.gamma < 0 or self.gamma0 < 0:
            raise ValueError("exponents must be nonnegative")
        if self.profile == "pure_power" and self.gamma0 != self.gamma:
            raise ValueError("a pure power weight has gamma0 == gamma")
        if self.profile == "regularized" and self.eta == 0 and self.gamma0 > 0:
            raise ValueError("the regularized profile needs eta > 0")

    @classmethod
    def from_mapping(cls, doc: dict) -> "WeightSpec":
        keys = ("gamma0", "gamma", "c", "C", "profile", "eta")
        return cls(**{k: doc[k] for k in keys if k in doc})

    def validate(self, d: int, s: float):
        check_hypotheses(d, s, gamma=self.gamma, gamma0=self.gamma0)

    def with_eta(self, eta: float) -> "WeightSpec":
        profile = "two_regime" if self.profile == "regularized" and eta == 0 else self.profile
        return WeightSpec(self.gamma0, self.gamma, self.c, self.C, profile, eta)

    def profile_value(self, r: np.ndarray) -> np.ndarray:
        """Weight at radii ``r > 0`` (no origin handling)."""
        r = np.asarray(r, dtype=float)
        base = np.where(r <= 1.0, r ** -self.gamma0, r ** -self.gamma)
        if self.eta > 0:
            base = base * (r * r / (r * r + self.eta**2)) ** (self.gamma0 / 2)
        return base


def eval_weight(spec: WeightSpec, grid: Grid, s: float | None = None) -> np.ndarray:
    """Weight at the nodes; the origin node gets the cell average of ``|x|^{-γ0}``.

    When ``s`` is given the exponents are checked against the model hypotheses.
    """
    if s is not None:
        spec.validate(grid.d, s)
    r = grid.radius
    origin = r == 0
    rho = spec.profile_value(np.where(origin, 1.0, r))
    if spec.eta > 0:
        rho[origin] = spec.eta ** -spec.gamma0
    else:
        rho[origin] = cell_average_power(spec.gamma0, grid.h, grid.d)
    return rho


def weight_band_violation(spec: WeightSpec, rho: np.ndarray, grid: Grid) -> float:
    """Largest relative excursion of ρ outside ``[c r^{-γ·}, C r^{-γ·}]`` at non-origin nodes (0 if inside)."""
    r = grid.radius
    sel = r > 0
    expo = np.where(r[sel] <= 1, spec.gamma0, spec.gamma)
    ref = r[sel] ** -expo
    lower = np.maximum(spec.c * ref - rho[sel], 0) / ref
    upper = np.maximum(rho[sel] - spec.C * ref, 0) / ref
    return float(max(lower.max(initial=0), upper.max(initial=0)))


@dataclass(frozen=True)
class MeasureSpec:
    """Finitely many atoms plus an optional nonnegative density on a grid."""

    atoms: tuple = ()
    density: np.ndarray | None = field(default=None, compare=False)
    grid: Grid | None = None

    def __post_init__(self):
        atoms = []
        for loc, mass in self.atoms:
            loc = tuple(float(v) for v in np.atleast_1d(loc))
            if not mass > 0:
                raise ValueError(f"atom masses must be positive, got {mass}")
            atoms.append((loc, float(mass)))
        object.__setattr__(self, "atoms", tuple(atoms))
        if self.density is not None:
            dens = np.asarray(self.density, dtype=float)
            if self.grid is None:
                raise ValueError("a density needs its grid")
            if dens.shape != self.grid.shape:
                raise ValueError("density shape does not match the grid")
            if np.any(dens < 0) or not np.all(np.isfinite(dens)):
                raise ValueError("density must be finite and nonnegative")
            dens = dens.copy()
            dens.setflags(write=False)
            object.__setattr__(self, "density", dens)
        if self.grid is not None:
            for loc, _ in self.atoms:
                if len(loc) != self.grid.d:
                    raise ValueError("atom location dimension does not match the grid")

    @property
    def atom_mass(self) -> float:
        return float(sum(m for _, m in self.atoms))

    @property
    def density_mass(self) -> float:
        if self.density is None:
            return 0.0
        return self.grid.integrate(self.density)

    @property
    def total_mass(self) -> float:
        return self.atom_mass + self.density_mass

    @classmethod
    def delta(cls, mass: float = 1.0, at=None, grid: Grid | None = None) -> "MeasureSpec":
        d = grid.d if grid is not None else 1
        loc = (0.0,) * d if at is None else at
        return cls(atoms=((loc, mass),), grid=grid)

    @classmethod
    def from_density(cls, density: np.ndarray, grid: Grid) -> "MeasureSpec":
        return cls(density=density, grid=grid)

    @classmethod
    def from_json(cls, doc: dict | str | Path, grid: Grid, base_dir: Path | None = None) -> "MeasureSpec":
        """``{"atoms": [{"x": ..., "mass": ...}], "density_csv": optional path}``."""
        if isinstance(doc, (str, Path)):
            path = Path(doc)
            base_dir = path.parent if base_dir is None else base_dir
            doc = json.loads(path.read_text())
        atoms = tuple((a["x"], a["mass"]) for a in doc.get("atoms", []))
        density = None
        if doc.get("density_csv"):
            p = Path(doc["density_csv"])
            if not p.is_absolute() and base_dir is not None:
                p = Path(base_dir) / p
            density = read_field_csv(p, grid)
        if not atoms and density is None:
            raise ValueError("measure has neither atoms nor a density")
        return cls(atoms=atoms, density=density, grid=grid)

    def to_json(self) -> dict:
        doc = {"atoms": [{"x": list(loc) if len(loc) > 1 else loc[0], "mass": m} for loc, m in self.atoms]}
        doc["total_mass"] = self.total_mass
        return doc

    def integrate(self, test: Callable[[np.ndarray], np.ndarray]) -> float:
        """``∫ φ dμ`` for a test function on ``(N, d)`` point arrays."""
        total = 0.0
        if self.atoms:
            pts = np.array([loc for loc, _ in self.atoms])
            masses = np.array([m for _, m in self.atoms])
            total += float(np.dot(np.asarray(test(pts), dtype=float), masses))
        if self.density is not None:
            vals = np.asarray(test(self.grid.points), dtype=float).reshape(self.grid.shape)
            total += self.grid.integrate(vals * self.density)
        return total


@dataclass(frozen=True)
class Mollifier:
    """``ψ_ε(x) = ε^{-d} ψ(x/ε)`` with ``ψ ∝ exp(-1/(1-|x|²))`` on the unit ball.

    The discrete kernel is renormalized on the lattice so its cell-volume sum is 1.
    """

    eps: float
    profile: str = "bump"

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("mollifier scale must be positive")
        if self.profile != "bump":
            raise ValueError(f"unknown mollifier profile {self.profile!r}")

    @staticmethod
    def shape(r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        inside = r < 1
        out = np.zeros_like(r)
        out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
        return out

    def bump(self, grid: Grid, centre) -> np.ndarray:
        centre = np.atleast_1d(np.asarray(centre, dtype=float))
        r = np.sqrt(sum((c - a) ** 2 for c, a in zip(grid.coords, centre)))
        vals = self.shape(r / self.eps)
        total = grid.integrate(vals)
        if total <= 0:
            raise ValueError("mollifier bump misses every node")
        return vals / total

    def stencil(self, grid: Grid) -> np.ndarray:
        w = int(np.ceil(self.eps / grid.h))
        off = grid.h * np.arange(-w, w + 1)
        mesh = np.meshgrid(*([off] * grid.d), indexing="ij")
        vals = self.shape(np.sqrt(sum(c * c for c in mesh)) / self.eps)
        return vals / vals.sum()


def mollify_measure(mu: MeasureSpec, moll: Mollifier, grid: Grid) -> np.ndarray:
    """Density of ``ψ_ε * μ`` on ``grid``; its discrete mass equals ``μ``'s."""
    if moll.eps < 2 * grid.h:
        raise ValueError(f"mollifier scale {moll.eps} below twice the spacing {grid.h}")
    out = grid.zeros()
    for loc, mass in mu.atoms:
        loc = np.atleast_1d(np.asarray(loc, dtype=float))
        if np.any(np.abs(loc) + moll.eps >= grid.L):
            raise ValueError(f"mollified atom at {tuple(loc)} leaves the box")
        out += mass * moll.bump(grid, loc)
    if mu.density is not None:
        if mu.grid != grid:
            raise ValueError("density lives on a different grid")
        out += ndimage.convolve(mu.density, moll.stencil(grid), mode="wrap")
    return out


def weighted_norm(values: np.ndarray, p: float, weight: np.ndarray, grid: Grid) -> float:
    """``(Σ |f|^p ρ h^d)^{1/p}``; ``p = inf`` gives ``max |f|``."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    a = np.abs(np.asarray(values, dtype=float))
    if np.isinf(p):
        return float(a.max(initial=0.0))
    if p == 1:
        return float(np.sum(a * weight) * grid.cell_volume)
    return float((np.sum(a**p * weight) * grid.cell_volume) ** (1.0 / p))


TestFunction = Callable[[np.ndarray], np.ndarray]


def default_test_bank(d: int, L: float) -> list[TestFunction]:
    """Constant 1, Gaussians at 8 centres and 3 widths, and clipped coordinate ramps."""
    bank: list[TestFunction] = [lambda p: np.ones(len(p))]
    angles = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    if d == 1:
        centres = [np.array([c]) for c in np.linspace(-0.5, 0.5, 8) * L / 2]
    else:
        centres = [0.2 * L * np.array([np.cos(a), np.sin(a)]) * (0.5 + (i % 2)) for i, a in enumerate(angles)]
    for c in centres:
        for w in (0.25, 1.0, 4.0):
            bank.append(lambda p, c=c, w=w: np.exp(-np.sum((p - c) ** 2, axis=1) / (2 * w * w)))
    for ax in range(d):
        for scale in (1.0, 4.0):
            bank.append(lambda p, ax=ax, scale=scale: np.clip(p[:, ax] / scale, -1.0, 1.0))
    return bank


def weakstar_gap(mu: MeasureSpec, nu: MeasureSpec, testbank: Sequence[TestFunction]) -> float:
    """``max_φ |∫φ dμ - ∫φ dν|`` over the bank."""
    if len(testbank) == 0:
        raise ValueError("test bank is empty")
    return max(abs(mu.integrate(phi) - nu.integrate(phi)) for phi in testbank)


def write_field_csv(path: Path, values: np.ndarray, grid: Grid, name: str = "u"):
    path = Path(path)
    cols = ["x", "y"][: grid.d]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + [name])
        for pt, v in zip(grid.points, np.asarray(values).ravel()):
            w.writerow([repr(float(c)) for c in pt] + [repr(float(v))])


def read_field_csv(path: Path, grid: Grid) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (grid.n**grid.d, grid.d + 1):
        raise ValueError(f"{path} does not hold a field on this grid")
    if not np.allclose(data[:, : grid.d], grid.points, atol=1e-9 * grid.L):
        raise ValueError(f"{path} node coordinates do not match the grid")
    return data[:, -1].reshape(grid.shape)
