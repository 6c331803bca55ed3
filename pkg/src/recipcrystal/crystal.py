"""Crystal data model on a rational fractional-coordinate grid.

Coordinates are stored as integer numerators over ``grid_denominator`` so that
grid membership, symmetry images and recovered positions compare exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import lattice as lattice_geom
from .errors import (
    CollisionAfterSnap,
    GenerationFailure,
    InvalidDenominator,
    OffGridTranslation,
)

Z_MAX = 83
MAX_SPECIES = 6
ADMISSIBLE_TRANSLATIONS = (
    Fraction(0),
    Fraction(1, 6),
    Fraction(1, 4),
    Fraction(1, 3),
    Fraction(1, 2),
)


@dataclass(frozen=True)
class Crystal:
    """Species-resolved unit cell.

    ``species`` holds atomic numbers (strictly increasing) and ``coords`` the
    matching per-species integer arrays of shape ``(n_z, 3)``; a fractional
    coordinate is ``coords[i] / grid_denominator``.
    """

    lattice: np.ndarray
    species: tuple[int, ...]
    coords: tuple[np.ndarray, ...]
    grid_denominator: int = 48
    id: str = field(default="", compare=False)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.coords)

    @property
    def n_atoms(self) -> int:
        return sum(self.counts)

    def fractional(self, index: int) -> np.ndarray:
        return np.asarray(self.coords[index], dtype=np.float64) / self.grid_denominator

    def same_structure(self, other: "Crystal") -> bool:
        """Exact equality of species, grid and per-species coordinate sets."""
        if self.species != other.species or self.grid_denominator != other.grid_denominator:
            return False
        return all(_as_set(a) == _as_set(b) for a, b in zip(self.coords, other.coords))


@dataclass(frozen=True)
class SymmetryOp:
    rotation: np.ndarray
    translation: tuple[Fraction, Fraction, Fraction] = (Fraction(0),) * 3

    def __post_init__(self):
        rot = np.asarray(self.rotation)
        if rot.shape != (3, 3) or not np.array_equal(rot, np.round(rot)):
            raise ValueError("rotation must be a 3x3 integer matrix")
        rot = rot.astype(np.int64)
        det = round(np.linalg.det(rot))
        if abs(det) != 1:
            raise ValueError(f"rotation must be unimodular, det={det}")
        trans = tuple(Fraction(t) for t in self.translation)
        if len(trans) != 3 or any(t not in ADMISSIBLE_TRANSLATIONS for t in trans):
            raise ValueError(f"translation {trans} outside admissible set")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "SymmetryOp":
        return cls(np.eye(3, dtype=np.int64))

    @property
    def translation_array(self) -> np.ndarray:
        return np.array([float(t) for t in self.translation])


def _as_set(arr) -> set:
    return {tuple(int(v) for v in row) for row in np.asarray(arr).reshape(-1, 3)}


def _check_denominator(denominator) -> int:
    if not isinstance(denominator, (int, np.integer)) or denominator <= 0 or denominator % 12:
        raise InvalidDenominator(f"denominator must be a positive multiple of 12, got {denominator}")
    return int(denominator)


def snap_numerators(raw, denominator: int) -> np.ndarray:
    """Integer numerators of the nearest grid points, wrapped into [0, d)."""
    d = _check_denominator(denominator)
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(raw)):
        raise ValueError("fractional coordinates must be finite")
    return np.mod(np.rint(raw * d).astype(np.int64), d)


def snap_coords(raw, denominator: int) -> np.ndarray:
    """Snap fractional coordinates of a single species to the grid.

    Raises CollisionAfterSnap when two input atoms land on the same grid point.
    """
    num = snap_numerators(raw, denominator)
    if len(_as_set(num)) != len(num):
        raise CollisionAfterSnap("two atoms of one species snapped to the same grid point")
    return num / denominator


def validate_crystal(c: Crystal) -> list[str]:
    """Return every invariant violation found in ``c`` (empty when valid)."""
    problems = []
    species = tuple(c.species)
    if not 1 <= len(species) <= MAX_SPECIES:
        problems.append(
            "species limit exceeded" if len(species) > MAX_SPECIES else "no species"
        )
    if any(not 1 <= z <= Z_MAX for z in species):
        problems.append("atomic number out of range")
    if any(b <= a for a, b in zip(species, species[1:])):
        problems.append("species not strictly increasing")
    if len(c.coords) != len(species):
        problems.append("coordinate lists do not match species")
    d = c.grid_denominator
    if not isinstance(d, (int, np.integer)) or d <= 0 or d % 12:
        problems.append("invalid grid denominator")
        d = None
    for z, arr in zip(species, c.coords):
        arr = np.asarray(arr)
        if arr.ndim != 2 or arr.shape[1] != 3:
            problems.append(f"species {z}: coordinates must have shape (n, 3)")
            continue
        if len(arr) == 0:
            problems.append(f"species {z}: empty species")
        if not np.issubdtype(arr.dtype, np.integer):
            problems.append(f"species {z}: coordinates are not integer numerators")
        if d is not None and (np.any(arr < 0) or np.any(arr >= d)):
            problems.append(f"species {z}: coordinate off grid")
        if len(_as_set(arr)) != len(arr):
            problems.append(f"species {z}: duplicate site")
    try:
        lattice_geom.polar_decompose(c.lattice)
    except Exception:
        problems.append("degenerate lattice")
    return problems


def synth_crystal(
    seed: int,
    max_species: int = 6,
    max_atoms_per_species: int = 16,
    denominator: int = 48,
    min_atoms_per_species: int = 1,
) -> Crystal:
    """Deterministic random crystal for tests and toy corpora."""
    d = _check_denominator(denominator)
    if not 1 <= max_species <= MAX_SPECIES:
        raise ValueError("max_species must be in 1..6")
    if max_atoms_per_species > d**3:
        raise GenerationFailure("more atoms than grid points")
    rng = np.random.default_rng(seed)
    n_species = int(rng.integers(1, max_species + 1))
    species = tuple(int(z) for z in np.sort(rng.choice(np.arange(1, Z_MAX + 1), n_species, replace=False)))
    coords = []
    for _ in species:
        n = int(rng.integers(min_atoms_per_species, max_atoms_per_species + 1))
        flat = rng.choice(d**3, size=n, replace=False)
        coords.append(np.stack(np.unravel_index(flat, (d, d, d)), axis=1).astype(np.int64))
    coeffs = rng.uniform(-0.5, 2.5, size=6)
    lat = lattice_geom.log_to_lattice(coeffs)
    return Crystal(lat, species, tuple(coords), d, id=f"synth-{seed}")


def apply_symmetry(c: Crystal, op: SymmetryOp) -> Crystal:
    """Image of ``c`` under ``f -> M f + delta (mod 1)``."""
    d = c.grid_denominator
    shift = []
    for t in op.translation:
        num = t * d
        if num.denominator != 1:
            raise OffGridTranslation(f"translation {t} not representable on 1/{d} grid")
        shift.append(int(num))
    shift = np.array(shift, dtype=np.int64)
    new = tuple(np.mod(np.asarray(arr, dtype=np.int64) @ op.rotation.T + shift, d) for arr in c.coords)
    return Crystal(c.lattice, c.species, new, d, id=c.id)


def random_signed_permutation(rng) -> np.ndarray:
    perm = rng.permutation(3)
    signs = rng.choice([-1, 1], size=3)
    m = np.zeros((3, 3), dtype=np.int64)
    m[np.arange(3), perm] = signs
    return m


def random_symmetry_op(rng) -> SymmetryOp:
    trans = tuple(ADMISSIBLE_TRANSLATIONS[i] for i in rng.integers(0, len(ADMISSIBLE_TRANSLATIONS), 3))
    return SymmetryOp(random_signed_permutation(rng), trans)
