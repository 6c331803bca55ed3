"""Truncated Fourier transform of species-resolved point densities.

Each atom is a unit Dirac mass, so for species slot ``z``

    F[w, z] = sum_a exp(-2 pi i w . f_a)

over the retained integer wave vectors ``w``.  Symmetry operations act on the
coefficient matrix by permuting rows and multiplying by phases.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .crystal import MAX_SPECIES, Crystal, SymmetryOp
from .errors import WaveSetNotClosed

N_SLOTS = MAX_SPECIES
TRUNCATIONS = ("cubic", "spherical")


@dataclass(frozen=True)
class WaveSet:
    truncation: str
    jmax: int
    vectors: np.ndarray  # (n_waves, 3) int64, lexicographic order

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def bpd(self) -> int:
        return 2 * self.jmax + 1

    @property
    def zero_index(self) -> int:
        return _index_map(self)[(0, 0, 0)]

    def index_of(self, w) -> int:
        return _index_map(self)[tuple(int(v) for v in w)]

    def __hash__(self):
        return hash((self.truncation, self.jmax))

    def __eq__(self, other):
        return (
            isinstance(other, WaveSet)
            and self.truncation == other.truncation
            and self.jmax == other.jmax
        )


@lru_cache(maxsize=32)
def _index_map_cached(truncation: str, jmax: int) -> dict:
    ws = build_wave_set(truncation, jmax)
    return {tuple(int(v) for v in w): i for i, w in enumerate(ws.vectors)}


def _index_map(ws: WaveSet) -> dict:
    return _index_map_cached(ws.truncation, ws.jmax)


@lru_cache(maxsize=32)
def _vectors(truncation: str, jmax: int) -> np.ndarray:
    rng = range(-jmax, jmax + 1)
    # itertools.product over a sorted range is already lexicographic
    cube = np.array(list(itertools.product(rng, rng, rng)), dtype=np.int64).reshape(-1, 3)
    if truncation == "spherical":
        cube = cube[np.sum(cube * cube, axis=1) <= jmax * jmax]
    cube.setflags(write=False)
    return cube


def build_wave_set(truncation: str = "cubic", jmax: int = 4) -> WaveSet:
    if truncation not in TRUNCATIONS:
        raise ValueError(f"unknown truncation {truncation!r}")
    if jmax < 0:
        raise ValueError("jmax must be non-negative")
    return WaveSet(truncation, int(jmax), _vectors(truncation, int(jmax)))


@dataclass(frozen=True)
class FourierRepr:
    """Coefficient matrix ``(n_waves, 6)`` plus the atomic number in each slot (0 = empty)."""

    coeffs: np.ndarray
    wave_set: WaveSet
    slot_species: tuple[int, ...] = (0,) * N_SLOTS

    @property
    def counts(self) -> np.ndarray:
        return self.coeffs[self.wave_set.zero_index].real


@lru_cache(maxsize=16)
def phase_table(denominator: int) -> np.ndarray:
    """``exp(-2 pi i m / d)`` for m = 0..d-1 with exact conjugate symmetry."""
    m = np.arange(denominator)
    k = np.minimum(m, denominator - m)
    sign = np.where(m <= denominator // 2, 1.0, -1.0)
    angle = 2.0 * np.pi * k / denominator
    table = np.cos(angle) - 1j * sign * np.sin(angle)
    table[2 * k == denominator] = -1.0
    table.setflags(write=False)
    return table


def encode_numerators(numerators, denominator: int, ws: WaveSet) -> np.ndarray:
    """Fourier column for one species whose coordinates are ``numerators / denominator``."""
    num = np.asarray(numerators, dtype=np.int64).reshape(-1, 3)
    if len(num) == 0:
        return np.zeros(len(ws), dtype=np.complex128)
    phase_idx = np.mod(ws.vectors @ num.T, denominator)
    return phase_table(denominator)[phase_idx].sum(axis=1)


def encode_fractional(frac, ws: WaveSet) -> np.ndarray:
    """Fourier column for arbitrary real fractional coordinates ``(n, 3)``."""
    frac = np.asarray(frac, dtype=np.float64).reshape(-1, 3)
    if len(frac) == 0:
        return np.zeros(len(ws), dtype=np.complex128)
    return np.exp(-2j * np.pi * (ws.vectors @ frac.T)).sum(axis=1)


def identity_slots(c: Crystal) -> tuple[int, ...]:
    return tuple(range(len(c.species)))


def fourier_forward(c: Crystal, ws: WaveSet, slots=None) -> FourierRepr:
    """Coefficient matrix of ``c``; ``slots[i]`` is the column for species ``i``."""
    slots = identity_slots(c) if slots is None else tuple(slots)
    coeffs = np.zeros((len(ws), N_SLOTS), dtype=np.complex128)
    slot_species = [0] * N_SLOTS
    for z, num, slot in zip(c.species, c.coords, slots):
        coeffs[:, slot] = encode_numerators(num, c.grid_denominator, ws)
        slot_species[slot] = z
    coeffs[ws.zero_index] = coeffs[ws.zero_index].real
    return FourierRepr(coeffs, ws, tuple(slot_species))


def _rotated_rows(ws: WaveSet, rotation: np.ndarray) -> np.ndarray:
    """Row index of ``M^T w`` for every ``w``; raises when it leaves the set."""
    lookup = _index_map(ws)
    mapped = ws.vectors @ np.asarray(rotation, dtype=np.int64)  # rows are (M^T w)^T
    try:
        return np.array([lookup[tuple(int(v) for v in row)] for row in mapped], dtype=np.int64)
    except KeyError as exc:
        raise WaveSetNotClosed(f"M^T maps a retained wave vector to {exc.args[0]}") from None


def _translation_phase(ws: WaveSet, op: SymmetryOp) -> np.ndarray:
    # w . delta is a rational with denominator dividing 12
    num12 = ws.vectors @ np.array([int(t * 12) for t in op.translation], dtype=np.int64)
    return phase_table(12)[np.mod(num12, 12)]


def symmetry_transform(fr: FourierRepr, op: SymmetryOp) -> FourierRepr:
    """Coefficients of the transformed configuration: ``F'_w = exp(-2 pi i w.delta) F_{M^T w}``."""
    rows = _rotated_rows(fr.wave_set, op.rotation)
    phase = _translation_phase(fr.wave_set, op)
    return FourierRepr(phase[:, None] * fr.coeffs[rows], fr.wave_set, fr.slot_species)


def symmetry_residual(fr: FourierRepr, op: SymmetryOp) -> float:
    """Max-abs violation of the symmetry relation; ~0 iff ``op`` is a symmetry."""
    return float(np.max(np.abs(fr.coeffs - symmetry_transform(fr, op).coeffs)))
