"""Rotation-invariant lattice parameterization.

A lattice matrix ``m`` (columns are lattice vectors, in Angstrom) factors as
``m = r @ expm(s)`` with ``r`` a proper rotation and ``s`` symmetric.  The six
independent entries of ``s`` are the lattice coefficients used by the models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularLattice

# packing order of the six independent entries of the symmetric log
PACK_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))

_SINGULAR_RTOL = 1e-12


@dataclass(frozen=True)
class LatticeLog:
    s: np.ndarray

    @property
    def coeffs(self) -> np.ndarray:
        return pack(self.s)

    @classmethod
    def from_coeffs(cls, coeffs) -> "LatticeLog":
        return cls(unpack(coeffs))


def pack(s: np.ndarray) -> np.ndarray:
    return np.array([s[i, j] for i, j in PACK_INDEX], dtype=np.float64)


def unpack(coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (6,):
        raise ValueError(f"expected 6 lattice coefficients, got shape {coeffs.shape}")
    s = np.empty((3, 3))
    for value, (i, j) in zip(coeffs, PACK_INDEX):
        s[i, j] = s[j, i] = value
    return s


def _svd_checked(m):
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise SingularLattice("lattice must be a finite 3x3 matrix")
    u, sig, vt = np.linalg.svd(m)
    if sig[-1] < _SINGULAR_RTOL * sig[0] or sig[0] == 0.0:
        raise SingularLattice(f"singular values {sig} are degenerate")
    if np.linalg.det(m) <= 0.0:
        raise SingularLattice("lattice must be right-handed (det > 0)")
    return u, sig, vt


def polar_decompose(m) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(r, p)`` with ``m = r @ p``, ``r`` in SO(3), ``p`` SPD."""
    u, sig, vt = _svd_checked(m)
    r = u @ vt
    p = vt.T @ np.diag(sig) @ vt
    p = 0.5 * (p + p.T)
    return r, p


def lattice_to_log(m) -> LatticeLog:
    _, sig, vt = _svd_checked(m)
    # V diag(log sigma) V^T does not depend on the sign/basis choice of V
    s = vt.T @ np.diag(np.log(sig)) @ vt
    return LatticeLog(0.5 * (s + s.T))


def log_to_lattice(log) -> np.ndarray:
    """Canonical lattice ``expm(s)`` (rotation fixed to identity)."""
    s = log.s if isinstance(log, LatticeLog) else np.asarray(log, dtype=np.float64)
    if s.shape == (6,):
        s = unpack(s)
    if not np.allclose(s, s.T, rtol=0.0, atol=1e-12):
        raise ValueError("log-lattice matrix must be symmetric")
    evals, v = np.linalg.eigh(0.5 * (s + s.T))
    m = v @ np.diag(np.exp(evals)) @ v.T
    return 0.5 * (m + m.T)
