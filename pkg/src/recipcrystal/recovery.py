"""Exact recovery of grid coordinates from truncated Fourier coefficients.

Recovery runs per species in up to three stages:

1. pick the ``n`` largest values of the inverse-transformed density grid;
2. greedily pick one maximum at a time and subtract its exact contribution;
3. Gauss-Newton refinement of all positions on the stacked real/imaginary
   residual, then snapping to the grid.

A stage succeeds only if re-encoding the grid coordinates reproduces the input
column, so every reported success is an exact roundtrip.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import NonIntegerMultiplicity
from .reciprocal import FourierRepr, WaveSet, encode_fractional, encode_numerators, phase_table

VERIFY_TOL = 1e-6
NEWTON_TOL = 1e-8
STAGE2_MIN_PEAK = 0.5
MULTIPLICITY_TOL = 1e-6
FAILED = "failed"


@dataclass
class RecoveryResult:
    coords: np.ndarray  # (n, 3) integer numerators over gpd; empty when failed
    stage: object  # 0 (trivially empty), 1, 2, 3 or FAILED
    newton_iters: int = 0
    residual: float = float("nan")
    attempts: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.stage != FAILED


# -- density grid -----------------------------------------------------------------


def _cube(column, ws: WaveSet) -> np.ndarray:
    bpd = ws.bpd
    cube = np.zeros((bpd, bpd, bpd), dtype=np.complex128)
    idx = ws.vectors + ws.jmax
    cube[idx[:, 0], idx[:, 1], idx[:, 2]] = column
    return cube


@lru_cache(maxsize=16)
def _synthesis_matrix(jmax: int, gpd: int) -> np.ndarray:
    # E[a, j] = exp(+2 pi i a (j - jmax) / gpd)
    a = np.arange(gpd)[:, None]
    j = np.arange(-jmax, jmax + 1)[None, :]
    mat = np.conj(phase_table(gpd)[np.mod(a * j, gpd)])
    mat.setflags(write=False)
    return mat


def density_grid(column, ws: WaveSet, gpd: int) -> np.ndarray:
    """``Re(sum_w F_w exp(2 pi i w.x / gpd))`` on the full ``gpd**3`` grid (no normalization)."""
    if gpd < ws.bpd:
        raise ValueError(f"gpd={gpd} cannot resolve {ws.bpd} basis functions per dimension")
    e = _synthesis_matrix(ws.jmax, gpd)
    values = np.einsum("ai,bj,ck,ijk->abc", e, e, e, _cube(column, ws), optimize=True)
    return values.real


@lru_cache(maxsize=16)
def _kernel(truncation: str, jmax: int, gpd: int) -> np.ndarray:
    from .reciprocal import build_wave_set

    ws = build_wave_set(truncation, jmax)
    kern = density_grid(np.ones(len(ws), dtype=np.complex128), ws, gpd)
    kern.setflags(write=False)
    return kern


def _top_indices(values: np.ndarray, n: int) -> np.ndarray:
    """Grid indices of the ``n`` largest values, ties broken by lexicographic index."""
    flat = values.ravel()
    if n == 1:
        order = np.array([np.argmax(flat)])  # argmax returns the first (lowest) index
    else:
        kth = np.partition(flat, flat.size - n)[flat.size - n]
        cand = np.flatnonzero(flat >= kth)
        order = cand[np.argsort(-flat[cand], kind="stable")[:n]]
    return np.stack(np.unravel_index(order, values.shape), axis=1).astype(np.int64)


def _verify(column, numerators, gpd: int, ws: WaveSet) -> float:
    numerators = np.asarray(numerators, dtype=np.int64).reshape(-1, 3)
    if len({tuple(r) for r in numerators}) != len(numerators):
        return float("inf")
    recon = encode_numerators(numerators, gpd, ws)
    return float(np.max(np.abs(recon - column))) if len(column) else 0.0


# -- stages ------------------------------------------------------------------------


def stage1_peaks(column, ws: WaveSet, n: int, gpd: int, tol: float = VERIFY_TOL):
    """Return ``(coords, residual)``; ``coords`` is None when verification fails."""
    if n == 0:
        return np.zeros((0, 3), dtype=np.int64), 0.0
    coords = _top_indices(density_grid(column, ws, gpd), n)
    residual = _verify(column, coords, gpd, ws)
    return (coords if residual <= tol else None), residual


def stage2_greedy(column, ws: WaveSet, n: int, gpd: int, tol: float = VERIFY_TOL):
    """Sequential peak picking with exact subtraction of each atom's contribution.

    Returns ``(coords, residual, partial)`` where ``partial`` holds the atoms
    picked before any abort (used to seed stage 3).
    """
    if n == 0:
        return np.zeros((0, 3), dtype=np.int64), 0.0, np.zeros((0, 3), dtype=np.int64)
    kernel = _kernel(ws.truncation, ws.jmax, gpd)
    density = density_grid(column, ws, gpd)
    picked = []
    for _ in range(n):
        (pos,) = _top_indices(density, 1)
        if density[tuple(pos)] < STAGE2_MIN_PEAK:
            break
        picked.append(pos)
        # subtracting exp(-2 pi i w.f) from F removes a kernel centred on f
        density = density - np.roll(kernel, shift=tuple(pos), axis=(0, 1, 2))
    partial = np.array(picked, dtype=np.int64).reshape(-1, 3)
    if len(partial) < n:
        return None, float("inf"), partial
    residual = _verify(column, partial, gpd, ws)
    return (partial if residual <= tol else None), residual, partial


def fourier_jacobian(frac, ws: WaveSet):
    """Model coefficients and their Jacobian ``(n_waves, 3n)`` w.r.t. flattened coordinates."""
    frac = np.asarray(frac, dtype=np.float64).reshape(-1, 3)
    phases = np.exp(-2j * np.pi * (ws.vectors @ frac.T))  # (W, n)
    model = phases.sum(axis=1)
    jac = -2j * np.pi * phases[:, :, None] * ws.vectors[:, None, :].astype(np.float64)
    return model, jac.reshape(len(ws), -1)


def stage3_newton(
    column,
    ws: WaveSet,
    init_coords,
    gpd: int,
    max_iters: int = 10,
    perturbation: float = 0.0,
    rng=None,
    tol: float = VERIFY_TOL,
):
    """Gauss-Newton refinement from real fractional ``init_coords``.

    Returns ``(coords, residual, iterations, u)`` where ``u`` is the final
    continuous iterate; ``coords`` is None on failure.
    """
    u = np.array(init_coords, dtype=np.float64).reshape(-1, 3)
    if len(u) == 0:
        return np.zeros((0, 3), dtype=np.int64), 0.0, 0, u
    if perturbation > 0.0:
        rng = np.random.default_rng(rng)
        u = u + rng.uniform(-perturbation, perturbation, size=u.shape)
    target = np.asarray(column, dtype=np.complex128)
    iters = 0
    while True:
        model, jac = fourier_jacobian(u, ws)
        diff = model - target
        if np.max(np.abs(diff)) <= NEWTON_TOL or iters >= max_iters:
            break
        a = np.concatenate([jac.real, jac.imag])
        b = np.concatenate([diff.real, diff.imag])
        delta = (np.linalg.pinv(a, rcond=1e-10) @ b).reshape(u.shape)
        u = _backtrack(u, delta, target, ws, float(np.sum(np.abs(diff) ** 2)))
        iters += 1
    if np.max(np.abs(diff)) > NEWTON_TOL:
        return None, float(np.max(np.abs(diff))), iters, u
    snapped = np.mod(np.rint(u * gpd).astype(np.int64), gpd)
    residual = _verify(target, snapped, gpd, ws)
    return (snapped if residual <= tol else None), residual, iters, u


def _backtrack(u, delta, target, ws, cost, halvings: int = 4):
    """Full Gauss-Newton step unless it increases the residual; then halve."""
    step = 1.0
    for _ in range(halvings):
        trial = u - step * delta
        if np.sum(np.abs(encode_fractional(trial, ws) - target) ** 2) < cost:
            return trial
        step *= 0.5
    return u - step * delta


# -- driver ------------------------------------------------------------------------


def multiplicity(column, ws: WaveSet, tol: float = MULTIPLICITY_TOL) -> int:
    f0 = complex(column[ws.zero_index])
    n = round(f0.real)
    if abs(f0 - n) > tol or n < 0:
        raise NonIntegerMultiplicity(f"zero-frequency coefficient {f0} is not a non-negative integer")
    return int(n)


def _stage3_init(column, ws, n, gpd, partial):
    """Stage-2 picks, topped up with the largest unused density peaks."""
    chosen = [tuple(p) for p in partial]
    if len(chosen) < n:
        taken = set(chosen)
        for p in _top_indices(density_grid(column, ws, gpd), n + len(chosen)):
            if tuple(p) not in taken:
                chosen.append(tuple(p))
                taken.add(tuple(p))
            if len(chosen) == n:
                break
    return np.array(chosen[:n], dtype=np.float64) / gpd


def recover_column(
    column,
    ws: WaveSet,
    gpd: int,
    n: int | None = None,
    seed: int = 0,
    restarts: int = 32,
    max_iters: int = 10,
    tol: float = VERIFY_TOL,
) -> RecoveryResult:
    """Run the staged recovery on a single species column."""
    column = np.asarray(column, dtype=np.complex128)
    if n is None:
        n = multiplicity(column, ws)
    if n == 0:
        return RecoveryResult(np.zeros((0, 3), dtype=np.int64), 0, 0, 0.0)
    coords, res1 = stage1_peaks(column, ws, n, gpd, tol)
    if coords is not None:
        return RecoveryResult(coords, 1, 0, res1)
    coords, res2, partial = stage2_greedy(column, ws, n, gpd, tol)
    if coords is not None:
        return RecoveryResult(coords, 2, 0, res2)
    init = _stage3_init(column, ws, n, gpd, partial)
    rng = np.random.default_rng(seed)
    attempts = []
    total_iters = 0
    residual = min(res1, res2)
    best_res, queue = np.inf, []
    for _ in range(max(1, restarts)):
        coords, res3, iters, u = stage3_newton(
            column, ws, init, gpd, max_iters, perturbation=1.0 / (4 * gpd), rng=rng, tol=tol
        )
        total_iters += iters
        attempts.append((iters, res3))
        residual = min(residual, res3)
        if coords is not None:
            return RecoveryResult(coords, 3, total_iters, res3, attempts)
        if res3 < best_res:
            best_res, best_u, queue = res3, u, _relocations(column, ws, u, gpd)
        # an exhausted queue falls back to re-perturbing the best iterate
        init = queue.pop(0) if queue else best_u
    return RecoveryResult(np.zeros((0, 3), dtype=np.int64), FAILED, total_iters, residual, attempts)


def _relocations(column, ws: WaveSet, u, gpd: int, limit: int = 4) -> list:
    """Candidate restarts from a stuck iterate ``u``.

    The residual density peaks where an atom is missing.  Each atom is scored
    by the coefficient residual left after moving it to that peak, and the
    ``limit`` best single moves are returned, best first.
    """
    u = np.mod(np.asarray(u, dtype=np.float64), 1.0)
    phases = np.exp(-2j * np.pi * (ws.vectors @ u.T))  # (W, n)
    resid = column - phases.sum(axis=1)
    (peak,) = _top_indices(density_grid(resid, ws, gpd), 1)
    peak_col = encode_numerators(peak[None, :], gpd, ws)
    swapped = resid[:, None] + phases - peak_col[:, None]
    score = np.sum(np.abs(swapped) ** 2, axis=0)
    candidates = []
    for atom in np.argsort(score, kind="stable")[:limit]:
        moved = u.copy()
        moved[atom] = peak / gpd
        candidates.append(moved)
    return candidates


def recover(fr: FourierRepr, gpd: int, seed: int = 0, **kwargs) -> list[RecoveryResult]:
    """Per-slot recovery for all six columns of ``fr`` (empty slots give trivial results)."""
    ws = fr.wave_set
    counts = [multiplicity(fr.coeffs[:, z], ws) for z in range(fr.coeffs.shape[1])]
    return [
        recover_column(fr.coeffs[:, z], ws, gpd, n=n, seed=seed + 7919 * z, **kwargs)
        for z, n in enumerate(counts)
    ]
