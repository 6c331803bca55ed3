from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recipcrystal.crystal import (
    ADMISSIBLE_TRANSLATIONS,
    Crystal,
    SymmetryOp,
    apply_symmetry,
    random_symmetry_op,
    snap_coords,
    snap_numerators,
    synth_crystal,
    validate_crystal,
)
from recipcrystal.errors import CollisionAfterSnap, GenerationFailure, InvalidDenominator


def make(coords_by_species, species=(8,), d=48):
    coords = tuple(np.array(c, dtype=np.int64).reshape(-1, 3) for c in coords_by_species)
    return Crystal(np.eye(3) * 4.0, tuple(species), coords, d)


def test_snap_examples():
    np.testing.assert_array_equal(snap_coords([[0.501, 0.0, 0.0]], 24), [[0.5, 0.0, 0.0]])
    # the admissible translations sit exactly on a 1/24 grid
    for t in ADMISSIBLE_TRANSLATIONS:
        out = snap_coords([[float(t), 0.0, 0.0]], 24)
        assert Fraction(out[0, 0]).limit_denominator(24) == t
        assert (t * 24).denominator == 1
    np.testing.assert_array_equal(snap_numerators([[0.999, -0.01, 1.0]], 48), [[0, 0, 0]])


def test_snap_error_bound():
    rng = np.random.default_rng(0)
    raw = rng.uniform(0, 1, size=(20000, 3))
    snapped = snap_numerators(raw, 48) / 48
    err = np.abs((raw - snapped + 0.5) % 1.0 - 0.5)
    assert err.max() <= 1 / 96 + 1e-15


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-3, 3)] * 3), min_size=1, max_size=8), st.sampled_from([12, 24, 48, 96]))
def test_snap_idempotent(points, d):
    once = snap_numerators(points, d)
    assert np.array_equal(snap_numerators(once / d, d), once)
    assert np.all((once >= 0) & (once < d))


def test_snap_errors():
    with pytest.raises(InvalidDenominator):
        snap_coords([[0.1, 0.2, 0.3]], 10)
    with pytest.raises(CollisionAfterSnap):
        snap_coords([[0.1, 0.2, 0.3], [0.101, 0.2, 0.3]], 24)


def test_validate_examples():
    ok = make([[[0, 0, 0]], [[1, 2, 3], [4, 5, 6]]], species=(8, 14))
    assert validate_crystal(ok) == []
    dup = make([[[0, 0, 0], [0, 0, 0]]])
    assert any("duplicate site" in v for v in validate_crystal(dup))
    seven = make([[[i, 0, 0]] for i in range(7)], species=tuple(range(1, 8)))
    assert "species limit exceeded" in validate_crystal(seven)
    bad = make([[[48, 0, 0]]], species=(90,))
    problems = validate_crystal(bad)
    assert "atomic number out of range" in problems
    assert any("off grid" in v for v in problems)
    unsorted = make([[[0, 0, 0]], [[1, 1, 1]]], species=(14, 8))
    assert "species not strictly increasing" in validate_crystal(unsorted)
    flat = Crystal(np.diag([1.0, 1.0, 0.0]), (8,), (np.zeros((1, 3), np.int64),), 48)
    assert "degenerate lattice" in validate_crystal(flat)


def test_synth_examples():
    c = synth_crystal(1, 1, 1, 48)
    assert c.counts == (1,) and validate_crystal(c) == []
    a, b = synth_crystal(42), synth_crystal(42)
    assert a.same_structure(b) and np.array_equal(a.lattice, b.lattice)
    with pytest.raises(GenerationFailure):
        synth_crystal(0, 1, 12**3 + 1, 12)


def test_synth_sweep_valid():
    for seed in range(1000):
        c = synth_crystal(seed)
        assert validate_crystal(c) == [], seed
        assert 1 <= len(c.species) <= 6 and max(c.counts) <= 16


def test_apply_symmetry_examples():
    c = make([[[0, 0, 0], [5, 7, 11]]])
    assert apply_symmetry(c, SymmetryOp.identity()).same_structure(c)
    half = SymmetryOp(np.eye(3), (Fraction(1, 2), 0, 0))
    out = apply_symmetry(make([[[0, 0, 0]]]), half)
    np.testing.assert_array_equal(out.coords[0], [[24, 0, 0]])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([12, 24, 48]))
def test_symmetry_closure(seed, d):
    rng = np.random.default_rng(seed)
    c = synth_crystal(seed, 3, 8, d)
    op = random_symmetry_op(rng)
    out = apply_symmetry(c, op)
    assert validate_crystal(out) == []
    assert out.counts == c.counts and out.grid_denominator == d


def test_symmetry_op_validation():
    with pytest.raises(ValueError):
        SymmetryOp(np.diag([2, 1, 1]))
    with pytest.raises(ValueError):
        SymmetryOp(np.eye(3), (Fraction(1, 5), 0, 0))
