"""File formats: XTL-JSON corpora, coefficient archives and Fourier JSON.

XTL-JSON is one record per line::

    {"schema_version": 1, "id": "...", "lattice": [9 floats, row-major],
     "grid_denominator": 48, "species": [{"z": 8, "coords": [[n0, n1, n2], ...]}]}

Floats are written with ``repr`` precision, so parse(serialize(r)) == r exactly.
Preprocessing also accepts ``"frac"`` (real fractional coordinates) in place of
``"coords"``; those are snapped before anything else sees them.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .crystal import Crystal, snap_numerators
from .errors import ArchiveCorrupt, CollisionAfterSnap, ParseError
from .reciprocal import N_SLOTS, FourierRepr, WaveSet, build_wave_set

SCHEMA_VERSION = 1
ARCHIVE_FORMAT = "recipcrystal-archive"


# -- XTL-JSON -----------------------------------------------------------------------


def crystal_to_record(c: Crystal) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": c.id,
        "lattice": [float(v) for v in np.asarray(c.lattice, dtype=np.float64).reshape(-1)],
        "grid_denominator": int(c.grid_denominator),
        "species": [
            {"z": int(z), "coords": np.asarray(num, dtype=np.int64).tolist()}
            for z, num in zip(c.species, c.coords)
        ],
    }


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def record_to_crystal(rec: dict, line: int | None = None, denominator: int | None = None) -> Crystal:
    """Build a crystal from a parsed record.

    ``denominator`` is needed only for records carrying ``"frac"`` coordinates.
    Raises ParseError (with ``line``) for schema violations.
    """

    def fail(msg):
        raise ParseError(msg, line)

    if not isinstance(rec, dict):
        fail("record must be a JSON object")
    if rec.get("schema_version") != SCHEMA_VERSION:
        fail(f"unsupported schema_version {rec.get('schema_version')!r}")
    lat = rec.get("lattice")
    if not isinstance(lat, list) or len(lat) != 9 or not all(_is_num(v) for v in lat):
        fail("lattice must be 9 numbers")
    d = rec.get("grid_denominator", denominator)
    if not _is_int(d):
        fail("grid_denominator must be an integer")
    species = rec.get("species")
    if not isinstance(species, list):
        fail("species must be a list")
    zs, coords = [], []
    for entry in species:
        if not isinstance(entry, dict) or not _is_int(entry.get("z")):
            fail("species entries need an integer z")
        if "coords" in entry:
            rows = entry["coords"]
            if not isinstance(rows, list) or not all(
                isinstance(r, list) and len(r) == 3 and all(_is_int(v) for v in r) for r in rows
            ):
                fail(f"species {entry['z']}: coords must be integer triples")
            arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
        elif "frac" in entry:
            rows = entry["frac"]
            if not isinstance(rows, list) or not all(
                isinstance(r, list) and len(r) == 3 and all(_is_num(v) for v in r) for r in rows
            ):
                fail(f"species {entry['z']}: frac must be numeric triples")
            arr = snap_numerators(np.array(rows, dtype=np.float64).reshape(-1, 3), d)
            if len({tuple(r) for r in arr.tolist()}) != len(arr):
                raise CollisionAfterSnap(f"line {line}: species {entry['z']} collides after snapping")
        else:
            fail("species entries need coords or frac")
        zs.append(entry["z"])
        coords.append(arr)
    lattice = np.array(lat, dtype=np.float64).reshape(3, 3)
    return Crystal(lattice, tuple(zs), tuple(coords), d, id=str(rec.get("id", "")))


def dumps_crystal(c: Crystal) -> str:
    return json.dumps(crystal_to_record(c), separators=(",", ":"))


def loads_crystal(text: str, line: int | None = None, denominator: int | None = None) -> Crystal:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", line) from None
    return record_to_crystal(rec, line, denominator)


def iter_xtl(path, denominator: int | None = None):
    """Yield ``(line_number, crystal)`` for each non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for i, text in enumerate(fh, start=1):
            if text.strip():
                yield i, loads_crystal(text, i, denominator)


def read_xtl(path, denominator: int | None = None) -> list[Crystal]:
    return [c for _, c in iter_xtl(path, denominator)]


def write_xtl(path, crystals) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in crystals:
            fh.write(dumps_crystal(c) + "\n")


# -- archives -----------------------------------------------------------------------------


@dataclass
class Archive:
    crystals: list[Crystal]
    reprs: list[FourierRepr]
    wave_set: WaveSet
    grid_denominator: int
    rejected: list[dict]


def write_archive(path, archive: Archive) -> None:
    ws = archive.wave_set
    coeffs = np.zeros((len(archive.reprs), len(ws), N_SLOTS), dtype=np.complex128)
    slots = np.zeros((len(archive.reprs), N_SLOTS), dtype=np.int64)
    for i, fr in enumerate(archive.reprs):
        coeffs[i] = fr.coeffs
        slots[i] = fr.slot_species
    meta = {
        "format": ARCHIVE_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "truncation": ws.truncation,
        "jmax": ws.jmax,
        "grid_denominator": archive.grid_denominator,
        "count": len(archive.crystals),
        "rejected": archive.rejected,
    }
    crystals = "\n".join(dumps_crystal(c) for c in archive.crystals)
    arrays = dict(meta=np.array(json.dumps(meta)), coeffs=coeffs, slot_species=slots, crystals=np.array(crystals))
    if hasattr(path, "write"):
        np.savez(path, **arrays)
        return
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_archive(path) -> Archive:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            coeffs = np.array(data["coeffs"])
            slots = np.array(data["slot_species"])
            text = str(data["crystals"])
    except (OSError, KeyError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise ArchiveCorrupt(f"{path}: {exc}") from None
    if meta.get("format") != ARCHIVE_FORMAT or meta.get("schema_version") != SCHEMA_VERSION:
        raise ArchiveCorrupt(f"{path}: not a version {SCHEMA_VERSION} archive")
    ws = build_wave_set(meta["truncation"], meta["jmax"])
    n = meta["count"]
    if coeffs.shape != (n, len(ws), N_SLOTS) or slots.shape != (n, N_SLOTS):
        raise ArchiveCorrupt(f"{path}: array shapes do not match metadata")
    lines = [t for t in text.split("\n") if t]
    if len(lines) != n:
        raise ArchiveCorrupt(f"{path}: crystal count does not match metadata")
    try:
        crystals = [loads_crystal(t, i + 1) for i, t in enumerate(lines)]
    except ParseError as exc:
        raise ArchiveCorrupt(f"{path}: {exc}") from None
    reprs = [FourierRepr(coeffs[i], ws, tuple(int(z) for z in slots[i])) for i in range(n)]
    return Archive(crystals, reprs, ws, int(meta["grid_denominator"]), list(meta.get("rejected", [])))


def archive_to_bytes(archive: Archive) -> bytes:
    buf = io.BytesIO()
    write_archive(buf, archive)
    return buf.getvalue()


# -- Fourier JSON (input to the standalone recovery tool) -------------------------------------


def fourier_to_record(fr: FourierRepr, id: str = "", lattice=None) -> dict:
    rec = {
        "id": id,
        "slot_species": [int(z) for z in fr.slot_species],
        "coeffs_re": fr.coeffs.real.tolist(),
        "coeffs_im": fr.coeffs.imag.tolist(),
    }
    if lattice is not None:
        rec["lattice"] = [float(v) for v in np.asarray(lattice).reshape(-1)]
    return rec


def write_fourier_json(path, reprs, ids=None, lattices=None, grid_denominator: int = 48) -> None:
    reprs = list(reprs)
    ws = reprs[0].wave_set if reprs else build_wave_set()
    ids = ids or [str(i) for i in range(len(reprs))]
    lattices = lattices or [None] * len(reprs)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "truncation": ws.truncation,
        "jmax": ws.jmax,
        "grid_denominator": grid_denominator,
        "structures": [fourier_to_record(fr, i, lat) for fr, i, lat in zip(reprs, ids, lattices)],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def read_fourier_json(path):
    """Return ``(wave_set, grid_denominator, [(id, FourierRepr, lattice | None)])``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise ParseError("missing or unsupported schema_version")
    try:
        ws = build_wave_set(doc["truncation"], int(doc["jmax"]))
        d = int(doc["grid_denominator"])
        out = []
        for rec in doc["structures"]:
            coeffs = np.array(rec["coeffs_re"], dtype=np.float64) + 1j * np.array(rec["coeffs_im"], dtype=np.float64)
            if coeffs.shape != (len(ws), N_SLOTS):
                raise ParseError(f"structure {rec.get('id')!r}: coefficient shape {coeffs.shape}")
            lat = rec.get("lattice")
            lat = None if lat is None else np.array(lat, dtype=np.float64).reshape(3, 3)
            out.append((str(rec.get("id", "")), FourierRepr(coeffs, ws, tuple(int(z) for z in rec["slot_species"])), lat))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad Fourier document: {exc}") from None
    return ws, d, out

