"""File formats, screening and the command-line pipeline."""

import io
import json
import time

import numpy as np
import pytest
import torch

from recipcrystal import pipeline
from recipcrystal.cli import main
from recipcrystal.crystal import Crystal, synth_crystal
from recipcrystal.errors import (
    ArchiveCorrupt,
    CheckpointMismatch,
    CollisionAfterSnap,
    ConfigError,
    InvalidDenominator,
    ParseError,
)
from recipcrystal.io import (
    Archive,
    archive_to_bytes,
    crystal_to_record,
    dumps_crystal,
    loads_crystal,
    read_archive,
    read_fourier_json,
    read_xtl,
    write_archive,
    write_fourier_json,
    write_xtl,
)
from recipcrystal.reciprocal import FourierRepr, build_wave_set, fourier_forward

TOY_TRAIN = {
    "preset": "toy",
    "total_steps": 6,
    "warmup_steps": 2,
    "nnz_target": 150,
    "diffusion_total_steps": 6,
    "diffusion_warmup_steps": 2,
    "sample_steps": 4,
}


def corpus_lines(n=6, d=12, seed=0):
    return [dumps_crystal(synth_crystal(seed + i, 2, 3, d)) for i in range(n)]


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


# -- XTL-JSON -------------------------------------------------------------------------------


def test_xtl_roundtrip_bit_exact(tmp_path):
    crystals = [synth_crystal(s) for s in range(25)]
    for c in crystals:
        text = dumps_crystal(c)
        back = loads_crystal(text)
        assert dumps_crystal(back) == text
        assert crystal_to_record(back) == crystal_to_record(c)
        assert np.array_equal(back.lattice, c.lattice) and back.same_structure(c)
    write_xtl(tmp_path / "c.xtl", crystals)
    again = read_xtl(tmp_path / "c.xtl")
    assert [dumps_crystal(c) for c in again] == [dumps_crystal(c) for c in crystals]


@pytest.mark.parametrize(
    "bad, fragment",
    [
        ("{not json", "malformed JSON"),
        ('{"schema_version": 2}', "schema_version"),
        ('{"schema_version": 1, "lattice": [1, 2]}', "lattice"),
        ('{"schema_version": 1, "lattice": [1,0,0,0,1,0,0,0,1], "grid_denominator": 12, "species": [{"z": 8, "coords": [[1, 2]]}]}', "coords"),
        ('{"schema_version": 1, "lattice": [1,0,0,0,1,0,0,0,1], "grid_denominator": 12, "species": [{"z": "O"}]}', "integer z"),
    ],
)
def test_parse_error_names_line(bad, fragment):
    lines = [(1, corpus_lines(1)[0]), (2, ""), (3, bad)]
    with pytest.raises(ParseError) as info:
        pipeline.preprocess(lines, 12, 1)
    assert info.value.line == 3 and "line 3" in str(info.value) and fragment in str(info.value)


def test_frac_records_are_snapped():
    rec = {
        "schema_version": 1, "id": "f", "lattice": [3, 0, 0, 0, 3, 0, 0, 0, 3],
        "species": [{"z": 8, "frac": [[0.501, 0.25, 1 / 6], [0.99, 0.0, 0.0]]}],
    }
    c = loads_crystal(json.dumps(rec), 1, denominator=24)
    assert c.coords[0].tolist() == [[12, 6, 4], [0, 0, 0]]
    rec["species"][0]["frac"].append([0.0, 0.001, 0.0])
    archive = pipeline.preprocess([(1, json.dumps(rec))], 24, 1)
    assert archive.crystals == [] and archive.rejected[0]["reason"] == "collision after snapping"
    with pytest.raises(CollisionAfterSnap):
        loads_crystal(json.dumps(rec), 1, denominator=24)


# -- preprocess / archives ------------------------------------------------------------------


def test_preprocess_empty_and_single(tmp_path):
    empty = pipeline.preprocess([], 48, 4)
    assert empty.crystals == [] and empty.rejected == []
    write_archive(tmp_path / "e.npz", empty)
    assert read_archive(tmp_path / "e.npz").crystals == []
    c = synth_crystal(3)
    archive = pipeline.preprocess([(1, dumps_crystal(c))], 48, 4)
    write_archive(tmp_path / "one.npz", archive)
    back = read_archive(tmp_path / "one.npz")
    assert np.array_equal(back.reprs[0].coeffs, fourier_forward(c, build_wave_set("cubic", 4)).coeffs)
    assert back.reprs[0].slot_species == fourier_forward(c, back.wave_set).slot_species
    assert archive_to_bytes(back) == archive_to_bytes(archive)


def test_preprocess_regrid_and_reject():
    c = synth_crystal(1, 2, 3, 12)
    up = pipeline.preprocess([(1, dumps_crystal(c))], 48, 1).crystals[0]
    assert up.grid_denominator == 48 and all(np.array_equal(a * 4, b) for a, b in zip(c.coords, up.coords))
    bad = Crystal(np.eye(3), (8, 8), (np.zeros((1, 3), np.int64), np.ones((1, 3), np.int64)), 12, id="dup")
    archive = pipeline.preprocess([(1, dumps_crystal(bad))], 12, 1)
    assert archive.crystals == [] and archive.rejected[0]["id"] == "dup"
    with pytest.raises(InvalidDenominator):
        pipeline.preprocess([], 50, 1)


def test_archive_corruption_detected(tmp_path):
    archive = pipeline.preprocess(list(enumerate(corpus_lines(3), start=1)), 12, 1)
    raw = archive_to_bytes(archive)
    (tmp_path / "cut.npz").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ArchiveCorrupt):
        read_archive(tmp_path / "cut.npz")
    (tmp_path / "junk.npz").write_bytes(b"not an archive")
    with pytest.raises(ArchiveCorrupt):
        read_archive(tmp_path / "junk.npz")
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps({"format": "other"})))
    (tmp_path / "other.npz").write_bytes(buf.getvalue())
    with pytest.raises(ArchiveCorrupt):
        read_archive(tmp_path / "other.npz")


# -- screening ------------------------------------------------------------------------------


def test_screen_small_corpus_fully_recoverable():
    lines = [(i + 1, dumps_crystal(synth_crystal(i, 3, 4, 48))) for i in range(1000)]
    archive = pipeline.preprocess(lines, 48, 4)
    report = pipeline.screen(archive)
    agg = report["aggregate"]
    assert agg["total"] == 1000 and agg["recoverable"] == 1000 and agg["unrecoverable"] == 0
    assert sum(agg["stage_counts"].values()) == 1000
    assert sum(b["total"] for b in agg["buckets"].values()) == 1000
    ids = [e["id"] for e in report["structures"]]
    assert ids == sorted(ids)


def test_screen_flags_corrupted_coefficients():
    archive = pipeline.preprocess(list(enumerate(corpus_lines(4, d=48), start=1)), 48, 4)
    reprs = list(archive.reprs)
    noisy = reprs[1].coeffs.copy()
    noisy[:, 0] += 0.3 * np.random.default_rng(0).normal(size=len(noisy))
    noisy[archive.wave_set.zero_index, 0] = round(noisy[archive.wave_set.zero_index, 0].real)
    reprs[1] = FourierRepr(noisy, archive.wave_set, reprs[1].slot_species)
    frac = reprs[2].coeffs.copy()
    frac[archive.wave_set.zero_index, 0] += 0.5
    reprs[2] = FourierRepr(frac, archive.wave_set, reprs[2].slot_species)
    report = pipeline.screen(Archive(archive.crystals, reprs, archive.wave_set, 48, []))
    flags = {e["id"]: e["recoverable"] for e in report["structures"]}
    assert flags == {c.id: i not in (1, 2) for i, c in enumerate(archive.crystals)}
    agg = report["aggregate"]
    assert agg["recoverable"] + agg["unrecoverable"] == agg["total"] == 4
    assert sum(b["recoverable"] + b["unrecoverable"] for b in agg["buckets"].values()) == 4


def test_buckets():
    assert [pipeline.bucket_of(n) for n in (1, 16, 17, 32, 33, 48, 49, 64, 65, 500)] == [
        "<=16", "<=16", "17-32", "17-32", "33-48", "33-48", "49-64", "49-64", ">64", ">64"
    ]


def test_worker_count_cap(monkeypatch):
    monkeypatch.setenv("RECIPCRYSTAL_THREADS", "1")
    assert pipeline.worker_count() == 1
    monkeypatch.setenv("RECIPCRYSTAL_THREADS", "many")
    with pytest.raises(ConfigError):
        pipeline.worker_count()


# -- configuration --------------------------------------------------------------------------


def test_config_presets_and_errors(tmp_path):
    toy = pipeline.config_from_dict({"preset": "toy"})
    assert toy.vae.d_model == 36 and toy.grid_denominator == 12
    assert pipeline.config_from_dict({}).vae.d_model == 144
    assert toy.hash() == pipeline.config_from_dict({"preset": "toy"}).hash()
    assert toy.hash() != pipeline.config_from_dict({"preset": "toy", "lr": 1e-4}).hash()
    for bad in (
        {"preset": "huge"},
        {"preset": "toy", "no_such_key": 1},
        {"preset": "toy", "n_layers": "two"},
        {"preset": "toy", "cyclic_slots": 1},
        {"preset": "toy", "grid_denominator": 10},
        {"preset": "toy", "d_head": 10, "n_heads": 3, "d_model": 30},
        {"preset": "toy", "diffusion_d_head": 24},
        [1, 2],
    ):
        with pytest.raises(ConfigError):
            pipeline.config_from_dict(bad)
    (tmp_path / "broken.json").write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        pipeline.load_config(tmp_path / "broken.json")


# -- command line ---------------------------------------------------------------------------


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv("RECIPCRYSTAL_THREADS", "1")
    write_lines(tmp_path / "corpus.xtl", corpus_lines(10))
    (tmp_path / "toy.json").write_text(json.dumps(TOY_TRAIN), encoding="utf-8")
    assert main(["preprocess", str(tmp_path / "corpus.xtl"), "--out", str(tmp_path / "a.npz"), "--denominator", "12", "--jmax", "1"]) == 0
    return tmp_path


def train(ws, kind, out, *extra):
    args = ["train", kind, "--config", str(ws / "toy.json"), "--corpus", str(ws / "a.npz"), "--out", str(ws / out), "--seed", "0"]
    return main(args + list(extra))


def read_metrics(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_cli_exit_codes(workspace, capsys):
    ws = workspace
    assert main([]) == 1
    assert main(["--help"]) == 0
    assert main(["screen"]) == 1
    write_lines(ws / "bad.xtl", [corpus_lines(1)[0], "{oops"])
    assert main(["preprocess", str(ws / "bad.xtl"), "--out", str(ws / "b.npz")]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["preprocess", str(ws / "corpus.xtl"), "--out", str(ws / "b.npz"), "--denominator", "50"]) == 2
    assert main(["screen", str(ws / "missing.npz"), "--out", str(ws / "r.json")]) == 2
    (ws / "cfg_bad.json").write_text(json.dumps({"preset": "toy", "bogus": 1}))
    assert main(["train", "vae", "--config", str(ws / "cfg_bad.json"), "--corpus", str(ws / "a.npz"), "--out", str(ws / "x.pt")]) == 1


def test_cli_screen_outputs(workspace):
    ws = workspace
    assert main(["screen", str(ws / "a.npz"), "--out", str(ws / "r.json")]) == 0
    report = json.loads((ws / "r.json").read_text())
    assert report["aggregate"]["total"] == 10 and report["aggregate"]["recoverable"] == 10
    csv = (ws / "r.csv").read_text().splitlines()
    assert csv[0] == "bucket,total,recoverable,unrecoverable" and csv[1].startswith("<=16,10,10,0")
    assert main(["screen", str(ws / "a.npz"), "--out", str(ws / "r2.json"), "--jmax", "2"]) == 0
    assert json.loads((ws / "r2.json").read_text())["jmax"] == 2


def test_cli_train_resume_and_sample(workspace):
    ws = workspace
    assert train(ws, "vae", "full.pt", "--metrics", str(ws / "full.jsonl")) == 0
    assert train(ws, "vae", "half.pt", "--steps", "3", "--metrics", str(ws / "resumed.jsonl")) == 0
    assert train(ws, "vae", "resumed.pt", "--resume", str(ws / "half.pt"), "--metrics", str(ws / "resumed.jsonl")) == 0
    full, resumed = read_metrics(ws / "full.jsonl"), read_metrics(ws / "resumed.jsonl")
    assert len(full) == len(resumed) == 6
    for a, b in zip(full, resumed):
        assert all(abs(a[k] - b[k]) <= 1e-9 for k in ("total", "ce", "lat", "four", "mu", "lr"))
    payload = pipeline.load_checkpoint(ws / "resumed.pt", "vae")
    assert payload["fingerprint"] == pipeline.load_checkpoint(ws / "full.pt", "vae")["fingerprint"]

    # diffusion needs a VAE checkpoint
    assert train(ws, "diffusion", "d.pt") == 1
    with pytest.raises(CheckpointMismatch):
        pipeline.train_diffusion_stage(pipeline.load_config(ws / "toy.json"), None, [], 0)
    assert train(ws, "diffusion", "d.pt", "--vae", str(ws / "full.pt"), "--metrics", str(ws / "d.jsonl")) == 0
    rows = read_metrics(ws / "d.jsonl")
    assert rows[-1]["event"] == "summary" and len(rows[-1]["bins"]) == 5
    with pytest.raises(CheckpointMismatch):
        pipeline.load_checkpoint(ws / "d.pt", "vae")

    common = ["sample", "--vae", str(ws / "full.pt"), "--diffusion", str(ws / "d.pt"), "--seed", "3"]
    assert main(common + ["-n", "0", "--out", str(ws / "s0.xtl")]) == 0
    assert (ws / "s0.xtl").read_text() == ""
    stats0 = json.loads((ws / "s0.stats.json").read_text())
    assert stats0["n_samples"] == 0 and stats0["recovered"] == stats0["rejected"] == 0
    for name in ("s1", "s2"):
        assert main(common + ["-n", "6", "--out", str(ws / f"{name}.xtl")]) == 0
    assert (ws / "s1.xtl").read_bytes() == (ws / "s2.xtl").read_bytes()
    assert (ws / "s1.stats.json").read_bytes() == (ws / "s2.stats.json").read_bytes()
    stats = json.loads((ws / "s1.stats.json").read_text())
    assert stats["recovered"] + stats["rejected"] == 6
    assert sum(stats["atom_count_histogram"].values()) == 6
    assert sum(stats["rejection_reasons"].values()) == stats["rejected"]


def test_checkpoint_config_mismatch(workspace):
    ws = workspace
    assert train(ws, "vae", "v.pt") == 0
    other = dict(TOY_TRAIN, lr=1e-4)
    (ws / "other.json").write_text(json.dumps(other))
    args = ["train", "vae", "--config", str(ws / "other.json"), "--corpus", str(ws / "a.npz"), "--out", str(ws / "w.pt"), "--resume", str(ws / "v.pt")]
    assert main(args) == 1
    (ws / "garbage.pt").write_bytes(b"nope")
    with pytest.raises(CheckpointMismatch):
        pipeline.load_checkpoint(ws / "garbage.pt", "vae")


def test_cli_recover(tmp_path):
    crystals = [synth_crystal(s, 3, 10, 48) for s in range(5)]
    reprs = pipeline.encode_for_recovery(crystals)
    zero = FourierRepr(np.zeros((729, 6), complex), reprs[0].wave_set)
    write_fourier_json(tmp_path / "f.json", reprs + [zero], [c.id for c in crystals] + ["empty"], [c.lattice for c in crystals] + [None])
    ws, d, items = read_fourier_json(tmp_path / "f.json")
    assert d == 48 and len(items) == 6 and np.array_equal(items[0][1].coeffs, reprs[0].coeffs)
    assert main(["recover", str(tmp_path / "f.json"), "--out", str(tmp_path / "out.jsonl")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "out.jsonl").read_text().splitlines()]
    for c, row in zip(crystals, rows):
        assert row["recoverable"]
        back = loads_crystal(json.dumps(row["structure"]))
        assert back.same_structure(c) and np.array_equal(back.lattice, c.lattice)
    assert rows[-1]["recoverable"] and rows[-1]["structure"]["species"] == []
    text = (tmp_path / "f.json").read_text()
    (tmp_path / "cut.json").write_text(text[: len(text) // 3])
    with pytest.raises(ParseError):
        read_fourier_json(tmp_path / "cut.json")
    assert main(["recover", str(tmp_path / "cut.json"), "--out", str(tmp_path / "o2.jsonl")]) == 2
