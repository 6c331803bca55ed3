"""End-to-end orchestration behind the command-line tool.

Each stage is a plain function so tests can drive the pipeline without
spawning processes: preprocess -> screen -> train (vae, diffusion) -> sample,
plus standalone recovery of coefficient matrices.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from fractions import Fraction

import numpy as np
import torch

from . import lattice as lattice_geom
from .crystal import Crystal, _check_denominator, snap_numerators, validate_crystal
from .diffusion import (
    DiffusionConfig,
    DiffusionTrainer,
    Diffuser,
    NoiseScales,
    binned_metrics,
    encode_corpus,
    estimate_scales,
    generate,
    toy_diffusion_config,
)
from .errors import CheckpointMismatch, CollisionAfterSnap, ConfigError, NonIntegerMultiplicity, RecipCrystalError
from .io import Archive, loads_crystal, read_fourier_json
from .reciprocal import FourierRepr, build_wave_set, fourier_forward
from .recovery import FAILED, recover, recover_column
from .vae import CrystalVAE, VAEConfig, VAETrainer, toy_vae_config

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "recipcrystal-checkpoint"
CHECKPOINT_VERSION = 1
BUCKETS = (("<=16", 0, 16), ("17-32", 17, 32), ("33-48", 33, 48), ("49-64", 49, 64), (">64", 65, None))
SAMPLE_TOL = 0.5


def worker_count() -> int:
    """Workers for parallel stages, capped by RECIPCRYSTAL_THREADS."""
    cap = os.environ.get("RECIPCRYSTAL_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"RECIPCRYSTAL_THREADS={cap!r} is not an integer") from None
    return n


# -- configuration --------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    vae: VAEConfig
    diffusion: DiffusionConfig
    grid_denominator: int = 48
    sample_steps: int = 50
    sample_tol: float = SAMPLE_TOL

    def flat(self) -> dict:
        out = {"grid_denominator": self.grid_denominator, "sample_steps": self.sample_steps, "sample_tol": self.sample_tol}
        out.update(asdict(self.vae))
        out.update({f"diffusion_{k}": v for k, v in asdict(self.diffusion).items()})
        return out

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.flat(), sort_keys=True).encode()).hexdigest()


PRESETS = {
    "desk": lambda: PipelineConfig(VAEConfig(), DiffusionConfig(n_layers=4, n_heads=3, d_head=48)),
    "toy": lambda: PipelineConfig(toy_vae_config(), toy_diffusion_config(), grid_denominator=12),
}


def _coerce(name, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if default is None and value is None:
        return None
    if default is None or isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    return value


def config_from_dict(raw: dict) -> PipelineConfig:
    """Build a config from flat keys; ``preset`` selects the starting point."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    preset = raw.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    vae_fields = {f.name for f in fields(VAEConfig)}
    diff_fields = {f.name for f in fields(DiffusionConfig)}
    vae_kw, diff_kw, top_kw = {}, {}, {}
    for key, value in raw.items():
        if key in vae_fields:
            vae_kw[key] = _coerce(key, value, getattr(cfg.vae, key))
        elif key.startswith("diffusion_") and key[len("diffusion_"):] in diff_fields:
            sub = key[len("diffusion_"):]
            diff_kw[sub] = _coerce(key, value, getattr(cfg.diffusion, sub))
        elif key in ("grid_denominator", "sample_steps", "sample_tol"):
            top_kw[key] = _coerce(key, value, getattr(cfg, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        vae = VAEConfig(**{**asdict(cfg.vae), **vae_kw})
        vae.block_config()
        diff = DiffusionConfig(**{**asdict(cfg.diffusion), **diff_kw})
        if diff.n_heads * diff.d_head != vae.d_model:
            raise ConfigError("diffusion n_heads * d_head must equal d_model")
        out = PipelineConfig(vae, diff, **{**{"grid_denominator": cfg.grid_denominator, "sample_steps": cfg.sample_steps, "sample_tol": cfg.sample_tol}, **top_kw})
        _check_denominator(out.grid_denominator)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    except RecipCrystalError as exc:
        raise ConfigError(str(exc)) from None
    return out


def load_config(path) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(raw)


# -- preprocessing --------------------------------------------------------------------------


def _regrid(c: Crystal, denominator: int) -> Crystal:
    """Move ``c`` onto the 1/denominator grid, exactly when the grids nest."""
    if c.grid_denominator == denominator:
        return c
    coords = []
    for num in c.coords:
        ratio = Fraction(denominator, c.grid_denominator)
        if ratio.denominator == 1:
            new = np.asarray(num, dtype=np.int64) * ratio.numerator
        else:
            new = snap_numerators(np.asarray(num, dtype=np.float64) / c.grid_denominator, denominator)
            if len({tuple(r) for r in new.tolist()}) != len(new):
                raise CollisionAfterSnap(f"{c.id}: collision after regridding")
        coords.append(new)
    return Crystal(c.lattice, c.species, tuple(coords), denominator, id=c.id)


def preprocess(lines, denominator: int = 48, jmax: int = 4, truncation: str = "cubic") -> Archive:
    """Snap and encode ``(line_no, record_text)`` pairs.

    Malformed lines raise ParseError.  Structures that collide on the grid or
    fail validation are logged and listed in ``Archive.rejected``.
    """
    denominator = _check_denominator(denominator)
    ws = build_wave_set(truncation, jmax)
    crystals, reprs, rejected = [], [], []
    for line_no, text in lines:
        if not text.strip():
            continue
        try:
            c = _regrid(loads_crystal(text, line_no, denominator), denominator)
        except CollisionAfterSnap as exc:
            log.warning("line %d rejected: %s", line_no, exc)
            rejected.append({"line": line_no, "id": _peek_id(text), "reason": "collision after snapping"})
            continue
        problems = validate_crystal(c)
        if problems:
            log.warning("line %d (%s) rejected: %s", line_no, c.id, "; ".join(problems))
            rejected.append({"line": line_no, "id": c.id, "reason": "; ".join(problems)})
            continue
        crystals.append(c)
        reprs.append(fourier_forward(c, ws))
    return Archive(crystals, reprs, ws, denominator, rejected)


def _peek_id(text: str) -> str:
    try:
        return str(json.loads(text).get("id", ""))
    except (ValueError, AttributeError):
        return ""


# -- screening --------------------------------------------------------------------------------


def bucket_of(n_atoms: int) -> str:
    for name, lo, hi in BUCKETS:
        if n_atoms >= lo and (hi is None or n_atoms <= hi):
            return name
    raise ValueError(n_atoms)


def screen_one(args) -> dict:
    """Recover one structure from its stored coefficients."""
    ident, fr, gpd, n_atoms = args
    entry = {"id": ident, "n_atoms": int(n_atoms)}
    try:
        results = recover(fr, gpd)
    except NonIntegerMultiplicity as exc:
        entry.update(stage_reached=FAILED, newton_iters=0, residual=None, recoverable=False, reason=str(exc))
        return entry
    stages = [r.stage for r in results if r.stage != 0]
    ok = all(r.ok for r in results)
    entry.update(
        stage_reached=FAILED if not ok else (max(stages) if stages else 0),
        newton_iters=int(sum(r.newton_iters for r in results)),
        residual=float(max(r.residual for r in results)),
        recoverable=bool(ok),
    )
    return entry


def screen(archive: Archive, jmax: int | None = None) -> dict:
    """Run recovery over an archive and aggregate the outcome.

    With ``jmax`` different from the archive's, coefficients are recomputed
    from the stored crystals at that truncation.
    """
    ws = archive.wave_set
    reprs = archive.reprs
    if jmax is not None and jmax != ws.jmax:
        ws = build_wave_set(ws.truncation, jmax)
        reprs = [fourier_forward(c, ws) for c in archive.crystals]
    jobs = [(c.id, fr, archive.grid_denominator, c.n_atoms) for c, fr in zip(archive.crystals, reprs)]
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(screen_one, jobs, chunksize=8))
    else:
        entries = [screen_one(j) for j in jobs]
    entries.sort(key=lambda e: e["id"])
    stage_counts = Counter(str(e["stage_reached"]) for e in entries)
    buckets = {name: {"total": 0, "recoverable": 0, "unrecoverable": 0} for name, _, _ in BUCKETS}
    for e in entries:
        b = buckets[bucket_of(e["n_atoms"])]
        b["total"] += 1
        b["recoverable" if e["recoverable"] else "unrecoverable"] += 1
    n_ok = sum(e["recoverable"] for e in entries)
    return {
        "schema_version": 1,
        "truncation": ws.truncation,
        "jmax": ws.jmax,
        "grid_denominator": archive.grid_denominator,
        "structures": entries,
        "aggregate": {
            "total": len(entries),
            "recoverable": n_ok,
            "unrecoverable": len(entries) - n_ok,
            "stage_counts": dict(sorted(stage_counts.items())),
            "buckets": buckets,
        },
    }


def report_csv(report: dict) -> str:
    rows = ["bucket,total,recoverable,unrecoverable"]
    for name, b in report["aggregate"]["buckets"].items():
        rows.append(f"{name},{b['total']},{b['recoverable']},{b['unrecoverable']}")
    return "\n".join(rows) + "\n"


# -- checkpoints --------------------------------------------------------------------------------


def state_fingerprint(state: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind: str, cfg: PipelineConfig, trainer, extra: dict | None = None) -> dict:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": cfg.flat(),
        "config_hash": cfg.hash(),
        "trainer": trainer.state_dict(),
        "fingerprint": state_fingerprint(trainer.model.state_dict()),
    }
    payload.update(extra or {})
    torch.save(payload, path)
    return payload


def load_checkpoint(path, kind: str, cfg: PipelineConfig | None = None) -> dict:
    try:
        payload = torch.load(path, weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path} is not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if payload.get("kind") != kind:
        raise CheckpointMismatch(f"{path} holds a {payload.get('kind')} checkpoint, expected {kind}")
    if cfg is not None and payload["config_hash"] != cfg.hash():
        raise CheckpointMismatch(f"{path} was written with a different config")
    return payload


# -- training ------------------------------------------------------------------------------------


def _emit(stream, record):
    if stream is not None:
        stream.write(json.dumps(record) + "\n")
        stream.flush()


def train_vae_stage(cfg: PipelineConfig, crystals, seed: int, until: int | None = None, resume=None, stream=None) -> VAETrainer:
    trainer = VAETrainer(cfg.vae, crystals, seed)
    if resume is not None:
        if resume["trainer"]["seed"] != seed:
            raise CheckpointMismatch("resume seed differs from checkpoint seed")
        trainer.load_state_dict(resume["trainer"])
    until = cfg.vae.total_steps if until is None else until
    trainer.run(max(0, until - trainer.step), callback=lambda r: _emit(stream, {"kind": "vae", **r}))
    return trainer


def load_vae(payload: dict) -> CrystalVAE:
    cfg = config_from_dict(payload["config"])
    model = CrystalVAE(cfg.vae, payload["trainer"]["seed"])
    model.load_state_dict(payload["trainer"]["model"])
    model.eval()
    return model


def train_diffusion_stage(cfg: PipelineConfig, vae_payload: dict | None, crystals, seed: int, until=None, resume=None, stream=None):
    if vae_payload is None:
        raise CheckpointMismatch("diffusion training needs a VAE checkpoint")
    if vae_payload["config_hash"] != cfg.hash():
        raise CheckpointMismatch("VAE checkpoint was written with a different config")
    vae = load_vae(vae_payload)
    latents = encode_corpus(vae, list(crystals), seed)
    if resume is not None:
        if resume.get("vae_fingerprint") != vae_payload["fingerprint"]:
            raise CheckpointMismatch("diffusion checkpoint belongs to a different VAE")
        scales = NoiseScales(resume["trainer"]["varpi"]).freeze()
    else:
        scales = estimate_scales([latents], vae.selector)
    trainer = DiffusionTrainer(cfg.diffusion, vae, latents, scales, seed)
    if resume is not None:
        trainer.load_state_dict(resume["trainer"])
    until = cfg.diffusion.total_steps if until is None else until
    trainer.run(max(0, until - trainer.step), callback=lambda r: _emit(stream, {"kind": "diffusion", **r}))
    _emit(stream, {"kind": "diffusion", "event": "summary", "bins": binned_metrics(trainer.trace)})
    return trainer


# -- sampling -------------------------------------------------------------------------------------


def decode_structure(lattice_coeffs, species_logits, fourier, ws, gpd: int, tol: float = SAMPLE_TOL, seed: int = 0):
    """Turn one set of decoder outputs into a crystal, or explain why not.

    Returns ``(crystal | None, info)``; ``info`` carries the per-species counts
    read from the zero-frequency row, the recovery stages and any reason for
    rejection.
    """
    classes = np.argmax(species_logits, axis=-1)
    info = {"counts": [], "stages": [], "reason": None}
    occupied = [(int(classes[s]), s) for s in range(len(classes)) if classes[s] != 0]
    if not occupied:
        info["reason"] = "no species"
        return None, info
    zs = [z for z, _ in occupied]
    if len(set(zs)) != len(zs):
        info["reason"] = "species predicted in two slots"
        return None, info
    coords = {}
    for z, slot in occupied:
        column = np.asarray(fourier[:, slot])
        n = int(np.rint(column[ws.zero_index].real))
        info["counts"].append(n)
        if n <= 0:
            info["reason"] = info["reason"] or "species with no atoms"
            continue
        res = recover_column(column, ws, gpd, n=n, seed=seed + slot, tol=tol)
        info["stages"].append(res.stage)
        if not res.ok:
            info["reason"] = info["reason"] or "recovery failed"
            continue
        coords[z] = res.coords
    if info["reason"] is not None:
        return None, info
    try:
        lat = lattice_geom.log_to_lattice(np.asarray(lattice_coeffs, dtype=np.float64))
    except RecipCrystalError:
        info["reason"] = "degenerate lattice"
        return None, info
    order = sorted(coords)
    return Crystal(lat, tuple(order), tuple(coords[z] for z in order), gpd), info


def sample_structures(vae: CrystalVAE, diffuser: Diffuser, scales: NoiseScales, n: int, n_steps: int, seed: int, gpd: int, tol: float = SAMPLE_TOL):
    """Generate ``n`` latents, decode them and recover structures.

    Returns ``(crystals, stats)``; rejected samples are counted, not raised.
    """
    gen = torch.Generator().manual_seed(seed)
    ws = vae.wave_set
    crystals = []
    stats = {
        "n_samples": n,
        "recovered": 0,
        "rejected": 0,
        "atom_count_histogram": {},
        "species_count_histogram": {},
        "stage_mix": {},
        "rejection_reasons": {},
    }
    if n == 0:
        return crystals, stats
    with torch.no_grad():
        mu = generate(diffuser, scales, vae.log_sigma.detach(), vae.selector, n, n_steps, gen)
        heads = vae.decode(mu)
    lat = heads.lattice.numpy()
    logits = heads.species_logits.numpy()
    four = heads.fourier.numpy()
    total_hist, species_hist, stage_mix, reasons = Counter(), Counter(), Counter(), Counter()
    for i in range(n):
        c, info = decode_structure(lat[i], logits[i], four[i], ws, gpd, tol, seed=seed + i)
        total_hist[sum(max(0, k) for k in info["counts"])] += 1
        species_hist.update(info["counts"])
        stage_mix.update(str(s) for s in info["stages"])
        if c is None:
            stats["rejected"] += 1
            reasons[info["reason"]] += 1
            continue
        crystals.append(Crystal(c.lattice, c.species, c.coords, gpd, id=f"sample-{seed}-{i}"))
        stats["recovered"] += 1
    stats["atom_count_histogram"] = {str(k): v for k, v in sorted(total_hist.items())}
    stats["species_count_histogram"] = {str(k): v for k, v in sorted(species_hist.items())}
    stats["stage_mix"] = dict(sorted(stage_mix.items()))
    stats["rejection_reasons"] = dict(sorted(reasons.items()))
    return crystals, stats


def load_sampler(vae_payload: dict, diff_payload: dict):
    if diff_payload.get("vae_fingerprint") != vae_payload["fingerprint"]:
        raise CheckpointMismatch("diffusion checkpoint was trained against a different VAE")
    if diff_payload["config_hash"] != vae_payload["config_hash"]:
        raise CheckpointMismatch("checkpoints were written with different configs")
    cfg = config_from_dict(vae_payload["config"])
    vae = load_vae(vae_payload)
    scales = NoiseScales(diff_payload["trainer"]["varpi"]).freeze()
    diffuser = Diffuser(cfg.diffusion, cfg.vae.n_ladder, vae.wave_set, scales, vae.log_sigma.detach(), diff_payload["trainer"]["seed"])
    diffuser.load_state_dict(diff_payload["trainer"]["model"])
    diffuser.eval()
    return cfg, vae, diffuser, scales


# -- standalone recovery ----------------------------------------------------------------------------


def recover_document(path) -> list[dict]:
    """Recover every structure in a Fourier JSON document."""
    ws, d, items = read_fourier_json(path)
    out = []
    for ident, fr, lat in items:
        try:
            results = recover(fr, d)
        except NonIntegerMultiplicity as exc:
            out.append({"id": ident, "recoverable": False, "stages": [], "reason": str(exc), "structure": None})
            continue
        ok = all(r.ok for r in results)
        species, coords = [], []
        for z, r in zip(fr.slot_species, results):
            if r.stage == 0:
                continue
            species.append(int(z))
            coords.append(np.asarray(r.coords, dtype=np.int64).tolist())
        lattice = np.eye(3) if lat is None else lat
        record = {
            "schema_version": 1,
            "id": ident,
            "lattice": [float(v) for v in np.asarray(lattice).reshape(-1)],
            "grid_denominator": d,
            "species": [{"z": z, "coords": c} for z, c in sorted(zip(species, coords))],
        }
        out.append({
            "id": ident,
            "recoverable": ok,
            "stages": [str(r.stage) for r in results],
            "residual": float(max(r.residual for r in results)),
            "structure": record if ok else None,
        })
    return out


def encode_for_recovery(crystals, jmax: int = 4, truncation: str = "cubic") -> list[FourierRepr]:
    ws = build_wave_set(truncation, jmax)
    return [fourier_forward(c, ws) for c in crystals]

