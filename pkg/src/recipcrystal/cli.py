"""``recipcrystal`` command-line tool.

Exit codes: 0 success, 1 usage or config error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .errors import (
    ArchiveCorrupt,
    CheckpointMismatch,
    CollisionAfterSnap,
    ConfigError,
    InvalidDenominator,
    ParseError,
    RecipCrystalError,
)
from .io import read_archive, write_archive, write_xtl

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
USAGE_ERRORS = (ConfigError, CheckpointMismatch)
DATA_ERRORS = (ParseError, ArchiveCorrupt, InvalidDenominator, CollisionAfterSnap)

log = logging.getLogger("recipcrystal")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def cmd_preprocess(args) -> int:
    with open(args.input, encoding="utf-8") as fh:
        archive = pipeline.preprocess(enumerate(fh, start=1), args.denominator, args.jmax, args.truncation)
    write_archive(args.out, archive)
    log.info("wrote %d structures (%d rejected) to %s", len(archive.crystals), len(archive.rejected), args.out)
    return EXIT_OK


def cmd_screen(args) -> int:
    report = pipeline.screen(read_archive(args.archive), args.jmax)
    _write_json(args.out, report)
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    Path(csv_path).write_text(pipeline.report_csv(report), encoding="utf-8")
    agg = report["aggregate"]
    log.info("screened %d structures: %d recoverable", agg["total"], agg["recoverable"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = pipeline.load_config(args.config)
    crystals = read_archive(args.corpus).crystals
    resume = pipeline.load_checkpoint(args.resume, args.kind, cfg) if args.resume else None
    metrics = open(args.metrics, "a" if resume else "w", encoding="utf-8") if args.metrics else sys.stdout
    try:
        if args.kind == "vae":
            trainer = pipeline.train_vae_stage(cfg, crystals, args.seed, args.steps, resume, metrics)
            pipeline.save_checkpoint(args.out, "vae", cfg, trainer)
        else:
            if not args.vae:
                raise CheckpointMismatch("diffusion training needs --vae CHECKPOINT")
            vae_payload = pipeline.load_checkpoint(args.vae, "vae", cfg)
            trainer = pipeline.train_diffusion_stage(cfg, vae_payload, crystals, args.seed, args.steps, resume, metrics)
            pipeline.save_checkpoint(args.out, "diffusion", cfg, trainer, {"vae_fingerprint": vae_payload["fingerprint"]})
    finally:
        if metrics is not sys.stdout:
            metrics.close()
    return EXIT_OK


def cmd_sample(args) -> int:
    vae_payload = pipeline.load_checkpoint(args.vae, "vae")
    diff_payload = pipeline.load_checkpoint(args.diffusion, "diffusion")
    cfg, vae, diffuser, scales = pipeline.load_sampler(vae_payload, diff_payload)
    steps = args.steps or cfg.sample_steps
    crystals, stats = pipeline.sample_structures(
        vae, diffuser, scales, args.n, steps, args.seed, cfg.grid_denominator, cfg.sample_tol
    )
    write_xtl(args.out, crystals)
    _write_json(args.stats or str(Path(args.out).with_suffix(".stats.json")), stats)
    log.info("sampled %d: %d recovered, %d rejected", args.n, stats["recovered"], stats["rejected"])
    return EXIT_OK


def cmd_recover(args) -> int:
    results = pipeline.recover_document(args.input)
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recipcrystal", description="Reciprocal-space crystal toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="snap XTL-JSON lines and encode Fourier coefficients")
    p.add_argument("input", help="XTL-JSON lines file")
    p.add_argument("--out", required=True, help="output archive (.npz)")
    p.add_argument("--denominator", type=int, default=48)
    p.add_argument("--jmax", type=int, default=4)
    p.add_argument("--truncation", choices=("cubic", "spherical"), default="cubic")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("screen", help="run recovery over an archive and report")
    p.add_argument("archive")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", help="CSV summary path (default: report path with .csv)")
    p.add_argument("--jmax", type=int, default=None, help="re-encode at this truncation before screening")
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("train", help="train the VAE or the latent diffuser")
    p.add_argument("kind", choices=("vae", "diffusion"))
    p.add_argument("--config", required=True, help="flat JSON config")
    p.add_argument("--corpus", required=True, help="preprocessed archive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--vae", help="VAE checkpoint (required for diffusion)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=None, help="stop at this global step")
    p.add_argument("--metrics", help="line-delimited JSON metrics (default: stdout)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate, decode and recover structures")
    p.add_argument("--vae", required=True)
    p.add_argument("--diffusion", required=True)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--steps", type=int, default=None, help="sampler steps (default from config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="XTL-JSON output")
    p.add_argument("--stats", help="stats JSON path (default: <out>.stats.json)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("recover", help="recover structures from a Fourier JSON document")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        torch.set_num_threads(pipeline.worker_count())
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RecipCrystalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
