"""Shared, session-scoped training runs.

Training is the slow part of the suite, so each recipe runs once and the
resulting models are reused by the unit and acceptance tests.
"""

import time
from types import SimpleNamespace

import pytest
import torch

from recipcrystal import pipeline
from recipcrystal.diffusion import toy_diffusion_config, train_diffuser
from recipcrystal.vae import VAETrainer, toy_corpus, toy_vae_config

torch.set_num_threads(1)

# end-to-end recipe: a handful of prototypes repeated so the toy models can
# memorise them; pruning keeps the sampler away from unused latent channels
E2E_PROTOTYPES = dict(n=8, palette=(3, 8), max_atoms=2, seed=5)
E2E_VAE = dict(total_steps=600, cyclic_slots=False, nnz_target=24)
E2E_DIFFUSION = dict(total_steps=1500)
E2E_SAMPLES = 100


def run_toy(seed=0):
    corpus = toy_corpus(64, seed=0)
    t0 = time.perf_counter()
    vt = VAETrainer(toy_vae_config(), corpus, seed)
    vt.run()
    t1 = time.perf_counter()
    dt, bins = train_diffuser(vt.model, corpus, toy_diffusion_config(), seed)
    t2 = time.perf_counter()
    return SimpleNamespace(corpus=corpus, vae=vt, diffusion=dt, bins=bins, vae_seconds=t1 - t0, diffusion_seconds=t2 - t1)


@pytest.fixture(scope="session")
def toy_run():
    return run_toy(0)


@pytest.fixture(scope="session")
def e2e_run():
    protos = toy_corpus(**E2E_PROTOTYPES)
    corpus = [protos[i % len(protos)] for i in range(64)]
    vt = VAETrainer(toy_vae_config(**E2E_VAE), corpus, 0)
    vt.run()
    dt, bins = train_diffuser(vt.model, corpus, toy_diffusion_config(**E2E_DIFFUSION), 0)
    crystals, stats = pipeline.sample_structures(
        vt.model, dt.model, dt.scales, E2E_SAMPLES, 50, seed=0, gpd=12, tol=pipeline.SAMPLE_TOL
    )
    return SimpleNamespace(corpus=corpus, vae=vt, diffusion=dt, bins=bins, crystals=crystals, stats=stats)
