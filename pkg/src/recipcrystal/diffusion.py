"""Latent diffusion over the auxiliary ladder.

Noise is isotropic radial Laplace with per-channel scale ``varpi``; the mixing
schedule keeps ``phi`` roughly linear in remaining information:

    s^2 = ((1 + R)^phi - 1) / R,   c^2 = 1 - s^2,   R = 3 (varpi / exp(sigma))^2

Pruned channels (selector false) carry ``varpi = 0`` and stay exactly zero in
every tensor produced here.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .complex_nn import CDTYPE, RDTYPE, BlockConfig, ComplexBlock, ComplexLinear, complex_init
from .errors import DivergenceDetected, EmptyCorpus, ScalesNotFrozen
from .vae import CrystalVAE, assign_slots, collate, lr_at, make_sample

PHI_MIN = 0.01
PHI_MAX = 0.99
PHI_BINS = ((0.01, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 0.99))
_ZERO = torch.zeros((), dtype=CDTYPE)


# -- noise and scales ------------------------------------------------------------------


def sample_radial_laplace(varpi, generator=None, shape=None) -> torch.Tensor:
    """Complex noise with density proportional to ``exp(-|nu| / varpi)``.

    The radius is Gamma(2, varpi), drawn as ``varpi * (E1 + E2)``; the phase is
    uniform.  ``shape`` defaults to ``varpi.shape`` and must broadcast with it.
    """
    varpi = torch.as_tensor(varpi, dtype=RDTYPE)
    shape = tuple(varpi.shape) if shape is None else tuple(shape)
    e1 = torch.empty(shape, dtype=RDTYPE).exponential_(generator=generator)
    e2 = torch.empty(shape, dtype=RDTYPE).exponential_(generator=generator)
    theta = torch.rand(shape, generator=generator, dtype=RDTYPE) * (2.0 * math.pi)
    return torch.polar(varpi * (e1 + e2), theta)


def gaussian_matched_variance(varpi):
    """Per-component Gaussian variance with the same second moment: ``3 varpi^2``."""
    return 3.0 * varpi**2


@dataclass(frozen=True)
class NoiseScales:
    varpi: torch.Tensor  # (L*n_aux, d); 0 marks a pruned channel
    frozen: bool = False

    def freeze(self) -> "NoiseScales":
        return NoiseScales(self.varpi.detach().clone(), True)


def estimate_scales(mus, selector, floor: float = 1e-12) -> NoiseScales:
    """``varpi = mean(|mu|) / 2`` per channel over an iterable of ladder means.

    ``mus`` yields tensors shaped ``(B, L*n_aux, d)``.  Pruned channels get 0;
    active channels are floored at ``floor`` so they stay strictly positive.
    """
    total = None
    count = 0
    with torch.no_grad():
        for mu in mus:
            s = mu.abs().sum(dim=0)
            total = s if total is None else total + s
            count += mu.shape[0]
    if not count:
        raise EmptyCorpus("cannot estimate noise scales from an empty corpus")
    varpi = torch.clamp(0.5 * total / count, min=floor)
    varpi = torch.where(selector, varpi, torch.zeros((), dtype=RDTYPE))
    return NoiseScales(varpi).freeze()


def snr_ratio(varpi, log_sigma):
    return 3.0 * (varpi / torch.exp(log_sigma)) ** 2


def schedule_coeffs(phi, R):
    """Mixing coefficients ``(c, s)``; ``R = 0`` uses the limit ``s^2 = phi``."""
    phi = torch.as_tensor(phi, dtype=RDTYPE)
    R = torch.as_tensor(R, dtype=RDTYPE)
    safe_r = torch.where(R > 0, R, torch.ones((), dtype=RDTYPE))
    s2 = torch.where(R > 0, torch.expm1(phi * torch.log1p(safe_r)) / safe_r, phi)
    s2 = torch.where(phi == 1, torch.ones((), dtype=RDTYPE), s2)
    s2 = torch.clamp(s2, 0.0, 1.0)
    return torch.sqrt(1.0 - s2), torch.sqrt(s2)


def phi_bin(phi: float) -> int:
    for i, (_, hi) in enumerate(PHI_BINS):
        if phi <= hi:
            return i
    return len(PHI_BINS) - 1


@dataclass
class DiffusionState:
    z: torch.Tensor
    phi: float
    c: torch.Tensor
    s: torch.Tensor
    noise: torch.Tensor


def corrupt(latent, phi, scales: NoiseScales, log_sigma, selector, generator=None) -> DiffusionState:
    """``z = c mu + s nu`` on active channels; pruned channels stay 0."""
    if not scales.frozen:
        raise ScalesNotFrozen("noise scales must be frozen before corruption")
    c, s = schedule_coeffs(phi, snr_ratio(scales.varpi, log_sigma))
    noise = sample_radial_laplace(scales.varpi, generator, latent.shape)
    z = torch.where(selector, c * latent + s * noise, _ZERO)
    noise = torch.where(selector, noise, _ZERO)
    return DiffusionState(z, float(phi), c, s, noise)


def diffusion_loss(pred, true, tau, selector) -> torch.Tensor:
    """RMS of ``(pred - true) / tau`` over active channels, two real components each."""
    resid = (pred - true) / tau
    sq = torch.where(selector, resid.real**2 + resid.imag**2, torch.zeros((), dtype=RDTYPE))
    n = selector.sum() * (pred.numel() // selector.numel())
    return torch.sqrt(sq.sum() / (2.0 * n))


# -- reverse model --------------------------------------------------------------------------


@dataclass
class DiffusionConfig:
    n_layers: int = 4
    n_heads: int = 3
    d_head: int = 48
    n_scratch: int | None = None  # defaults to one token per wave vector
    modulus_gating: bool = True
    lr: float = 1e-3
    lr_min: float = 1e-5
    warmup_start: float = 1e-7
    warmup_steps: int = 1000
    total_steps: int = 10000
    weight_decay: float = 1e-9
    batch_size: int = 8


def toy_diffusion_config(**overrides) -> DiffusionConfig:
    base = dict(n_layers=2, n_heads=3, d_head=12, lr=3e-3, lr_min=3e-4, warmup_steps=20, total_steps=500, batch_size=8)
    base.update(overrides)
    return DiffusionConfig(**base)


class Diffuser(nn.Module):
    """Noise predictor over ladder tokens plus Fourier-tagged scratch tokens.

    Inputs are divided by their expected per-channel scale at ``phi`` and the
    head predicts noise in units of ``varpi``, so the network works at unit
    scale whatever the ratio between ``varpi`` and ``exp(sigma)``.
    """

    def __init__(self, cfg: DiffusionConfig, n_ladder: int, wave_set, scales: NoiseScales, log_sigma, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.n_heads * cfg.d_head
        gen = torch.Generator().manual_seed(seed)
        bc = BlockConfig(
            d, cfg.n_heads, cfg.d_head, jmax=wave_set.jmax,
            rms_bias=True, head_scale=True, mlp_bias=True, modulus_gating=cfg.modulus_gating,
        )
        n_scratch = len(wave_set) if cfg.n_scratch is None else cfg.n_scratch
        waves = np.zeros((n_ladder + n_scratch, 3), dtype=np.int64)
        if n_scratch:
            waves[n_ladder:] = np.resize(wave_set.vectors, (n_scratch, 3))
        self.waves = waves
        self.n_ladder = n_ladder
        self.init_tokens = nn.Parameter(complex_init((len(waves), d), 1, gen))
        self.blocks = nn.ModuleList([ComplexBlock(bc, gen, conditioned=True) for _ in range(cfg.n_layers)])
        self.head = ComplexLinear(d, d, generator=gen)
        self.register_buffer("varpi", scales.varpi.detach().clone())
        self.register_buffer("log_sigma", torch.as_tensor(log_sigma, dtype=RDTYPE).detach().clone())
        self.register_buffer("selector", self.varpi > 0)

    def input_scale(self, phi):
        # E|mu|^2 ~ 4 varpi^2 and E|nu|^2 = 6 varpi^2
        c, s = schedule_coeffs(phi, snr_ratio(self.varpi, self.log_sigma))
        scale = self.varpi * torch.sqrt(4.0 * c**2 + 6.0 * s**2)
        return torch.where(self.selector, scale, torch.ones((), dtype=RDTYPE))

    def forward(self, z, phi):
        b = z.shape[0]
        x = self.init_tokens.expand(b, -1, -1)
        x = torch.cat([x[:, : self.n_ladder] + z / self.input_scale(phi), x[:, self.n_ladder:]], dim=1)
        for block in self.blocks:
            x = block(x, self.waves, phi)
        out = self.varpi * self.head(x[:, : self.n_ladder])
        return torch.where(self.selector, out, _ZERO)


def reverse_diffuser(z, phi, model: Diffuser):
    return model(z, phi)


# -- training ------------------------------------------------------------------------------------


def encode_corpus(vae: CrystalVAE, crystals, seed: int = 0, batch_size: int = 16) -> torch.Tensor:
    """Masked ladder means for every crystal under one seeded slot assignment."""
    if not crystals:
        raise EmptyCorpus("empty corpus")
    rng = np.random.default_rng(seed)
    ws = vae.wave_set
    out = []
    with torch.no_grad():
        for start in range(0, len(crystals), batch_size):
            chunk = crystals[start:start + batch_size]
            samples = [make_sample(c, ws, assign_slots(len(c.species), rng, vae.cfg.cyclic_slots)) for c in chunk]
            out.append(vae.encode(collate(samples)).mu)
    return torch.cat(out, dim=0)


class DiffusionTrainer:
    """Noise-prediction training against a frozen VAE's ladder means."""

    def __init__(self, cfg: DiffusionConfig, vae: CrystalVAE, latents: torch.Tensor, scales: NoiseScales, seed: int = 0):
        if not scales.frozen:
            raise ScalesNotFrozen("estimate and freeze scales before training")
        self.cfg = cfg
        self.seed = seed
        self.latents = latents.detach()
        self.scales = scales
        self.log_sigma = vae.log_sigma.detach().clone()
        self.selector = vae.selector.detach().clone()
        self.model = Diffuser(cfg, vae.cfg.n_ladder, vae.wave_set, scales, self.log_sigma, seed)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.warmup_start, betas=(0.9, 0.999), eps=1e-8)
        self.rng = np.random.default_rng(seed)
        self.gen = torch.Generator().manual_seed(seed + 1)
        self.step = 0
        self.trace: list[dict] = []


    def train_step(self) -> dict:
        cfg = self.cfg
        lr = lr_at(self.step, cfg.lr, cfg.lr_min, cfg.warmup_start, cfg.warmup_steps, cfg.total_steps)
        for group in self.opt.param_groups:
            group["lr"] = lr
            group["weight_decay"] = cfg.weight_decay if self.step < cfg.warmup_steps else 0.0
        n = len(self.latents)
        idx = self.rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        mu = self.latents[torch.as_tensor(idx)]
        phi = float(self.rng.uniform(PHI_MIN, PHI_MAX))  # shared across the batch
        state = corrupt(mu, phi, self.scales, self.log_sigma, self.selector, self.gen)
        pred = self.model(state.z, phi)
        tau = torch.exp(self.log_sigma)
        loss = diffusion_loss(pred, state.noise, tau, self.selector)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceDetected(f"non-finite diffusion loss at step {self.step}")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.step += 1
        with torch.no_grad():
            mu_hat = (state.z - state.s * pred) / state.c
            signal = diffusion_loss(mu_hat, mu, tau, self.selector)
        record = {"step": self.step, "lr": lr, "phi": phi, "bin": phi_bin(phi), "loss": value, "signal_rmse": float(signal)}
        self.trace.append(record)
        return record

    def run(self, n_steps: int | None = None, callback=None) -> list[dict]:
        n_steps = self.cfg.total_steps - self.step if n_steps is None else n_steps
        for _ in range(n_steps):
            record = self.train_step()
            if callback is not None:
                callback(record)
        return self.trace

    def state_dict(self) -> dict:
        return {
            "config": asdict(self.cfg),
            "seed": self.seed,
            "step": self.step,
            "model": copy.deepcopy(self.model.state_dict()),
            "optimizer": copy.deepcopy(self.opt.state_dict()),
            "numpy_rng": copy.deepcopy(self.rng.bit_generator.state),
            "torch_rng": self.gen.get_state(),
            "varpi": self.scales.varpi.clone(),
            "trace": list(self.trace),
        }

    def load_state_dict(self, state: dict):
        self.model.load_state_dict(state["model"])
        self.opt.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["numpy_rng"]
        self.gen.set_state(state["torch_rng"])
        self.step = state["step"]
        self.trace = list(state["trace"])


def binned_metrics(trace) -> list[dict]:
    """Mean noise and signal RMSE per diffusion-coordinate bin."""
    out = []
    for i, (lo, hi) in enumerate(PHI_BINS):
        rows = [r for r in trace if r["bin"] == i]
        out.append({
            "bin": [lo, hi],
            "count": len(rows),
            "noise_rmse": float(np.mean([r["loss"] for r in rows])) if rows else None,
            "signal_rmse": float(np.mean([r["signal_rmse"] for r in rows])) if rows else None,
        })
    return out


def train_diffuser(vae: CrystalVAE, corpus, cfg: DiffusionConfig, seed: int = 0, n_steps: int | None = None):
    latents = encode_corpus(vae, list(corpus), seed)
    scales = estimate_scales([latents], vae.selector)
    trainer = DiffusionTrainer(cfg, vae, latents, scales, seed)
    trainer.run(n_steps)
    return trainer, binned_metrics(trainer.trace)


# -- sampling ---------------------------------------------------------------------------------------


def generate(predict_fn, scales: NoiseScales, log_sigma, selector, n_samples: int, n_steps: int, generator=None):
    """Ancestral sampler: predict noise, reconstruct, re-corrupt at the next phi.

    ``predict_fn(z, phi)`` returns the noise estimate.  The chain starts from pure
    noise mixed at ``phi = 0.99`` and returns the reconstruction at the last step.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if not scales.frozen:
        raise ScalesNotFrozen("noise scales must be frozen before sampling")
    shape = (n_samples, *scales.varpi.shape)
    grid = np.linspace(PHI_MAX, PHI_MIN, n_steps)
    R = snr_ratio(scales.varpi, log_sigma)
    zeros = torch.zeros(shape, dtype=CDTYPE)
    z = corrupt(zeros, float(grid[0]), scales, log_sigma, selector, generator).z
    mu_hat = zeros
    with torch.no_grad():
        for k, phi in enumerate(grid):
            c, s = schedule_coeffs(float(phi), R)
            nu_hat = predict_fn(z, float(phi))
            safe_c = torch.where(c > 0, c, torch.ones((), dtype=RDTYPE))
            mu_hat = torch.where(selector, (z - s * nu_hat) / safe_c, _ZERO)
            if k + 1 < n_steps:
                z = corrupt(mu_hat, float(grid[k + 1]), scales, log_sigma, selector, generator).z
    return mu_hat
