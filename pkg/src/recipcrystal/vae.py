"""Auxiliary-ladder variational autoencoder over truncated Fourier crystals.

The encoder reads aux tokens, one global token (lattice + species slots) and
one token per retained wave vector.  After every block it keeps only the aux
token states; stacking them over depth gives the latent ladder.  The decoder
starts from learned constants and injects ladder slices into its aux tokens in
reverse depth order before each block.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import lattice as lattice_geom
from .complex_nn import CDTYPE, RDTYPE, BlockConfig, ComplexBlock, ComplexLinear, complex_init
from .crystal import MAX_SPECIES, Z_MAX, Crystal
from .errors import DivergenceDetected
from .reciprocal import N_SLOTS, build_wave_set, fourier_forward

N_CLASSES = Z_MAX + 1  # class 0 is the empty slot


@dataclass
class VAEConfig:
    d_model: int = 144
    n_heads: int = 3
    d_head: int = 48
    n_layers: int = 4
    jmax: int = 2
    truncation: str = "cubic"
    n_aux: int = 5
    d_enc: int = 16
    rms_bias: bool = True
    head_scale: bool = False
    mlp_bias: bool = False
    modulus_gating: bool = True
    cyclic_slots: bool = True
    lambda_z: float = 1.0
    lambda_mu: float = 0.1
    log_sigma_init: float = -2.0
    # optimisation
    lr: float = 1e-3
    lr_min: float = 1e-5
    warmup_start: float = 1e-7
    warmup_steps: int = 1000
    total_steps: int = 10000
    weight_decay: float = 1e-9
    batch_size: int = 8
    nnz_target: int | None = None

    def block_config(self) -> BlockConfig:
        return BlockConfig(
            self.d_model,
            self.n_heads,
            self.d_head,
            jmax=self.jmax,
            rms_bias=self.rms_bias,
            head_scale=self.head_scale,
            mlp_bias=self.mlp_bias,
            modulus_gating=self.modulus_gating,
        )

    @property
    def n_ladder(self) -> int:
        return self.n_layers * self.n_aux

    @property
    def n_channels(self) -> int:
        return self.n_ladder * self.d_model


def toy_vae_config(**overrides) -> VAEConfig:
    """Desk-scale configuration used by tests and the acceptance suite."""
    base = dict(
        d_model=36, n_heads=3, d_head=12, n_layers=2, jmax=1, n_aux=3,
        lr=3e-3, lr_min=3e-4, warmup_steps=20, total_steps=200, batch_size=8,
    )
    base.update(overrides)
    return VAEConfig(**base)


# -- slots and targets ---------------------------------------------------------------


def assign_slots(n_species: int, rng=None, cyclic: bool = True) -> tuple[int, ...]:
    """Slot index for each species (in atomic-number order).

    Cyclic placement picks a uniform random start slot and fills consecutively
    modulo six; otherwise species occupy slots ``0..n-1``.
    """
    if not 1 <= n_species <= N_SLOTS:
        raise ValueError(f"species count {n_species} outside 1..{N_SLOTS}")
    start = int(rng.integers(N_SLOTS)) if cyclic else 0
    return tuple((start + i) % N_SLOTS for i in range(n_species))


@dataclass
class Sample:
    """One training example with its slot assignment applied."""

    lattice_coeffs: np.ndarray  # (6,)
    slot_species: tuple[int, ...]  # (6,) atomic numbers, 0 = empty
    fourier: np.ndarray  # (n_waves, 6) complex


def make_sample(c: Crystal, ws, slots) -> Sample:
    fr = fourier_forward(c, ws, slots)
    return Sample(lattice_geom.lattice_to_log(c.lattice).coeffs, fr.slot_species, fr.coeffs)


@dataclass
class Batch:
    lattice: torch.Tensor  # (B, 6) real
    species: torch.Tensor  # (B, 6) long
    fourier: torch.Tensor  # (B, W, 6) complex


def collate(samples) -> Batch:
    return Batch(
        torch.tensor(np.stack([s.lattice_coeffs for s in samples]), dtype=RDTYPE),
        torch.tensor([s.slot_species for s in samples], dtype=torch.long),
        torch.tensor(np.stack([s.fourier for s in samples]), dtype=CDTYPE),
    )


# -- model -------------------------------------------------------------------------------


@dataclass
class Ladder:
    mu: torch.Tensor  # (B, L*n_aux, d) complex, mask and selector applied
    log_sigma: torch.Tensor  # (L*n_aux, d) real
    selector: torch.Tensor  # (L*n_aux, d) bool


@dataclass
class HeadsOutput:
    lattice: torch.Tensor  # (B, 6)
    species_logits: torch.Tensor  # (B, 6, 84)
    fourier: torch.Tensor  # (B, W, 6) complex


class CrystalVAE(nn.Module):
    def __init__(self, cfg: VAEConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        bc = cfg.block_config()
        d = cfg.d_model
        self.wave_set = build_wave_set(cfg.truncation, cfg.jmax)
        n_waves = len(self.wave_set)
        waves = np.zeros((cfg.n_aux + 1 + n_waves, 3), dtype=np.int64)
        waves[cfg.n_aux + 1:] = self.wave_set.vectors
        self.waves = waves

        self.aux_init = nn.Parameter(complex_init((cfg.n_aux, d), 1, gen))
        self.species_embed = nn.Parameter(torch.randn(N_CLASSES, cfg.d_enc, generator=gen, dtype=RDTYPE))
        n_global = MAX_SPECIES * (1 + cfg.d_enc)
        self.global_w = nn.Parameter(torch.randn(n_global, 2 * d, generator=gen, dtype=RDTYPE) / math.sqrt(n_global))
        self.global_b = nn.Parameter(torch.zeros(2 * d, dtype=RDTYPE))
        self.fourier_proj = ComplexLinear(N_SLOTS, d, generator=gen)
        self.encoder = nn.ModuleList([ComplexBlock(bc, gen) for _ in range(cfg.n_layers)])

        self.mask = nn.Parameter(torch.ones(cfg.n_ladder, d, dtype=RDTYPE))
        self.log_sigma = nn.Parameter(torch.full((cfg.n_ladder, d), cfg.log_sigma_init, dtype=RDTYPE))
        self.register_buffer("selector", torch.ones(cfg.n_ladder, d, dtype=torch.bool))

        self.dec_init = nn.Parameter(complex_init((len(waves), d), 1, gen))
        self.decoder = nn.ModuleList([ComplexBlock(bc, gen) for _ in range(cfg.n_layers)])
        self.lattice_head = nn.Linear(2 * d, 6, dtype=RDTYPE)
        self.species_head = nn.Linear(2 * d, N_SLOTS * N_CLASSES, dtype=RDTYPE)
        with torch.no_grad():
            for lin in (self.lattice_head, self.species_head):
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=gen, dtype=RDTYPE) / math.sqrt(2 * d))
                lin.bias.zero_()
        self.fourier_head = ComplexLinear(d, N_SLOTS, bias=True, generator=gen)

    # tokens ----------------------------------------------------------------------

    def tokenize(self, batch: Batch) -> torch.Tensor:
        cfg = self.cfg
        b = batch.lattice.shape[0]
        emb = self.species_embed[batch.species].reshape(b, -1)
        glob = torch.cat([batch.lattice, emb], dim=-1) @ self.global_w + self.global_b
        glob = torch.complex(glob[:, : cfg.d_model], glob[:, cfg.d_model:])[:, None, :]
        four = self.fourier_proj(batch.fourier)
        aux = self.aux_init.expand(b, -1, -1)
        return torch.cat([aux, glob, four], dim=1)

    # encoder / bottleneck ------------------------------------------------------------

    def encode(self, batch: Batch) -> Ladder:
        x = self.tokenize(batch)
        rungs = []
        for block in self.encoder:
            x = block(x, self.waves)
            rungs.append(x[:, : self.cfg.n_aux])
        mu = torch.cat(rungs, dim=1)
        gate = self.mask * self.selector
        return Ladder(mu * gate, self.log_sigma, self.selector)

    def sample_latent(self, ladder: Ladder, generator=None) -> torch.Tensor:
        """``mu + (e_re + i e_im) exp(sigma)``; pruned channels are exactly 0."""
        shape = ladder.mu.shape
        eps = torch.complex(
            torch.randn(shape, generator=generator, dtype=RDTYPE),
            torch.randn(shape, generator=generator, dtype=RDTYPE),
        )
        z = ladder.mu + eps * torch.exp(ladder.log_sigma)
        return torch.where(ladder.selector, z, torch.zeros((), dtype=CDTYPE))

    # decoder ------------------------------------------------------------------------------

    def decode(self, latent: torch.Tensor, reverse: bool = True) -> HeadsOutput:
        cfg = self.cfg
        n_aux, n_layers = cfg.n_aux, cfg.n_layers
        b = latent.shape[0]
        x = self.dec_init.expand(b, -1, -1)
        for i, block in enumerate(self.decoder):
            rung = n_layers - 1 - i if reverse else i
            inject = latent[:, rung * n_aux:(rung + 1) * n_aux]
            x = torch.cat([x[:, :n_aux] + inject, x[:, n_aux:]], dim=1)
            x = block(x, self.waves)
        glob = x[:, n_aux]
        glob_real = torch.cat([glob.real, glob.imag], dim=-1)
        return HeadsOutput(
            self.lattice_head(glob_real),
            self.species_head(glob_real).reshape(b, N_SLOTS, N_CLASSES),
            self.fourier_head(x[:, n_aux + 1:]),
        )

    def forward(self, batch: Batch, generator=None):
        ladder = self.encode(batch)
        return self.decode(self.sample_latent(ladder, generator)), ladder


# -- losses ---------------------------------------------------------------------------------


def snr_penalty(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """Mean over channels (and batch) of ``|mu| / exp(sigma)``."""
    return torch.mean(mu.abs() / torch.exp(log_sigma))


@dataclass
class LossParts:
    total: torch.Tensor
    ce: torch.Tensor
    lat: torch.Tensor
    four: torch.Tensor
    mu: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("total", "ce", "lat", "four", "mu")}


def vae_loss(heads: HeadsOutput, batch: Batch, ladder: Ladder, lambda_z: float = 1.0, lambda_mu: float = 0.1) -> LossParts:
    ce = nn.functional.cross_entropy(heads.species_logits.reshape(-1, N_CLASSES), batch.species.reshape(-1))
    lat = torch.mean((heads.lattice - batch.lattice) ** 2)
    diff = heads.fourier - batch.fourier
    four = torch.mean(diff.real**2 + diff.imag**2)
    rec = torch.sqrt(lat + four)
    pen = snr_penalty(ladder.mu, ladder.log_sigma)
    return LossParts(lambda_z * ce + rec + lambda_mu * pen, ce, lat, four, pen)


# -- pruning ----------------------------------------------------------------------------------


def nnz_schedule(step: int, total_steps: int, full: int, target: int) -> int:
    if not 0 <= step <= total_steps:
        raise ValueError("step outside schedule")
    frac = 0.5 * (1.0 + math.cos(math.pi * step / total_steps)) if total_steps else 0.0
    return int(round(target + (full - target) * frac))


def nnz_step(selector: torch.Tensor, mask: torch.Tensor, step: int, total_steps: int, target_nnz: int) -> torch.Tensor:
    """Drop the smallest-|mask| active channels down to the scheduled count.

    Returns a new selector; channels already pruned stay pruned.
    """
    full = selector.numel()
    keep = nnz_schedule(step, total_steps, full, target_nnz)
    active = int(selector.sum())
    if active <= keep:
        return selector.clone()
    flat_sel = selector.reshape(-1)
    score = torch.where(flat_sel, mask.detach().abs().reshape(-1), torch.full_like(mask.reshape(-1), math.inf))
    order = torch.argsort(score, stable=True)
    new = flat_sel.clone()
    new[order[: active - keep]] = False
    return new.reshape(selector.shape)


# -- training -----------------------------------------------------------------------------------


def lr_at(step: int, lr: float, lr_min: float, warmup_start: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from ``warmup_start`` then cosine decay to ``lr_min``."""
    if step < warmup_steps:
        return warmup_start + (lr - warmup_start) * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    t = min(1.0, (step - warmup_steps) / span)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * t))


def _check_finite(value: float, step: int):
    if not math.isfinite(value):
        raise DivergenceDetected(f"non-finite loss at step {step}")


class VAETrainer:
    """Adam loop with warmup/cosine learning rate, warmup-only weight decay and pruning.

    All state needed for an exact resume lives in :meth:`state_dict`.
    """

    def __init__(self, cfg: VAEConfig, corpus, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.model = CrystalVAE(cfg, seed)
        self.crystals = list(corpus)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.warmup_start, betas=(0.9, 0.999), eps=1e-8)
        self.rng = np.random.default_rng(seed)
        self.gen = torch.Generator().manual_seed(seed + 1)
        self.step = 0
        self.trace: list[dict] = []

    def _batch(self) -> Batch:
        cfg = self.cfg
        ws = self.model.wave_set
        idx = self.rng.choice(len(self.crystals), size=min(cfg.batch_size, len(self.crystals)), replace=False)
        samples = []
        for i in idx:
            c = self.crystals[i]
            samples.append(make_sample(c, ws, assign_slots(len(c.species), self.rng, cfg.cyclic_slots)))
        return collate(samples)

    def train_step(self) -> dict:
        cfg = self.cfg
        lr = lr_at(self.step, cfg.lr, cfg.lr_min, cfg.warmup_start, cfg.warmup_steps, cfg.total_steps)
        for group in self.opt.param_groups:
            group["lr"] = lr
            group["weight_decay"] = cfg.weight_decay if self.step < cfg.warmup_steps else 0.0
        batch = self._batch()
        heads, ladder = self.model(batch, self.gen)
        parts = vae_loss(heads, batch, ladder, cfg.lambda_z, cfg.lambda_mu)
        _check_finite(float(parts.total.detach()), self.step)
        self.opt.zero_grad()
        parts.total.backward()
        self.opt.step()
        self.step += 1
        if cfg.nnz_target is not None:
            with torch.no_grad():
                self.model.selector.copy_(
                    nnz_step(self.model.selector, self.model.mask, min(self.step, cfg.total_steps), cfg.total_steps, cfg.nnz_target)
                )
        record = {"step": self.step, "lr": lr, "nnz": int(self.model.selector.sum()), **parts.as_floats()}
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
            "trace": list(self.trace),
        }

    def load_state_dict(self, state: dict):
        self.model.load_state_dict(state["model"])
        self.opt.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["numpy_rng"]
        self.gen.set_state(state["torch_rng"])
        self.step = state["step"]
        self.trace = list(state["trace"])


def train_vae(corpus, cfg: VAEConfig, seed: int = 0, n_steps: int | None = None):
    trainer = VAETrainer(cfg, corpus, seed)
    trainer.run(n_steps)
    return trainer.model, trainer.trace


def toy_corpus(
    n: int = 64,
    seed: int = 0,
    max_species: int = 2,
    max_atoms: int = 2,
    denominator: int = 12,
    palette=None,
):
    """Small seeded corpus; ``palette`` restricts atomic numbers to a fixed set."""
    from .crystal import synth_crystal

    if palette is None:
        return [synth_crystal(seed * 100003 + i, max_species, max_atoms, denominator) for i in range(n)]
    palette = sorted(int(z) for z in palette)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = int(rng.integers(1, min(max_species, len(palette)) + 1))
        species = tuple(sorted(rng.choice(palette, size=k, replace=False).tolist()))
        coords = []
        for _ in species:
            m = int(rng.integers(1, max_atoms + 1))
            flat = rng.choice(denominator**3, size=m, replace=False)
            coords.append(np.stack(np.unravel_index(flat, (denominator,) * 3), axis=1).astype(np.int64))
        lat = lattice_geom.log_to_lattice(rng.uniform(-0.5, 2.5, size=6))
        out.append(Crystal(lat, species, tuple(coords), denominator, id=f"toy-{seed}-{i}"))
    return out
