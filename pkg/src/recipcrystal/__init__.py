"""Crystal structures in a truncated reciprocal-space representation.

Exact Fourier encoding and staged recovery of species-resolved unit cells, plus
a complex-valued latent VAE and diffusion model that operate on the encoding.
"""

from .crystal import Crystal, SymmetryOp, apply_symmetry, synth_crystal, validate_crystal
from .errors import RecipCrystalError
from .lattice import lattice_to_log, log_to_lattice, polar_decompose
from .reciprocal import FourierRepr, WaveSet, build_wave_set, fourier_forward, symmetry_transform
from .recovery import RecoveryResult, recover, recover_column

__version__ = "0.1.0"
