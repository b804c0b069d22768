"""Error-aware diffusion-bridge refinement on a procedural toy corpus."""

from .schedule import NoiseSchedule, bridge_coeffs, posterior_coeffs, sigma_sq
from .tensorio import SeedSpec, load_tensor, save_tensor

__all__ = ["NoiseSchedule", "SeedSpec", "bridge_coeffs", "load_tensor", "posterior_coeffs", "save_tensor",
           "sigma_sq"]
__version__ = "0.1.0"
