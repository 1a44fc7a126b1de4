"""Coupled ion / quartz-resonator model: moments, spectra, simulation and fits."""

from .model import ModelParams, MomentVector, build_evolution_matrix, propagate_moments
from .spectrum import Spectrum, SpectrumWindow, coherent_psd, thermal_psd, total_psd
from .thermal import thermal_state

__version__ = "0.1.0"

__all__ = [
    "ModelParams",
    "MomentVector",
    "Spectrum",
    "SpectrumWindow",
    "build_evolution_matrix",
    "coherent_psd",
    "propagate_moments",
    "thermal_psd",
    "thermal_state",
    "total_psd",
]
