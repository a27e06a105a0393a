"""Particle and mean-field laboratory for singular interaction kernels on the torus."""

__version__ = "0.1.0"

from .density import DensityField  # noqa: E402
from .kernels import ConditionReport, PotentialSpec, certify_kernel  # noqa: E402

__all__ = ["ConditionReport", "DensityField", "PotentialSpec", "__version__", "certify_kernel"]
