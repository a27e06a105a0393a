"""Nonnegative unit-mass densities sampled on the uniform torus grid."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._spectral import eval_series, fft_wavenumbers, grid_to_cube
from ._validation import check_points, wrap_unit

MASS_TOL = 1e-12


@dataclass(frozen=True)
class DensityField:
    """Grid values of a probability density on [0, 1)^d.

    ``values[j]`` is the density at the node ``j * h``; ``h = 1/n``.  Between
    nodes the field is read as its trigonometric interpolant with the Nyquist
    modes dropped, which is what :meth:`evaluate` and the spectral operators
    use.
    """

    values: np.ndarray
    time: float = 0.0
    clipped_mass: float = field(default=0.0, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim not in (1, 2, 3) or len(set(v.shape)) != 1:
            raise ValueError(f"values must be an n^d array with d in 1..3, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def d(self):
        return self.values.ndim

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def cell_volume(self):
        return self.h ** self.d

    @property
    def band(self):
        return self.n // 2 - 1

    def mass(self):
        return float(self.values.sum() * self.cell_volume)

    def fourier(self):
        """FFT-ordered coefficients normalized so ``rho_hat(0)`` is the mass."""
        return np.fft.fftn(self.values) / self.values.size

    def band_coefficients(self, B=None):
        B = self.band if B is None else min(B, self.band)
        return grid_to_cube(self.fourier(), B)

    def evaluate(self, x):
        pts, single = check_points(x, self.d)
        out = eval_series(self.band_coefficients(), wrap_unit(pts)).real
        return out[0] if single else out

    def grid_points(self):
        g = np.arange(self.n) * self.h
        mesh = np.meshgrid(*([g] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def validate(self, tol=MASS_TOL):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density has non-finite values")
        if self.values.min() < 0.0:
            raise ValueError(f"density has negative values (min {self.values.min():.3e})")
        m = self.mass()
        if abs(m - 1.0) > tol:
            raise ValueError(f"density mass is {m!r}, expected 1 within {tol}")
        return self

    def with_values(self, values, time=None, clipped_mass=0.0):
        return replace(self, values=values, time=self.time if time is None else time,
                       clipped_mass=clipped_mass)

    @classmethod
    def from_values(cls, values, time=0.0, normalize=True):
        v = np.array(values, dtype=np.float64)
        if v.min() < 0.0:
            raise ValueError("density values must be nonnegative")
        if normalize:
            v = v / (v.sum() / v.size)
        return cls(v, time)

    @classmethod
    def uniform(cls, n, d):
        return cls(np.ones((n,) * d))

    @classmethod
    def wrapped_gaussian(cls, n, d, std, center=None):
        """Periodized Gaussian, built from its exact Fourier coefficients."""
        center = np.full(d, 0.5) if center is None else np.asarray(center, dtype=float)
        ks = fft_wavenumbers(n, d)
        k2 = sum(k * k for k in ks)
        phase = sum(k * c for k, c in zip(ks, center))
        hat = np.exp(-2.0 * np.pi**2 * std**2 * k2 - 2j * np.pi * phase)
        if n % 2 == 0:
            # drop Nyquist modes so the grid data is its own band-limited interpolant
            for ax in range(d):
                sl = [slice(None)] * d
                sl[ax] = n // 2
                hat[tuple(sl)] = 0.0
        v = np.fft.ifftn(hat).real * hat.size
        v = np.clip(v, 0.0, None)
        return cls.from_values(v)

    @classmethod
    def parse(cls, text, n, d):
        """Build an initial density from a CLI string: ``uniform`` or ``gaussian:STD``."""
        kind, _, arg = text.partition(":")
        if kind == "uniform":
            return cls.uniform(n, d)
        if kind == "gaussian":
            return cls.wrapped_gaussian(n, d, float(arg or 0.1))
        raise ValueError(f"unknown initial density {text!r}")
