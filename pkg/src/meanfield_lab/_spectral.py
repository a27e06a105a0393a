"""Fourier-series plumbing on the unit torus.

Coefficient "cubes" are arrays of shape ``(2K+1,)*d`` holding ``c(k)`` for
``|k|_inf <= K`` with the zero mode at index ``K``.  Grid spectra use numpy's
FFT ordering and the normalization ``f_hat = fftn(f) / n**d`` so that a grid
function equals ``sum_k f_hat(k) exp(2 pi i k.x)`` at the nodes.
"""

from __future__ import annotations

import numpy as np

_CHUNK = 4096


def centered_wavenumbers(K, d):
    k = np.arange(-K, K + 1)
    return np.meshgrid(*([k] * d), indexing="ij")


def fft_wavenumbers(n, d):
    k = np.fft.fftfreq(n, 1.0 / n)
    return np.meshgrid(*([k] * d), indexing="ij")


def grid_to_cube(f_hat, B):
    """Restrict an FFT-ordered spectrum to the centered cube ``|k|_inf <= B``."""
    n = f_hat.shape[0]
    if 2 * B + 1 > n:
        raise ValueError(f"band {B} does not fit in a grid of size {n}")
    idx = np.arange(-B, B + 1) % n
    return f_hat[np.ix_(*([idx] * f_hat.ndim))]


def cube_to_grid(cube, n):
    """Embed a centered cube into an FFT-ordered array of size ``n``."""
    d = cube.ndim
    B = (cube.shape[0] - 1) // 2
    if 2 * B + 1 > n:
        raise ValueError(f"band {B} does not fit in a grid of size {n}")
    out = np.zeros((n,) * d, dtype=cube.dtype)
    idx = np.arange(-B, B + 1) % n
    out[np.ix_(*([idx] * d))] = cube
    return out


def crop_cube(cube, B):
    K = (cube.shape[0] - 1) // 2
    if B > K:
        raise ValueError("cannot crop to a wider band")
    sl = slice(K - B, K + B + 1)
    return cube[(sl,) * cube.ndim]


def _phases(x, K, sign):
    k = np.arange(-K, K + 1)
    return np.exp((sign * 2j * np.pi) * x[:, :, None] * k[None, None, :])


def eval_series(cube, x):
    """Evaluate ``sum_k cube(k) exp(2 pi i k.x)`` at points ``x`` of shape (P, d).

    Uses the tensor-product structure of the exponentials so each point costs
    one matrix-vector product per dimension.
    """
    d = cube.ndim
    K = (cube.shape[0] - 1) // 2
    P = x.shape[0]
    out = np.empty(P, dtype=np.complex128)
    c = np.asarray(cube, dtype=np.complex128)
    for start in range(0, P, _CHUNK):
        xs = x[start:start + _CHUNK]
        E = _phases(xs, K, +1)  # (p, d, 2K+1)
        if d == 1:
            out[start:start + len(xs)] = E[:, 0, :] @ c
        elif d == 2:
            out[start:start + len(xs)] = np.einsum("pa,pa->p", E[:, 0, :] @ c, E[:, 1, :])
        else:
            t = np.einsum("pa,abc->pbc", E[:, 0, :], c)
            t = np.einsum("pbc,pb->pc", t, E[:, 1, :])
            out[start:start + len(xs)] = np.einsum("pc,pc->p", t, E[:, 2, :])
    return out


def structure_factor(x, K):
    """``S(k) = sum_i exp(-2 pi i k.x_i)`` on the cube ``|k|_inf <= K``."""
    d = x.shape[1]
    E = _phases(x, K, -1)
    if d == 1:
        return E[:, 0, :].sum(axis=0)
    if d == 2:
        return E[:, 0, :].T @ E[:, 1, :]
    S = np.zeros((2 * K + 1,) * 3, dtype=np.complex128)
    for start in range(0, x.shape[0], 256):
        e = E[start:start + 256]
        S += np.einsum("pa,pb,pc->abc", e[:, 0, :], e[:, 1, :], e[:, 2, :])
    return S


def gaussian_multiplier(n, d, width):
    """Fourier multiplier of the wrapped Gaussian with standard deviation ``width``."""
    ks = fft_wavenumbers(n, d)
    k2 = sum(k * k for k in ks)
    return np.exp(-2.0 * np.pi**2 * width**2 * k2)
