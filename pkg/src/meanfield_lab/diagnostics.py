"""Marginal estimation, distances between grid densities and rate fitting."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._spectral import gaussian_multiplier
from ._validation import check_int, check_scalar, wrap_unit
from .density import DensityField

KL_FLOOR = 1e-12
MIN_SAMPLES = {1: 1_000, 2: 10_000}


class LowConfidenceWarning(UserWarning):
    """Too few samples behind a marginal estimate."""


def default_bandwidth(n_samples, d):
    return 0.9 * n_samples ** (-1.0 / (d + 4))


def smooth(values, bandwidth):
    """Convolve a grid density with the wrapped Gaussian of the given width."""
    values = np.asarray(values, dtype=float)
    n, D = values.shape[0], values.ndim
    out = np.fft.ifftn(np.fft.fftn(values) * gaussian_multiplier(n, D, bandwidth)).real
    out = np.clip(out, 0.0, None)
    return out / (out.sum() / out.size)


def smooth_field(rho, bandwidth):
    return DensityField(smooth(rho.values, bandwidth), rho.time)


def _node_index(x, n):
    return np.rint(wrap_unit(x) * n).astype(np.int64) % n


def _histograms(samples, n):
    """Per-member flat histograms, shape (M, n^d)."""
    M, N, d = samples.shape
    idx = _node_index(samples.reshape(-1, d), n)
    flat = np.zeros(len(idx), dtype=np.int64)
    for c in range(d):
        flat = flat * n + idx[:, c]
    flat = flat.reshape(M, N)
    return np.stack([np.bincount(f, minlength=n**d) for f in flat]).astype(float)


def _as_samples(ensemble, t):
    if hasattr(ensemble, "snapshots"):
        t = float(ensemble.save_times[-1]) if t is None else t
        return ensemble.positions_at(t), t
    X = np.asarray(ensemble, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError("samples must have shape (M, N, d) or (P, d)")
    return X, t


def kde_marginal(ensemble, t=None, k=1, bandwidth=None, n=None):
    """Estimate the k-particle marginal (k = 1 or 2) at save time ``t``.

    k = 1 pools every particle of every member; k = 2 pools ordered pairs of
    distinct particles inside each member.  Samples are binned to the nearest
    grid node, smoothed with a wrapped Gaussian of width ``bandwidth`` and
    renormalized.  The result lives on an ``n^(k d)`` grid.
    """
    X, t = _as_samples(ensemble, t)
    M, N, d = X.shape
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    if n is None:
        n = {1: 128, 2: 128, 3: 48}[d] if k == 1 else {1: 128, 2: 32, 3: 12}[d]
    n = check_int(n, "n", lower=2)
    if bandwidth is None:
        bandwidth = default_bandwidth(M * N, d)
    bandwidth = check_scalar(bandwidth, "bandwidth", lower=0.0, lower_inclusive=False)
    if bandwidth <= 1.0 / n:
        raise ValueError(f"bandwidth {bandwidth} must exceed the grid spacing {1.0 / n}")
    H = _histograms(X, n)
    if k == 1:
        counts = H.sum(axis=0)
        n_samples = M * N
    else:
        if N < 2:
            raise ValueError("pair marginals need N >= 2")
        counts = sum(np.outer(h, h) - np.diag(h) for h in H)
        n_samples = M * N * (N - 1)
    if n_samples < MIN_SAMPLES[k]:
        warnings.warn(f"{n_samples} samples behind a k={k} marginal", LowConfidenceWarning,
                      stacklevel=2)
    grid = counts.reshape((n,) * (k * d))
    return DensityField(smooth(grid, bandwidth), 0.0 if t is None else float(t))


class KDEMarginal(BaseEstimator):
    """Grid kernel density estimate of a one- or two-particle marginal.

    ``fit(X)`` takes samples shaped (M, N, d), or (P, d) for a single pooled
    batch; ``density_`` is the fitted :class:`DensityField`.
    """

    def __init__(self, k=1, bandwidth=None, grid=None):
        self.k = k
        self.bandwidth = bandwidth
        self.grid = grid

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = check_array(X)[None]
        M, N, d = X.shape
        self.n_samples_ = M * N if self.k == 1 else M * N * (N - 1)
        self.low_confidence_ = self.n_samples_ < MIN_SAMPLES.get(self.k, 0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LowConfidenceWarning)
            self.density_ = kde_marginal(X, None, self.k, self.bandwidth, self.grid)
        self.bandwidth_ = (default_bandwidth(M * N, d) if self.bandwidth is None
                           else float(self.bandwidth))
        return self

    def transform(self, X=None):
        check_is_fitted(self, "density_")
        return self.density_.values

    def score(self, X, y=None):
        """Mean log density of new samples (pooled over members)."""
        check_is_fitted(self, "density_")
        X = np.asarray(X, dtype=float).reshape(-1, self.density_.d)
        v = self.density_.values
        idx = _node_index(X, v.shape[0])
        return float(np.mean(np.log(np.maximum(v[tuple(idx.T)], KL_FLOOR))))


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def _same_grid(p, q):
    if p.values.shape != q.values.shape:
        raise ValueError("densities live on different grids")


def kl_divergence(p, q, floor=KL_FLOOR, return_floored=False):
    """``sum p log(p/q) h^d`` with ``q`` floored at ``floor``.

    With ``floor=0`` a cell where ``p > 0 = q`` gives ``+inf``.  The mass added
    by flooring is returned as a second value when ``return_floored`` is set.
    """
    _same_grid(p, q)
    pv, qv = p.values, q.values
    pos = pv > 0
    qf = np.maximum(qv, floor)
    floored = float(np.sum(qf - qv) * p.cell_volume)
    if np.any(qf[pos] <= 0.0):
        kl = math.inf
    else:
        kl = float(np.sum(pv[pos] * np.log(pv[pos] / qf[pos])) * p.cell_volume)
    return (kl, floored) if return_floored else kl


def l1_distance(p, q):
    _same_grid(p, q)
    return float(np.sum(np.abs(p.values - q.values)) * p.cell_volume)


@dataclass(frozen=True)
class CKPCheck:
    l1: float
    kl: float
    bound: float
    holds: bool


def ckp_check(p, q):
    """L1 against ``sqrt(2 KL)``."""
    l1 = l1_distance(p, q)
    kl = kl_divergence(p, q, floor=0.0)
    bound = math.sqrt(2.0 * kl) if math.isfinite(kl) else math.inf
    return CKPCheck(l1, kl, bound, l1 <= bound + 1e-12)


# ---------------------------------------------------------------------------
# Power-law rates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    N: np.ndarray
    err: np.ndarray
    theta: float
    C: float
    r2: float
    residuals: np.ndarray

    def predict(self, N):
        return self.C * np.asarray(N, dtype=float) ** (-self.theta)

    def to_dict(self):
        return {"N": self.N.tolist(), "err": self.err.tolist(), "theta": self.theta,
                "C": self.C, "r2": self.r2, "residuals": self.residuals.tolist()}


def fit_rate(pairs):
    """Least squares of ``log err`` on ``log N``: ``err ~ C N^-theta``."""
    arr = np.asarray(list(pairs), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be a sequence of (N, err)")
    if len(arr) < 3:
        raise ValueError("need at least 3 pairs")
    N, err = arr[:, 0], arr[:, 1]
    if np.any(N <= 0) or np.any(err <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("N and err must be positive and finite")
    if np.ptp(N) == 0:
        raise ValueError("all N are equal; the exponent is undetermined")
    x, y = np.log(N), np.log(err)
    A = np.stack([np.ones_like(x), x], axis=1)
    (b0, b1), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - (b0 + b1 * x)
    ss_res = float(np.sum(res**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0
    theta = -float(b1)
    if abs(theta) < 1e-13:
        theta = 0.0
    return RateFit(N, err, theta, float(math.exp(b0)), float(r2), res)


class PowerLawRate(RegressorMixin, BaseEstimator):
    """Estimator form of :func:`fit_rate`: ``fit(N, err)``, ``predict(N)``."""

    def fit(self, X, y):
        N = np.asarray(X, dtype=float).reshape(-1)
        err = np.asarray(y, dtype=float).reshape(-1)
        if N.shape != err.shape:
            raise ValueError("X and y must have the same length")
        fit = fit_rate(zip(N, err))
        self.theta_ = fit.theta
        self.C_ = fit.C
        self.r2_ = fit.r2
        self.residuals_ = fit.residuals
        return self

    def predict(self, X):
        check_is_fitted(self, "theta_")
        return self.C_ * np.asarray(X, dtype=float).reshape(-1) ** (-self.theta_)


__all__ = [
    "CKPCheck", "KDEMarginal", "LowConfidenceWarning", "PowerLawRate", "RateFit",
    "ckp_check", "default_bandwidth", "fit_rate", "kde_marginal", "kl_divergence",
    "l1_distance", "smooth", "smooth_field",
]
