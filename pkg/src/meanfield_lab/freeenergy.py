"""Modulated energies, Gibbs weights and the large-deviation toolkit.

Conventions: ``mu_N = (1/N) sum_i delta_{x_i}`` is the empirical measure and
``nu = mu_N - rho_bar``.  Densities live on the grid of a
:class:`~meanfield_lab.density.DensityField`; potentials are band limited, so
every convolution with ``rho_bar`` is an exact finite Fourier sum.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._spectral import (centered_wavenumbers, crop_cube, cube_to_grid, eval_series,
                        fft_wavenumbers, gaussian_multiplier, grid_to_cube, structure_factor)
from ._validation import check_int, check_points, check_scalar, wrap_displacement, wrap_unit
from .density import DensityField
from .kernels import check_eta, eval_potential, fourier_coefficients, radial_cutoff

POSITIVITY_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# Modulated energy of one configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModulatedSample:
    D: float
    D_W: float | None = None
    dissipation: float | None = None
    member: int | None = None
    time: float | None = None


@dataclass(frozen=True)
class GibbsWeights:
    log_particle: float
    log_mean_field: float


def _positions(config, d):
    x = getattr(config, "positions", config)
    x, _ = check_points(x, d, "positions")
    return wrap_unit(x)


def _meta(config):
    return getattr(config, "member_index", None), getattr(config, "time", None)


def _pieces(x, rho, coef):
    """Return ``(sum_{i != j} V(x_i - x_j), sum_i (V*rho)(x_i), int int V rho rho)``.

    ``coef`` is the potential's coefficient cube.  The pair sum uses the
    structure factor: ``sum_{i,j} V(x_i - x_j) = sum_k V_hat |S(k)|^2``.
    """
    N = x.shape[0]
    K = (coef.shape[0] - 1) // 2
    L = min(K, rho.band)
    S = structure_factor(x, K)
    v0 = float(coef.sum())
    pair = float(np.sum(coef * (S.real**2 + S.imag**2))) - N * v0
    rh = rho.band_coefficients(L)
    c = crop_cube(coef, L)
    conv = float(np.sum(c * rh * np.conj(crop_cube(S, L))).real)
    self_ = float(np.sum(c * np.abs(rh) ** 2))
    return pair, conv, self_


def modulated_energy(config, rho_bar, spec, coef=None):
    """``D = int int_{x != y} V(x - y) d(mu_N - rho_bar)^2`` for one configuration.

    Three-term form: ``(1/N^2) sum_{i != j} V(x_i - x_j) - (2/N) sum_i (V*rho)(x_i)
    + int int V rho rho``; only the first term has its diagonal removed.
    """
    x = _positions(config, spec.dimension)
    coef = fourier_coefficients(spec) if coef is None else coef
    N = x.shape[0]
    pair, conv, self_ = _pieces(x, rho_bar, coef)
    D = pair / N**2 - 2.0 * conv / N + self_
    member, time = _meta(config)
    return ModulatedSample(D=D, member=member, time=time)


def gibbs_log_weights(config, rho_bar, spec, sigma):
    """Log Gibbs weights of a configuration.

    ``log_particle = -(1/(2 N sigma)) sum_{i != j} V(x_i - x_j)`` and the
    tensorized mean-field weight
    ``log_mean_field = -(1/sigma) sum_i (V*rho)(x_i) + (N/(2 sigma)) int int V rho rho``.
    """
    sigma = check_scalar(sigma, "sigma", lower=0.0, lower_inclusive=False)
    x = _positions(config, spec.dimension)
    N = x.shape[0]
    pair, conv, self_ = _pieces(x, rho_bar, fourier_coefficients(spec))
    return GibbsWeights(log_particle=-pair / (2.0 * N * sigma),
                        log_mean_field=-conv / sigma + N * self_ / (2.0 * sigma))


def near_coefficients(spec, eta, n=None):
    """Fourier coefficients of ``V chi_eta`` from samples on a fine grid."""
    eta = check_eta(eta)
    return _near_coefficients(spec, eta, n)


@functools.lru_cache(maxsize=8)
def _near_coefficients(spec, eta, n):
    d = spec.dimension
    K = spec.band
    if n is None:
        n = 16 * K
        while n**d > 2**22 and n > 2 * K + 2:
            n //= 2
    grid_hat = cube_to_grid(fourier_coefficients(spec).astype(complex), n)
    V = np.fft.ifftn(grid_hat).real * n**d
    g = np.arange(n) / n
    g = g - np.rint(g)
    mesh = np.meshgrid(*([g] * d), indexing="ij")
    r = np.sqrt(sum(m * m for m in mesh))
    cube = grid_to_cube(np.fft.fftn(V * radial_cutoff(r, eta)) / n**d, K)
    out = cube.real.copy()
    out.setflags(write=False)
    return out


def near_pair_sum(x, spec, eta):
    """``sum_{i != j} V(x_i - x_j) chi_eta(x_i - x_j)`` by direct search."""
    N = x.shape[0]
    total = 0.0
    for i in range(N - 1):
        disp = wrap_displacement(x[i] - x[i + 1:])
        r = np.linalg.norm(disp, axis=1)
        close = r < 2.0 * eta
        if close.any():
            total += float(np.sum(eval_potential(spec, disp[close]) * radial_cutoff(r[close], eta)))
    return 2.0 * total


def modulated_correction(config, rho_bar, spec, eta, sigma=None):
    """``D - D_W``: the modulated energy of the near part ``V chi_eta``.

    Pairs are summed exactly from the series; the terms against ``rho_bar`` use
    the Fourier coefficients of ``V chi_eta`` (``sigma`` is accepted for
    interface symmetry and does not enter the per-sample value).
    """
    eta = check_eta(eta)
    x = _positions(config, spec.dimension)
    N = x.shape[0]
    pair = near_pair_sum(x, spec, eta)
    coef = near_coefficients(spec, eta)
    L = min(spec.band, rho_bar.band)
    S = structure_factor(x, L)
    rh = rho_bar.band_coefficients(L)
    c = crop_cube(coef, L)
    conv = float(np.sum(c * rh * np.conj(S)).real)
    self_ = float(np.sum(c * np.abs(rh) ** 2))
    return pair / N**2 - 2.0 * conv / N + self_


def free_energy_proxy(kl_marginal, D_samples, sigma, k=1):
    """Computable stand-in for the modulated free energy of an ensemble.

    The joint relative entropy is replaced by its k-marginal lower bound
    ``KL / k`` and the interaction part by ``mean(D) / (2 sigma)``, the
    Monte-Carlo estimate of its expectation.  The record is labelled
    ``"proxy"`` because the first term only bounds the true entropy term.
    """
    sigma = check_scalar(sigma, "sigma", lower=0.0, lower_inclusive=False)
    D = np.asarray(D_samples, dtype=float).ravel()
    if D.size == 0:
        raise ValueError("need at least one D sample")
    interaction = float(D.mean() / (2.0 * sigma))
    stderr = float(D.std(ddof=1) / math.sqrt(D.size) / (2.0 * sigma)) if D.size > 1 else 0.0
    entropy = float(kl_marginal) / k
    return {"label": "proxy", "entropy_bound": entropy, "interaction": interaction,
            "interaction_stderr": stderr, "value": entropy + interaction}


def _grid_gradient(values):
    n, d = values.shape[0], values.ndim
    hat = np.fft.fftn(values) / values.size
    ks = fft_wavenumbers(n, d)
    out = []
    for ax, k in enumerate(ks):
        g = 2j * np.pi * k * hat
        g[np.abs(ks[ax]) == n // 2] = 0.0
        out.append(g)
    return out


def dissipation_rhs(config, rho_bar, spec, sigma):
    """``-1/2 int int_{x != y} grad V(x - y).(psi(x) - psi(y)) d(mu_N - rho_bar)^2``

    with ``psi = grad log rho_bar + (1/sigma) grad V*rho_bar`` taken as the
    trigonometric interpolant of its grid values.  Writing
    ``G(x) = psi(x).(grad V*rho_bar)(x) - sum_c (d_c V * psi_c rho_bar)(x)``,
    the value is ``-1/2 [pairs - (2/N) sum_i G(x_i) + int G rho_bar]``.
    """
    sigma = check_scalar(sigma, "sigma", lower=0.0, lower_inclusive=False)
    if rho_bar.values.min() < POSITIVITY_FLOOR:
        raise ValueError(f"rho_bar must be bounded below by {POSITIVITY_FLOOR}")
    d = spec.dimension
    x = _positions(config, d)
    N = x.shape[0]
    n, size, B = rho_bar.n, rho_bar.values.size, rho_bar.band
    coef = fourier_coefficients(spec)
    K = spec.band
    L = min(K, B)
    cL = crop_cube(coef, L)
    kc = centered_wavenumbers(L, d)
    dV = [cube_to_grid((2j * np.pi * k * cL), n) for k in kc]
    rho_hat = rho_bar.fourier()

    psi_hat = [a + dv * rho_hat / sigma
               for a, dv in zip(_grid_gradient(np.log(rho_bar.values)), dV)]
    psi = [np.fft.ifftn(ph).real * size for ph in psi_hat]
    prod_hat = [np.fft.fftn(p * rho_bar.values) / size for p in psi]
    gVrho = [np.fft.ifftn(dv * rho_hat).real * size for dv in dV]
    conv = np.fft.ifftn(sum(dv * ph for dv, ph in zip(dV, prod_hat))).real * size
    G_grid = sum(p * g for p, g in zip(psi, gVrho)) - conv
    rr = float(np.sum(G_grid * rho_bar.values) / size)

    rcube = rho_bar.band_coefficients(L)
    psi_x = np.stack([eval_series(grid_to_cube(ph, B), x).real for ph in psi_hat], axis=1)
    gVrho_x = np.stack([eval_series(2j * np.pi * k * cL * rcube, x).real for k in kc], axis=1)
    conv_x = eval_series(sum(2j * np.pi * k * cL * grid_to_cube(ph, L)
                             for k, ph in zip(kc, prod_hat)), x).real
    G_x = np.sum(psi_x * gVrho_x, axis=1) - conv_x

    # sum_{i != j} grad V(x_i - x_j).(psi_i - psi_j) = 2 sum_i psi_i . sum_j grad V(x_i - x_j)
    S = structure_factor(x, K)
    kK = centered_wavenumbers(K, d)
    gVmu_x = np.stack([eval_series(2j * np.pi * k * coef * S, x).real for k in kK], axis=1)
    pair = 2.0 * float(np.sum(psi_x * gVmu_x)) / N**2
    return -0.5 * (pair - 2.0 * float(G_x.sum()) / N + rr)


# ---------------------------------------------------------------------------
# Functionals on measures and the large-deviation functional
# ---------------------------------------------------------------------------

class LinearFunctional:
    """``F(mu) = int phi d(mu - rho_bar)`` for a grid test function ``phi``."""

    kind = "linear"

    def __init__(self, phi_grid, phi=None):
        self.phi_grid = np.asarray(phi_grid, dtype=float)
        self.phi = phi

    def value(self, mu, rho_bar):
        return float(np.sum(self.phi_grid * (mu.values - rho_bar.values)) * mu.cell_volume)

    def gradient(self, mu, rho_bar):
        return self.phi_grid

    def pairwise_value(self, x, rho_bar):
        if self.phi is not None:
            at_x = np.asarray(self.phi(x), dtype=float)
        else:
            cube = grid_to_cube(np.fft.fftn(self.phi_grid) / self.phi_grid.size, rho_bar.band)
            at_x = eval_series(cube, x).real
        return float(at_x.mean() - np.sum(self.phi_grid * rho_bar.values) * rho_bar.cell_volume)

    def deposit_value(self, mu_hat, rho_bar, N, multiplier):
        mu = np.fft.ifftn(mu_hat * multiplier).real * mu_hat.size
        return float(np.sum(self.phi_grid * (mu - rho_bar.values)) * rho_bar.cell_volume)


class QuadraticFunctional:
    """``F(mu) = -c int int U(x - y) d(mu - rho_bar)^2`` with ``U`` given on the grid.

    ``U_grid[j]`` is the kernel at the displacement ``j h`` (FFT layout).
    ``kernel`` optionally evaluates ``U`` at arbitrary displacements for the
    off-grid pair sum.
    """

    kind = "quadratic"

    def __init__(self, U_grid, c=1.0, kernel=None):
        self.U_grid = np.asarray(U_grid, dtype=float)
        self.c = float(c)
        self.kernel = kernel
        self.U_hat = (np.fft.fftn(self.U_grid) / self.U_grid.size).real

    def value(self, mu, rho_bar):
        nu_hat = np.fft.fftn(mu.values - rho_bar.values) / mu.values.size
        return -self.c * float(np.sum(self.U_hat * np.abs(nu_hat) ** 2))

    def gradient(self, mu, rho_bar):
        size = mu.values.size
        nu_hat = np.fft.fftn(mu.values - rho_bar.values) / size
        return -2.0 * self.c * np.fft.ifftn(self.U_hat * nu_hat).real * size

    def pairwise_value(self, x, rho_bar):
        if self.kernel is None:
            raise ValueError("pairwise evaluation needs a kernel callable")
        N = x.shape[0]
        pair = 0.0
        for i in range(N - 1):
            pair += float(np.sum(self.kernel(wrap_displacement(x[i] - x[i + 1:]))))
        pair *= 2.0
        rho_hat = rho_bar.fourier()
        conv_cube = grid_to_cube(self.U_hat * rho_hat, rho_bar.band)
        conv = float(eval_series(conv_cube, x).real.sum())
        self_ = float(np.sum(self.U_hat * np.abs(rho_hat) ** 2))
        return -self.c * (pair / N**2 - 2.0 * conv / N + self_)

    def deposit_value(self, mu_hat, rho_bar, N, multiplier):
        nu_hat = mu_hat * multiplier - rho_bar.fourier()
        full = float(np.sum(self.U_hat * np.abs(nu_hat) ** 2))
        diag = float(np.sum(self.U_hat * multiplier**2)) / N
        return -self.c * (full - diag)


class ZeroFunctional:
    kind = "zero"

    def value(self, mu, rho_bar):
        return 0.0

    def gradient(self, mu, rho_bar):
        return np.zeros_like(mu.values)

    def pairwise_value(self, x, rho_bar):
        return 0.0

    def deposit_value(self, mu_hat, rho_bar, N, multiplier):
        return 0.0


def log_cell_average(h, d=2):
    """Average of ``log|x|`` over the cell ``[-h/2, h/2]^d`` (closed form in d = 1, 2)."""
    a = h / 2.0
    if d == 1:
        return math.log(a) - 1.0
    if d == 2:
        return math.log(a) + 0.5 * math.log(2.0) - 1.5 + math.pi / 4.0
    # d = 3: midpoint refinement
    m = 64
    g = (np.arange(m) + 0.5) / m * h - a
    mesh = np.meshgrid(g, g, g, indexing="ij")
    return float(np.mean(np.log(np.sqrt(sum(c * c for c in mesh)))))


def truncated_log_kernel(eta):
    eta = check_eta(eta)

    def U(disp):
        disp = np.atleast_2d(wrap_displacement(disp))
        r = np.linalg.norm(disp, axis=1)
        out = np.zeros_like(r)
        nz = r > 0
        out[nz] = np.log(r[nz]) * radial_cutoff(r[nz], eta)
        return out

    return U


def truncated_log_functional(n, d, eta, c=1.0):
    """Quadratic functional with ``U(x) = log|x| chi_eta(x)``; the singular node
    carries the cell average of ``log|x|``."""
    U = truncated_log_kernel(eta)
    g = np.arange(n) / n
    mesh = np.meshgrid(*([g] * d), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    grid = U(pts).reshape((n,) * d)
    grid[(0,) * d] = log_cell_average(1.0 / n, d)
    return QuadraticFunctional(grid, c=c, kernel=U)


def kl_grid(mu, rho):
    p = mu.values
    q = rho.values
    pos = p > 0
    if np.any(q[pos] <= 0):
        return math.inf
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])) * mu.cell_volume)


@dataclass
class LDResult:
    value: float
    argmax: DensityField
    iterations: int
    residual: float
    converged: bool

    def __iter__(self):
        return iter((self.value, self.argmax))


def _normalize(values):
    return values / (values.sum() / values.size)


def ld_functional(F, rho_bar, weight=1.0, max_iter=500, tol=1e-12, damping=0.5, mu0=None):
    """Maximize ``F(mu) - weight KL(mu | rho_bar)`` over grid densities.

    Damped multiplicative fixed point: with ``T(mu) = normalize(rho_bar
    exp(DF(mu)/weight))``, update ``log mu <- (1 - tau) log mu + tau log T(mu)``.
    Stops when the L1 change falls below ``tol``; otherwise returns the last
    iterate with ``converged=False``.
    """
    weight = check_scalar(weight, "weight", lower=0.0, lower_inclusive=False)
    damping = check_scalar(damping, "damping", lower=0.0, upper=1.0, lower_inclusive=False)
    max_iter = check_int(max_iter, "max_iter", lower=1)
    rho_bar.validate(1e-10)
    if rho_bar.values.min() <= 0.0:
        raise ValueError("rho_bar must be strictly positive")
    log_rho = np.log(rho_bar.values)
    mu = rho_bar if mu0 is None else mu0
    log_mu = np.log(np.maximum(mu.values, 1e-300))
    h = rho_bar.cell_volume
    residual = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        a = log_rho + F.gradient(mu, rho_bar) / weight
        a = (1.0 - damping) * log_mu + damping * a
        a -= a.max()
        new = _normalize(np.exp(a))
        residual = float(np.abs(new - mu.values).sum() * h)
        mu = rho_bar.with_values(new)
        log_mu = np.log(np.maximum(new, 1e-300))
        if residual < tol:
            break
    value = F.value(mu, rho_bar) - weight * kl_grid(mu, rho_bar)
    return LDResult(value, mu, it, residual, residual < tol)


class LargeDeviationMaximizer(BaseEstimator):
    """Estimator wrapper around :func:`ld_functional`.

    ``fit(rho_bar)`` solves the maximization and stores ``value_``,
    ``argmax_``, ``n_iter_``, ``residual_`` and ``converged_``.
    """

    def __init__(self, functional=None, weight=1.0, damping=0.5, max_iter=500, tol=1e-12):
        self.functional = functional
        self.weight = weight
        self.damping = damping
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, rho_bar, y=None, mu0=None):
        if not isinstance(rho_bar, DensityField):
            rho_bar = DensityField.from_values(rho_bar)
        F = ZeroFunctional() if self.functional is None else self.functional
        res = ld_functional(F, rho_bar, self.weight, self.max_iter, self.tol, self.damping, mu0)
        self.value_ = res.value
        self.argmax_ = res.argmax
        self.n_iter_ = res.iterations
        self.residual_ = res.residual
        self.converged_ = res.converged
        return self

    def transform(self, rho_bar=None):
        check_is_fitted(self, "argmax_")
        return self.argmax_.values


# ---------------------------------------------------------------------------
# Exponential moments of quadratic forms of mu_N - rho_bar
# ---------------------------------------------------------------------------

class SeparableKernel:
    """``f(x, y) = sum_m w_m phi_m(x) phi_m(y)``; each ``phi_m`` maps (P, d) -> (P,)."""

    def __init__(self, weights, features):
        self.weights = np.asarray(weights, dtype=float)
        self.features = list(features)
        if len(self.weights) != len(self.features):
            raise ValueError("one weight per feature")

    def __call__(self, x, y):
        return sum(w * phi(x) * phi(y) for w, phi in zip(self.weights, self.features))

    def sup_norm(self, d, n=128):
        g = (np.arange(n) + 0.5) / n
        mesh = np.meshgrid(*([g] * d), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        vals = np.stack([phi(pts) for phi in self.features])
        # |sum w phi(x) phi(y)| <= sum |w| |phi|_inf^2, attained for a single mode
        return float(np.sum(np.abs(self.weights) * np.abs(vals).max(axis=1) ** 2))

    @classmethod
    def cosine(cls, amplitude, d, axis=0, mode=1):
        def phi(x):
            return np.cos(2.0 * np.pi * mode * np.asarray(x)[:, axis])
        return cls([amplitude], [phi])


def partition_gamma(f, rho_bar, c_d=1.0, n=64, p_max=64):
    """``c_d (sup_p |sup_y |f(., y)||_{L^p} / p)^2 + c_d (|rho_bar|_inf |f|_inf)^2``
    evaluated on an ``n^d`` midpoint grid."""
    d = rho_bar.d
    g = (np.arange(n) + 0.5) / n
    mesh = np.meshgrid(*([g] * d), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    if isinstance(f, SeparableKernel):
        sup_y = np.zeros(len(pts))
        vals = np.stack([phi(pts) for phi in f.features])
        for w, v in zip(f.weights, vals):
            sup_y += np.abs(w) * np.abs(v) * np.abs(v).max()
        f_inf = float(sup_y.max())
    else:
        sup_y = np.array([np.abs(f(np.repeat(p[None], len(pts), 0), pts)).max() for p in pts])
        f_inf = float(sup_y.max())
    ps = np.linspace(1.0, p_max, 4 * p_max)
    lp = [np.mean(sup_y**p) ** (1.0 / p) / p for p in ps]
    return c_d * max(lp) ** 2 + c_d * (float(rho_bar.values.max()) * f_inf) ** 2


@dataclass
class PartitionEstimate:
    estimate: float
    stderr: float
    ess: float
    unreliable: bool
    log_estimate: float
    N: int
    samples: int


def _exponents_separable(f, X, rho_bar):
    """``N int int f d(mu_N - rho_bar)^2`` for a batch ``X`` of shape (M, N, d)."""
    M, N, d = X.shape
    pts = rho_bar.grid_points()
    w_rho = rho_bar.values.ravel() * rho_bar.cell_volume
    out = np.zeros(M)
    flat = X.reshape(-1, d)
    for w, phi in zip(f.weights, f.features):
        mean = phi(flat).reshape(M, N).mean(axis=1)
        ref = float(np.dot(phi(pts), w_rho))
        out += w * (mean - ref) ** 2
    return N * out


def _exponents_generic(f, X, rho_bar):
    M, N, d = X.shape
    pts = rho_bar.grid_points()
    w_rho = rho_bar.values.ravel() * rho_bar.cell_volume
    P = len(pts)
    ff = float(sum(np.dot(f(np.repeat(p[None], P, 0), pts), w_rho) * wp
                   for p, wp in zip(pts, w_rho)))
    out = np.empty(M)
    for m in range(M):
        x = X[m]
        ii, jj = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
        pair = float(f(x[ii.ravel()], x[jj.ravel()]).sum()) / N**2
        cross = sum(float(np.dot(f(np.repeat(xi[None], P, 0), pts), w_rho)) for xi in x) / N
        out[m] = N * (pair - 2.0 * cross + ff)
    return out


def partition_mc(f, rho_bar, N, M_samples, rng, batches=16, chunk=8192):
    """Monte-Carlo estimate of ``E exp(N int int f d(mu_N - rho_bar)^2)`` under
    ``X ~ rho_bar^N``, with the diagonal ``x = y`` included.

    Exponents are shifted by their maximum before exponentiation; the standard
    error comes from ``batches`` batch means.  Fewer than 10 effective samples
    marks the estimate as unreliable.
    """
    from .particles import sample_initial

    N = check_int(N, "N", lower=1)
    M_samples = check_int(M_samples, "M_samples", lower=batches)
    if f is None:
        return PartitionEstimate(1.0, 0.0, float(M_samples), False, 0.0, N, M_samples)
    exps = np.empty(M_samples)
    for start in range(0, M_samples, chunk):
        m = min(chunk, M_samples - start)
        X = sample_initial(rho_bar, m * N, rng).positions.reshape(m, N, rho_bar.d)
        if isinstance(f, SeparableKernel):
            exps[start:start + m] = _exponents_separable(f, X, rho_bar)
        else:
            exps[start:start + m] = _exponents_generic(f, X, rho_bar)
    shift = float(exps.max())
    w = np.exp(exps - shift)
    est = float(w.mean())
    size = M_samples // batches
    means = np.array([w[b * size:(b + 1) * size].mean() for b in range(batches)])
    stderr = float(means.std(ddof=1) / math.sqrt(batches)) if batches > 1 else 0.0
    ess = float(w.sum() ** 2 / np.sum(w**2))
    scale = math.exp(shift) if shift < 700 else math.inf
    return PartitionEstimate(est * scale, stderr * scale, ess, ess < 10.0,
                             math.log(est) + shift, N, M_samples)


# ---------------------------------------------------------------------------
# Mollification gap and the change-of-measure inequality
# ---------------------------------------------------------------------------

def deposit(x, n):
    """Nearest-node histogram of ``mu_N``, as FFT coefficients (``fftn / n^d``)."""
    N, d = x.shape
    idx = np.rint(wrap_unit(x) * n).astype(np.int64) % n
    counts = np.zeros((n,) * d)
    np.add.at(counts, tuple(idx.T), 1.0)
    return np.fft.fftn(counts) / N


def mollification_gap(F, ensemble, eps, rho_bar=None, t=None, n=64, reference="pairwise"):
    """Mean over members of ``|F(mu_N) - F(L_eps * mu_N)|``, diagonal excluded.

    ``F(mu_N)`` is the pairwise sum (``reference="pairwise"``) or the
    un-smoothed grid deposit (``reference="grid"``); the mollified side deposits
    on the grid and applies the Gaussian multiplier ``exp(-2 pi^2 eps^2 |k|^2)``.
    ``ensemble`` is an :class:`EnsembleRun` or an array (M, N, d).
    """
    eps = check_scalar(eps, "eps", lower=0.0)
    if hasattr(ensemble, "snapshots"):
        t = float(ensemble.save_times[-1]) if t is None else t
        X = ensemble.positions_at(t)
    else:
        X = np.asarray(ensemble, dtype=float)
        if X.ndim == 2:
            X = X[None]
    d = X.shape[-1]
    if rho_bar is None:
        rho_bar = DensityField.uniform(n, d)
    n = rho_bar.n
    mult = gaussian_multiplier(n, d, eps)
    ones = np.ones_like(mult)
    gaps = []
    for x in X:
        N = x.shape[0]
        mu_hat = deposit(x, n)
        moll = F.deposit_value(mu_hat, rho_bar, N, mult)
        if reference == "pairwise":
            ref = F.pairwise_value(x, rho_bar)
        elif reference == "grid":
            ref = F.deposit_value(mu_hat, rho_bar, N, ones)
        else:
            raise ValueError(f"unknown reference {reference!r}")
        gaps.append(abs(ref - moll))
    return float(np.mean(gaps))


class InequalityViolation(AssertionError):
    pass


@dataclass(frozen=True)
class ChangeOfMeasure:
    lhs: float
    rhs: float
    kl: float
    absolutely_continuous: bool

    def __iter__(self):
        return iter((self.lhs, self.rhs))


def change_of_measure_check(p, q, psi, alpha, N=1):
    """Both sides of ``int psi dp <= (1/(alpha N)) [KL(p|q) + log int exp(alpha N psi) dq]``.

    Raises :class:`InequalityViolation` if ``lhs > rhs + 1e-12``.  When ``p``
    charges a state that ``q`` does not, ``KL = +inf`` and the bound holds
    trivially.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    psi = np.asarray(psi, dtype=float)
    alpha = check_scalar(alpha, "alpha", lower=0.0, lower_inclusive=False)
    N = check_int(N, "N", lower=1)
    if p.shape != q.shape or p.shape != psi.shape:
        raise ValueError("p, q and psi must share a shape")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("p and q must be nonnegative")
    p = p / p.sum()
    q = q / q.sum()
    s = alpha * N
    lhs = float(np.dot(p, psi))
    pos = p > 0
    if np.any(q[pos] == 0):
        return ChangeOfMeasure(lhs, math.inf, math.inf, False)
    kl = float(np.sum(p[pos] * np.log(p[pos] / q[pos])))
    qpos = q > 0
    log_mgf = float(logsumexp(s * psi[qpos], b=q[qpos]))
    rhs = (kl + log_mgf) / s
    if lhs > rhs + 1e-12:
        raise InequalityViolation(f"lhs {lhs!r} exceeds rhs {rhs!r}")
    return ChangeOfMeasure(lhs, rhs, kl, True)


__all__ = [
    "ChangeOfMeasure", "GibbsWeights", "InequalityViolation", "LDResult",
    "LargeDeviationMaximizer", "LinearFunctional", "ModulatedSample", "PartitionEstimate",
    "QuadraticFunctional", "SeparableKernel", "ZeroFunctional", "change_of_measure_check",
    "deposit", "dissipation_rhs", "free_energy_proxy", "gibbs_log_weights", "kl_grid", "ld_functional",
    "log_cell_average", "modulated_correction", "modulated_energy", "mollification_gap",
    "near_coefficients", "near_pair_sum", "partition_gamma", "partition_mc",
    "truncated_log_functional", "truncated_log_kernel",
]
