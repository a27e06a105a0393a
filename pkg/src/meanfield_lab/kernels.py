"""Periodic interaction potentials on the unit torus.

A potential is the sum of three parts, all defined through their Fourier
coefficients on ``k in Z^d``:

* ``pks_log``: attractive log/Bessel part, ``Va_hat(k) = -2 pi lam / (1 + 4 pi^2 |k|^2)``,
  i.e. the periodic solution of ``(Laplacian - 1) Va = 2 pi lam delta_0``;
* ``riesz``: repulsive part, ``Vr_hat(k) = c_r / |2 pi k|^(d - alpha)`` and ``Vr_hat(0) = 0``;
* ``smooth_modes``: an explicit finite, even table of coefficients.

The singular parts are band limited to ``|k| <= spectral_band`` and rolled off
with the filter ``exp(-36 (|k|/k_max)^4)``, which keeps the physical-space
kernel free of truncation ringing near the singularity.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from ._spectral import centered_wavenumbers, cube_to_grid, eval_series
from ._validation import check_int, check_points, check_scalar, wrap_displacement

KINDS = ("pks_log", "riesz", "smooth_modes")
FILTERS = ("exp4", "sharp")
_FILTER_STRENGTH = 36.0
_FILTER_ORDER = 4
_MAX_TABLE_POINTS = 2**24


def default_band(d):
    return 256 if d <= 2 else 64


@dataclass(frozen=True)
class PotentialSpec:
    """Decomposed even interaction potential ``V = V_a + V_r + V_s``.

    ``force_regularization=None`` means "use the N-dependent default"
    ``N**(-1/d) / 4`` when simulating; see :meth:`regularization`.
    """

    dimension: int
    attractive_log_coefficient: float = 0.0
    riesz_exponent: float | None = None
    riesz_coefficient: float = 0.0
    smooth_modes: tuple = ()
    truncation_radius: float | None = None
    spectral_band: int | None = None
    force_regularization: float | None = None
    spectral_filter: str = "exp4"

    def __post_init__(self):
        d = check_int(self.dimension, "dimension", lower=1)
        if d > 3:
            raise ValueError("dimension must be 1, 2 or 3")
        check_scalar(self.attractive_log_coefficient, "attractive_log_coefficient", lower=0.0)
        check_scalar(self.riesz_coefficient, "riesz_coefficient", lower=0.0)
        if self.riesz_exponent is not None:
            check_scalar(self.riesz_exponent, "riesz_exponent", lower=0.0, upper=d,
                         lower_inclusive=False, upper_inclusive=False)
        elif self.riesz_coefficient > 0:
            raise ValueError("riesz_coefficient > 0 requires riesz_exponent")
        if self.truncation_radius is not None:
            check_scalar(self.truncation_radius, "truncation_radius", lower=0.0, upper=0.25,
                         lower_inclusive=False, upper_inclusive=False)
        band = default_band(d) if self.spectral_band is None else self.spectral_band
        band = check_int(band, "spectral_band", lower=1)
        object.__setattr__(self, "spectral_band", band)
        if self.force_regularization is not None:
            check_scalar(self.force_regularization, "force_regularization", lower=0.0)
        if self.spectral_filter not in FILTERS:
            raise ValueError(f"spectral_filter must be one of {FILTERS}")
        object.__setattr__(self, "smooth_modes", _normalize_modes(self.smooth_modes, d, band))

    @property
    def band(self):
        return self.spectral_band

    @property
    def has_attractive(self):
        return self.attractive_log_coefficient > 0.0

    @property
    def has_repulsive(self):
        return self.riesz_exponent is not None and self.riesz_coefficient > 0.0

    @property
    def has_smooth(self):
        return len(self.smooth_modes) > 0

    @property
    def is_zero(self):
        return not (self.has_attractive or self.has_repulsive
                    or any(v != 0.0 for _, v in self.smooth_modes))

    def regularization(self, N):
        if self.force_regularization is not None:
            return float(self.force_regularization)
        return 0.25 * N ** (-1.0 / self.dimension)

    @classmethod
    def pks(cls, dimension, lam, **kw):
        return cls(dimension, attractive_log_coefficient=lam, **kw)

    @classmethod
    def riesz(cls, dimension, alpha, coefficient=1.0, **kw):
        return cls(dimension, riesz_exponent=alpha, riesz_coefficient=coefficient, **kw)

    def to_dict(self):
        parts = []
        if self.has_attractive:
            parts.append({"kind": "pks_log",
                          "attractive_log_coefficient": self.attractive_log_coefficient})
        if self.riesz_exponent is not None:
            parts.append({"kind": "riesz", "riesz_exponent": self.riesz_exponent,
                          "riesz_coefficient": self.riesz_coefficient})
        if self.has_smooth:
            parts.append({"kind": "smooth_modes",
                          "smooth_modes": [[list(k), v] for k, v in self.smooth_modes]})
        return {
            "dimension": self.dimension,
            "spectral_band": self.spectral_band,
            "truncation_radius": self.truncation_radius,
            "force_regularization": self.force_regularization,
            "spectral_filter": self.spectral_filter,
            "parts": parts,
        }

    @classmethod
    def from_dict(cls, data):
        """Inverse of :meth:`to_dict`.

        Also accepts a single-part document with a top-level ``kind`` tag, e.g.
        ``{"kind": "riesz", "dimension": 2, "riesz_exponent": 0.5}``.
        """
        data = dict(data)
        parts = list(data.pop("parts", None) or [])
        global_keys = ("dimension", "spectral_band", "truncation_radius",
                       "force_regularization", "spectral_filter")
        part_keys = {"pks_log": ("attractive_log_coefficient",),
                     "riesz": ("riesz_exponent", "riesz_coefficient"),
                     "smooth_modes": ("smooth_modes",)}
        kw = {k: data.pop(k) for k in global_keys if k in data}
        if "kind" in data:
            kind = data.pop("kind")
            parts.append({"kind": kind, **{k: data.pop(k) for k in part_keys.get(kind, ())
                                           if k in data}})
        flat = [k for keys in part_keys.values() for k in keys]
        kw.update({k: data.pop(k) for k in flat if k in data})
        if data:
            raise ValueError(f"unknown potential spec keys {sorted(data)}")
        for part in parts:
            part = dict(part)
            kind = part.pop("kind", None)
            if kind not in part_keys:
                raise ValueError(f"unknown potential kind {kind!r}; expected one of {KINDS}")
            extra = set(part) - set(part_keys[kind])
            if extra:
                raise ValueError(f"unknown keys {sorted(extra)} in {kind} part")
            if kind == "riesz":
                part.setdefault("riesz_coefficient", 1.0)
            kw.update(part)
        return cls(**kw)


def _normalize_modes(modes, d, band):
    table = {}
    for k, v in modes:
        k = tuple(int(c) for c in np.atleast_1d(k))
        if len(k) != d:
            raise ValueError(f"smooth mode {k} has wrong dimension")
        if max(abs(c) for c in k) > band:
            raise ValueError(f"smooth mode {k} lies outside the spectral band {band}")
        v = float(v)
        for key in (k, tuple(-c for c in k)):
            if key in table and table[key] != v:
                raise ValueError(f"smooth modes are not even: V_hat{key} is ambiguous")
            table[key] = v
    return tuple(sorted(table.items()))


def load_spec(path):
    return PotentialSpec.from_dict(json.loads(Path(path).read_text()))


def save_spec(spec, path):
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Fourier coefficients
# ---------------------------------------------------------------------------

def attractive_symbol(k2, lam):
    return -2.0 * np.pi * lam / (1.0 + 4.0 * np.pi**2 * k2)


def repulsive_symbol(k2, d, alpha, coefficient):
    out = np.zeros_like(k2, dtype=float)
    nz = k2 > 0
    out[nz] = coefficient / (4.0 * np.pi**2 * k2[nz]) ** ((d - alpha) / 2.0)
    return out


def spectral_filter(spec):
    ks = centered_wavenumbers(spec.band, spec.dimension)
    if spec.spectral_filter == "sharp":
        return np.ones(ks[0].shape)
    kk = np.sqrt(sum(k * k for k in ks)) / spec.band
    filt = np.exp(-_FILTER_STRENGTH * kk**_FILTER_ORDER)
    filt[kk > 1.0] = 0.0
    return filt


@functools.lru_cache(maxsize=32)
def _coefficients(spec, part, filtered):
    ks = centered_wavenumbers(spec.band, spec.dimension)
    k2 = sum(k * k for k in ks).astype(float)
    out = np.zeros(k2.shape)
    singular = np.zeros(k2.shape)
    if part in ("total", "attractive", "singular") and spec.has_attractive:
        singular += attractive_symbol(k2, spec.attractive_log_coefficient)
    if part in ("total", "repulsive", "singular") and spec.has_repulsive:
        singular += repulsive_symbol(k2, spec.dimension, spec.riesz_exponent,
                                     spec.riesz_coefficient)
    if filtered:
        singular *= spectral_filter(spec)
    out += singular
    if part in ("total", "smooth"):
        K = spec.band
        for k, v in spec.smooth_modes:
            out[tuple(c + K for c in k)] += v
    out.setflags(write=False)
    return out


def fourier_coefficients(spec, part="total", filtered=True):
    """Coefficient cube ``V_hat(k)`` for ``|k|_inf <= k_max`` (zero mode at the center).

    ``part`` is one of ``total``, ``attractive``, ``repulsive``, ``smooth`` or
    ``singular`` (attractive + repulsive).
    """
    if part not in ("total", "attractive", "repulsive", "smooth", "singular"):
        raise ValueError(f"unknown part {part!r}")
    return _coefficients(spec, part, bool(filtered))


def force_coefficients(spec, part="total"):
    """Cubes of ``K_hat_c(k) = -2 pi i k_c V_hat(k)``, one per component."""
    c = fourier_coefficients(spec, part)
    ks = centered_wavenumbers(spec.band, spec.dimension)
    return [-2j * np.pi * k * c for k in ks]


# ---------------------------------------------------------------------------
# Point evaluation
# ---------------------------------------------------------------------------

def canonical_half(x):
    """Fold displacements onto the half space whose first nonzero coordinate is
    positive.  Returns the folded points and the sign used, so that evaluation
    at ``x`` and ``-x`` sees identical inputs."""
    x = wrap_displacement(x)
    sign = np.ones(x.shape[0])
    undecided = np.ones(x.shape[0], dtype=bool)
    for c in range(x.shape[1]):
        neg = undecided & (x[:, c] < 0.0)
        sign[neg] = -1.0
        undecided &= x[:, c] == 0.0
    return x * sign[:, None], sign


def eval_potential(spec, x, part="total"):
    """``V(x) = sum_k V_hat(k) exp(2 pi i k.x)`` at torus displacements ``x``."""
    pts, single = check_points(x, spec.dimension)
    folded, _ = canonical_half(pts)
    out = eval_series(fourier_coefficients(spec, part), folded).real
    return out[0] if single else out


def eval_force(spec, x, delta=None, part="total"):
    """``K(x) = -grad V(x)`` from the band-limited series.

    Inside the radius ``delta`` the displacement is pushed out radially to
    ``|x| = delta`` before evaluation; ``K(0) = 0``.  Defaults to
    ``spec.force_regularization`` (0 when unset).
    """
    pts, single = check_points(x, spec.dimension)
    if delta is None:
        delta = spec.force_regularization or 0.0
    folded, sign = canonical_half(pts)
    r = np.linalg.norm(folded, axis=1)
    zero = r == 0.0
    inside = (r < delta) & ~zero
    folded[inside] *= (delta / r[inside])[:, None]
    out = np.stack([eval_series(c, folded).real for c in force_coefficients(spec, part)], axis=1)
    out *= sign[:, None]
    out[zero] = 0.0
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Truncation split V = V chi_eta + V (1 - chi_eta)
# ---------------------------------------------------------------------------

def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def radial_cutoff(r, eta):
    """C^2 cutoff: 1 for r <= eta, 0 for r >= 2 eta."""
    return 1.0 - _smoothstep((np.asarray(r, dtype=float) - eta) / eta)


def chi_derivative(r, eta):
    t = np.clip((np.asarray(r, dtype=float) - eta) / eta, 0.0, 1.0)
    return -30.0 * t**2 * (1.0 - t) ** 2 / eta


def check_eta(eta):
    return check_scalar(eta, "eta", lower=0.0, upper=0.25, lower_inclusive=False,
                        upper_inclusive=False)


def truncation_split(spec, eta):
    """Return ``(near, far)`` with ``near = V chi_eta`` and ``far = W = V (1 - chi_eta)``."""
    eta = check_eta(eta)

    def near(x):
        pts, single = check_points(x, spec.dimension)
        r = np.linalg.norm(wrap_displacement(pts), axis=1)
        out = np.zeros(len(pts))
        inside = r < 2.0 * eta
        if inside.any():
            out[inside] = eval_potential(spec, pts[inside]) * radial_cutoff(r[inside], eta)
        return out[0] if single else out

    def far(x):
        pts, single = check_points(x, spec.dimension)
        r = np.linalg.norm(wrap_displacement(pts), axis=1)
        out = eval_potential(spec, pts) * (1.0 - radial_cutoff(r, eta))
        return out[0] if single else out

    near.eta = far.eta = eta
    return near, far


# ---------------------------------------------------------------------------
# Lookup tables for the particle pair loops
# ---------------------------------------------------------------------------

def default_table_resolution(spec):
    d, K = spec.dimension, spec.band
    mult = {1: 16, 2: 8, 3: 2}[d]
    n = mult * K
    while (n + 2) ** d > _MAX_TABLE_POINTS and n > 2 * K:
        n //= 2
    n = max(n, 2 * K + 2)
    return n + (n % 2)


class PairTable:
    """Force and potential sampled on a fine grid over the canonical half torus.

    Table values are exact samples of the band-limited series (inverse FFT of
    the coefficient cube); lookups interpolate multilinearly.  Channels are
    ``K_0 .. K_{d-1}, V``.
    """

    def __init__(self, spec, resolution=None):
        self.spec = spec
        self.d = spec.dimension
        n = default_table_resolution(spec) if resolution is None else int(resolution)
        if n % 2 or n < 2 * spec.band + 2:
            raise ValueError("table resolution must be even and exceed twice the band")
        self.n = n
        d = self.d
        coef = fourier_coefficients(spec)
        grid_hat = cube_to_grid(coef.astype(complex), n)
        kf = np.fft.fftfreq(n, 1.0 / n)
        ks = np.meshgrid(*([kf] * d), indexing="ij")
        scale = n**d
        channels = [np.fft.ifftn(-2j * np.pi * k * grid_hat).real * scale for k in ks]
        channels.append(np.fft.ifftn(grid_hat).real * scale)
        ii = np.arange(n // 2 + 2) % n
        jj = (np.arange(n + 2) - n // 2) % n
        idx = [ii] + [jj] * (d - 1)
        half = np.stack([ch[np.ix_(*idx)] for ch in channels], axis=-1)
        shape = (n // 2 + 2, n + 2 if d > 1 else 1, n + 2 if d > 2 else 1, d + 1)
        self.table = np.ascontiguousarray(half.reshape(shape))

    def drift(self, positions, delta, accumulation="pairwise", parallel=False):
        """``(1/N) sum_{j != i} K(x_i - x_j)`` for every particle.

        ``pairwise`` evaluates each unordered pair once and applies it to both
        particles; ``rowwise`` sums over ``j`` in index order for each ``i`` and
        gives bitwise-identical results serially and in parallel.
        """
        X = np.ascontiguousarray(positions, dtype=np.float64)
        if accumulation == "pairwise":
            out, bi, bj = _drift_pairwise(X, self.table, self.n, float(delta), self.d)
        elif accumulation == "rowwise":
            fn = _drift_rowwise_par if parallel else _drift_rowwise
            out, bad = fn(X, self.table, self.n, float(delta), self.d)
            bi = int(np.argmax(bad >= 0)) if (bad >= 0).any() else -1
            bj = int(bad[bi]) if bi >= 0 else -1
        else:
            raise ValueError(f"unknown accumulation {accumulation!r}")
        return out, (int(bi), int(bj))

    def near_drift(self, positions, eta, delta, method="direct"):
        """Drift of the truncated potential ``V chi_eta`` (pairs closer than 2 eta)."""
        eta = check_eta(eta)
        X = np.ascontiguousarray(positions, dtype=np.float64)
        if method == "direct":
            return _near_direct(X, self.table, self.n, float(delta), self.d, eta)
        if method == "cells":
            m = int(math.floor(1.0 / (2.0 * eta)))
            if m < 3:
                return _near_direct(X, self.table, self.n, float(delta), self.d, eta)
            cell = np.floor(X * m).astype(np.int64) % m
            flat = np.zeros(len(X), dtype=np.int64)
            for c in range(self.d):
                flat = flat * m + cell[:, c]
            order = np.argsort(flat, kind="stable")
            starts = np.searchsorted(flat[order], np.arange(m**self.d + 1))
            return _near_cells(X, self.table, self.n, float(delta), self.d, eta,
                               m, cell, order, starts)
        raise ValueError(f"unknown method {method!r}")

    def potential(self, displacements):
        X = np.ascontiguousarray(np.atleast_2d(displacements), dtype=np.float64)
        return _table_potential(X, self.table, self.n, self.d)


@nb.njit(cache=True, nogil=True, inline="always")
def _fold(X, i, j, dim, disp):
    """Wrapped displacement x_i - x_j folded to the canonical half; returns sign."""
    for c in range(dim):
        v = X[i, c] - X[j, c]
        disp[c] = v - np.rint(v)
    sgn = 1.0
    for c in range(dim):
        if disp[c] < 0.0:
            sgn = -1.0
            break
        if disp[c] > 0.0:
            break
    if sgn < 0.0:
        for c in range(dim):
            disp[c] = -disp[c]
    return sgn


@nb.njit(cache=True, nogil=True, inline="always")
def _lookup(T, n, dim, disp, buf):
    u = disp[0] * n
    i0 = int(u)
    a = u - i0
    nch = T.shape[3]
    if dim == 1:
        for c in range(nch):
            buf[c] = (1.0 - a) * T[i0, 0, 0, c] + a * T[i0 + 1, 0, 0, c]
    elif dim == 2:
        v = (disp[1] + 0.5) * n
        j0 = int(v)
        b = v - j0
        w00 = (1.0 - a) * (1.0 - b)
        w10 = a * (1.0 - b)
        w01 = (1.0 - a) * b
        w11 = a * b
        for c in range(nch):
            buf[c] = (w00 * T[i0, j0, 0, c] + w10 * T[i0 + 1, j0, 0, c]
                      + w01 * T[i0, j0 + 1, 0, c] + w11 * T[i0 + 1, j0 + 1, 0, c])
    else:
        v = (disp[1] + 0.5) * n
        j0 = int(v)
        b = v - j0
        w = (disp[2] + 0.5) * n
        l0 = int(w)
        g = w - l0
        for c in range(nch):
            s = 0.0
            for di in range(2):
                wa = a if di else 1.0 - a
                for dj in range(2):
                    wb = b if dj else 1.0 - b
                    for dl in range(2):
                        wg = g if dl else 1.0 - g
                        s += wa * wb * wg * T[i0 + di, j0 + dj, l0 + dl, c]
            buf[c] = s


@nb.njit(cache=True, nogil=True, inline="always")
def _regularize(disp, dim, delta):
    """Push the folded displacement out to radius delta; returns r2 before scaling."""
    r2 = 0.0
    for c in range(dim):
        r2 += disp[c] * disp[c]
    if r2 < delta * delta and r2 > 0.0:
        sc = delta / np.sqrt(r2)
        for c in range(dim):
            disp[c] *= sc
    return r2


@nb.njit(cache=True, nogil=True)
def _drift_pairwise_1d(X, T, n, delta):
    N = X.shape[0]
    out = np.zeros((N, 1))
    for i in range(N):
        xi = X[i, 0]
        s0 = 0.0
        for j in range(i + 1, N):
            d0 = xi - X[j, 0]
            d0 -= np.rint(d0)
            sgn = 1.0
            if d0 < 0.0:
                d0 = -d0
                sgn = -1.0
            if d0 == 0.0:
                if delta == 0.0:
                    return out, i, j
                continue
            if d0 < delta:
                d0 = delta
            u = d0 * n
            ii = int(u)
            a = u - ii
            f0 = sgn * ((1.0 - a) * T[ii, 0, 0, 0] + a * T[ii + 1, 0, 0, 0])
            s0 += f0
            out[j, 0] -= f0
        out[i, 0] += s0
    return out / N, -1, -1


@nb.njit(cache=True, nogil=True)
def _drift_pairwise_2d(X, T, n, delta):
    N = X.shape[0]
    out = np.zeros((N, 2))
    d2 = delta * delta
    for i in range(N):
        xi0 = X[i, 0]
        xi1 = X[i, 1]
        s0 = 0.0
        s1 = 0.0
        for j in range(i + 1, N):
            d0 = xi0 - X[j, 0]
            d1 = xi1 - X[j, 1]
            d0 -= np.rint(d0)
            d1 -= np.rint(d1)
            sgn = 1.0
            if d0 < 0.0 or (d0 == 0.0 and d1 < 0.0):
                d0 = -d0
                d1 = -d1
                sgn = -1.0
            r2 = d0 * d0 + d1 * d1
            if r2 == 0.0:
                if delta == 0.0:
                    return out, i, j
                continue
            if r2 < d2:
                sc = delta / np.sqrt(r2)
                d0 *= sc
                d1 *= sc
            u = d0 * n
            v = (d1 + 0.5) * n
            ii = int(u)
            jj = int(v)
            a = u - ii
            b = v - jj
            w00 = (1.0 - a) * (1.0 - b)
            w10 = a * (1.0 - b)
            w01 = (1.0 - a) * b
            w11 = a * b
            f0 = sgn * (w00 * T[ii, jj, 0, 0] + w10 * T[ii + 1, jj, 0, 0]
                        + w01 * T[ii, jj + 1, 0, 0] + w11 * T[ii + 1, jj + 1, 0, 0])
            f1 = sgn * (w00 * T[ii, jj, 0, 1] + w10 * T[ii + 1, jj, 0, 1]
                        + w01 * T[ii, jj + 1, 0, 1] + w11 * T[ii + 1, jj + 1, 0, 1])
            s0 += f0
            s1 += f1
            out[j, 0] -= f0
            out[j, 1] -= f1
        out[i, 0] += s0
        out[i, 1] += s1
    return out / N, -1, -1


@nb.njit(cache=True, nogil=True)
def _drift_pairwise_3d(X, T, n, delta):
    N = X.shape[0]
    out = np.zeros((N, 3))
    disp = np.zeros(3)
    buf = np.zeros(T.shape[3])
    for i in range(N):
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for j in range(i + 1, N):
            sgn = _fold(X, i, j, 3, disp)
            r2 = _regularize(disp, 3, delta)
            if r2 == 0.0:
                if delta == 0.0:
                    return out, i, j
                continue
            _lookup(T, n, 3, disp, buf)
            f0 = sgn * buf[0]
            f1 = sgn * buf[1]
            f2 = sgn * buf[2]
            s0 += f0
            s1 += f1
            s2 += f2
            out[j, 0] -= f0
            out[j, 1] -= f1
            out[j, 2] -= f2
        out[i, 0] += s0
        out[i, 1] += s1
        out[i, 2] += s2
    return out / N, -1, -1


def _drift_pairwise(X, T, n, delta, dim):
    fn = (_drift_pairwise_1d, _drift_pairwise_2d, _drift_pairwise_3d)[dim - 1]
    return fn(X, T, n, delta)


@nb.njit(cache=True, nogil=True, inline="always")
def _drift_row(X, T, n, delta, dim, i, out, disp, buf):
    N = X.shape[0]
    bad = -1
    for j in range(N):
        if j == i:
            continue
        sgn = _fold(X, i, j, dim, disp)
        r2 = _regularize(disp, dim, delta)
        if r2 == 0.0:
            if delta == 0.0 and bad < 0:
                bad = j
            continue
        _lookup(T, n, dim, disp, buf)
        for c in range(dim):
            out[i, c] += sgn * buf[c]
    for c in range(dim):
        out[i, c] /= N
    return bad


@nb.njit(cache=True, nogil=True)
def _drift_rowwise(X, T, n, delta, dim):
    N = X.shape[0]
    out = np.zeros((N, dim))
    bad = np.full(N, -1, dtype=np.int64)
    disp = np.zeros(3)
    buf = np.zeros(T.shape[3])
    for i in range(N):
        bad[i] = _drift_row(X, T, n, delta, dim, i, out, disp, buf)
    return out, bad


@nb.njit(cache=True, nogil=True, parallel=True)
def _drift_rowwise_par(X, T, n, delta, dim):
    N = X.shape[0]
    out = np.zeros((N, dim))
    bad = np.full(N, -1, dtype=np.int64)
    for i in nb.prange(N):
        disp = np.zeros(3)
        buf = np.zeros(T.shape[3])
        bad[i] = _drift_row(X, T, n, delta, dim, i, out, disp, buf)
    return out, bad


@nb.njit(cache=True, nogil=True, inline="always")
def _chi_nb(r, eta):
    t = (r - eta) / eta
    if t <= 0.0:
        return 1.0, 0.0
    if t >= 1.0:
        return 0.0, 0.0
    s = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    ds = 30.0 * t * t * (1.0 - t) * (1.0 - t) / eta
    return 1.0 - s, -ds


@nb.njit(cache=True, nogil=True, inline="always")
def _near_pair(X, T, n, delta, dim, eta, i, j, out, disp, buf):
    sgn = _fold(X, i, j, dim, disp)
    r2 = 0.0
    for c in range(dim):
        r2 += disp[c] * disp[c]
    if r2 >= 4.0 * eta * eta or r2 == 0.0:
        return
    r2 = _regularize(disp, dim, delta)
    r = 0.0
    for c in range(dim):
        r += disp[c] * disp[c]
    r = np.sqrt(r)
    ch, dch = _chi_nb(r, eta)
    _lookup(T, n, dim, disp, buf)
    v = buf[dim]
    for c in range(dim):
        out[i, c] += sgn * (ch * buf[c] - v * dch * disp[c] / r)


@nb.njit(cache=True, nogil=True)
def _near_direct(X, T, n, delta, dim, eta):
    N = X.shape[0]
    out = np.zeros((N, dim))
    disp = np.zeros(3)
    buf = np.zeros(T.shape[3])
    for i in range(N):
        for j in range(N):
            if j != i:
                _near_pair(X, T, n, delta, dim, eta, i, j, out, disp, buf)
    return out / N


@nb.njit(cache=True, nogil=True)
def _near_cells(X, T, n, delta, dim, eta, m, cell, order, starts):
    N = X.shape[0]
    out = np.zeros((N, dim))
    disp = np.zeros(3)
    buf = np.zeros(T.shape[3])
    nb_count = 3**dim
    for i in range(N):
        for q in range(nb_count):
            flat = 0
            rem = q
            for c in range(dim):
                off = rem % 3 - 1
                rem //= 3
                flat = flat * m + (cell[i, c] + off + m) % m
            for p in range(starts[flat], starts[flat + 1]):
                j = order[p]
                if j != i:
                    _near_pair(X, T, n, delta, dim, eta, i, j, out, disp, buf)
    return out / N


@nb.njit(cache=True, nogil=True)
def _table_potential(D, T, n, dim):
    P = D.shape[0]
    out = np.zeros(P)
    disp = np.zeros(3)
    buf = np.zeros(T.shape[3])
    for p in range(P):
        for c in range(dim):
            v = D[p, c]
            disp[c] = v - np.rint(v)
        neg = False
        for c in range(dim):
            if disp[c] < 0.0:
                neg = True
                break
            if disp[c] > 0.0:
                break
        if neg:
            for c in range(dim):
                disp[c] = -disp[c]
        _lookup(T, n, dim, disp, buf)
        out[p] = buf[dim]
    return out


@functools.lru_cache(maxsize=8)
def pair_table(spec, resolution=None):
    return PairTable(spec, resolution)


# ---------------------------------------------------------------------------
# Certification of the kernel hypotheses
# ---------------------------------------------------------------------------

CONDITIONS = ("fourier_sign", "fourier_decay", "doubling", "log_bound",
              "gradient_bound", "smooth_hessian")
_INFLATE = 1.05
_MAX_WITNESSES = 16


@dataclass(frozen=True)
class Witness:
    location: object
    value: float
    bound: float

    def to_dict(self):
        loc = self.location
        if isinstance(loc, np.ndarray):
            loc = loc.tolist()
        elif isinstance(loc, tuple):
            loc = list(loc)
        return {"location": loc, "value": float(self.value), "bound": float(self.bound)}


@dataclass
class ConditionReport:
    """Outcome of :func:`certify_kernel`; one entry per condition name in ``CONDITIONS``.

    ``status`` is ``pass``, ``fail``, ``inconclusive`` or ``vacuous`` (the part
    the condition is about is absent).  Every non-passing condition carries at
    least one witness.
    """

    passed: dict = field(default_factory=dict)
    status: dict = field(default_factory=dict)
    witnesses: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    @property
    def all_passed(self):
        return all(self.passed.values())

    def record(self, name, status, witnesses=(), **constants):
        if status not in ("pass", "fail", "inconclusive", "vacuous"):
            raise ValueError(status)
        witnesses = list(witnesses)[:_MAX_WITNESSES]
        if status in ("fail", "inconclusive") and not witnesses:
            raise ValueError(f"condition {name} reported {status} without a witness")
        self.status[name] = status
        self.passed[name] = status in ("pass", "vacuous")
        self.witnesses[name] = witnesses
        self.constants.update({f"{name}.{k}": v for k, v in constants.items()})

    def to_dict(self):
        def clean(v):
            if v is None or isinstance(v, (bool, str)):
                return v
            v = float(v)
            return v if math.isfinite(v) else str(v)

        return {
            "all_passed": self.all_passed,
            "passed": dict(self.passed),
            "status": dict(self.status),
            "witnesses": {k: [w.to_dict() for w in ws] for k, ws in self.witnesses.items()},
            "constants": {k: clean(v) for k, v in self.constants.items()},
        }


def _random_directions(rng, count, d):
    v = rng.standard_normal((count, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def check_fourier_sign(coef_cube, K):
    """Negative coefficients away from k = 0, most negative first."""
    ks = np.stack([k.ravel() for k in centered_wavenumbers(K, coef_cube.ndim)], axis=1)
    vals = coef_cube.ravel()
    bad = np.flatnonzero((vals < 0.0) & np.any(ks != 0, axis=1))
    ranked = sorted(bad, key=lambda p: (vals[p], tuple(-ks[p])))
    return [Witness(tuple(int(c) for c in ks[p]), float(vals[p]), 0.0) for p in ranked]


def check_fourier_decay(symbol, K, d):
    """Minimal C with |grad_xi V_hat| <= C V_hat/(1+|xi|) + C/(1+|xi|^(d+1)), xi = 2 pi k.

    Gradients are central differences in k; the k = 0 convention and the
    outermost shell are excluded.
    """
    ks = centered_wavenumbers(K, d)
    kinf = np.max(np.abs(np.stack(ks)), axis=0)
    grad2 = np.zeros(symbol.shape)
    for ax in range(d):
        g = (np.roll(symbol, -1, axis=ax) - np.roll(symbol, 1, axis=ax)) / (2.0 * 2.0 * np.pi)
        grad2 += g * g
    xi = 2.0 * np.pi * np.sqrt(sum(k * k for k in ks))
    rhs = symbol / (1.0 + xi) + 1.0 / (1.0 + xi ** (d + 1))
    mask = (kinf >= 2) & (kinf <= K - 1)
    ratio = np.sqrt(grad2[mask]) / rhs[mask]
    if not np.all(np.isfinite(ratio)):
        p = int(np.flatnonzero(~np.isfinite(ratio))[0])
        loc = tuple(int(k[mask][p]) for k in ks)
        return math.inf, [Witness(loc, float(np.sqrt(grad2[mask][p])), float(rhs[mask][p]))]
    p = int(np.argmax(ratio))
    loc = tuple(int(k[mask][p]) for k in ks)
    return _INFLATE * float(ratio[p]), [Witness(loc, float(ratio[p]), math.inf)]


def check_doubling(potential, d, n_pairs, rng, r_min, r_max=0.25, floor=None):
    """Sample pairs |y| <= 2|x| in the near field and fit the doubling constant.

    ``potential`` is evaluated on ``(P, d)`` displacements.  It is shifted by
    ``floor`` (default: its minimum over the sampled points) so the constant is
    read on a nonnegative profile.  Returns ``(C, witnesses)`` where ``C`` is
    infinite if some ``V(y)`` vanishes while ``V(x) > 0``.
    """
    rx = rng.uniform(r_min, r_max, n_pairs)
    ry = rng.uniform(0.0, 1.0, n_pairs) * (np.minimum(2.0 * rx, r_max) - r_min) + r_min
    x = rx[:, None] * _random_directions(rng, n_pairs, d)
    y = ry[:, None] * _random_directions(rng, n_pairs, d)
    vx = potential(x)
    vy = potential(y)
    if floor is None:
        floor = min(vx.min(), vy.min())
    vx = vx - floor
    vy = vy - floor
    tiny = 1e-12 * max(1.0, np.abs(vx).max())
    broken = (vy <= tiny) & (vx > tiny)
    if broken.any():
        idx = np.flatnonzero(broken)
        idx = idx[np.argsort(-vx[idx])]
        return math.inf, [Witness((x[p].tolist(), y[p].tolist()), float(vx[p]), float(vy[p]))
                          for p in idx]
    ok = vy > tiny
    ratio = np.where(ok, vx / np.where(ok, vy, 1.0), 0.0)
    p = int(np.argmax(ratio))
    return _INFLATE * float(ratio[p]), [Witness((x[p].tolist(), y[p].tolist()),
                                                float(ratio[p]), math.inf)]


def _torus_minimum(spec, part):
    coef = fourier_coefficients(spec, part)
    n = 2 * spec.band + 2
    while n**spec.dimension > 2**22:
        n //= 2
    n = max(n, 2 * min(spec.band, n // 2 - 1) + 2)
    B = n // 2 - 1
    K = spec.band
    sub = coef[(slice(K - B, K + B + 1),) * spec.dimension] if B < K else coef
    vals = np.fft.ifftn(cube_to_grid(sub.astype(complex), n)).real * n**spec.dimension
    return float(vals.min())


def certify_kernel(spec, sigma, sample_budget=1000, rng=None):
    """Check the kernel hypotheses on sampled or gridded witnesses.

    Conditions (keys of the returned report):

    ``fourier_sign``
        the singular part ``V_a + V_r`` has nonnegative coefficients for k != 0;
    ``fourier_decay``
        the symbol bound on ``grad_xi Vr_hat``;
    ``doubling``
        ``V_r(x) <= C V_r(y)`` for ``|y| <= 2|x|`` in the near field;
    ``log_bound``
        ``|V_a(x)| <= c_d + gamma log(1/|x|)`` with ``gamma < 2 d sigma``;
    ``gradient_bound``
        ``|grad V_a(x)| <= C/|x|``;
    ``smooth_hessian``
        second derivatives of ``V_s`` bounded.
    """
    sigma = check_scalar(sigma, "sigma", lower=0.0, lower_inclusive=False)
    budget = check_int(sample_budget, "sample_budget", lower=100)
    rng = np.random.default_rng(0) if rng is None else rng
    d, K = spec.dimension, spec.band
    report = ConditionReport()
    resolved = K >= 64
    r_res = 1.0 / K

    # (i) sign of the singular coefficients
    if spec.has_attractive or spec.has_repulsive:
        sym = fourier_coefficients(spec, "singular", filtered=False)
        w = check_fourier_sign(sym, K)
        report.record("fourier_sign", "fail" if w else "pass", w, negative_modes=len(w))
    else:
        report.record("fourier_sign", "vacuous")

    # (ii) Fourier-side regularity of V_r
    if spec.has_repulsive:
        if K < 4:
            report.record("fourier_decay", "inconclusive", [Witness("spectral_band", K, 4)])
        else:
            sym = fourier_coefficients(spec, "repulsive", filtered=False)
            C, w = check_fourier_decay(sym, K, d)
            report.record("fourier_decay", "pass" if math.isfinite(C) else "fail", w, C=C)
    else:
        report.record("fourier_decay", "vacuous")

    # (iii) doubling of V_r, and the exponent k in |grad V_r| <= C |x|^-k
    if spec.has_repulsive:
        floor = _torus_minimum(spec, "repulsive")
        C, w = check_doubling(lambda p: eval_potential(spec, p, "repulsive"), d, budget, rng,
                              r_min=r_res, floor=floor)
        r = np.geomspace(4.0 * r_res, 0.25, 24)
        pts = r[:, None] * _random_directions(rng, len(r), d)
        g = np.linalg.norm(eval_force(spec, pts, delta=0.0, part="repulsive"), axis=1)
        slope = float(np.polyfit(np.log(1.0 / r), np.log(np.maximum(g, 1e-300)), 1)[0])
        status = "pass" if math.isfinite(C) else "fail"
        if status == "pass" and not resolved:
            status = "inconclusive"
            w = [Witness("spectral_band", K, 64)]
        report.record("doubling", status, w, C=C,
                      gradient_exponent=slope)
    else:
        report.record("doubling", "vacuous")

    # (iv), (v) attractive part
    if spec.has_attractive:
        m = budget
        r = np.exp(rng.uniform(np.log(r_res), np.log(0.5), m))
        pts = r[:, None] * _random_directions(rng, m, d)
        va = np.abs(eval_potential(spec, pts, "attractive"))
        near = (r >= 4.0 * r_res) & (r <= 0.25)
        limit = 2.0 * d * sigma
        if near.sum() < 10 or not resolved:
            report.record("log_bound", "inconclusive", [Witness("spectral_band", K, 64)],
                          two_d_sigma=limit)
        else:
            slope = float(np.polyfit(np.log(1.0 / r[near]), va[near], 1)[0])
            gamma = _INFLATE * max(slope, 0.0)
            excess = va - gamma * np.log(1.0 / r)
            c_d = float(excess.max())
            c_d = _INFLATE * c_d if c_d > 0 else c_d
            ref = 2.0 if d == 2 else None
            if gamma < limit:
                report.record("log_bound", "pass", gamma=gamma, c_d=c_d, c_d_reference=ref,
                              two_d_sigma=limit)
            else:
                p = int(np.argmax(va[near]))
                loc = pts[near][p].tolist()
                report.record("log_bound", "fail", [Witness(loc, gamma, limit)], gamma=gamma,
                              c_d=c_d, c_d_reference=ref, two_d_sigma=limit)
        g = np.linalg.norm(eval_force(spec, pts, delta=0.0, part="attractive"), axis=1)
        prod = g * r
        C = _INFLATE * float(prod.max())
        if math.isfinite(C):
            report.record("gradient_bound", "pass", C=C)
        else:
            p = int(np.argmax(~np.isfinite(prod)))
            report.record("gradient_bound", "fail", [Witness(pts[p].tolist(), prod[p], math.inf)])
    else:
        report.record("log_bound", "vacuous")
        report.record("gradient_bound", "vacuous")

    # (vi) smooth part: sup |d^2 V_s| <= sum |V_hat| 4 pi^2 |k|^2
    if spec.has_smooth:
        bound = sum(abs(v) * 4.0 * np.pi**2 * sum(c * c for c in k) for k, v in spec.smooth_modes)
        status = "pass" if math.isfinite(bound) else "fail"
        report.record("smooth_hessian", status,
                      [] if status == "pass" else [Witness("modes", bound, math.inf)],
                      hessian_bound=bound)
    else:
        report.record("smooth_hessian", "vacuous")
    return report


def spec_summary(spec):
    return asdict(spec)
