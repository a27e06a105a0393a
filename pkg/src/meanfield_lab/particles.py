"""Euler-Maruyama simulation of the interacting particle system on the torus."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import check_int, check_positions, check_scalar, wrap_unit
from .density import DensityField
from .kernels import PairTable, pair_table

INITIAL_TAG = 0


def stream(master_seed, member_index, tag):
    """Counter-based generator for one (member, step) cell of the noise table.

    Tag 0 draws the initial positions; tag ``s + 1`` draws the increments of
    step ``s``.
    """
    ss = np.random.SeedSequence([int(master_seed), int(member_index), int(tag)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Configuration:
    positions: np.ndarray
    time: float = 0.0
    master_seed: int = 0
    member_index: int = 0
    step: int = 0

    def __post_init__(self):
        x = check_positions(self.positions)
        if np.any(x < 0.0) or np.any(x >= 1.0):
            raise ValueError("positions must lie in [0, 1)")
        x = np.array(x, dtype=np.float64)
        x.setflags(write=False)
        object.__setattr__(self, "positions", x)

    @property
    def N(self):
        return self.positions.shape[0]

    @property
    def d(self):
        return self.positions.shape[1]

    @property
    def rng_stream(self):
        return (self.master_seed, self.member_index, self.step)

    def noise(self):
        return stream(self.master_seed, self.member_index, self.step + 1).standard_normal(
            (self.N, self.d))


def drift(positions, spec, delta=None, table=None, accumulation="pairwise"):
    """``(1/N) sum_{j != i} K(x_i - x_j)`` with the regularized, tabulated kernel."""
    x = check_positions(positions, spec.dimension)
    N = x.shape[0]
    if N == 1 or spec.is_zero:
        return np.zeros_like(x)
    delta = spec.regularization(N) if delta is None else float(delta)
    table = pair_table(spec) if table is None else table
    out, (i, j) = table.drift(x, delta, accumulation=accumulation)
    if i >= 0:
        raise FloatingPointError(
            f"non-finite force: particles {i} and {j} coincide and force_regularization is 0")
    return out


def step_em(config, spec, sigma, dt, noise=None, table=None):
    """One Euler-Maruyama step ``X += dt * drift + sqrt(2 sigma dt) * xi``, wrapped."""
    sigma = check_scalar(sigma, "sigma", lower=0.0)
    dt = check_scalar(dt, "dt", lower=0.0, lower_inclusive=False)
    if config.d != spec.dimension:
        raise ValueError("configuration and potential dimensions differ")
    b = drift(config.positions, spec, table=table)
    if noise is None:
        noise = config.noise()
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != config.positions.shape:
        raise ValueError("noise must have the shape of the positions")
    x = wrap_unit(config.positions + dt * b + np.sqrt(2.0 * sigma * dt) * noise)
    return replace(config, positions=x, time=config.time + dt, step=config.step + 1)


def sample_initial(rho, N, rng, master_seed=0, member_index=0):
    """``N`` i.i.d. draws from a grid density: pick a node-centered cell by its
    mass, then jitter uniformly inside it."""
    N = check_int(N, "N", lower=1)
    v = np.asarray(rho.values)
    if v.min() < 0.0:
        raise ValueError("density has negative values")
    cdf = np.cumsum(v.ravel())
    u = rng.random(N) * cdf[-1]
    flat = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    idx = np.stack(np.unravel_index(flat, v.shape), axis=1).astype(float)
    jitter = rng.random((N, rho.d)) - 0.5
    x = wrap_unit((idx + jitter) * rho.h)
    return Configuration(x, 0.0, master_seed, member_index, 0)


def default_dt(spec, N, table=None):
    """``1e-3 * min(1, delta N / F_max)``: a single pair never moves a particle
    by more than the regularization radius in one step."""
    if spec.is_zero:
        return 1e-3
    table = pair_table(spec) if table is None else table
    fmax = float(np.abs(table.table[..., : spec.dimension]).max())
    if fmax == 0.0:
        return 1e-3
    return 1e-3 * min(1.0, spec.regularization(N) * N / fmax)


def step_schedule(T, dt, save_times):
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9:
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    idx = []
    for t in save_times:
        if t < -1e-12 or t > T + 1e-12:
            raise ValueError(f"save time {t} outside [0, {T}]")
        s = int(round(t / dt))
        if abs(s * dt - t) > 1e-9:
            raise ValueError(f"save time {t} is not on the step grid")
        idx.append(s)
    if sorted(set(idx)) != idx:
        raise ValueError("save times must be strictly increasing")
    return n_steps, idx


def worker_count(requested=None):
    """Thread count: ``requested``, capped by ``MEANFIELD_THREADS`` (0 or unset = auto)."""
    cap = int(os.environ.get("MEANFIELD_THREADS", "0") or 0)
    auto = os.cpu_count() or 1
    n = auto if not requested else int(requested)
    if cap > 0:
        n = min(n, cap)
    return max(1, n)


@dataclass
class EnsembleRun:
    """``M`` independent trajectories saved at common times.

    ``snapshots[m, s]`` holds member ``m`` at ``save_times[s]``; members that
    aborted are listed in ``failures`` and their rows are NaN.
    """

    spec: object
    sigma: float
    dt: float
    T: float
    N: int
    master_seed: int
    save_times: np.ndarray
    snapshots: np.ndarray
    failures: dict = field(default_factory=dict)

    @property
    def M(self):
        return self.snapshots.shape[0]

    @property
    def d(self):
        return self.snapshots.shape[-1]

    @property
    def survivors(self):
        return [m for m in range(self.M) if m not in self.failures]

    def time_index(self, t):
        hit = np.flatnonzero(np.abs(self.save_times - t) <= 1e-9)
        if hit.size == 0:
            raise KeyError(f"time {t} is not a save time")
        return int(hit[0])

    def positions_at(self, t):
        """Survivor positions at save time ``t``, shape (M_alive, N, d)."""
        return self.snapshots[self.survivors, self.time_index(t)]

    def configuration(self, member, t):
        s = self.time_index(t)
        return Configuration(self.snapshots[member, s], float(self.save_times[s]),
                             self.master_seed, member, int(round(self.save_times[s] / self.dt)))


def simulate_member(spec, rho0, N, sigma, dt, T, save_times, master_seed, member_index,
                    table=None):
    n_steps, idx = step_schedule(T, dt, save_times)
    table = pair_table(spec) if table is None and not spec.is_zero else table
    cfg = sample_initial(rho0, N, stream(master_seed, member_index, INITIAL_TAG),
                         master_seed, member_index)
    out = np.empty((len(idx), N, spec.dimension))
    wanted = dict(zip(idx, range(len(idx))))
    for s in range(n_steps + 1):
        if s in wanted:
            out[wanted[s]] = cfg.positions
        if s == n_steps:
            break
        cfg = step_em(cfg, spec, sigma, dt, table=table)
    return out


def run_ensemble(spec, rho0, N, M, sigma, dt, T, save_times, master_seed=0, workers=None,
                 members=None):
    """Simulate members ``0..M-1`` (or the given subset) and collect snapshots.

    Results do not depend on ``workers``: each member owns its noise streams
    and writes only its own slice.
    """
    N = check_int(N, "N", lower=1)
    M = check_int(M, "M", lower=1)
    save_times = np.asarray(save_times, dtype=float)
    step_schedule(T, dt, save_times)
    if rho0.d != spec.dimension:
        raise ValueError("initial density and potential dimensions differ")
    table = None if spec.is_zero else pair_table(spec)
    members = range(M) if members is None else members
    snaps = np.full((M, len(save_times), N, spec.dimension), np.nan)
    failures = {}

    def job(m):
        try:
            snaps[m] = simulate_member(spec, rho0, N, sigma, dt, T, save_times, master_seed,
                                       m, table)
        except (FloatingPointError, ValueError) as exc:
            failures[m] = f"member {m}: {exc}"

    n_workers = worker_count(workers)
    if n_workers == 1:
        for m in members:
            job(m)
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            list(pool.map(job, members))
    return EnsembleRun(spec, float(sigma), float(dt), float(T), N, int(master_seed),
                       save_times, snaps, dict(sorted(failures.items())))


# ---------------------------------------------------------------------------
# Snapshot files: raw little-endian float64, particle-major, plus a JSON sidecar
# ---------------------------------------------------------------------------

def write_snapshots(path, array, meta):
    """Write ``array`` (shape (S, N, d)) to ``path`` and ``meta`` to ``path.json``."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(arr.tobytes(order="C"))
    tmp.replace(path)
    side = dict(meta)
    side.update({"shape": list(arr.shape), "dtype": "<f8", "layout": "particle-major"})
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def read_snapshots(path):
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(meta["shape"])
    return arr.copy(), meta


__all__ = [
    "Configuration", "EnsembleRun", "PairTable", "default_dt", "drift", "read_snapshots",
    "run_ensemble", "sample_initial", "simulate_member", "step_em", "stream",
    "worker_count", "write_snapshots", "DensityField",
]
