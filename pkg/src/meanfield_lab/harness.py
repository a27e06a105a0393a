"""Experiment orchestration: configs, cached ensembles, reports and manifests.

Artifact layout under ``cfg.out``::

    manifest.json            inputs, their hashes, artifact hashes, results
    runs/N{N}-{hash}/        member_XXXX.bin (+ .json sidecar), one dir per N
    pde/                     field_XXXX.bin (+ .json), solution.json
    report/                  report.csv, schema.json, summary.json, *.svg
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import shutil
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .density import DensityField
from .diagnostics import (LowConfidenceWarning, default_bandwidth, fit_rate, kde_marginal, kl_divergence,
                          l1_distance, smooth_field)
from .freeenergy import (SeparableKernel, free_energy_proxy, ld_functional, modulated_energy,
                         partition_gamma, partition_mc, truncated_log_functional)
from .kernels import PotentialSpec, fourier_coefficients
from .meanfield import solve_pde
from .particles import (read_snapshots, sample_initial, simulate_member, step_schedule,
                        stream, worker_count, write_snapshots)

KINDS = ("chaos_rate", "blowup", "repulsive_lower_bound", "partition_bound", "ld_zero")
CSV_COLUMNS = ("N", "t", "kl", "l1", "D_mean", "D_stderr", "theta_fit")
SCHEMA = {
    "file": "report.csv",
    "columns": [
        {"name": "N", "type": "integer", "description": "number of particles per member"},
        {"name": "t", "type": "float", "description": "save time"},
        {"name": "kl", "type": "float",
         "description": "KL divergence of the k-marginal estimate from the smoothed limit "
                        "density (q floored at 1e-12)"},
        {"name": "l1", "type": "float",
         "description": "L1 distance between the k-marginal estimate and the smoothed limit "
                        "density"},
        {"name": "D_mean", "type": "float",
         "description": "mean over surviving members of the modulated energy against the "
                        "limit density at time t"},
        {"name": "D_stderr", "type": "float", "description": "standard error of D_mean"},
        {"name": "theta_fit", "type": "float",
         "description": "exponent of the power law l1 ~ C N^-theta fitted across all N at "
                        "time t (empty if fewer than 3 usable N)"},
    ],
}


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    kind: str
    out: str
    spec: object = None
    sigma: float = 1.0
    dt: float = 1e-3
    T: float = 1.0
    save_times: list = field(default_factory=list)
    N_list: list = field(default_factory=list)
    M: int = 1
    seed: int = 0
    grid: int = 128
    init: str = "gaussian:0.15"
    pde_dt: float | None = None
    bandwidth: float | None = None
    k: int = 1
    samples: int = 1000
    target_gamma: float = 0.3
    eta: float = 0.1
    c: float = 1.0
    weight: float = 1.0
    max_iter: int = 500
    tol: float = 1e-12
    workers: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if isinstance(self.spec, PotentialSpec):
            self.spec = self.spec.to_dict()
        self.N_list = [int(n) for n in self.N_list]
        if any(b <= a for a, b in zip(self.N_list, self.N_list[1:])):
            raise ValueError("N_list must be strictly increasing")
        if self.kind in ("chaos_rate", "blowup"):
            if self.spec is None:
                raise ValueError(f"{self.kind} needs a potential spec")
            n_steps = round(self.T / self.dt)
            if abs(self.dt * n_steps - self.T) > 1e-9:
                raise ValueError("T must be a whole number of steps dt")
            if not self.save_times:
                self.save_times = [0.0, self.T]
            self.save_times = [float(t) for t in self.save_times]
            step_schedule(self.T, self.dt, self.save_times)
            step_schedule(self.T, self.effective_pde_dt, self.save_times)
        if self.kind == "repulsive_lower_bound" and self.spec is None:
            raise ValueError("repulsive_lower_bound needs a potential spec")

    @property
    def effective_pde_dt(self):
        return self.dt if self.pde_dt is None else self.pde_dt

    @property
    def potential(self):
        return None if self.spec is None else PotentialSpec.from_dict(self.spec)

    @classmethod
    def from_dict(cls, data, base=None):
        data = dict(data)
        spec = data.get("spec")
        if isinstance(spec, str):
            path = Path(spec)
            if not path.is_absolute() and base is not None:
                path = Path(base) / path
            if not path.exists():
                raise FileNotFoundError(f"spec file {path} does not exist")
            data["spec"] = json.loads(path.read_text())
        out = data.get("out")
        if out is not None and base is not None and not Path(out).is_absolute():
            data["out"] = str(Path(base) / out)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base=path.parent)

    def to_dict(self):
        return asdict(self)

    def content(self):
        """Inputs that determine the results (everything but paths and threads)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        return d


def content_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


# ---------------------------------------------------------------------------
# Cached stages
# ---------------------------------------------------------------------------

def initial_density(cfg, spec=None):
    d = spec.dimension if spec is not None else 2
    return DensityField.parse(cfg.init, cfg.grid, d)


def ensemble_key(cfg, N):
    return {"stage": "ensemble", "version": __version__, "spec": cfg.spec, "sigma": cfg.sigma,
            "dt": cfg.dt, "T": cfg.T, "save_times": cfg.save_times, "N": N, "seed": cfg.seed,
            "init": cfg.init, "grid": cfg.grid}


def run_dir(cfg, N, root=None):
    root = Path(cfg.out) / "runs" if root is None else Path(root)
    return root / f"N{N:05d}-{content_hash(ensemble_key(cfg, N))[:16]}"


def _member_done(directory, m):
    base = directory / f"member_{m:04d}"
    return (Path(str(base) + ".bin.json").exists()
            or Path(str(base) + ".failed.json").exists())


def simulate_ensemble_cached(cfg, N, log=None, root=None):
    """Simulate (or reuse) every member for one N; returns the number computed."""
    spec = cfg.potential
    rho0 = initial_density(cfg, spec)
    directory = run_dir(cfg, N, root)
    directory.mkdir(parents=True, exist_ok=True)
    key = ensemble_key(cfg, N)
    _write_json(directory / "ensemble.json", key)
    todo = [m for m in range(cfg.M) if not _member_done(directory, m)]

    def job(m):
        base = directory / f"member_{m:04d}"
        try:
            snaps = simulate_member(spec, rho0, N, cfg.sigma, cfg.dt, cfg.T, cfg.save_times,
                                    cfg.seed, m)
        except (FloatingPointError, ValueError) as exc:
            _write_json(Path(str(base) + ".failed.json"), {"member": m, "error": str(exc)})
            return
        meta = {"N": N, "d": spec.dimension, "t": cfg.save_times, "member_index": m,
                "master_seed": cfg.seed, "sigma": cfg.sigma, "dt": cfg.dt, "spec": cfg.spec}
        write_snapshots(Path(str(base) + ".bin"), snaps, meta)

    workers = worker_count(cfg.workers)
    if workers == 1:
        for m in todo:
            job(m)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(job, todo))
    if log:
        log(f"N={N}: {len(todo)} members simulated, {cfg.M - len(todo)} reused")
    return len(todo)


def load_ensemble_dir(directory):
    """Return ``(snapshots (M_alive, S, N, d), save_times, meta, survivors, failures)``."""
    directory = Path(directory)
    arrays, survivors, failures, meta = [], [], {}, None
    members = sorted({p.name.split(".")[0] for p in directory.glob("member_*")})
    for name in members:
        m = int(name.split("_")[1])
        binf = directory / f"{name}.bin"
        fail = directory / f"{name}.failed.json"
        if fail.exists():
            failures[m] = json.loads(fail.read_text())["error"]
        elif Path(str(binf) + ".json").exists():
            arr, meta = read_snapshots(binf)
            arrays.append(arr)
            survivors.append(m)
    if meta is None:
        raise FileNotFoundError(f"no member snapshots in {directory}")
    return np.stack(arrays), np.asarray(meta["t"], dtype=float), meta, survivors, failures


def pde_key(cfg):
    return {"stage": "pde", "version": __version__, "spec": cfg.spec, "sigma": cfg.sigma,
            "dt": cfg.effective_pde_dt, "T": cfg.T, "save_times": cfg.save_times,
            "init": cfg.init, "grid": cfg.grid, "kind": cfg.kind}


def solve_pde_cached(cfg, directory=None, log=None):
    """Solve (or reuse) the limit equation; returns ``(fields, solution_record)``."""
    spec = cfg.potential
    directory = Path(cfg.out) / "pde" if directory is None else Path(directory)
    key = pde_key(cfg)
    h = content_hash(key)
    record_path = directory / "solution.json"
    if record_path.exists():
        record = json.loads(record_path.read_text())
        if record.get("hash") == h:
            if log:
                log("pde: reused")
            return load_pde_dir(directory), record
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True)
    rho0 = initial_density(cfg, spec)
    sol = solve_pde(rho0, spec, cfg.sigma, cfg.effective_pde_dt, cfg.T, cfg.save_times,
                    halt_on_blowup=cfg.kind == "blowup")
    for i, f in enumerate(sol.fields):
        write_snapshots(directory / f"field_{i:04d}.bin", f.values,
                        {"n": f.n, "d": f.d, "t": f.time, "clipped_mass": f.clipped_mass})
    bl = sol.blowup
    fe = sol.free_energy
    # the discrete energy should not rise between saves; report any time it does
    rises = [f.time for f, a, b in zip(sol.fields[1:], fe, fe[1:]) if b > a + 1e-12 * abs(a)]
    record = {
        "hash": h, "key": key, "halted": sol.halted, "clipped_mass": sol.clipped_mass,
        "blowup": bl.to_dict(), "free_energy": fe, "free_energy_increases_at": rises,
        "times": [f.time for f in sol.fields],
        "max_density": {"times": bl.times.tolist(), "values": bl.max_density.tolist()},
    }
    _write_json(record_path, record)
    if log:
        log("pde: solved")
    return list(sol.fields), record


def load_pde_dir(directory):
    out = []
    for p in sorted(Path(directory).glob("field_*.bin")):
        arr, meta = read_snapshots(p)
        out.append(DensityField(arr, float(meta["t"]), meta.get("clipped_mass", 0.0)))
    return out


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _field_at(fields_, t):
    for f in fields_:
        if abs(f.time - t) <= 1e-9:
            return f
    raise KeyError(f"no limit density at t={t}")


def _fmt(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def ensemble_statistics(snaps, times, ref_fields, spec, k=1, bandwidth=None, n=None,
                        sigma=None):
    """Per save time: KDE distances to the smoothed limit density and D statistics.

    Returns a list of dicts with keys ``t, kl, l1, l1_stderr, D_mean, D_stderr``
    (plus ``free_energy_proxy`` when ``sigma`` is given).  ``l1_stderr`` is the
    delete-one-member jackknife error.
    """
    M, S, N, d = snaps.shape
    coef = fourier_coefficients(spec) if spec is not None and not spec.is_zero else None
    rows = []
    for s, t in enumerate(times):
        X = snaps[:, s]
        rho_t = _field_at(ref_fields, t)
        grid = rho_t.n if n is None else n
        bw = default_bandwidth(M * N, d) if bandwidth is None else bandwidth
        kde = kde_marginal(X, t, k=k, bandwidth=bw, n=grid if k == 1 else None)
        if k == 1:
            ref = smooth_field(rho_t, bw)
        else:
            v = smooth_field(rho_t, bw).values.ravel()
            ref = DensityField(np.outer(v, v).reshape(kde.values.shape) /
                               ((v.sum() / v.size) ** 2), t)
            if ref.n != kde.n:
                raise ValueError("pair marginal grid must match the limit grid")
        kl = kl_divergence(kde, ref)
        l1 = l1_distance(kde, ref)
        jk = []
        if M > 2 and k == 1:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LowConfidenceWarning)
                for m in range(M):
                    sub = kde_marginal(np.delete(X, m, axis=0), t, k=1, bandwidth=bw, n=grid)
                    jk.append(l1_distance(sub, ref))
            jk = np.asarray(jk)
            l1_se = float(math.sqrt((M - 1) / M * np.sum((jk - jk.mean()) ** 2)))
        else:
            l1_se = float("nan")
        if coef is not None:
            Ds = np.array([modulated_energy(x, rho_t, spec, coef).D for x in X])
        else:
            Ds = np.zeros(M)
        row = {"t": float(t), "kl": kl, "l1": l1, "l1_stderr": l1_se,
               "D_mean": float(Ds.mean()),
               "D_stderr": float(Ds.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0}
        if sigma is not None:
            row["free_energy_proxy"] = free_energy_proxy(kl, Ds, sigma, k)
        rows.append(row)
    return rows


def _svg_settings():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "meanfield-lab"
    matplotlib.rcParams["svg.fonttype"] = "none"


def plot_rate(path, N, err, fit=None, title="", ylabel="L1 error"):
    """Log-log plot of ``err`` against ``N`` with the fitted power law."""
    _svg_settings()
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(N, err, "o", label="measured")
    if fit is not None:
        grid = np.geomspace(min(N), max(N), 50)
        ax.loglog(grid, fit.predict(grid), "-",
                  label=f"fit: theta={fit.theta:.3f}, r2={fit.r2:.3f}")
    ax.set_xlabel("N")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    _write_text(path, buf.getvalue())


def build_report(ensembles, ref_fields, spec, out_dir, k=1, bandwidth=None, sigma=None):
    """Write ``report.csv``, ``schema.json``, ``summary.json`` and plots.

    ``ensembles`` maps N to ``(snapshots, save_times, survivors, failures)``.
    Returns the summary dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = {}
    for N, (snaps, times, survivors, failures) in sorted(ensembles.items()):
        stats[N] = ensemble_statistics(snaps, times, ref_fields, spec, k, bandwidth,
                                       sigma=sigma)
    Ns = sorted(stats)
    times = [r["t"] for r in stats[Ns[0]]]
    fits = {}
    for s, t in enumerate(times):
        pairs = [(N, stats[N][s]["l1"]) for N in Ns if stats[N][s]["l1"] > 0]
        if len({p[0] for p in pairs}) >= 3:
            fits[s] = fit_rate(pairs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for N in Ns:
        for s, row in enumerate(stats[N]):
            theta = fits[s].theta if s in fits else None
            w.writerow([_fmt(N), _fmt(row["t"]), _fmt(row["kl"]), _fmt(row["l1"]),
                        _fmt(row["D_mean"]), _fmt(row["D_stderr"]), _fmt(theta)])
    _write_text(out_dir / "report.csv", buf.getvalue())
    _write_json(out_dir / "schema.json", SCHEMA)
    last = len(times) - 1
    if last in fits:
        plot_rate(out_dir / "l1_vs_N.svg", Ns, [stats[N][last]["l1"] for N in Ns], fits[last],
                  title=f"k={k} marginal, t={times[last]:g}")
    summary = {
        "k": k,
        "times": times,
        "N": Ns,
        "l1": {str(N): [r["l1"] for r in stats[N]] for N in Ns},
        "l1_stderr": {str(N): [r["l1_stderr"] for r in stats[N]] for N in Ns},
        "fits": {str(times[s]): f.to_dict() for s, f in fits.items()},
        "survivors": {str(N): len(ensembles[N][2]) for N in Ns},
        "failures": {str(N): ensembles[N][3] for N in Ns},
    }
    if sigma is not None:
        summary["free_energy_proxy"] = {str(N): [r["free_energy_proxy"] for r in stats[N]]
                                        for N in Ns}
    _write_json(out_dir / "summary.json", summary)
    return summary


def report_from_dirs(runs_dir, pde_dir, out_dir, k=1, bandwidth=None):
    """Rebuild a report from a ``runs/`` tree and a ``pde/`` directory."""
    ensembles, spec, sigma = {}, None, None
    for directory in sorted(p for p in Path(runs_dir).iterdir() if p.is_dir()):
        try:
            snaps, times, meta, survivors, failures = load_ensemble_dir(directory)
        except FileNotFoundError:
            continue
        N = int(meta["N"])
        if N in ensembles:
            raise ValueError(f"several ensembles with N={N} under {runs_dir}")
        ensembles[N] = (snaps, times, survivors, failures)
        spec = PotentialSpec.from_dict(meta["spec"]) if meta.get("spec") else spec
        sigma = meta.get("sigma", sigma)
    if not ensembles:
        raise FileNotFoundError(f"no ensembles under {runs_dir}")
    return build_report(ensembles, load_pde_dir(pde_dir), spec, out_dir, k, bandwidth, sigma)


# ---------------------------------------------------------------------------
# Experiment kinds
# ---------------------------------------------------------------------------

def _chaos_rate(cfg, log):
    spec = cfg.potential
    fields_, pde_record = solve_pde_cached(cfg, log=log)
    ensembles = {}
    for N in cfg.N_list:
        simulate_ensemble_cached(cfg, N, log)
        snaps, times, meta, survivors, failures = load_ensemble_dir(run_dir(cfg, N))
        ensembles[N] = (snaps, times, survivors, failures)
    summary = build_report(ensembles, fields_, spec, Path(cfg.out) / "report", cfg.k,
                           cfg.bandwidth, cfg.sigma)
    final = summary["fits"].get(str(summary["times"][-1]))
    return {
        "pde": {"halted": pde_record["halted"], "clipped_mass": pde_record["clipped_mass"]},
        "final_fit": final,
        "final_l1": {N: summary["l1"][N][-1] for N in summary["l1"]},
        "final_l1_stderr": {N: summary["l1_stderr"][N][-1] for N in summary["l1_stderr"]},
        "survivors": summary["survivors"],
    }


def _blowup(cfg, log):
    spec = cfg.potential
    fields_, record = solve_pde_cached(cfg, log=log)
    bl = record["blowup"]
    times = np.asarray(record["max_density"]["times"])
    maxes = np.asarray(record["max_density"]["values"])
    late = (times >= 0.5 * cfg.T - 1e-12)
    decreasing = bool(late.sum() >= 2 and np.all(np.diff(maxes[late]) <= 0.0))
    _svg_settings()
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogy(times, maxes)
    ax.set_xlabel("t")
    ax.set_ylabel("max density")
    ax.set_title(f"lambda={spec.attractive_log_coefficient:g}, sigma={cfg.sigma:g}")
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    _write_text(Path(cfg.out) / "report" / "max_density.svg", buf.getvalue())
    _write_json(Path(cfg.out) / "report" / "schema.json", SCHEMA)
    return {"blowup": bl, "flag_time": bl["flag_time"], "halted": record["halted"],
            "max_density_decreasing_late": decreasing,
            "final_max_density": float(maxes[-1])}


def _repulsive_lower_bound(cfg, log):
    spec = cfg.potential
    rho = initial_density(cfg, spec)
    coef = fourier_coefficients(spec)
    mins, means = {}, {}
    for N in cfg.N_list:
        rng = stream(cfg.seed, N, 0)
        Ds = np.array([modulated_energy(sample_initial(rho, N, rng).positions, rho, spec,
                                        coef).D for _ in range(cfg.samples)])
        mins[N] = float(Ds.min())
        means[N] = float(Ds.mean())
        if log:
            log(f"N={N}: min D = {mins[N]:.6g}")
    negative = [(N, -mins[N]) for N in cfg.N_list if mins[N] < 0]
    fit = fit_rate(negative) if len(negative) >= 3 else None
    if fit is not None:
        plot_rate(Path(cfg.out) / "report" / "min_D_vs_N.svg", [p[0] for p in negative],
                  [p[1] for p in negative], fit, title="negative part of min D",
                  ylabel="-min D")
    _write_json(Path(cfg.out) / "report" / "schema.json", SCHEMA)
    return {"min_D": {str(N): v for N, v in mins.items()},
            "mean_D": {str(N): v for N, v in means.items()},
            "fit": None if fit is None else fit.to_dict(),
            "v0_over_N": {str(N): float(coef.sum()) / N for N in cfg.N_list}}


def cosine_kernel_for_gamma(target, rho, d):
    """Amplitude ``a`` with ``partition_gamma(a cos cos) = target`` (gamma is quadratic in a)."""
    unit = partition_gamma(SeparableKernel.cosine(1.0, d), rho)
    return SeparableKernel.cosine(math.sqrt(target / unit), d), math.sqrt(target / unit)


def partition_two_particle_oracle(amplitude, m=400):
    """Midpoint quadrature of the N = 2 expectation for ``f = a cos cos`` under the
    uniform density; only the first coordinates enter."""
    g = (np.arange(m) + 0.5) / m
    a, b = np.meshgrid(np.cos(2 * np.pi * g), np.cos(2 * np.pi * g), indexing="ij")
    return float(np.mean(np.exp(2.0 * amplitude * ((a + b) / 2.0) ** 2)))


def _partition_bound(cfg, log):
    d = cfg.potential.dimension if cfg.spec else 2
    rho = DensityField.uniform(cfg.grid, d)
    f, amp = cosine_kernel_for_gamma(cfg.target_gamma, rho, d)
    gamma = partition_gamma(f, rho)
    bound = 2.0 / (1.0 - gamma)
    rows = {}
    for N in [2] + [n for n in cfg.N_list if n != 2]:
        est = partition_mc(f, rho, N, cfg.samples, stream(cfg.seed, N, 0))
        rows[str(N)] = {"estimate": est.estimate, "stderr": est.stderr, "ess": est.ess,
                        "unreliable": est.unreliable}
        if log:
            log(f"N={N}: {est.estimate:.6g} +- {est.stderr:.2g}")
    oracle = partition_two_particle_oracle(amp) if d >= 1 else None
    _write_json(Path(cfg.out) / "report" / "schema.json", SCHEMA)
    return {"gamma": gamma, "amplitude": amp, "bound": bound, "estimates": rows,
            "two_particle_oracle": oracle}


def _ld_zero(cfg, log):
    d = cfg.potential.dimension if cfg.spec else 2
    n = cfg.grid
    F = truncated_log_functional(n, d, cfg.eta, cfg.c)
    rho = DensityField.uniform(n, d)
    g = np.arange(n) / n
    mesh = np.meshgrid(*([g] * d), indexing="ij")
    mu0 = DensityField.from_values(1.0 + 0.5 * np.cos(2.0 * np.pi * mesh[0]))
    res = ld_functional(F, rho, cfg.weight, cfg.max_iter, cfg.tol, mu0=mu0)
    l1 = l1_distance(res.argmax, rho)
    if log:
        log(f"value = {res.value:.3e}, L1 = {l1:.3e}, iterations = {res.iterations}")
    _write_json(Path(cfg.out) / "report" / "schema.json", SCHEMA)
    return {"value": res.value, "l1_to_reference": l1, "iterations": res.iterations,
            "residual": res.residual, "converged": res.converged}


_RUNNERS = {"chaos_rate": _chaos_rate, "blowup": _blowup,
            "repulsive_lower_bound": _repulsive_lower_bound,
            "partition_bound": _partition_bound, "ld_zero": _ld_zero}


def run_experiment(cfg, log=None):
    """Run one experiment; reuse cached stages; write the manifest last.

    Returns the output directory as a :class:`~pathlib.Path`.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _RUNNERS[cfg.kind](cfg, log)
    artifacts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"):
            artifacts[p.relative_to(out).as_posix()] = file_hash(p)
    manifest = {
        "version": __version__,
        "kind": cfg.kind,
        "config": cfg.content(),
        "config_hash": content_hash(cfg.content()),
        "spec_hash": content_hash(cfg.spec) if cfg.spec is not None else None,
        "stage_hashes": _stage_hashes(cfg),
        "artifacts": artifacts,
        "results": results,
    }
    _write_json(out / "manifest.json", manifest)
    return out


def _stage_hashes(cfg):
    out = {}
    if cfg.kind in ("chaos_rate", "blowup"):
        out["pde"] = content_hash(pde_key(cfg))
    if cfg.kind == "chaos_rate":
        out.update({f"ensemble_N{N}": content_hash(ensemble_key(cfg, N)) for N in cfg.N_list})
    return out


def load_manifest(out):
    return json.loads((Path(out) / "manifest.json").read_text())


__all__ = [
    "CSV_COLUMNS", "ExperimentConfig", "KINDS", "SCHEMA", "build_report", "content_hash",
    "ensemble_statistics", "load_ensemble_dir", "load_manifest", "load_pde_dir",
    "report_from_dirs", "run_experiment", "simulate_ensemble_cached", "solve_pde_cached",
]
