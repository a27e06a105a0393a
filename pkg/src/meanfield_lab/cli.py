"""Command line entry point ``meanfield-lab``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .density import DensityField
from .freeenergy import (LinearFunctional, ld_functional, modulated_energy, mollification_gap,
                         partition_gamma, partition_mc, truncated_log_functional)
from .harness import (ExperimentConfig, cosine_kernel_for_gamma, load_ensemble_dir,
                      load_pde_dir, report_from_dirs, run_dir, run_experiment,
                      simulate_ensemble_cached, solve_pde_cached)
from .kernels import certify_kernel, load_spec
from .particles import default_dt, stream


def _save_times(T, every):
    if every is None or every <= 0:
        return [0.0, T]
    n = int(round(T / every))
    if abs(n * every - T) > 1e-9:
        raise SystemExit("--save-every must divide T")
    return [round(i * every, 12) for i in range(n + 1)]


def _emit(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    return str(o)


def cmd_certify(a):
    spec = load_spec(a.spec)
    rep = certify_kernel(spec, a.sigma, a.samples, np.random.default_rng(a.seed))
    _emit(rep.to_dict(), a.out)
    return 0 if rep.all_passed else 1


def _simulation_config(a, kind="chaos_rate"):
    spec = load_spec(a.spec)
    dt = a.dt if a.dt is not None else default_dt(spec, a.N)
    return ExperimentConfig(kind=kind, out=str(a.out), spec=spec.to_dict(), sigma=a.sigma,
                            dt=dt, T=a.T, save_times=_save_times(a.T, a.save_every),
                            N_list=[a.N], M=a.M, seed=a.seed, grid=a.grid, init=a.init,
                            workers=a.workers)


def cmd_simulate(a):
    cfg = _simulation_config(a)
    simulate_ensemble_cached(cfg, a.N, log=_log, root=a.out)
    directory = run_dir(cfg, a.N, a.out)
    _, _, _, survivors, failures = load_ensemble_dir(directory)
    _emit({"directory": str(directory), "survivors": len(survivors), "failures": failures},
          None)
    return 0


def cmd_pde(a):
    spec = load_spec(a.spec)
    cfg = ExperimentConfig(kind="blowup" if a.halt_on_blowup else "chaos_rate", out=str(a.out),
                           spec=spec.to_dict(), sigma=a.sigma, dt=a.dt, T=a.T,
                           save_times=_save_times(a.T, a.save_every), grid=a.grid,
                           init=a.init)
    _, record = solve_pde_cached(cfg, directory=a.out, log=_log)
    _emit({"directory": str(a.out), "blowup": record["blowup"], "halted": record["halted"],
           "clipped_mass": record["clipped_mass"]}, None)
    return 0


def cmd_functional(a):
    used = {"modulated": ("spec", "runs", "pde", "t"),
            "ldfunc": ("functional", "grid", "d", "eta", "c", "weight", "max_iter", "tol"),
            "partition": ("grid", "d", "N", "samples", "gamma", "seed"),
            "gap": ("runs", "t", "grid", "eta", "c", "eps")}[a.op]
    params = {k: getattr(a, k) for k in used}
    value, stderr = None, None
    if a.op == "modulated":
        spec = load_spec(a.spec)
        snaps, times, meta, survivors, _ = load_ensemble_dir(a.runs)
        s = int(np.argmin(np.abs(times - (times[-1] if a.t is None else a.t))))
        fields_ = load_pde_dir(a.pde)
        rho = min(fields_, key=lambda f: abs(f.time - times[s]))
        Ds = np.array([modulated_energy(x, rho, spec).D for x in snaps[:, s]])
        value = float(Ds.mean())
        stderr = float(Ds.std(ddof=1) / math.sqrt(len(Ds))) if len(Ds) > 1 else 0.0
    elif a.op == "ldfunc":
        rho = DensityField.uniform(a.grid, a.d)
        if a.functional == "linear":
            g = np.arange(a.grid) / a.grid
            mesh = np.meshgrid(*([g] * a.d), indexing="ij")
            F = LinearFunctional(np.cos(2.0 * np.pi * mesh[0]))
        else:
            F = truncated_log_functional(a.grid, a.d, a.eta, a.c)
        res = ld_functional(F, rho, a.weight, a.max_iter, a.tol)
        value = res.value
        params.update({"iterations": res.iterations, "residual": res.residual,
                       "converged": res.converged})
    elif a.op == "partition":
        rho = DensityField.uniform(a.grid, a.d)
        f, amp = cosine_kernel_for_gamma(a.gamma, rho, a.d)
        est = partition_mc(f, rho, a.N, a.samples, stream(a.seed, a.N, 0))
        value, stderr = est.estimate, est.stderr
        params.update({"amplitude": amp, "gamma": partition_gamma(f, rho),
                       "bound": 2.0 / (1.0 - partition_gamma(f, rho)),
                       "ess": est.ess, "unreliable": est.unreliable})
    elif a.op == "gap":
        snaps, times, meta, _, _ = load_ensemble_dir(a.runs)
        d = snaps.shape[-1]
        F = truncated_log_functional(a.grid, d, a.eta, a.c)
        s = len(times) - 1 if a.t is None else int(np.argmin(np.abs(times - a.t)))
        value = mollification_gap(F, snaps[:, s], a.eps, DensityField.uniform(a.grid, d))
    params = {k: str(v) if isinstance(v, Path) else v for k, v in params.items()}
    _emit({"op": a.op, "params": params, "value": value, "stderr": stderr}, a.out)
    return 0


def cmd_report(a):
    summary = report_from_dirs(a.runs, a.pde, a.out, k=a.k, bandwidth=a.bandwidth)
    _emit({"out": str(a.out), "fits": summary["fits"]}, None)
    return 0


def cmd_sweep(a):
    cfg = ExperimentConfig.from_json(a.config)
    out = run_experiment(cfg, log=_log)
    manifest = json.loads((out / "manifest.json").read_text())
    _emit({"out": str(out), "results": manifest["results"]}, None)
    return 0


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def build_parser():
    p = argparse.ArgumentParser(prog="meanfield-lab", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("certify", help="check the kernel hypotheses for a potential")
    c.add_argument("--spec", required=True)
    c.add_argument("--sigma", type=float, required=True)
    c.add_argument("--samples", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    def sim_args(q):
        q.add_argument("--spec", required=True)
        q.add_argument("--sigma", type=float, required=True)
        q.add_argument("--T", type=float, required=True)
        q.add_argument("--save-every", type=float)
        q.add_argument("--grid", type=int, default=128)
        q.add_argument("--init", default="gaussian:0.15")
        q.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("simulate", help="simulate a particle ensemble")
    sim_args(s)
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--M", type=int, default=1)
    s.add_argument("--dt", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_simulate)

    q = sub.add_parser("pde", help="solve the limit equation")
    sim_args(q)
    q.add_argument("--dt", type=float, default=1e-4)
    q.add_argument("--halt-on-blowup", action="store_true")
    q.set_defaults(func=cmd_pde)

    f = sub.add_parser("functional", help="evaluate a functional")
    f.add_argument("--op", choices=("modulated", "ldfunc", "partition", "gap"), required=True)
    f.add_argument("--spec")
    f.add_argument("--runs", type=Path, help="one ensemble directory")
    f.add_argument("--pde", type=Path)
    f.add_argument("--t", type=float)
    f.add_argument("--functional", choices=("linear", "truncated-log"), default="truncated-log")
    f.add_argument("--grid", type=int, default=64)
    f.add_argument("--d", type=int, default=2)
    f.add_argument("--eta", type=float, default=0.1)
    f.add_argument("--c", type=float, default=1.0)
    f.add_argument("--weight", type=float, default=1.0)
    f.add_argument("--max-iter", type=int, default=500)
    f.add_argument("--tol", type=float, default=1e-12)
    f.add_argument("--N", type=int, default=8)
    f.add_argument("--samples", type=int, default=100_000)
    f.add_argument("--gamma", type=float, default=0.3)
    f.add_argument("--eps", type=float, default=0.02)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out")
    f.set_defaults(func=cmd_functional)

    r = sub.add_parser("report", help="marginal distances, D statistics and rate fits")
    r.add_argument("--runs", type=Path, required=True)
    r.add_argument("--pde", type=Path, required=True)
    r.add_argument("--k", type=int, default=1, choices=(1, 2))
    r.add_argument("--bandwidth", type=float)
    r.add_argument("--out", type=Path, required=True)
    r.set_defaults(func=cmd_report)

    w = sub.add_parser("sweep", help="run an experiment config")
    w.add_argument("--config", required=True)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"meanfield-lab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
