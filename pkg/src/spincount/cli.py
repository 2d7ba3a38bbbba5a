"""Batch command line front end.

Every run writes into one output directory: the data files, ``config.json``
(the validated configuration, enough to re-run) and ``manifest.json``
(seeds, package versions, runtime, generator fingerprints, file hashes).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path
from typing import Literal

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from . import __version__
from .dynamics import (
    cumulant_grid,
    cumulants_from_scgf,
    evolve,
    scgf,
    spectrum,
    stationary_state,
    write_scgf_csv,
    write_spectrum_csv,
    write_table_csv,
    write_timeseries_csv,
)
from .errors import ConfigError, SpinCountError
from .generator import OBSERVABLES, observable_matrix
from .protocol import (
    EstimatorPolicy,
    RampSchedule,
    SystemSpec,
    benchmark_deltaS,
    choose_scheme,
    estimate_from_counts,
    expected_counts,
    run_protocol_ensemble,
    universal_prediction,
    windows_for,
)
from .trajectories import Drive, ensemble_mean, freezing_stats, run_ensemble, write_records

SCHEMA_VERSION = 1
OUT_ENV = "SPINCOUNT_OUT"
KINDS = ("master", "trajectory", "protocol", "scgf", "spectrum", "freeze", "benchmark")

Spin = float | int | str


class RunConfig(BaseModel):
    """Validated, fully serializable description of one experiment."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["master", "trajectory", "protocol", "scgf", "spectrum", "freeze", "benchmark"]
    # system: a single sector S, two superposed sectors, or N spins with local decay starting in S
    S: Spin | None = None
    Sz: Spin | None = None
    superpose: tuple[int, int] | None = None
    mixed: bool = False
    N: int | None = None
    gamma: float = 0.0
    kappa: float = 1.0
    # drive: constant omega for time T, or a ramp schedule
    omega: float | None = None
    T: float | None = None
    samples: int = 101
    schedule: dict | None = None
    windows: int | None = None
    substeps: int = 10
    # measurement and estimation
    eta: float = 1.0
    z: float = 3.0
    consecutive: int = 1
    one_sided: bool = False
    mode: Literal["single_shot", "deterministic_mean"] = "single_shot"
    # sampling
    seed: int = 0
    realizations: int = 1
    scheme: Literal["auto", "sse", "bernoulli", "waiting"] = "auto"
    dt: float | None = None
    threads: int = 1
    # numerics
    method: Literal["rk", "bdf", "expm"] = "rk"
    rtol: float = 1e-9
    atol: float = 1e-11
    # kind-specific
    s_grid: list[float] | None = None
    k: int = 20
    t_star: float | None = None
    S_list: list[float] | None = None
    dt_list: list[float] | None = None
    stationary: bool = False
    out: str | None = None

    @field_validator("schedule")
    @classmethod
    def _schedule_shape(cls, v):
        if v is None:
            return v
        if len(v) != 1 or next(iter(v)) not in ("ladder", "linear"):
            raise ValueError("schedule must be {ladder: {dw, dt}} or {linear: {alpha, dt}}")
        kind, args = next(iter(v.items()))
        need = {"dw", "dt"} if kind == "ladder" else {"alpha", "dt"}
        if not isinstance(args, dict) or set(args) != need:
            raise ValueError(f"{kind} schedule needs exactly {sorted(need)}")
        return {kind: {k: float(x) for k, x in args.items()}}

    @model_validator(mode="after")
    def _consistent(self):
        if self.S is not None and self.superpose is not None:
            raise ValueError("S and superpose are mutually exclusive")
        if self.N is not None and self.S is None and self.superpose is None:
            # the initial sector only matters for time evolution; default to the symmetric one
            self.S = self.N / 2
        if self.kind != "benchmark" and self.S is None and self.superpose is None:
            raise ValueError("a system needs S, superpose or N")
        if self.N is not None and self.superpose is not None:
            raise ValueError("N (local decay model) cannot be combined with superpose")
        if self.gamma and self.N is None:
            raise ValueError("gamma requires N")
        if self.kind in ("master", "trajectory", "freeze") and self.schedule is None:
            if self.omega is None or self.T is None:
                raise ValueError(f"{self.kind} needs omega and T (or a schedule)")
        if self.kind in ("scgf", "spectrum") and self.omega is None:
            raise ValueError(f"{self.kind} needs omega")
        if self.kind == "protocol" and self.schedule is None:
            raise ValueError("protocol needs a schedule")
        if self.kind == "freeze" and self.t_star is None:
            raise ValueError("freeze needs t_star")
        if self.kind == "benchmark" and (not self.S_list or not self.dt_list):
            raise ValueError("benchmark needs S_list and dt_list")
        if self.realizations < 1 or self.threads < 1 or self.samples < 2:
            raise ValueError("realizations, threads must be >= 1 and samples >= 2")
        return self

    def dump(self) -> dict:
        return self.model_dump(mode="json")

    def system_spec(self) -> SystemSpec:
        try:
            if self.superpose is not None:
                return SystemSpec("superpose", S1=self.superpose[0], S2=self.superpose[1], mixed=self.mixed,
                                  kappa=self.kappa)
            if self.N is not None:
                return SystemSpec("dicke", S=self.S, Sz=self.Sz, N=self.N, gamma=self.gamma, kappa=self.kappa)
            return SystemSpec("sector", S=self.S, Sz=self.Sz, kappa=self.kappa)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def ramp(self, spec: SystemSpec | None = None) -> RampSchedule | None:
        if self.schedule is None:
            return None
        kind, args = next(iter(self.schedule.items()))
        rate = args["dw"] if kind == "ladder" else args["alpha"]
        n = self.windows or windows_for(spec or self.system_spec(), kind, rate, args["dt"])
        return RampSchedule(kind, rate, args["dt"], n, self.substeps)

    def policy(self) -> EstimatorPolicy:
        return EstimatorPolicy(z=self.z, consecutive=self.consecutive, two_sided=not self.one_sided)


def parse_schedule_flag(text: str) -> dict:
    sched = RampSchedule.parse(text, n_windows=1)
    key = "dw" if sched.kind == "ladder" else "alpha"
    return {sched.kind: {key: sched.rate, "dt": sched.dt}}


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a JSON file and/or flag values (flags win)."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        lines = [f"{'.'.join(map(str, e['loc'])) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines)) from exc


# ---------------------------------------------------------------------------
# experiments; each returns {fingerprint name: hash} and writes files into out


def _drive(cfg: RunConfig, spec: SystemSpec):
    sched = cfg.ramp(spec)
    if sched is not None:
        return sched.drive(), sched
    return Drive.constant(cfg.omega, cfg.T), None


def _grid(drive: Drive, n: int) -> np.ndarray:
    return np.linspace(drive.t0, drive.t0 + drive.T, n)


def _weights_columns(weights: dict) -> dict:
    return {f"P_2S={a}": w for a, w in sorted(weights.items(), reverse=True)}


RAMP_METHODS = {"rk": "rk", "bdf": "bdf", "expm": "krylov"}


def run_master(cfg: RunConfig, out: Path) -> dict:
    spec = cfg.system_spec()
    system = spec.system()
    sched = cfg.ramp(spec)
    fps = {}
    if sched is not None:
        counts, samples = expected_counts(spec, sched, cfg.eta, method=RAMP_METHODS[cfg.method],
                                          rtol=cfg.rtol, observables=OBSERVABLES)
        _write_windows(out / "windows.csv", sched, cfg.eta, cfg.kappa, {"mean_counts": counts})
        write_timeseries_csv(out / "observables.csv", sched.edges, samples)
        est = estimate_from_counts(counts, sched, cfg.eta, cfg.kappa, cfg.policy(), mode="deterministic_mean")
        _write_json(out / "estimate.json", est.to_json())
        fps["liouvillian@omega0"] = system.liouvillian(sched.drive().omegas[0]).fingerprint
        return fps
    L = system.liouvillian(cfg.omega)
    fps["liouvillian"] = L.fingerprint
    times = np.linspace(0.0, cfg.T, cfg.samples)
    ev = evolve(L, spec.density(), times, method=cfg.method, rtol=cfg.rtol, atol=cfg.atol)
    cols = ev.expect(OBSERVABLES)
    cols.update(_weights_columns(ev.sector_weights()))
    write_timeseries_csv(out / "timeseries.csv", times, cols)
    if cfg.stationary:
        ss = stationary_state(L, sector=cfg.S if spec.kind == "sector" else None)
        vals = observable_matrix(L.layout, OBSERVABLES) @ ss.rho
        _write_json(out / "stationary.json", {"residual": ss.residual,
                                              **{n: float(v.real) for n, v in zip(OBSERVABLES, vals)}})
    return fps


def _write_windows(path, sched: RampSchedule, eta, kappa, columns: dict):
    pred = universal_prediction(sched, eta, kappa)
    names = list(columns)
    rows = []
    for n in range(sched.n_windows):
        rows.append([n + 1, sched.edges[n], sched.edges[n + 1], float(sched.window_omega(n + 1)), pred.means[n],
                     pred.sigmas[n], *(columns[c][n] if n < len(columns[c]) else np.nan for c in names)])
    write_table_csv(path, "windows", ["n", "t0", "t1", "omega", "universal_mean", "universal_sigma", *names], rows)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _ensemble_files(out: Path, results, times):
    write_records(out / "records.jsonl", [r.record for r in results])
    cols = {}
    for name in results[0].observables:
        m, se = ensemble_mean(results, name)
        cols[f"{name}_mean"] = m
        cols[f"{name}_sem"] = se
    for a in sorted(results[0].weights.weights, reverse=True):
        w = np.array([r.weights.weights[a] for r in results])
        cols[f"P_2S={a}_mean"] = w.mean(axis=0)
        cols[f"P_2S={a}_std"] = w.std(axis=0)
    write_timeseries_csv(out / "ensemble.csv", times, cols)
    rows = []
    for r in results:
        for k, t in enumerate(r.weights.times):
            rows.append([r.record.index, t, *(r.weights.weights[a][k] for a in sorted(r.weights.weights, reverse=True))])
    hdr = ["index", "t", *(f"P_2S={a}" for a in sorted(results[0].weights.weights, reverse=True))]
    write_table_csv(out / "weights.csv", "weights", hdr, rows)


def _initial(cfg: RunConfig, spec: SystemSpec, scheme: str):
    if scheme == "sse":
        psi = spec.pure_state()
        if psi is None:
            raise ConfigError("the pure-state scheme needs a pure initial state")
        return psi
    return spec.density()


def run_trajectory(cfg: RunConfig, out: Path, t_star: float | None = None) -> dict:
    spec = cfg.system_spec()
    system = spec.system()
    drive, sched = _drive(cfg, spec)
    scheme = choose_scheme(spec, cfg.eta, cfg.scheme)
    times = _grid(drive, cfg.samples)
    if t_star is not None:
        times = np.union1d(times, [t_star])
    results = run_ensemble(system, _initial(cfg, spec, scheme), drive, cfg.seed, range(cfg.realizations),
                           eta=cfg.eta, scheme=scheme, dt=cfg.dt, sample_times=times,
                           window_edges=sched.edges if sched is not None else None, threads=cfg.threads)
    _ensemble_files(out, results, times)
    if t_star is not None:
        st = freezing_stats([r.weights for r in results], t_star)
        max_w = np.array([r.weights.max_weight()[np.argmin(np.abs(times - t_star))] for r in results])
        _write_json(out / "freeze.json", {
            "t_star": t_star, "n": st.n, "scheme": scheme,
            "mean": {str(k): v for k, v in st.mean.items()},
            "std": {str(k): v for k, v in st.std.items()},
            "frozen_fraction_0.99": float(np.mean(max_w > 0.99)),
        })
    return {"liouvillian@omega0": system.liouvillian(drive.omegas[0]).fingerprint, "scheme": scheme,
            "params_hash": results[0].record.params_hash}


def run_freeze(cfg: RunConfig, out: Path) -> dict:
    return run_trajectory(cfg, out, t_star=cfg.t_star)


def run_protocol(cfg: RunConfig, out: Path) -> dict:
    spec = cfg.system_spec()
    sched = cfg.ramp(spec)
    if cfg.mode == "deterministic_mean":
        return run_master(cfg, out)
    results = run_protocol_ensemble(spec, sched, cfg.eta, cfg.seed, range(cfg.realizations), cfg.policy(),
                                    scheme=cfg.scheme, dt=cfg.dt, threads=cfg.threads)
    _ensemble_files(out, [r.trajectory for r in results], sched.edges)
    _write_windows(out / "windows.csv", sched, cfg.eta, cfg.kappa,
                   {f"counts_{r.record.index}": r.record.counts for r in results})
    _write_json(out / "estimates.json", [{"index": r.record.index, **r.estimate.to_json()} for r in results])
    return {"params_hash": results[0].record.params_hash}


def run_scgf(cfg: RunConfig, out: Path) -> dict:
    spec = cfg.system_spec()
    system = spec.system()
    L = system.liouvillian(cfg.omega)
    grid = sorted(set(np.round(cfg.s_grid or np.linspace(-0.5, 0.5, 11), 12)) | set(np.round(cumulant_grid(), 12)))
    curve = scgf(L, system.jump, cfg.eta, grid)
    write_scgf_csv(out / "scgf.csv", curve)
    c = cumulants_from_scgf(curve)
    _write_json(out / "cumulants.json", {"mean_rate": c.mean, "variance_T": c.variance_T, "step": c.step,
                                         "max_imag": curve.max_imag})
    return {"liouvillian": L.fingerprint, "jump": system.jump.fingerprint}


def run_spectrum(cfg: RunConfig, out: Path) -> dict:
    system = cfg.system_spec().system()
    L = system.liouvillian(cfg.omega)
    spec = spectrum(L, min(cfg.k, L.layout.size))
    write_spectrum_csv(out / "spectrum.csv", spec.eigenvalues)
    _write_json(out / "spectrum.json", {"max_residual": float(np.max(spec.residuals)),
                                        "biorthogonality_error": float(spec.biorthogonality_error)})
    return {"liouvillian": L.fingerprint}


def run_benchmark(cfg: RunConfig, out: Path) -> dict:
    sched = cfg.schedule or {"ladder": {"dw": 1.0, "dt": 10.0}}
    if "ladder" not in sched:
        raise ConfigError("benchmark supports ladder schedules only")
    rows = benchmark_deltaS(cfg.S_list, cfg.dt_list, cfg.realizations, cfg.seed, dw=sched["ladder"]["dw"],
                            eta=cfg.eta, policy=cfg.policy(), threads=cfg.threads)
    hdr = ["S", "dt", "mode", "n", "detected", "mean_error", "std_error", "relative_error"]
    write_table_csv(out / "benchmark.csv", "benchmark", hdr,
                    ([r.S, r.dt, r.mode, r.n, r.detected, r.mean_error, r.std_error, r.relative_error] for r in rows))
    return {}


RUNNERS = {
    "master": run_master,
    "trajectory": run_trajectory,
    "protocol": run_protocol,
    "scgf": run_scgf,
    "spectrum": run_spectrum,
    "freeze": run_freeze,
    "benchmark": run_benchmark,
}


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.dump(), sort_keys=True).encode()).hexdigest()[:12]


def output_dir(cfg: RunConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / f"{cfg.kind}-{config_hash(cfg)}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(cfg: RunConfig) -> Path:
    """Execute ``cfg``; returns the output directory."""
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.dump())
    t0 = time.perf_counter()
    fps = RUNNERS[cfg.kind](cfg, out)
    runtime = time.perf_counter() - t0
    files = {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.dump(),
        "seeds": {"seed": cfg.seed, "indices": [0, cfg.realizations]},
        "versions": {"spincount": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "runtime_s": round(runtime, 3),
        "fingerprints": fps,
        "files": files,
    }
    _write_json(out / "manifest.json", manifest)
    return out


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spincount", description="Photon-counting simulations of driven collective spins.")
    p.add_argument("kind", choices=KINDS + ("run",), help="experiment kind, or 'run' to take it from --config")
    p.add_argument("--config", help="JSON configuration file; flags override its values")
    p.add_argument("--sector", "--S", dest="S", type=str, help="total spin S (e.g. 30 or 5/2); initial S0 with --N")
    p.add_argument("--Sz", type=str, help="initial Sz (default -S, or 0 for superpositions)")
    p.add_argument("--superpose", help="two sectors S1,S2 in an equal superposition at Sz=0")
    p.add_argument("--mixed", action="store_true", default=None, help="equal mixture instead of superposition")
    p.add_argument("--N", type=int, help="number of spins (enables local decay)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--schedule", help="ladder:dw=1,dt=10 or linear:alpha=1,dt=0.5")
    p.add_argument("--windows", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--z", type=float)
    p.add_argument("--consecutive", type=int)
    p.add_argument("--one-sided", dest="one_sided", action="store_true", default=None)
    p.add_argument("--mode", choices=("single_shot", "deterministic_mean"))
    p.add_argument("--seed", type=int)
    p.add_argument("--realizations", type=int)
    p.add_argument("--scheme", choices=("auto", "sse", "bernoulli", "waiting"))
    p.add_argument("--dt", type=float, help="time step of the density-matrix click sampler")
    p.add_argument("--threads", type=int)
    p.add_argument("--method", choices=("rk", "bdf", "expm"))
    p.add_argument("--s-grid", dest="s_grid", help="comma separated counting fields")
    p.add_argument("--k", type=int, help="number of eigenvalues")
    p.add_argument("--t-star", dest="t_star", type=float)
    p.add_argument("--S-list", dest="S_list")
    p.add_argument("--dt-list", dest="dt_list")
    p.add_argument("--stationary", action="store_true", default=None)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<kind>-<hash>)")
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("kind", "config")}
    if args.kind != "run":
        flags["kind"] = args.kind
    elif args.config is None:
        raise ConfigError("'run' needs --config")
    if flags.get("superpose") is not None:
        parts = flags["superpose"].split(",")
        if len(parts) != 2:
            raise ConfigError("--superpose takes S1,S2")
        flags["superpose"] = parts
    if flags.get("schedule") is not None:
        flags["schedule"] = parse_schedule_flag(flags["schedule"])
    for key in ("s_grid", "S_list", "dt_list"):
        if flags.get(key) is not None:
            flags[key] = _floats(flags[key])
    return parse_config(args.config, flags)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        out = run(cfg)
    except SpinCountError as exc:
        print(f"spincount: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
