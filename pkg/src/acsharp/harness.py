"""Experiment orchestration: configs, seeds, monitors, Monte Carlo sweeps and reports.

Every experiment is a pure function of its config and root seed.  Per-path
seeds come from ``SeedSequence([root_seed, counter])``; the NDJSON records
and CSV/``.dat`` files are byte-reproducible, and wall-clock data lives only
in ``report.json``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import interface as itf
from .errors import (AcsharpError, ConfigurationError, LogDomainError,
                     ParameterError, PreconditionError)
from .field_solver import FieldGrid, boundedness_monitor, build_initial, evolve
from .noise import NoiseStream, build_kernel, sample_path
from .reaction import reaction_from_config
from .scalar_dynamics import fast_time_grid, flow_sde, generation_interval, integrate, xi_lattice

EXPERIMENTS = ("sample-noise", "evolve", "sweep-generation", "compare-sandwich",
               "track-interface", "limit-law", "scalar-deviation")
GENERATION_KINDS = ("sweep-generation",)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    experiment: str
    eps_list: list = field(default_factory=lambda: [0.02])
    gamma: float = 1.0
    kappa: float = 1.01
    alpha: float = 0.51
    c1: float = 0.7
    paths: int = 1
    root_seed: int = 0
    reaction: object = "cubic"
    kernel: dict = field(default_factory=lambda: {"kind": "bump_pair"})
    grid: dict = field(default_factory=dict)
    initial: dict = field(default_factory=lambda: {"kind": "tanh"})
    solver: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    output: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in data:
            raise ConfigurationError("config must name an experiment")
        cfg = cls(**data)
        cfg.eps_list = [float(e) for e in np.atleast_1d(cfg.eps_list)]
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.paths < 1:
            raise ConfigurationError("paths must be >= 1")
        if any(e <= 0 or e >= 1 for e in self.eps_list):
            raise ConfigurationError("eps values must lie in (0, 1)")
        if self.experiment in GENERATION_KINDS:
            f = reaction_from_config(self.reaction)
            lo, hi = generation_interval(f, self.alpha, self.kappa)
            if not lo < self.c1 < hi:
                raise ParameterError(f"c1={self.c1} outside the admissible interval ({lo:.6g}, {hi:.6g})")
        if self.experiment == "compare-sandwich":
            f = reaction_from_config(self.reaction)
            if not 0 < self.c1 < 1 / f.mu:
                raise ParameterError(f"c1 must lie in (0, 1/mu) = (0, {1 / f.mu:g})")


def path_seed(root_seed: int, counter: int) -> int:
    """Per-path seed derived from ``(root_seed, counter)``."""
    return int(np.random.SeedSequence([int(root_seed), int(counter)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# monitors and statistics


INF = math.inf


@dataclass
class MonitorState:
    """First-hit times; ``tau1, tau5`` in slow time, the others in fast time."""

    c0_bound: float
    eps: float
    kappa: float
    delta_prime: float = 0.5
    beta: float = 0.5
    tau1: float = INF
    tau2: float = INF
    tau3: float = INF
    tau5: float = INF
    tau7: float = INF

    @property
    def tau4(self) -> float:
        return min(self.tau2, self.tau3)

    @property
    def tau6(self) -> float:
        return min(self.tau1, self.tau5)

    def as_dict(self) -> dict:
        keys = ("tau1", "tau2", "tau3", "tau4", "tau5", "tau6", "tau7")
        return {k: _finite_or_none(getattr(self, k)) for k in keys}


def _finite_or_none(v):
    return float(v) if np.isfinite(v) else None


def monitor_step(state: MonitorState, observables: dict) -> MonitorState:
    """Record first threshold crossings; later crossings are ignored.

    Recognised observables: ``t``/``tau`` (clocks), ``u_sup`` (tau1),
    ``y_dev`` (tau2), ``y_moll_sup`` (tau3), ``u_moll_sup`` (tau5) and
    ``noise_norm`` (tau7).
    """
    t = observables.get("t", INF)
    tau = observables.get("tau", t / state.eps if np.isfinite(t) else INF)
    checks = (
        ("tau1", "u_sup", 2 * state.c0_bound, t),
        ("tau2", "y_dev", state.eps ** state.kappa, tau),
        ("tau3", "y_moll_sup", 2 * state.c0_bound + state.delta_prime, tau),
        ("tau5", "u_moll_sup", 2 * state.c0_bound, t),
        ("tau7", "noise_norm", state.eps ** (-state.beta), tau),
    )
    for name, key, level, clock in checks:
        if key in observables and not np.isfinite(getattr(state, name)) and observables[key] > level:
            setattr(state, name, float(clock))
    return state


def noise_sobolev_norm(W: np.ndarray, h: float, dim: int = 1) -> float:
    """Discrete Sobolev surrogate: H^3 on a 1-D lattice, H^2 plus mixed differences in 2-D."""
    W = np.asarray(W, dtype=float)
    total = h ** dim * np.sum(W ** 2)
    if dim == 1:
        d = W
        for _ in range(3):
            d = np.diff(d) / h
            total += h * np.sum(d ** 2)
    else:
        for a in range(dim):
            d1 = np.diff(W, axis=a) / h
            total += h ** dim * np.sum(d1 ** 2)
            total += h ** dim * np.sum((np.diff(d1, axis=a) / h) ** 2)
        if dim >= 2:
            mixed = np.diff(np.diff(W, axis=0), axis=1) / h ** 2
            total += h ** dim * np.sum(mixed ** 2)
    return float(math.sqrt(total))


def scaling_regression(series) -> tuple[float, float, float]:
    """Least-squares fit ``log stat = slope * log eps + intercept``; returns (slope, intercept, r2)."""
    data = np.asarray(list(series), dtype=float)
    if data.ndim != 2 or data.shape[0] < 3:
        raise PreconditionError("need at least three (eps, statistic) pairs")
    eps, stat = data[:, 0], data[:, 1]
    if np.any(eps <= 0) or np.any(stat <= 0):
        raise LogDomainError("eps values and statistics must be positive for a log-log fit")
    if eps.max() / eps.min() < 4 - 1e-12:
        raise PreconditionError("eps values must span at least a factor 4")
    x, y = np.log(eps), np.log(stat)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return float(slope), float(intercept), r2


def nondecreasing(values, slack: float = 0.0) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) >= -slack))


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    experiment: str
    config_hash: str
    root_seed: int
    results: dict = field(default_factory=dict)
    pass_fractions: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    monitors: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def summary(self) -> dict:
        return {"experiment": self.experiment, "config_hash": self.config_hash,
                "root_seed": self.root_seed, "results": _jsonable(self.results),
                "pass_fractions": _jsonable(self.pass_fractions),
                "slopes": _jsonable(self.slopes), "failures": _jsonable(self.failures),
                "n_monitors": len(self.monitors), "seeds": _jsonable(self.seeds),
                "wall_clock_s": self.wall_clock,
                "created": time.strftime("%Y-%m-%dT%H:%M:%S%z")}

    def ndjson(self) -> str:
        return "".join(json.dumps(_jsonable(r), sort_keys=True) + "\n" for r in self.records)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_outputs(report: RunReport, out_dir, dump: dict | None = None) -> Path:
    """Write ``records.ndjson``, ``monitors.ndjson``, CSV/``.dat`` tables, artifacts and ``report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.ndjson").write_text(report.ndjson())
    if report.monitors:
        (out / "monitors.ndjson").write_text(
            "".join(json.dumps(_jsonable(m), sort_keys=True) + "\n" for m in report.monitors))
    for name, (header, rows) in report.tables.items():
        lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
        (out / f"{name}.csv").write_text("\n".join(lines) + "\n")
        if len(header) >= 2:
            dat = ["# " + " ".join(header[:2])] + [f"{_fmt(r[0])} {_fmt(r[1])}" for r in rows]
            (out / f"{name}.dat").write_text("\n".join(dat) + "\n")
    for name, text in report.artifacts.items():
        mode = "wb" if isinstance(text, bytes) else "w"
        with open(out / name, mode) as fh:
            fh.write(text)
    for name, text in (dump or {}).items():
        (out / name).write_text(text)
    with open(out / "report.json", "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return repr(float(v))


# ---------------------------------------------------------------------------
# experiment helpers


def _setup(cfg: ExperimentConfig):
    f = reaction_from_config(cfg.reaction)
    kernel = build_kernel({**cfg.kernel, "dim": cfg.grid.get("dim", cfg.kernel.get("dim", 1))})
    return f, kernel


def _solver_dt(cfg, f, eps):
    """Solver step: ``dt_factor * eps`` capped by the reaction budget ``0.2 eps / c_f``."""
    factor = float(cfg.solver.get("dt_factor", 0.02))
    return min(factor * eps, 0.2 * eps / f.c_f)


def _horizon_grid(H, dt):
    n = max(1, int(math.ceil(H / dt - 1e-9)))
    return n, H / n


def _batch_state(initial, eps, gamma, n_paths, which="u0"):
    st = initial.state(eps, gamma, which)
    st.u = np.broadcast_to(st.u, (n_paths,) + initial.grid.shape).copy()
    return st


def _record_monitors(report, f, eps, cfg, tau1=None, tau2=None, beta=0.5):
    n = len(tau1 if tau1 is not None else tau2)
    for p in range(n):
        st = MonitorState(f.c0_bound, eps, cfg.kappa, beta=beta)
        if tau1 is not None:
            st.tau1 = float(tau1[p])
        if tau2 is not None:
            st.tau2 = float(tau2[p])
        report.monitors.append({"eps": eps, "path": p, **st.as_dict()})


def _seeds(cfg, offset, n):
    return [path_seed(cfg.root_seed, offset + i) for i in range(n)]


# ---------------------------------------------------------------------------
# experiments


def _sample_noise(cfg, report):
    f, kernel = _setup(cfg)
    o = cfg.options
    t_end = float(o.get("t_end", 1.0))
    n_t = int(o.get("n_steps", 100))
    R = kernel.support_radius
    n_x = int(o.get("n_x", 21))
    if kernel.dim == 1:
        space = np.linspace(-R, R, n_x)
    else:
        ax = np.linspace(-R, R, n_x)
        space = np.stack([m.ravel() for m in np.meshgrid(*([ax] * kernel.dim), indexing="ij")], axis=1)
    times = np.linspace(0.0, t_end, n_t + 1)
    seeds = _seeds(cfg, 0, cfg.paths)
    report.seeds["paths"] = seeds
    path = sample_path(kernel, times, space, seeds, n_paths=cfg.paths)
    W = path.values()
    probes = o.get("probes")
    if not probes:
        # random grid pairs, reproducible from the root seed
        prng = np.random.default_rng(path_seed(cfg.root_seed, 999_999))
        n_pts = space.shape[0]
        probes = [[int(prng.integers(1, n_t + 1)), int(prng.integers(n_pts)),
                   int(prng.integers(1, n_t + 1)), int(prng.integers(n_pts))]
                  for _ in range(int(o.get("n_probes", 5)))]
    rows = []
    for (i, a, j, b) in probes:
        prod = W[:, i, a] * W[:, j, b]
        emp = float(np.mean(prod))
        theo = min(times[i], times[j]) * float(kernel.q(space[a:a + 1], space[b:b + 1])[0, 0])
        se = float(np.std(prod, ddof=1) / math.sqrt(cfg.paths)) if cfg.paths > 1 else None
        rows.append([times[i], times[j], a, b, emp, theo, se])
    report.tables["covariance"] = (["t", "s", "x_index", "y_index", "empirical", "theory", "stderr"], rows)
    if cfg.paths > 1:
        ok = [abs(r[4] - r[5]) <= 5 * r[6] for r in rows]
        report.results["covariance_within_5se"] = all(ok)
        report.pass_fractions["covariance"] = float(np.mean(ok))
    for p in range(min(cfg.paths, int(o.get("export_paths", cfg.paths)))):
        report.artifacts[f"noise_path_{p:04d}.ndjson"] = path.path(p).to_ndjson()
    for p in range(cfg.paths):
        report.records.append({"path": p, "seed": seeds[p], "w_final_sup": float(np.max(np.abs(W[p, -1])))})


def _evolve(cfg, report, dump):
    f, kernel = _setup(cfg)
    grid = FieldGrid.from_config(cfg.grid)
    initial = build_initial(cfg.initial, grid, f.c0_bound)
    n_ck = int(cfg.solver.get("checkpoints", 5))
    for k, eps in enumerate(cfg.eps_list):
        t_end = float(cfg.options.get("t_end", cfg.c1 * eps * abs(math.log(eps))))
        n, dt = _horizon_grid(t_end, _solver_dt(cfg, f, eps))
        seeds = _seeds(cfg, 1000 * k, cfg.paths)
        report.seeds[f"eps={eps}"] = seeds
        stream = NoiseStream(kernel, grid.points(), dt, seeds, cfg.paths, grid.shape) \
            if cfg.options.get("noise", True) else None
        ck = dt * np.unique(np.rint(np.linspace(0, n, n_ck)))
        tr = evolve(_batch_state(initial, eps, cfg.gamma, cfg.paths), f, stream, n * dt, dt,
                    checkpoint_times=ck, raise_on_blowup=False)
        mon = boundedness_monitor(tr, f.c0_bound)
        _record_monitors(report, f, eps, cfg, tau1=np.atleast_1d(mon["tau1"]))
        for p in range(cfg.paths):
            rec = {"eps": eps, "path": p, "seed": seeds[p], "tau1": _finite_or_none(mon["tau1"][p]),
                   "blowup_time": _finite_or_none(tr.blowup_time[p]),
                   "max_abs": float(tr.max_abs[:, p].max())}
            report.records.append(rec)
            if np.isfinite(tr.blowup_time[p]):
                report.failures.append({"eps": eps, "path": p, "error": "BlowUpError",
                                        "t": float(tr.blowup_time[p])})
            if dump is not None:
                if grid.dim == 1:
                    buf = io.StringIO()
                    tr.write_ndjson(buf, index=p)
                    dump[f"checkpoints_eps{eps}_path{p:04d}.ndjson"] = buf.getvalue()
        if dump is not None and grid.dim > 1:
            import tempfile
            with tempfile.NamedTemporaryFile(suffix=".bin", delete=False) as tmp:
                tr.write_binary(tmp.name)
                report.artifacts[f"checkpoints_eps{eps}.bin"] = Path(tmp.name).read_bytes()
        report.pass_fractions[f"bounded@eps={eps}"] = float(np.mean(~np.isfinite(mon["tau1"])))


def _sweep_generation(cfg, report):
    f, kernel = _setup(cfg)
    grid = FieldGrid.from_config(cfg.grid)
    initial = build_initial(cfg.initial, grid, f.c0_bound)
    beta = 1 - cfg.c1 * f.mu
    tol_factor = float(cfg.options.get("tol_factor", 1.5))
    noisy = bool(cfg.options.get("noise", True))
    chunk = int(cfg.options.get("chunk", cfg.paths))
    rows = []
    fractions = []
    for k, eps in enumerate(cfg.eps_list):
        H = cfg.c1 * eps * abs(math.log(eps))
        n, dt = _horizon_grid(H, _solver_dt(cfg, f, eps))
        n_paths = cfg.paths if noisy else 1
        seeds = _seeds(cfg, 10_000 * (k + 1), n_paths)
        report.seeds[f"eps={eps}"] = seeds
        g_bars = itf.tail_certificates(initial, eps, cfg.kappa, beta) if grid.dim == 1 else None
        passed = 0
        for start in range(0, n_paths, chunk):
            idx = list(range(start, min(n_paths, start + chunk)))
            stream = NoiseStream(kernel, grid.points(), dt, [seeds[i] for i in idx], len(idx),
                                 grid.shape) if noisy else None
            try:
                tr = evolve(_batch_state(initial, eps, cfg.gamma, len(idx)), f, stream, n * dt, dt,
                            raise_on_blowup=False)
            except AcsharpError as exc:
                for i in idx:
                    report.failures.append({"eps": eps, "path": i, "error": type(exc).__name__,
                                            "message": str(exc)})
                continue
            mon = boundedness_monitor(tr, f.c0_bound)
            for j, i in enumerate(idx):
                st = MonitorState(f.c0_bound, eps, cfg.kappa, beta=beta, tau1=float(np.atleast_1d(mon["tau1"])[j]))
                report.monitors.append({"eps": eps, "path": i, **st.as_dict()})
                st = tr.final
                one = type(st)(grid, st.u[j], st.t, eps, cfg.gamma, st.step_count)
                if np.isfinite(tr.blowup_time[j]):
                    report.failures.append({"eps": eps, "path": i, "error": "BlowUpError",
                                            "t": float(tr.blowup_time[j])})
                    ok, flags = False, None
                else:
                    rec = itf.generation_check(one, initial, cfg.kappa, beta, g_bars, tol_factor=tol_factor)
                    ok, flags = rec.generated, list(rec.gen_flags)
                passed += int(ok)
                report.records.append({"eps": eps, "path": i, "seed": seeds[i], "generated": ok,
                                       "flags": flags, "tau1": _finite_or_none(mon["tau1"][j]),
                                       "max_abs": float(tr.max_abs[:, j].max())})
        frac = passed / n_paths
        fractions.append(frac)
        rows.append([eps, frac, n_paths, H])
        report.pass_fractions[f"generated@eps={eps}"] = frac
    report.tables["generation"] = (["eps", "pass_fraction", "paths", "t_gen"], rows)
    order = np.argsort(-np.asarray(cfg.eps_list))
    report.results["nondecreasing_as_eps_decreases"] = nondecreasing(np.asarray(fractions)[order])
    report.results["beta"] = beta


def _compare_sandwich(cfg, report):
    f, kernel = _setup(cfg)
    grid = FieldGrid.from_config(cfg.grid)
    initial = build_initial(cfg.initial, grid, f.c0_bound)
    tol = float(cfg.options.get("tol", 1e-3))
    n_ck = int(cfg.solver.get("checkpoints", 11))
    rows = []
    for k, eps in enumerate(cfg.eps_list):
        H = cfg.c1 * eps * abs(math.log(eps))
        n, dt = _horizon_grid(H, _solver_dt(cfg, f, eps))
        H = n * dt
        ck = dt * np.unique(np.rint(np.linspace(0, n, n_ck)))
        # deterministic reference
        tr0 = evolve(initial.state(eps, cfg.gamma), f, None, H, dt, checkpoint_times=ck)
        pair0 = itf.build_supersub(f, kernel, initial, eps, cfg.gamma, cfg.options.get("scale", "auto"),
                                   H, checkpoint_times=ck, dt=dt, kappa=cfg.kappa)
        rep0 = itf.check_sandwich(tr0, pair0, tol)
        report.pass_fractions[f"deterministic@eps={eps}"] = float(rep0.passed)
        seeds = _seeds(cfg, 20_000 * (k + 1), cfg.paths)
        report.seeds[f"eps={eps}"] = seeds
        path = sample_path(kernel, dt * np.arange(n + 1), grid.points(), seeds, n_paths=cfg.paths)
        tr = evolve(_batch_state(initial, eps, cfg.gamma, cfg.paths), f, path, H, dt,
                    checkpoint_times=ck, raise_on_blowup=False)
        pair = itf.build_supersub(f, kernel, initial, eps, cfg.gamma, cfg.options.get("scale", "auto"),
                                  H, checkpoint_times=ck, noise=path, kappa=cfg.kappa)
        rep = itf.check_sandwich(tr, pair, tol)
        mon = boundedness_monitor(tr, f.c0_bound)
        _record_monitors(report, f, eps, cfg, tau1=np.atleast_1d(mon["tau1"]))
        for p in range(cfg.paths):
            report.records.append({"eps": eps, "path": p, "seed": seeds[p], "passed": bool(rep.passed[p]),
                                   "below": float(rep.below[:, p].max()), "above": float(rep.above[:, p].max()),
                                   "tau1": _finite_or_none(mon["tau1"][p])})
        report.pass_fractions[f"noisy@eps={eps}"] = rep.pass_fraction
        report.results[f"scale@eps={eps}"] = {"deterministic": pair0.c_scale, "noisy": pair.c_scale,
                                               "c5": pair.c5, "ordered": bool(rep.ordered.all())}
        rows.append([eps, rep.pass_fraction, float(rep0.passed), pair.c_scale])
    report.tables["sandwich"] = (["eps", "noisy_pass_fraction", "deterministic_pass", "scale"], rows)


def _generate_then_track(cfg, f, kernel, grid, initial, eps, seeds, T_small):
    """Generation phase at the fine step, then the long phase at ``dt_long``; returns tracker data."""
    n_paths = len(seeds)
    H = cfg.c1 * eps * abs(math.log(eps))
    n, dt = _horizon_grid(H, _solver_dt(cfg, f, eps))
    stream = NoiseStream(kernel, grid.points(), dt, seeds, n_paths, grid.shape)
    tr = evolve(_batch_state(initial, eps, cfg.gamma, n_paths), f, stream, n * dt, dt,
                raise_on_blowup=False)
    state = tr.final
    dt_long = float(cfg.options.get("dt_long_factor", 10.0)) * eps ** 2
    dt_long = min(dt_long, 0.2 * eps / f.c_f)
    horizon = eps ** (-2 * cfg.gamma - 1) * T_small
    m, dt_long = _horizon_grid(horizon, dt_long)
    zs = [itf.zero_crossings(grid.axis, u) for u in state.u]
    xi_gen = np.array([z[np.argmin(np.abs(z - initial.zero))] if z.size else np.nan for z in zs])
    tracker = itf.ZeroTracker(grid.axis, np.nan_to_num(xi_gen, nan=initial.zero),
                              every=int(cfg.options.get("track_every", 50)))
    tracker.lost_at[np.isnan(xi_gen)] = state.t
    long_seeds = [path_seed(s, 1) for s in seeds]
    stream2 = NoiseStream(kernel, grid.points(), dt_long, long_seeds, n_paths, grid.shape)
    state.t = 0.0
    tr2 = evolve(state, f, stream2, m * dt_long, dt_long, observer=tracker, raise_on_blowup=False,
                 checkpoint_times=[m * dt_long])
    blow = np.maximum(np.isfinite(tr.blowup_time), np.isfinite(tr2.blowup_time))
    return {"xi_gen": xi_gen, "xi_final": tracker.xi.copy(), "lost_at": tracker.lost_at,
            "blown": blow, "horizon": m * dt_long, "dt_long": dt_long, "max_jump": tracker.max_jump,
            "times": np.array(tracker.times), "history": np.array(tracker.history), "final": tr2}


def _kernel_profile(kernel):
    """``a`` and ``a'`` of a separable kernel (needed by the limit SDE)."""
    if kernel.modes is None or len(kernel.modes) != 1 or kernel.dim != 1:
        raise ConfigurationError("the interface law needs a separable one-dimensional kernel a(x) a(y)")
    scale = math.sqrt(kernel.amplitude * kernel.modes[0].weight)
    fac = kernel.modes[0].factors[0]
    return (lambda x: scale * fac(np.asarray(x, dtype=float), 0),
            lambda x: scale * fac(np.asarray(x, dtype=float), 1))


def _track_interface(cfg, report, dump):
    f, kernel = _setup(cfg)
    grid = FieldGrid.from_config(cfg.grid)
    initial = build_initial(cfg.initial, grid, f.c0_bound)
    T_small = float(cfg.options.get("T_small", 0.01))
    for k, eps in enumerate(cfg.eps_list):
        seeds = _seeds(cfg, 30_000 * (k + 1), cfg.paths)
        report.seeds[f"eps={eps}"] = seeds
        data = _generate_then_track(cfg, f, kernel, grid, initial, eps, seeds, T_small)
        for p in range(cfg.paths):
            report.records.append({"eps": eps, "path": p, "seed": seeds[p],
                                   "xi_generated": _finite_or_none(data["xi_gen"][p]),
                                   "xi_final": _finite_or_none(data["xi_final"][p]),
                                   "lost_at": _finite_or_none(data["lost_at"][p]),
                                   "max_jump": float(data["max_jump"][p])})
            if np.isfinite(data["lost_at"][p]):
                report.failures.append({"eps": eps, "path": p, "error": "InterfaceLostError",
                                        "t": float(data["lost_at"][p])})
        rows = [[t, *h] for t, h in zip(data["times"], data["history"])]
        report.tables[f"interface_eps{eps}"] = (["t"] + [f"xi_{p}" for p in range(cfg.paths)], rows)
        if dump is not None:
            x = grid.axis
            lines = [itf.InterfaceRecord.CSV_HEADER]
            for p in range(cfg.paths):
                u = data["final"].final.u[p]
                zs = itf.zero_crossings(x, u)
                if zs.size:
                    xi = float(zs[np.argmin(np.abs(zs - data["xi_final"][p]))])
                    lines.append(itf.InterfaceRecord(data["horizon"], xi, itf.l2_distance(x, u, xi)).csv_row())
            dump[f"interface_records_eps{eps}.csv"] = "\n".join(lines) + "\n"
        ok = ~np.isfinite(data["lost_at"]) & ~data["blown"]
        report.pass_fractions[f"tracked@eps={eps}"] = float(np.mean(ok))


def _moments(x):
    x = np.asarray(x, dtype=float)
    n = x.size
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    m4 = float(np.mean((x - mean) ** 4))
    var_se = math.sqrt(max(m4 - var ** 2 * (n - 3) / (n - 1), 0.0) / n)
    return mean, var, math.sqrt(var / n), var_se


def _limit_law(cfg, report):
    """Calibrate (alpha1, alpha2) on one batch, then compare a fresh batch with the limit SDE."""
    f, kernel = _setup(cfg)
    grid = FieldGrid.from_config(cfg.grid)
    initial = build_initial(cfg.initial, grid, f.c0_bound)
    a, a_prime = _kernel_profile(kernel)
    T_small = float(cfg.options.get("T_small", 0.01))
    eps = cfg.eps_list[0]
    n_cal = int(cfg.options.get("calibration_paths", cfg.paths))
    cal_seeds = _seeds(cfg, 50_000, n_cal)
    test_seeds = _seeds(cfg, 60_000, cfg.paths)
    report.seeds["calibration"] = cal_seeds
    report.seeds["test"] = test_seeds
    cal = _generate_then_track(cfg, f, kernel, grid, initial, eps, cal_seeds, T_small)
    test = _generate_then_track(cfg, f, kernel, grid, initial, eps, test_seeds, T_small)

    def increments(d):
        ok = ~np.isfinite(d["lost_at"]) & ~d["blown"]
        return (d["xi_final"] - d["xi_gen"])[ok], ok

    cal_inc, cal_ok = increments(cal)
    xi0 = float(np.mean(cal["xi_gen"][cal_ok]))
    T = T_small
    a0, ap0 = float(a(xi0)), float(a_prime(xi0))
    m_c, v_c, _, _ = _moments(cal_inc)
    alpha1 = cfg.options.get("alpha1")
    alpha2 = cfg.options.get("alpha2")
    calibrated = alpha1 is None or alpha2 is None
    if alpha1 is None:
        alpha1 = math.sqrt(v_c / (a0 ** 2 * T))
    if alpha2 is None:
        alpha2 = m_c / (a0 * ap0 * T) if abs(a0 * ap0) > 1e-12 else 0.0
    test_inc, test_ok = increments(test)
    xi0_t = test["xi_gen"][test_ok]
    n_lim = int(cfg.options.get("limit_paths", 20_000))
    lim_dt = float(cfg.options.get("limit_dt", T / 200))
    rng_seed = path_seed(cfg.root_seed, 70_000)
    starts = np.random.default_rng(rng_seed).choice(xi0_t, size=n_lim, replace=True)
    lp = itf.limit_sde(a, a_prime, alpha1, alpha2, starts, T, lim_dt, seed=path_seed(cfg.root_seed, 70_001))
    lim_inc = lp.xi[-1] - lp.xi[0]
    mf, vf, mse_f, vse_f = _moments(test_inc)
    ml, vl, mse_l, vse_l = _moments(lim_inc)
    mean_se = math.hypot(mse_f, mse_l)
    var_se = math.hypot(vse_f, vse_l)
    mean_ok = abs(mf - ml) <= 3 * mean_se
    var_ok = abs(vf - vl) <= 3 * var_se
    report.results.update({
        "eps": eps, "gamma": cfg.gamma, "T_small": T, "horizon": test["horizon"], "dt_long": test["dt_long"],
        "alpha1": alpha1, "alpha2": alpha2, "calibrated": calibrated, "xi0": xi0,
        "field_mean": mf, "field_var": vf, "limit_mean": ml, "limit_var": vl,
        "mean_se": mean_se, "var_se": var_se, "mean_within_3se": mean_ok, "var_within_3se": var_ok,
        "valid_test_paths": int(test_ok.sum()), "valid_calibration_paths": int(cal_ok.sum())})
    report.pass_fractions["tracked_test"] = float(test_ok.mean())
    report.pass_fractions["law_match"] = float(mean_ok and var_ok)
    for p, s in enumerate(test_seeds):
        report.records.append({"path": p, "seed": s, "xi_generated": _finite_or_none(test["xi_gen"][p]),
                               "xi_final": _finite_or_none(test["xi_final"][p]),
                               "lost_at": _finite_or_none(test["lost_at"][p])})
    hist, edges = np.histogram(test_inc, bins=20)
    report.tables["increments_field"] = (["center", "count"],
                                         [[0.5 * (edges[i] + edges[i + 1]), int(hist[i])] for i in range(20)])
    if cfg.options.get("export_limit_paths", 0):
        buf = io.StringIO()
        k = int(cfg.options["export_limit_paths"])
        itf.LimitPath(lp.times, lp.xi[:, :k], lp.absorbed[:k]).to_csv(buf)
        report.artifacts["limit_sde.csv"] = buf.getvalue()


def _scalar_deviation(cfg, report, dump):
    """Monte Carlo of ``sup |Y^eps - Y|`` over the window and the second moment at ``T_eps``."""
    f, kernel = _setup(cfg)
    o = cfg.options
    n_x = int(o.get("n_x", 9))
    x = np.linspace(-kernel.support_radius, kernel.support_radius, n_x + 2)[1:-1]
    step = float(o.get("step", min(0.01, 0.1 / f.c_f)))
    chunk = int(o.get("chunk", 250))
    rows = []
    fracs = []
    moments = []
    for k, eps in enumerate(cfg.eps_list):
        T = abs(math.log(eps)) / f.mu
        xis = xi_lattice(eps, cfg.alpha, f.c0_bound, int(o.get("n_xi", 64)))
        tau = fast_time_grid(T, step)
        Yd = integrate(f, xis, tau)[0][:, :, None]
        seeds = _seeds(cfg, 40_000 * (k + 1), cfg.paths)
        report.seeds[f"eps={eps}"] = seeds
        sup_dev = np.empty(cfg.paths)
        m2 = np.empty(cfg.paths)
        tau2 = np.full(cfg.paths, np.inf)
        thr = eps ** cfg.kappa
        for start in range(0, cfg.paths, chunk):
            idx = slice(start, min(cfg.paths, start + chunk))
            sub = seeds[idx]
            acc = np.zeros((len(sub),))
            hit = np.full(len(sub), np.inf)

            def obs(n, tau, y, yx, a, z, acc=acc, hit=hit):
                d = np.abs(y - Yd[n][None]).reshape(len(sub), -1).max(axis=1)
                np.maximum(acc, d, out=acc)
                hit[(d > thr) & ~np.isfinite(hit)] = tau
            tr = flow_sde(f, kernel, xis, x, eps, cfg.gamma, T, step, seed=sub, n_paths=len(sub),
                          store=False, observer=obs, on_divergence="mask")
            sup_dev[idx] = np.where(tr.diverged.reshape(len(sub), -1).any(axis=1), np.inf, acc)
            tau2[idx] = hit
            m2[idx] = np.mean(((tr.final - Yd[-1][None]) ** 2).reshape(len(sub), -1), axis=1)
            if dump is not None and start == 0:
                one = flow_sde(f, kernel, float(xis[len(xis) // 2]), float(x[len(x) // 2]), eps, cfg.gamma,
                               T, step, seed=sub[0], with_z=True)
                buf = io.StringIO()
                one.to_csv(buf)
                dump[f"trajectory_eps{eps}_path0000.csv"] = buf.getvalue()
        _record_monitors(report, f, eps, cfg, tau2=tau2)
        frac = float(np.mean(sup_dev <= thr))
        moment = float(np.mean(m2))
        fracs.append(frac)
        moments.append(moment)
        rows.append([eps, frac, moment, float(np.median(sup_dev))])
        report.pass_fractions[f"within_eps_kappa@eps={eps}"] = frac
        for p in range(cfg.paths):
            report.records.append({"eps": eps, "path": p, "seed": seeds[p],
                                   "sup_dev": _finite_or_none(sup_dev[p]), "moment2": float(m2[p])})
            if not np.isfinite(sup_dev[p]):
                report.failures.append({"eps": eps, "path": p, "error": "DivergenceError"})
    report.tables["scalar_deviation"] = (["eps", "pass_fraction", "moment2", "median_sup_dev"], rows)
    order = np.argsort(-np.asarray(cfg.eps_list))
    report.results["nondecreasing_as_eps_decreases"] = nondecreasing(np.asarray(fracs)[order])
    predicted = 2 * cfg.gamma + 1 - 2 * f.c_f / f.mu
    report.results["predicted_moment_exponent"] = predicted
    if len(cfg.eps_list) >= 3:
        slope, intercept, r2 = scaling_regression(zip(cfg.eps_list, moments))
        report.slopes["moment2"] = {"slope": slope, "intercept": intercept, "r2": r2,
                                    "predicted": predicted, "ok": slope >= predicted - 0.3}


RUNNERS = {
    "sample-noise": lambda c, r, d: _sample_noise(c, r),
    "evolve": _evolve,
    "sweep-generation": lambda c, r, d: _sweep_generation(c, r),
    "compare-sandwich": lambda c, r, d: _compare_sandwich(c, r),
    "track-interface": _track_interface,
    "limit-law": lambda c, r, d: _limit_law(c, r),
    "scalar-deviation": _scalar_deviation,
}


def run_experiment(config: ExperimentConfig, out_dir=None, dump_trajectories: bool = False) -> RunReport:
    """Run the configured experiment; write outputs when ``out_dir`` (or ``config.output``) is set."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    start = time.perf_counter()
    report = RunReport(config.experiment, config.digest(), config.root_seed)
    dump = {} if dump_trajectories else None
    try:
        RUNNERS[config.experiment](config, report, dump)
    except AcsharpError as exc:
        report.failures.append({"error": type(exc).__name__, "message": str(exc), "scope": "experiment"})
    report.wall_clock = time.perf_counter() - start
    target = out_dir or config.output
    if target is not None:
        write_outputs(report, target, dump)
    return report


def scan_gamma(config: ExperimentConfig, gammas, threshold: float = 0.95):
    """Smallest tested ``gamma`` whose pass fractions all exceed ``threshold``.

    When the experiment reports a monotonicity flag
    (``nondecreasing_as_eps_decreases``) that must hold as well.

    Returns ``(gamma_or_None, {gamma: RunReport})``; the scan stops at the
    first success.  This reports a tested value, not the true threshold.
    """
    reports = {}
    for g in sorted(float(x) for x in gammas):
        cfg = ExperimentConfig.from_dict({**config.to_dict(), "gamma": g, "output": None})
        rep = run_experiment(cfg)
        reports[g] = rep
        fr = list(rep.pass_fractions.values())
        monotone = rep.results.get("nondecreasing_as_eps_decreases", True)
        if fr and min(fr) >= threshold and monotone \
                and not any(f.get("scope") == "experiment" for f in rep.failures):
            return g, reports
    return None, reports
