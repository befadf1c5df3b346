"""IMEX solver for ``u_t = Lap u + f(u)/eps + eps^gamma dW/dt``.

Each step applies the reaction over ``dt`` (classical RK4 in the fast
variable), adds the noise increment, then solves ``(I - dt Lap_h) u = rhs``
with a sparse LU factorisation computed once per run.  Boxes use Neumann
conditions through ghost nodes; the 1-D truncated line clamps ``u(+-L)``
to ``+-1``.  All state arrays may carry leading batch axes, which lets one
factorisation serve many Monte Carlo paths.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import splu

from .errors import (BlowUpError, ConfigurationError, InitialConditionError,
                     StepSizeError)
from .noise import MollifiedPath, NoisePath
from .reaction import ReactionFunction

BLOWUP_LEVEL = 10.0


@dataclass(frozen=True)
class FieldGrid:
    """Tensor lattice on ``[lower, upper]^d`` with ``n`` nodes per axis."""

    dim: int = 1
    lower: float = -10.0
    upper: float = 10.0
    n: int = 2048
    boundary: str = "farfield_pm1"

    def __post_init__(self):
        if self.boundary not in ("neumann", "farfield_pm1"):
            raise ConfigurationError(f"unknown boundary {self.boundary!r}")
        if self.boundary == "farfield_pm1" and self.dim != 1:
            raise ConfigurationError("far-field +-1 boundary is one-dimensional")
        if self.n < 3:
            raise ConfigurationError("need at least 3 nodes per axis")

    @property
    def h(self) -> float:
        return (self.upper - self.lower) / (self.n - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.n)

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n ** self.dim

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*([self.axis] * self.dim), indexing="ij")

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)`` in row-major order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=1)

    def distance_to_boundary(self) -> np.ndarray:
        d = [np.minimum(m - self.lower, self.upper - m) for m in self.mesh()]
        return np.min(np.stack(d), axis=0)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "lower": self.lower, "upper": self.upper,
                "n": self.n, "boundary": self.boundary}

    @classmethod
    def from_config(cls, cfg: dict) -> "FieldGrid":
        dim = int(cfg.get("dim", 1))
        default = (-10.0, 10.0, 2048, "farfield_pm1") if dim == 1 else (-2.0, 2.0, 256, "neumann")
        return cls(dim, float(cfg.get("lower", default[0])), float(cfg.get("upper", default[1])),
                   int(cfg.get("n", default[2])), cfg.get("boundary", default[3]))


def laplacian_1d(n: int, h: float, boundary: str) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    up = np.ones(n - 1)
    lo = np.ones(n - 1)
    if boundary == "neumann":
        up[0] = 2.0
        lo[-1] = 2.0
    else:
        main[[0, -1]] = 0.0
        up[0] = 0.0
        lo[-1] = 0.0
    return sp.diags([lo, main, up], [-1, 0, 1], format="csr") / h ** 2


def laplacian(grid: FieldGrid) -> sp.csr_matrix:
    L1 = laplacian_1d(grid.n, grid.h, grid.boundary)
    eye = sp.identity(grid.n, format="csr")
    total = sp.csr_matrix((grid.size, grid.size))
    for a in range(grid.dim):
        mats = [L1 if b == a else eye for b in range(grid.dim)]
        term = mats[0]
        for m in mats[1:]:
            term = sp.kron(term, m, format="csr")
        total = total + term
    return total.tocsr()


def discrete_laplacian(grid: FieldGrid, u: np.ndarray) -> np.ndarray:
    """``Lap_h u`` with the grid's boundary rows (clamped rows give 0)."""
    flat = u.reshape(u.shape[:-grid.dim] + (-1,)) if grid.dim > 1 else u
    out = (laplacian(grid) @ flat.reshape(-1, grid.size).T).T
    return out.reshape(u.shape)


@dataclass
class FieldState:
    grid: FieldGrid
    u: np.ndarray
    t: float = 0.0
    eps: float = 0.05
    gamma: float = 1.0
    step_count: int = 0


@dataclass
class FieldTrajectory:
    """Checkpointed solution; ``u`` has shape ``(n_ck,) + batch + grid.shape``."""

    grid: FieldGrid
    times: np.ndarray
    u: np.ndarray
    eps: float
    gamma: float
    dt: float
    step_times: np.ndarray
    max_abs: np.ndarray
    blowup_time: np.ndarray | float = math.inf
    final: FieldState | None = None
    variant: str = "raw"

    def write_ndjson(self, fh, index=None) -> None:
        """One ``{t, u}`` record per checkpoint (1-D grids)."""
        if self.grid.dim != 1:
            raise ConfigurationError("NDJSON checkpoints are for 1-D grids; use write_binary")
        for k, t in enumerate(self.times):
            u = self.u[k] if index is None else self.u[k][index]
            fh.write(json.dumps({"t": float(t), "u": np.asarray(u).tolist()}) + "\n")

    def write_binary(self, path) -> None:
        """Row-major float64 payload preceded by a one-line JSON header."""
        header = {"grid": self.grid.to_dict(), "times": self.times.tolist(),
                  "shape": list(self.u.shape), "dtype": "float64", "order": "C",
                  "eps": self.eps, "gamma": self.gamma}
        with open(path, "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode())
            fh.write(np.ascontiguousarray(self.u, dtype="<f8").tobytes())


def read_binary(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(header["shape"])
    return header, data


def read_ndjson(fh):
    recs = [json.loads(line) for line in fh if line.strip()]
    return np.array([r["t"] for r in recs]), np.array([r["u"] for r in recs])


class _Stepper:
    def __init__(self, grid: FieldGrid, dt: float):
        self.grid = grid
        self.dt = dt
        M = sp.identity(grid.size, format="csc") - dt * laplacian(grid).tocsc()
        if grid.boundary == "farfield_pm1":
            M = M.tolil()
            for i in (0, grid.size - 1):
                M[i, :] = 0.0
                M[i, i] = 1.0
            M = M.tocsc()
        self.lu = splu(M.tocsc())

    def diffuse(self, u: np.ndarray) -> np.ndarray:
        lead = u.shape[:u.ndim - self.grid.dim]
        rhs = u.reshape(-1, self.grid.size).T.copy()
        if self.grid.boundary == "farfield_pm1":
            rhs[0] = -1.0
            rhs[-1] = 1.0
        out = self.lu.solve(rhs)
        return out.T.reshape(lead + self.grid.shape)


def _react(f: ReactionFunction, u, h):
    k1 = f.f(u)
    k2 = f.f(u + 0.5 * h * k1)
    k3 = f.f(u + 0.5 * h * k2)
    k4 = f.f(u + h * k3)
    return u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


class NoiseIncrements:
    """Adapter turning a path (raw or mollified) into per-solver-step increments."""

    def __init__(self, noise, grid: FieldGrid, dt: float, t0: float, n_steps: int):
        self.grid = grid
        if isinstance(noise, MollifiedPath):
            times = noise.time_grid
            W = noise.values_grid
        elif isinstance(noise, NoisePath):
            times = noise.time_grid
            W = noise.values()
        else:
            raise ConfigurationError(f"unsupported noise object {type(noise).__name__}")
        pts = noise.space_grid
        if pts.shape[0] != grid.size or not np.allclose(pts, grid.points(), atol=1e-12):
            raise ConfigurationError("noise space grid must coincide with the solver nodes")
        dtn = np.diff(times)
        if not np.allclose(dtn, dtn[0], rtol=1e-9):
            raise ConfigurationError("noise time grid must be uniform")
        ratio = dt / dtn[0]
        r = int(round(ratio))
        if r < 1 or abs(ratio - r) > 1e-6 * ratio:
            raise ConfigurationError(
                f"noise step {dtn[0]:g} does not refine the solver step {dt:g} by an integer factor")
        i0 = int(round((t0 - times[0]) / dtn[0]))
        if abs(times[0] + i0 * dtn[0] - t0) > 1e-9 * max(1.0, abs(t0)) or i0 < 0:
            raise ConfigurationError("noise time grid is not aligned with the solver start time")
        if i0 + n_steps * r > len(times) - 1:
            raise ConfigurationError("noise path does not cover the integration horizon")
        idx = i0 + r * np.arange(n_steps + 1)
        self.inc = np.diff(W[..., idx, :], axis=-2)

    def __call__(self, n: int) -> np.ndarray:
        inc = self.inc[..., n, :]
        return inc.reshape(inc.shape[:-1] + self.grid.shape)


def evolve(state: FieldState, f: ReactionFunction, noise, t_end: float, dt: float,
           checkpoint_times=None, observer: Callable | None = None,
           raise_on_blowup: bool = True, blowup_level: float = BLOWUP_LEVEL,
           variant: str = "raw") -> FieldTrajectory:
    """Advance ``state`` to ``t_end``.

    ``noise`` is ``None``, a :class:`NoisePath` / :class:`MollifiedPath`
    sampled on the solver nodes with a time step dividing ``dt``, or a
    callable ``noise(n) -> increment`` (used for streamed Monte Carlo
    sampling).  ``observer(n, t, u)`` is called after every step.  With
    ``raise_on_blowup=False`` blown-up batch entries are frozen and their
    blow-up time is recorded.
    """
    eps, gamma, grid = state.eps, state.gamma, state.grid
    if dt * f.c_f / eps > 0.2 * (1 + 1e-12):
        raise StepSizeError(f"dt * c_f / eps = {dt * f.c_f / eps:g} exceeds 0.2")
    n_steps = int(round((t_end - state.t) / dt))
    if n_steps < 0 or abs(state.t + n_steps * dt - t_end) > 1e-9 * max(1.0, abs(t_end)):
        raise ConfigurationError("t_end - t must be a multiple of dt")
    if noise is None or callable(noise) and not isinstance(noise, (NoisePath, MollifiedPath)):
        draw = noise
    else:
        draw = NoiseIncrements(noise, grid, dt, state.t, n_steps)
    ck = np.array(sorted(set(checkpoint_times))) if checkpoint_times is not None else np.array([t_end])
    ck_steps = np.rint((ck - state.t) / dt).astype(int)
    if np.any(ck_steps < 0) or np.any(ck_steps > n_steps):
        raise ConfigurationError("checkpoint outside integration window")
    stepper = _Stepper(grid, dt)
    u = np.array(state.u, dtype=float)
    batch = u.shape[:u.ndim - grid.dim]
    axes = tuple(range(len(batch), u.ndim))
    amp = eps ** gamma
    hfast = dt / eps
    snaps = []
    max_abs = np.empty((n_steps + 1,) + batch)
    max_abs[0] = np.max(np.abs(u), axis=axes)
    blown = np.zeros(batch, dtype=bool)
    blow_t = np.full(batch, math.inf)
    ck_iter = iter(range(len(ck_steps)))
    next_ck = next(ck_iter, None)
    while next_ck is not None and ck_steps[next_ck] == 0:
        snaps.append(u.copy())
        next_ck = next(ck_iter, None)
    t0 = state.t
    for n in range(n_steps):
        v = _react(f, u, hfast)
        if draw is not None:
            v = v + amp * draw(n)
        v = stepper.diffuse(v)
        m = np.max(np.abs(v), axis=axes)
        bad = ~np.isfinite(m) | (m > blowup_level)
        if np.any(bad):
            t_hit = t0 + (n + 1) * dt
            if raise_on_blowup:
                raise BlowUpError(f"|u| reached {float(np.max(m)):.4g} at t={t_hit:.6g} (step {n + 1})",
                                  t=t_hit, step=n + 1, max_abs=float(np.nanmax(m)))
            new = bad & ~blown
            blow_t = np.where(new, t_hit, blow_t)
            blown |= bad
            mask = blown.reshape(batch + (1,) * grid.dim)
            v = np.where(mask, u, v)
            m = np.where(blown, max_abs[n], m)
        u = v
        max_abs[n + 1] = m
        if observer is not None:
            observer(n + 1, t0 + (n + 1) * dt, u)
        while next_ck is not None and ck_steps[next_ck] == n + 1:
            snaps.append(u.copy())
            next_ck = next(ck_iter, None)
    final = FieldState(grid, u, t0 + n_steps * dt, eps, gamma, state.step_count + n_steps)
    return FieldTrajectory(grid, t0 + ck_steps * dt, np.stack(snaps), eps, gamma, dt,
                           t0 + dt * np.arange(n_steps + 1), max_abs,
                           blow_t if batch else float(blow_t), final, variant)


# ---------------------------------------------------------------------------
# initial data


@dataclass
class InitialProfile:
    grid: FieldGrid
    u0: np.ndarray
    u0_plus: np.ndarray
    u0_minus: np.ndarray
    zero: float | None
    norms: dict
    c0_bound: float
    tails: dict = field(default_factory=dict)
    closed_form: Callable | None = None
    spec: dict | None = None

    def state(self, eps: float, gamma: float, which: str = "u0") -> FieldState:
        return FieldState(self.grid, np.array(getattr(self, which)), 0.0, eps, gamma)


def _profile_function(spec: dict, dim: int):
    kind = spec.get("kind", "tanh")
    shift = float(spec.get("shift", 0.0))
    scale = float(spec.get("scale", 1.0))
    if kind == "tanh":
        return lambda x: np.tanh(scale * (x[0] - shift))
    if kind == "ramp":
        return lambda x: np.clip(scale * (x[0] - shift), -1.0, 1.0)
    if kind == "sin":
        return lambda x: np.sin(scale * (x[0] - shift))
    if kind == "constant":
        c = float(spec.get("value", 0.5))
        return lambda x: np.full(np.shape(x[0]), c)
    if kind == "cosine":
        amp = float(spec.get("amplitude", 1.0 / dim))
        k = float(spec.get("k", 0.5))
        return lambda x: amp * sum(np.cos(k * np.pi * xi) for xi in x)
    raise ConfigurationError(f"unknown initial profile {kind!r}")


def _derivative_norms(grid: FieldGrid, u: np.ndarray) -> dict:
    h = grid.h
    d1 = 0.0
    d2 = 0.0
    for a in range(grid.dim):
        g = np.gradient(u, h, axis=a, edge_order=2)
        d1 = max(d1, float(np.max(np.abs(g))))
        gg = np.gradient(g, h, axis=a, edge_order=2)
        d2 = max(d2, float(np.max(np.abs(gg))))
    return {"sup_u": float(np.max(np.abs(u))), "sup_du": d1, "sup_d2u": d2}


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10 - 15 * s + 6 * s * s)


def neumann_envelopes(grid: FieldGrid, u0: np.ndarray, d1: float | None = None,
                      tol: float | None = None):
    """``u0-`` and ``u0+`` that meet the Neumann condition and equal ``u0`` away from the boundary.

    Within distance ``d1`` (default ``4h``) of the boundary ``u0`` is blended
    toward its max (resp. min) with a weight whose normal derivative
    vanishes at the boundary.  Profiles whose one-sided normal derivative is
    below ``tol`` (default ``h * sup|u0''|``, the truncation level) are kept.
    """
    if grid.boundary != "neumann":
        return u0.copy(), u0.copy()
    if tol is None:
        tol = grid.h * _derivative_norms(grid, u0)["sup_d2u"] + 1e-12
    normal = 0.0
    for a in range(grid.dim):
        g = np.gradient(u0, grid.h, axis=a, edge_order=2)
        first = np.take(g, 0, axis=a)
        last = np.take(g, -1, axis=a)
        normal = max(normal, float(np.max(np.abs(first))), float(np.max(np.abs(last))))
    if normal <= tol:
        return u0.copy(), u0.copy()
    d1 = 4 * grid.h if d1 is None else d1
    dist = grid.distance_to_boundary()
    chi = 1.0 - _smoothstep(dist / d1)
    strip = dist <= d1
    top, bot = float(np.max(u0[strip])), float(np.min(u0[strip]))
    return u0 + chi * (bot - u0), u0 + chi * (top - u0)


def build_initial(spec: dict, grid: FieldGrid | None = None, c0_bound: float = 1.5,
                  support: float = 1.0) -> InitialProfile:
    """Build and validate an initial profile.

    ``spec`` is ``{"kind": tanh|ramp|sin|constant|cosine, ...}`` or
    ``{"values": [...]}``.  Checks the sum bound
    ``|u0| + |u0'| + |u0''| <= C0`` with lattice derivatives and, in 1-D on
    the line, a unique sign change inside ``[-support, support]``.
    """
    spec = dict(spec)
    grid = grid or FieldGrid.from_config(spec.get("grid", {}))
    fn = None
    if "values" in spec:
        u0 = np.asarray(spec["values"], dtype=float).reshape(grid.shape)
    else:
        fn = _profile_function(spec, grid.dim)
        u0 = np.asarray(fn(grid.mesh()), dtype=float)
    if not np.all(np.isfinite(u0)):
        raise InitialConditionError("initial profile has non-finite values")
    norms = _derivative_norms(grid, u0)
    total = norms["sup_u"] + norms["sup_du"] + norms["sup_d2u"]
    norms["sum"] = total
    if total > c0_bound:
        raise InitialConditionError(
            "sup|u0| + sup|u0'| + sup|u0''| = "
            f"{norms['sup_u']:.4g} + {norms['sup_du']:.4g} + {norms['sup_d2u']:.4g} = {total:.4g} "
            f"exceeds C0 = {c0_bound}")
    zero = None
    tails = {}
    if grid.dim == 1 and grid.boundary == "farfield_pm1":
        x = grid.axis
        inside = np.abs(x) <= support + 1e-12
        xs, us = x[inside], u0[inside]
        sgn = np.sign(us)
        changes = np.nonzero(sgn[:-1] * sgn[1:] < 0)[0]
        exact = np.nonzero(us == 0.0)[0]
        n_zero = len(changes) + len(exact)
        if n_zero != 1:
            raise InitialConditionError(f"expected one sign change in [-{support}, {support}], found {n_zero}")
        if exact.size:
            zero = float(xs[exact[0]])
        else:
            i = changes[0]
            if fn is not None:
                zero = brentq(lambda s: float(fn([np.array(s)])), xs[i], xs[i + 1], xtol=1e-13)
            else:
                zero = float(xs[i] - us[i] * (xs[i + 1] - xs[i]) / (us[i + 1] - us[i]))
        outside = np.abs(x) > support
        if np.any(np.sign(u0[outside]) != np.sign(x[outside])):
            raise InitialConditionError("initial profile changes sign outside the support window")
        tails = {"right": np.abs(u0 - 1.0) * (x >= support), "left": np.abs(u0 + 1.0) * (x <= -support)}
    lo, hi = neumann_envelopes(grid, u0, spec.get("d1"))
    return InitialProfile(grid, u0, hi, lo, zero, norms, c0_bound, tails, fn, spec)


# ---------------------------------------------------------------------------
# monitors


def first_exceedance(step_times, max_abs, level):
    """First time ``max|u| > level`` per batch entry, ``inf`` if never."""
    hit = max_abs > level
    any_hit = hit.any(axis=0)
    idx = np.argmax(hit, axis=0)
    out = np.where(any_hit, step_times[idx], np.inf)
    return float(out) if np.ndim(out) == 0 else out


def boundedness_monitor(trajectory: FieldTrajectory, c0_bound: float,
                        mollified: FieldTrajectory | None = None) -> dict:
    """First-hit times of ``|u| > 2 C0`` for the raw (``tau1``) and mollified (``tau5``) runs."""
    def hit(tr):
        # a blown-up entry is frozen, so its blow-up time counts as the hit
        t = np.minimum(first_exceedance(tr.step_times, tr.max_abs, 2 * c0_bound), tr.blowup_time)
        return float(t) if np.ndim(t) == 0 else t

    out = {"tau1": hit(trajectory)}
    if mollified is not None:
        out["tau5"] = hit(mollified)
    return out


def mollified_vs_raw_gap(raw: FieldTrajectory, moll: FieldTrajectory) -> np.ndarray:
    """Sup-norm gap per checkpoint (and batch entry)."""
    if raw.grid != moll.grid or raw.dt != moll.dt or raw.u.shape != moll.u.shape \
            or not np.allclose(raw.times, moll.times):
        raise ConfigurationError("raw and mollified runs use different discretisations")
    axes = tuple(range(raw.u.ndim - raw.grid.dim, raw.u.ndim))
    return np.max(np.abs(raw.u - moll.u), axis=axes)
