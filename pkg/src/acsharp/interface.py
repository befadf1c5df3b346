"""Interface objects: standing wave, super/sub solutions, generation predicate, tracking.

Super/sub solutions are scalar flows started from shifted initial data,

    w+-(t, x) = Y^eps(t/eps, u0+-(x) +- eps h(x) (e^(mu t/eps) - 1), x),

driven by the same noise realisation as the field.  ``h`` is a constant
``C2`` on boxes and ``c_h sech(x - xi0)`` on the line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate as sint

from .errors import (ConfigurationError, HorizonError, InterfaceLostError,
                     NonConvergenceError, StepSizeError)
from .field_solver import FieldGrid, FieldState, FieldTrajectory, InitialProfile
from .noise import CovarianceKernel, NoisePath
from .reaction import ReactionFunction
from .scalar_dynamics import integrate

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# standing wave


@dataclass
class StandingWave:
    profile: Callable
    derivative: Callable
    second_derivative: Callable
    closed_form_tag: str | None = None
    initial_slope: float = float("nan")

    def __call__(self, x):
        return self.profile(x)

    def residual(self, f: ReactionFunction, lattice=None) -> float:
        """``sup |m'' + f(m)|`` on the lattice (default ``[-20, 20]``)."""
        x = np.linspace(-20, 20, 4001) if lattice is None else np.asarray(lattice)
        return float(np.max(np.abs(self.second_derivative(x) + f.f(self.profile(x)))))

    def rescaled(self, eps: float, shift: float = 0.0) -> Callable:
        """``x -> m((x - shift) / sqrt(eps))``."""
        s = math.sqrt(eps)
        return lambda x: self.profile((np.asarray(x, dtype=float) - shift) / s)


def _is_cubic(f: ReactionFunction) -> bool:
    return f.coefficients is not None and tuple(f.coefficients) == (1.0, -1.0)


def _potential(f: ReactionFunction):
    """``F(m) = int_m^1 f``, written as ``int_0^(1-m) f(1-w) dw`` to avoid cancellation."""
    def F(m):
        val, _ = sint.quad(lambda w: float(f.f(np.array(1.0 - w))), 0.0, 1.0 - m,
                           epsabs=1e-15, epsrel=1e-13, limit=200)
        return max(val, 0.0)
    return F


def _shoot(f, s, x_end=20.0):
    """Integrate ``m'' = -f(m)`` from ``(0, s)``; +1 overshoot, -1 turn back, 0 undecided."""
    def rhs(_, y):
        return [y[1], -float(f.f(np.array(y[0])))]

    def over(_, y):
        return y[0] - 1.0
    over.terminal = True

    def back(_, y):
        return y[1]
    back.terminal = True
    back.direction = -1
    sol = sint.solve_ivp(rhs, (0, x_end), [0.0, s], events=[over, back],
                         rtol=1e-12, atol=1e-14)
    if sol.t_events[0].size:
        return 1
    if sol.t_events[1].size:
        return -1
    return 0


def standing_wave(f: ReactionFunction, lattice=None) -> StandingWave:
    """Monotone solution of ``m'' + f(m) = 0``, ``m(0) = 0``, ``m(+-inf) = +-1``.

    The cubic gets ``tanh(x / sqrt 2)``.  Otherwise the initial slope is
    bracketed by shooting, then the profile is integrated from the first
    integral ``m' = sqrt(2 F(m))`` and extended by oddness.
    """
    if _is_cubic(f):
        def m(x):
            return np.tanh(np.asarray(x, dtype=float) / SQRT2)

        def dm(x):
            return 1.0 / (SQRT2 * np.cosh(np.asarray(x, dtype=float) / SQRT2) ** 2)

        def d2m(x):
            t = np.tanh(np.asarray(x, dtype=float) / SQRT2)
            return -t * (1 - t * t)
        return StandingWave(m, dm, d2m, "tanh", 1.0 / SQRT2)

    F = _potential(f)
    s_star = math.sqrt(2.0 * F(0.0))
    lo, hi = 0.5 * s_star, 1.5 * s_star
    if not (_shoot(f, lo) == -1 and _shoot(f, hi) == 1):
        raise NonConvergenceError("shooting failed to bracket the initial slope")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        side = _shoot(f, mid)
        if side == 1:
            hi = mid
        elif side == -1:
            lo = mid
        else:
            break
    if abs(0.5 * (lo + hi) - s_star) > 1e-6 * s_star:
        raise NonConvergenceError(f"shooting slope {0.5 * (lo + hi):.10g} disagrees with {s_star:.10g}")

    x_max = 25.0 if lattice is None else max(25.0, float(np.max(np.abs(lattice))) + 1)
    sol = sint.solve_ivp(lambda _, y: [math.sqrt(2.0 * F(min(y[0], 1.0)))], (0.0, x_max), [0.0],
                         dense_output=True, rtol=1e-13, atol=1e-15, method="DOP853")
    dense = sol.sol

    def m(x):
        x = np.asarray(x, dtype=float)
        ax = np.clip(np.abs(x), 0, x_max)
        return np.sign(x) * np.minimum(dense(ax.ravel())[0].reshape(ax.shape), 1.0)

    def dm(x):
        mm = np.abs(np.atleast_1d(m(x)))
        vals = np.array([math.sqrt(2.0 * F(v)) for v in mm.ravel()]).reshape(mm.shape)
        return vals.reshape(np.shape(x))

    def d2m(x, h=2e-3):
        # Richardson-extrapolated central differences of m'
        x = np.asarray(x, dtype=float)
        coarse = (dm(x + h) - dm(x - h)) / (2 * h)
        fine = (dm(x + h / 2) - dm(x - h / 2)) / h
        return (4 * fine - coarse) / 3

    return StandingWave(m, dm, d2m, None, s_star)


# ---------------------------------------------------------------------------
# super / sub solutions


@dataclass
class SuperSubPair:
    times: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    h: np.ndarray | float
    kind: str
    eps: float
    gamma: float
    horizon: float
    c5: float
    bracket_min: float
    c_scale: float
    grid: FieldGrid | None = None

    @property
    def c2(self):
        return self.c_scale


def _shift_profile(grid: FieldGrid, zero: float | None, kind: str):
    if kind == "dD_constant_C2":
        return np.ones(grid.shape), np.zeros(grid.shape), np.zeros(grid.shape)
    x = grid.axis
    s = 1.0 / np.cosh(x - zero)
    t = np.tanh(x - zero)
    return s, -s * t, s * (t * t - (1 - t * t))


def _norm_terms(grid: FieldGrid, u):
    """``|grad u|`` and ``|Lap u|`` by central differences (one-sided at the ends)."""
    g2 = np.zeros_like(u)
    lap = np.zeros_like(u)
    for a in range(grid.dim):
        g = np.gradient(u, grid.h, axis=a, edge_order=2)
        g2 += g * g
        lap += np.gradient(g, grid.h, axis=a, edge_order=2)
    return np.sqrt(g2), np.abs(lap)


def bracket(f: ReactionFunction, initial: InitialProfile, h, dh, d2h, c5: float,
            eps: float, kappa: float, horizon: float, kind: str):
    """Lower bound of the super-solution residual factor at the horizon.

    Boxes: ``mu C2 - C5 G^2 - L - 2 G eps^kappa`` with sup-norm constants
    ``G, L`` of the envelopes.  Line: the same expression pointwise with
    ``G = |u0'| + eps E |h'|`` and ``L = |u0''| + eps E |h''|``.
    """
    E = math.expm1(f.mu * horizon / eps)
    grid = initial.grid
    terms = [_norm_terms(grid, initial.u0_plus), _norm_terms(grid, initial.u0_minus)]
    if kind == "dD_constant_C2":
        G = max(float(t[0].max()) for t in terms)
        L = max(float(t[1].max()) for t in terms)
        return float(f.mu * h.max() - c5 * G * G - L - 2 * G * eps ** kappa)
    G = np.maximum(terms[0][0], terms[1][0]) + eps * E * np.abs(dh)
    L = np.maximum(terms[0][1], terms[1][1]) + eps * E * np.abs(d2h)
    return float(np.min(f.mu * h - c5 * G * G - L - 2 * G * eps ** kappa))


def _pair_flows(f, initial, eps, gamma, h, c, times, noise, dt_scalar):
    """Evaluate ``w+-`` at ``times``; returns (plus, minus, fitted C5)."""
    mu = f.mu
    grid = initial.grid
    taus = np.asarray(times) / eps
    n_ck = len(taus)
    shift = eps * c * h[None] * np.expm1(mu * taus).reshape((-1,) + (1,) * grid.dim)
    if noise is not None:
        t = noise.time_grid
        if t[0] != 0.0:
            raise ConfigurationError("noise path must start at t = 0")
        tau_grid = t / eps
        W = noise.values()
        n_end = int(np.searchsorted(t, times[-1] * (1 + 1e-12) + 1e-15, side="right"))
        tau_grid = tau_grid[:n_end]
        inc = np.diff(W[..., :n_end, :], axis=-2)
        inc = np.moveaxis(inc, -2, 0) * eps ** gamma
        batch = W.shape[:-2]
        inc = inc.reshape((inc.shape[0],) + batch + grid.shape)
        forcing = inc[:, None]
    else:
        n = int(round(taus[-1] / dt_scalar))
        tau_grid = dt_scalar * np.arange(n + 1)
        forcing = None
        batch = ()
    if (np.diff(tau_grid).max() if len(tau_grid) > 1 else 0.0) * f.c_f > 0.1 * (1 + 1e-9):
        raise StepSizeError("scalar flow step for the super/sub pair violates step * c_f <= 0.1")
    idx = np.searchsorted(tau_grid, taus - 1e-9 * np.maximum(1.0, taus))
    if np.any(idx >= len(tau_grid)) or not np.allclose(tau_grid[np.minimum(idx, len(tau_grid) - 1)], taus,
                                                        rtol=1e-9, atol=1e-12):
        raise ConfigurationError("checkpoint times are not on the scalar flow grid")
    ck_shape = (n_ck,) + (1,) * len(batch) + grid.shape
    results = {}
    c5 = [0.0]
    for sign, base in ((1.0, initial.u0_plus), (-1.0, initial.u0_minus)):
        y0 = (base[None] + sign * shift).reshape(ck_shape)
        y0 = np.broadcast_to(y0, (n_ck,) + batch + grid.shape).copy()
        out = np.empty_like(y0)
        tau_lim = taus.reshape((-1,) + (1,) * (y0.ndim - 1))

        def obs(n, tau, y, yx, a, z, out=out):
            hit = np.nonzero(idx == n)[0]
            for k in hit:
                out[k] = y[k]
            if tau > 0:
                active = tau <= tau_lim + 1e-12
                ratio = np.abs(a) / math.expm1(mu * tau)
                c5[0] = max(c5[0], float(np.max(np.where(active, ratio, 0.0))))
        integrate(f, y0, tau_grid, forcing, None, False, obs, "mask")
        results[sign] = out
    return results[1.0], results[-1.0], c5[0]


def build_supersub(f: ReactionFunction, kernel: CovarianceKernel | None, initial: InitialProfile,
                   eps: float, gamma: float, c2_or_h="auto", horizon: float | None = None, *,
                   checkpoint_times, noise: NoisePath | None = None, dt: float | None = None,
                   kappa: float = 1.01, max_doublings: int = 24) -> SuperSubPair:
    """Construct ``w+-`` at the checkpoint times.

    ``c2_or_h`` is a positive scale (``C2`` on boxes, ``c_h`` on the line)
    or ``"auto"``: the smallest value in ``{1, 2, 4, ...}`` whose bracket
    is positive with ``C5`` fitted on the visited trajectories.  With
    ``noise`` the scalar flows use the path's own time grid and increments,
    otherwise a deterministic grid refining ``dt``.
    """
    grid = initial.grid
    kind = "oneD_function_h" if grid.boundary == "farfield_pm1" else "dD_constant_C2"
    times = np.asarray(sorted(checkpoint_times), dtype=float)
    horizon = float(times[-1]) if horizon is None else float(horizon)
    if times[-1] > horizon * (1 + 1e-12):
        raise ConfigurationError("checkpoints extend beyond the comparison horizon")
    h, dh, d2h = _shift_profile(grid, initial.zero, kind)
    band = 2 * f.c0_bound
    top = max(float(np.max(initial.u0_plus)), -float(np.min(initial.u0_minus)))
    dt_scalar = None
    if noise is None:
        if dt is None:
            raise ConfigurationError("deterministic pairs need the solver dt")
        m = max(1, int(math.ceil((dt / eps) * f.c_f / 0.05)))
        dt_scalar = dt / eps / m

    def horizon_check(c):
        reach = eps * c * float(np.max(h)) * math.expm1(f.mu * horizon / eps)
        if top + reach > band:
            t_hit = eps / f.mu * math.log1p((band - top) / (eps * c * float(np.max(h))))
            raise HorizonError(
                f"shifted argument leaves [-{band:g}, {band:g}] at t={t_hit:.6g} < horizon {horizon:.6g}",
                t=t_hit)

    def attempt(c, probe):
        horizon_check(c)
        out = _pair_flows(f, initial, eps, gamma, h, c, times, probe, dt_scalar)
        return out + (bracket(f, initial, c * h, c * dh, c * d2h, out[2], eps, kappa, horizon, kind),)

    if c2_or_h != "auto":
        c = float(c2_or_h)
        plus, minus, c5, br = attempt(c, noise)
    else:
        # scan scales on a single path, then confirm on the full batch
        probe = noise.path(0) if noise is not None and noise.batched else noise
        c = 1.0
        for _ in range(max_doublings):
            plus, minus, c5, br = attempt(c, probe)
            if br > 0 and probe is not noise:
                plus, minus, c5, br = attempt(c, noise)
            if br > 0:
                break
            c *= 2.0
        else:
            raise HorizonError("no admissible scale for the super/sub pair", t=horizon)
    return SuperSubPair(times, plus, minus, c * h if kind != "dD_constant_C2" else c,
                        kind, eps, gamma, horizon, c5, br, c, grid)


@dataclass
class SandwichReport:
    times: np.ndarray
    below: np.ndarray
    above: np.ndarray
    ordered: np.ndarray
    tol: float

    @property
    def passed(self) -> np.ndarray:
        """Per batch entry: both violations within ``tol`` at every checkpoint."""
        ok = (self.below <= self.tol) & (self.above <= self.tol)
        return np.all(ok, axis=0)

    @property
    def pass_fraction(self) -> float:
        return float(np.mean(self.passed))


def check_sandwich(trajectory: FieldTrajectory, pair: SuperSubPair, tol: float = 1e-3) -> SandwichReport:
    """``max(minus - u)`` and ``max(u - plus)`` per checkpoint."""
    if trajectory.u.shape != pair.plus.shape or not np.allclose(trajectory.times, pair.times):
        raise ConfigurationError("field checkpoints do not match the super/sub pair")
    if trajectory.times[-1] > pair.horizon * (1 + 1e-12):
        raise ConfigurationError("field checkpoints extend past the comparison horizon")
    axes = tuple(range(trajectory.u.ndim - trajectory.grid.dim, trajectory.u.ndim))
    below = np.max(pair.minus - trajectory.u, axis=axes)
    above = np.max(trajectory.u - pair.plus, axis=axes)
    ordered = np.min(pair.plus - pair.minus, axis=axes) >= -1e-12
    return SandwichReport(trajectory.times, below, above, ordered, tol)


# ---------------------------------------------------------------------------
# generation predicate and zero tracking


@dataclass
class InterfaceRecord:
    t: float
    xi: float | None
    l2_dist: float | None
    gen_flags: tuple = ()
    kappa: float | None = None
    beta: float | None = None

    @property
    def generated(self) -> bool:
        return all(f for f in self.gen_flags if f is not None)

    CSV_HEADER = "t,xi,l2_dist,flag_i,flag_ii,flag_iii,flag_iv,flag_v"

    def csv_row(self) -> str:
        flags = list(self.gen_flags) + [None] * (5 - len(self.gen_flags))
        cells = [repr(float(self.t)),
                 "" if self.xi is None else repr(float(self.xi)),
                 "" if self.l2_dist is None else repr(float(self.l2_dist))]
        cells += ["" if fl is None else str(int(bool(fl))) for fl in flags]
        return ",".join(cells)


def tail_certificates(initial: InitialProfile, eps: float, kappa: float, beta: float,
                      h=None, support: float = 1.0) -> dict:
    """``g1, g2`` dominating the tails: ``eps^-kappa (|u0 -+ 1| + h (eps^beta - eps))``."""
    x = initial.grid.axis
    h = np.zeros_like(x) if h is None else np.broadcast_to(h, x.shape)
    extra = h * max(eps ** beta - eps, 0.0)
    g1 = eps ** (-kappa) * (np.abs(initial.u0 - 1.0) + extra)
    g2 = eps ** (-kappa) * (np.abs(initial.u0 + 1.0) + extra)
    return {"g1": np.where(x >= support, g1, 0.0), "g2": np.where(x <= -support, g2, 0.0)}


def generation_check(state: FieldState, initial: InitialProfile, kappa: float, beta: float,
                     g_bars: dict | None = None, C: float = 1.0, tol_factor: float = 1.0,
                     support: float = 1.0) -> InterfaceRecord:
    """Evaluate the generation predicate on the lattice.

    (i) ``|u| <= 1 + tol``; (ii) ``u >= 1 - tol`` where ``u0 >= C eps^beta``;
    (iii) ``u <= -1 + tol`` where ``u0 <= -C eps^beta``; on the line also
    (iv)/(v) ``|u -+ 1| <= tol * g`` beyond ``+-support``.  ``tol`` is
    ``tol_factor * eps^kappa``.  Boxes evaluate (i)-(iii) on the whole box.
    """
    eps = state.eps
    u = np.asarray(state.u)
    tol = tol_factor * eps ** kappa
    thr = C * eps ** beta
    grid = state.grid
    u0 = initial.u0
    if grid.boundary == "farfield_pm1":
        if g_bars is None or "g1" not in g_bars or "g2" not in g_bars:
            raise ConfigurationError("generation check on the line needs tail certificates g1, g2")
        x = grid.axis
        inside = np.abs(x) <= support
    else:
        inside = np.ones(grid.shape, dtype=bool)
    f1 = bool(np.all(np.abs(u[inside]) <= 1 + tol))
    pos = inside & (u0 >= thr)
    neg = inside & (u0 <= -thr)
    f2 = bool(np.all(u[pos] >= 1 - tol))
    f3 = bool(np.all(u[neg] <= -1 + tol))
    flags = [f1, f2, f3]
    xi = l2 = None
    if grid.boundary == "farfield_pm1":
        right = x >= support
        left = x <= -support
        f4 = bool(np.all(np.abs(u[right] - 1) <= tol * np.asarray(g_bars["g1"])[right] + 1e-14))
        f5 = bool(np.all(np.abs(u[left] + 1) <= tol * np.asarray(g_bars["g2"])[left] + 1e-14))
        flags += [f4, f5]
        zs = zero_crossings(x, u)
        if zs.size:
            xi = float(zs[np.argmin(np.abs(zs - (initial.zero or 0.0)))])
            l2 = l2_distance(x, u, xi)
    else:
        flags += [None, None]
    return InterfaceRecord(state.t, xi, l2, tuple(flags), kappa, beta)


def zero_crossings(x, u) -> np.ndarray:
    """Zeros of the piecewise-linear interpolant (exact lattice zeros included)."""
    x = np.asarray(x)
    u = np.asarray(u)
    exact = x[u == 0.0]
    s = np.sign(u)
    i = np.nonzero(s[:-1] * s[1:] < 0)[0]
    lin = x[i] - u[i] * (x[i + 1] - x[i]) / (u[i + 1] - u[i])
    return np.sort(np.concatenate([exact, lin]))


def l2_distance(x, u, xi) -> float:
    """``|| u - chi_xi ||_L2`` by the trapezoid rule, ``chi_xi = sign(x - xi)``."""
    chi = np.sign(np.asarray(x) - xi)
    return float(np.sqrt(np.trapezoid((np.asarray(u) - chi) ** 2, x)))


def track_zero(trajectory, previous_xi: float, x=None, times=None) -> list[InterfaceRecord]:
    """Zero nearest to the previous one at each checkpoint, plus the L2 distance to the step."""
    if isinstance(trajectory, FieldTrajectory):
        x = trajectory.grid.axis
        times = trajectory.times
        us = trajectory.u
    else:
        us = np.asarray(trajectory)
        times = np.arange(len(us), dtype=float) if times is None else np.asarray(times)
    out = []
    prev = previous_xi
    for t, u in zip(times, us):
        zs = zero_crossings(x, u)
        if zs.size == 0:
            raise InterfaceLostError(f"no sign change at t={t:.6g}", t=float(t))
        xi = float(zs[np.argmin(np.abs(zs - prev))])
        out.append(InterfaceRecord(float(t), xi, l2_distance(x, u, xi)))
        prev = xi
    return out


class ZeroTracker:
    """Per-step observer that follows the zero nearest the previous one for a batch of paths."""

    def __init__(self, x, xi0, every: int = 1):
        self.x = np.asarray(x)
        self.every = every
        self.xi = np.atleast_1d(np.asarray(xi0, dtype=float)).copy()
        self.lost_at = np.full(self.xi.shape, np.inf)
        self.max_jump = np.zeros(self.xi.shape)
        self.times = []
        self.history = []

    def __call__(self, n, t, u):
        if n % self.every:
            return
        u2 = np.atleast_2d(u)
        for i, row in enumerate(u2):
            if np.isfinite(self.lost_at[i]):
                continue
            zs = zero_crossings(self.x, row)
            if zs.size == 0:
                self.lost_at[i] = t
                continue
            new = zs[np.argmin(np.abs(zs - self.xi[i]))]
            self.max_jump[i] = max(self.max_jump[i], abs(new - self.xi[i]))
            self.xi[i] = new
        self.times.append(t)
        self.history.append(self.xi.copy())


# ---------------------------------------------------------------------------
# limit SDE


@dataclass
class LimitPath:
    times: np.ndarray
    xi: np.ndarray
    absorbed: np.ndarray

    def to_csv(self, fh) -> None:
        xi = self.xi if self.xi.ndim == 2 else self.xi[:, None]
        fh.write(",".join(["t"] + [f"xi_{i}" for i in range(xi.shape[1])]) + "\n")
        for t, row in zip(self.times, xi):
            fh.write(",".join([repr(float(t))] + [repr(float(v)) for v in row]) + "\n")


def limit_sde(a: Callable, a_prime: Callable, alpha1: float, alpha2: float, xi0,
              t_end: float, dt: float, seed=None, n_paths: int | None = None,
              support: float = 1.0) -> LimitPath:
    """Euler-Maruyama for ``d xi = alpha1 a(xi) dB + alpha2 a(xi) a'(xi) dt``."""
    n = int(round(t_end / dt))
    if n < 1 or abs(n * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ConfigurationError("t_end must be a positive multiple of dt")
    rng = np.random.default_rng(seed)
    shape = () if n_paths is None else (n_paths,)
    xi = np.full(shape, float(xi0)) if np.ndim(xi0) == 0 else np.array(xi0, dtype=float)
    out = np.empty((n + 1,) + xi.shape)
    out[0] = xi
    absorbed = np.abs(xi) > support
    sq = math.sqrt(dt)
    for k in range(n):
        dB = rng.standard_normal(xi.shape) * sq if alpha1 != 0 else 0.0
        av = a(xi)
        xi = xi + alpha2 * av * a_prime(xi) * dt + alpha1 * av * dB
        absorbed |= np.abs(xi) > support
        out[k + 1] = xi
    return LimitPath(dt * np.arange(n + 1), out, absorbed)
