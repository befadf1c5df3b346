"""Scalar flows in fast time: the bistable ODE, its noisy and mollified variants.

All three variants share one integrator: an RK4 step for the drift
``f(Y)`` followed by the exact integral of the additive forcing over the
step.  With zero forcing this is plain RK4, so noisy runs collapse onto the
deterministic trajectory when the noise vanishes.  Along the way

    log Y_xi = int f'(Y) ds,      A = Y_xixi / Y_xi = int Y_xi f''(Y) ds

are accumulated by the trapezoid rule, and optional spatial derivatives
``Z`` solve ``dZ = f'(Y) Z ds + forcing``.

Arrays are broadcast: ``xi`` and ``x`` may be scalars or 1-D lattices and
a batch of noise paths adds a leading path axis.  Trajectory arrays have
shape ``(n_tau,) + batch_shape``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (CapabilityError, ConfigurationError, DivergenceError,
                     ParameterError, PreconditionError, ResolutionError,
                     StepSizeError)
from .noise import CovarianceKernel, MollifiedPath, NoisePath, as_points, sample_derivative_path, sample_path
from .reaction import ReactionFunction


@dataclass
class ScalarTrajectory:
    tau_grid: np.ndarray
    xi: np.ndarray
    x: np.ndarray | None
    values: np.ndarray | None
    y_xi: np.ndarray | None
    a_ratio: np.ndarray | None
    z: dict | None = None
    variant: str = "deterministic"
    diverged: np.ndarray | None = None
    final: np.ndarray | None = None

    @property
    def batch_shape(self):
        return self.final.shape if self.final is not None else self.values.shape[1:]

    def to_csv(self, fh, index=None) -> None:
        """Write ``tau,Y,Y_xi,A[,Z_i...]`` rows for one batch entry."""
        index = () if index is None else tuple(np.atleast_1d(index))
        zkeys = sorted(self.z) if self.z else []
        fh.write(",".join(["tau", "Y", "Y_xi", "A"] + [f"Z_{k}" for k in zkeys]) + "\n")
        for n, tau in enumerate(self.tau_grid):
            row = [tau, self.values[(n,) + index], self.y_xi[(n,) + index],
                   self.a_ratio[(n,) + index]]
            row += [self.z[k][(n,) + index] for k in zkeys]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def stiffness_cap(f: ReactionFunction) -> float:
    """``1 / max |f'|`` over the band; RK4 is stable well inside this."""
    u = np.linspace(-f.band, f.band, 4001)
    return 1.0 / float(np.max(np.abs(f.df(u))))


def default_step(f: ReactionFunction) -> float:
    return min(1e-3, 0.05 / f.c_f, stiffness_cap(f))


def fast_time_grid(tau_end: float, step: float) -> np.ndarray:
    n = max(1, int(math.ceil(tau_end / step - 1e-9)))
    return np.linspace(0.0, n * step, n + 1)


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(f: ReactionFunction, y0, tau_grid, forcing=None, z_forcing=None,
              store: bool = True, observer: Callable | None = None,
              on_divergence: str = "raise", guard: float | None = None):
    """Core splitting integrator.

    ``forcing`` has shape ``(n_steps,) + S`` (broadcastable against ``y0``);
    ``z_forcing`` maps a direction to such an array.  ``observer(n, tau, Y,
    Y_xi, A, Z)`` is called at every grid time, which lets Monte Carlo code
    reduce on the fly with ``store=False``.  With ``on_divergence="mask"``
    entries that leave the band are frozen and flagged instead of raising.
    """
    h_all = np.diff(tau_grid)
    y = np.array(y0, dtype=float)
    if forcing is not None:
        y = np.broadcast_to(y, np.broadcast_shapes(y.shape, forcing.shape[1:])).copy()
    shape = y.shape
    guard = 2 * f.c0_bound + 1 if guard is None else guard
    logyx = np.zeros(shape)
    a = np.zeros(shape)
    z = {k: np.zeros(np.broadcast_shapes(shape, v.shape[1:])) for k, v in (z_forcing or {}).items()}
    dfy = f.df(y)
    d2y = f.d2f(y)
    diverged = np.zeros(shape, dtype=bool)
    n_t = len(tau_grid)
    if store:
        Ys = np.empty((n_t,) + shape)
        Yx = np.empty((n_t,) + shape)
        As = np.empty((n_t,) + shape)
        Zs = {k: np.empty((n_t,) + v.shape) for k, v in z.items()}
        Ys[0], Yx[0], As[0] = y, 1.0, 0.0
        for k in z:
            Zs[k][0] = 0.0
    if observer is not None:
        observer(0, tau_grid[0], y, np.exp(logyx), a, z)
    for n, h in enumerate(h_all):
        y_new = _rk4(f.f, y, h)
        if forcing is not None:
            y_new = y_new + forcing[n]
        bad = ~np.isfinite(y_new) | (np.abs(y_new) > guard)
        if bad.any():
            if on_divergence == "raise":
                raise DivergenceError(
                    f"|Y| exceeded {guard:g} at tau={tau_grid[n + 1]:.6g}", tau=float(tau_grid[n + 1]))
            diverged |= bad
            y_new = np.where(diverged, y, y_new)
        dfn = f.df(y_new)
        d2n = f.d2f(y_new)
        yx_old = np.exp(logyx)
        logyx = logyx + 0.5 * h * (dfy + dfn)
        yx_new = np.exp(logyx)
        a = a + 0.5 * h * (yx_old * d2y + yx_new * d2n)
        for k in z:
            z[k] = z[k] * np.exp(0.5 * h * (dfy + dfn)) + z_forcing[k][n]
        y, dfy, d2y = y_new, dfn, d2n
        if store:
            Ys[n + 1], Yx[n + 1], As[n + 1] = y, yx_new, a
            for k in z:
                Zs[k][n + 1] = z[k]
        if observer is not None:
            observer(n + 1, tau_grid[n + 1], y, yx_new, a, z)
    if store:
        return Ys, Yx, As, (Zs or None), diverged, y
    return None, None, None, None, diverged, y


def _check_xi(f, xi):
    xi = np.asarray(xi, dtype=float)
    if np.any(np.abs(xi) > 2 * f.c0_bound + 1e-12):
        raise PreconditionError(f"initial values must lie in [-{2 * f.c0_bound}, {2 * f.c0_bound}]")
    return xi


def flow_ode(f: ReactionFunction, xi, tau_end: float, step: float | None = None,
             store: bool = True) -> ScalarTrajectory:
    """Deterministic flow ``Y' = f(Y)``, ``Y(0) = xi`` by RK4."""
    max_step = 1e-3 * min(1.0, 1.0 / f.c_f)
    step = min(max_step, stiffness_cap(f)) if step is None else step
    if step > max_step * (1 + 1e-12):
        raise PreconditionError(f"step {step:g} exceeds 1e-3 * min(1, 1/c_f)")
    xi = _check_xi(f, xi)
    tau = fast_time_grid(tau_end, step)
    Y, Yx, A, _, div, fin = integrate(f, xi, tau, store=store)
    return ScalarTrajectory(tau, xi, None, Y, Yx, A, None, "deterministic", div, fin)


def cubic_closed_form(tau, xi):
    """``Y(tau, xi)`` for ``f(u) = u - u^3``."""
    tau = np.asarray(tau, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return xi / np.sqrt(xi ** 2 + (1 - xi ** 2) * np.exp(-2 * tau))


@dataclass
class GenerationTime:
    interval: tuple[float, float]
    c1: float
    tau: float
    deviation: dict
    check: bool


def generation_interval(f: ReactionFunction, alpha: float, kappa: float) -> tuple[float, float]:
    if not (kappa > alpha > 0.5):
        raise ParameterError(f"need kappa > alpha > 1/2, got alpha={alpha}, kappa={kappa}")
    if not kappa > 1:
        raise ParameterError(f"need kappa > 1, got {kappa}")
    lo, hi = alpha / f.mu + kappa / f.p_decay, 1.0 / f.mu
    if lo >= hi:
        raise ParameterError(f"admissible C1 interval ({lo:.6g}, {hi:.6g}) is empty")
    return lo, hi


def ode_generation_time(f: ReactionFunction, alpha: float, kappa: float, eps: float,
                        c1: float | None = None, step: float | None = None) -> GenerationTime:
    """Admissible ``C1`` range and a trajectory check at ``tau = C1 |log eps|``.

    Checks ``|Y(tau, xi) - 1| <= eps^kappa`` for ``xi = eps^alpha`` and
    ``xi = 2 C0``.
    """
    lo, hi = generation_interval(f, alpha, kappa)
    c1 = 0.5 * (lo + hi) if c1 is None else float(c1)
    if not lo < c1 < hi:
        raise ParameterError(f"C1={c1} outside ({lo:.6g}, {hi:.6g})")
    tau = c1 * abs(math.log(eps))
    xis = np.array([eps ** alpha, 2 * f.c0_bound])
    traj = flow_ode(f, xis, tau, step, store=False)
    dev = np.abs(traj.final - 1.0)
    return GenerationTime((lo, hi), c1, tau, dict(zip(("eps^alpha", "2C0"), dev.tolist())),
                          bool(np.all(dev <= eps ** kappa)))


def ode_initial_stability(f: ReactionFunction, xi: float, alpha: float, beta: float,
                          delta_exp: float, tau_end: float, eps: float,
                          step: float | None = None) -> float:
    """``sup_tau Y(tau, xi + eps^(beta+delta)) - Y(tau, xi)`` for ``xi`` in the positive band."""
    if delta_exp < 2 * alpha * f.c_f / f.mu - 1e-12:
        raise PreconditionError(f"delta_exp must be >= 2 alpha C_f / mu = {2 * alpha * f.c_f / f.mu:g}")
    shift = eps ** (beta + delta_exp)
    lo, hi = eps ** alpha, 2 * f.c0_bound - shift
    if not (lo <= xi <= hi and lo <= xi + shift <= hi):
        raise PreconditionError(f"xi={xi} outside [{lo:g}, {hi:g}]")
    traj = flow_ode(f, np.array([xi, xi + shift]), tau_end, step)
    return float(np.max(traj.values[:, 1] - traj.values[:, 0]))


# ---------------------------------------------------------------------------
# noisy flows


def _path_increments(path, slow_times, x_pts, which=None):
    """Increments of ``path`` over ``slow_times`` at the grid points ``x_pts``."""
    grid = path.space_grid
    idx = []
    for p in x_pts:
        hit = np.nonzero(np.all(np.isclose(grid, p, atol=1e-12), axis=1))[0]
        if hit.size == 0:
            raise ConfigurationError(f"point {p} is not on the path's space grid")
        idx.append(hit[0])
    idx = np.array(idx)
    if which is None:
        W = path.values()
    else:
        W = path.derivative_values(which)
    t = path.time_grid
    if slow_times[-1] > t[-1] * (1 + 1e-12) + 1e-15:
        raise ConfigurationError("noise path does not cover the requested horizon")
    if len(t) == len(slow_times) and np.allclose(t, slow_times, rtol=1e-12, atol=1e-15):
        Ws = W[..., idx]
    else:
        Wt = np.moveaxis(W[..., idx], -2, 0)
        flat = Wt.reshape(len(t), -1)
        Ws = np.stack([np.interp(slow_times, t, flat[:, j]) for j in range(flat.shape[1])], axis=1)
        Ws = np.moveaxis(Ws.reshape((len(slow_times),) + Wt.shape[1:]), 0, -2)
    return np.diff(Ws, axis=-2)


def _to_forcing(inc, eps, gamma, batched):
    """(P?, n_steps, n_x) increments -> (n_steps, P, 1, n_x) forcing."""
    inc = (eps ** gamma) * inc
    if not batched:
        inc = inc[None]
    return np.moveaxis(inc, 1, 0)[:, :, None, :]


def flow_sde(f: ReactionFunction, kernel: CovarianceKernel | None, xi, x, eps: float,
             gamma: float, tau_end: float, step: float | None = None, seed=None,
             n_paths: int | None = None, path: NoisePath | None = None,
             with_z: bool = False, store: bool = True, observer=None,
             on_divergence: str = "raise") -> ScalarTrajectory:
    """Noisy flow ``dY = f(Y) dtau + eps^(gamma+1/2) dW~_tau(x)``.

    The fast-time Brownian motion is ``W~_tau = eps^(-1/2) W_(eps tau)``, so
    each step adds ``eps^gamma`` times the slow-time increment of ``W``.
    Either ``seed`` (fresh samples, optionally ``n_paths`` of them) or an
    explicit slow-time ``path`` drives the noise; one realisation is shared
    across the ``xi`` lattice.  ``with_z`` integrates the spatial derivatives
    ``Z_i`` from jointly sampled derivative noise.
    """
    step = default_step(f) if step is None else step
    if step * f.c_f > 0.1:
        raise StepSizeError(f"step * c_f = {step * f.c_f:g} > 0.1")
    xi_a = np.atleast_1d(np.asarray(xi, dtype=float))
    x_a = np.atleast_1d(np.asarray(x, dtype=float))
    _check_xi(f, xi_a)
    tau = fast_time_grid(tau_end, step)
    slow = eps * tau
    dim = kernel.dim if kernel is not None else path.space_grid.shape[1]
    pts = as_points(x_a, dim) if dim == 1 else np.asarray(x, dtype=float).reshape(-1, dim)
    if path is None:
        if kernel is None:
            raise ConfigurationError("flow_sde needs a kernel or a path")
        if with_z:
            path = sample_derivative_path(kernel, slow, pts, list(range(dim)), seed, n_paths)
        else:
            path = sample_path(kernel, slow, pts, seed, n_paths)
    batched = path.batched
    forcing = _to_forcing(_path_increments(path, slow, pts), eps, gamma, batched)
    zf = None
    if with_z:
        if not path.derivative_increments:
            raise CapabilityError("path carries no derivative increments")
        zf = {d: _to_forcing(_path_increments(path, slow, pts, d), eps, gamma, batched)
              for d in path.derivative_increments}
    y0 = xi_a[None, :, None]
    Y, Yx, A, Z, div, fin = integrate(f, y0, tau, forcing, zf, store, observer, on_divergence)
    keep = [i for i, flag in enumerate((batched, np.ndim(xi) > 0, np.ndim(x) > 0 or dim > 1)) if flag]

    def sq(a, lead=1):
        if a is None:
            return None
        return a.reshape(a.shape[:lead] + tuple(s for i, s in enumerate(a.shape[lead:]) if i in keep))

    Zs = {k: sq(v) for k, v in Z.items()} if Z else None
    return ScalarTrajectory(tau, xi_a if np.ndim(xi) else float(xi_a[0]),
                            x_a if np.ndim(x) else float(x_a[0]),
                            sq(Y), sq(Yx), sq(A), Zs, "sde", sq(div, 0), sq(fin, 0))


def flow_mollified(f: ReactionFunction, mollified: MollifiedPath, xi, x, eps: float,
                   gamma: float, tau_end: float, step: float | None = None,
                   with_z: bool = False, store: bool = True, observer=None,
                   on_divergence: str = "raise") -> ScalarTrajectory:
    """Random ODE ``Y' = f(Y) + eps^(gamma+1/2) dW~^(delta)/dtau``.

    The forcing over each step is integrated exactly from the mollified
    path values, so ``Y^(eps,delta)`` and ``Y^eps`` driven by the same path
    differ only through ``W^(delta) - W``.
    """
    step = default_step(f) if step is None else step
    base = mollified.base
    shadow = NoisePath(base.time_grid, base.space_grid,
                       np.diff(mollified.values_grid, axis=-2), None, base.seed,
                       {k: np.diff(v, axis=-2) for k, v in mollified.derivative_values_grid.items()}
                       if mollified.derivative_values_grid else None)
    traj = flow_sde(f, None, xi, x, eps, gamma, tau_end, step, path=shadow,
                    with_z=with_z, store=store, observer=observer, on_divergence=on_divergence)
    traj.variant = "mollified"
    return traj


# ---------------------------------------------------------------------------
# derivative quantities


def xi_derivative(traj: ScalarTrajectory, f: ReactionFunction):
    """Recompute ``(Y_xi, A)`` from the stored values by trapezoid quadrature."""
    Y = traj.values
    h = np.diff(traj.tau_grid).reshape((-1,) + (1,) * (Y.ndim - 1))
    d1 = f.df(Y)
    logyx = np.concatenate([np.zeros((1,) + Y.shape[1:]),
                            np.cumsum(0.5 * h * (d1[1:] + d1[:-1]), axis=0)])
    yx = np.exp(logyx)
    g = yx * f.d2f(Y)
    a = np.concatenate([np.zeros((1,) + Y.shape[1:]),
                        np.cumsum(0.5 * h * (g[1:] + g[:-1]), axis=0)])
    return yx, a


def xi_lattice(eps: float, alpha: float, c0_bound: float, n: int = 64) -> np.ndarray:
    """Geometric lattice on ``[eps^alpha, 2 C0]`` with mirrored negatives (``n`` points)."""
    half = np.geomspace(eps ** alpha, 2 * c0_bound, n // 2)
    return np.concatenate([-half[::-1], half])


def fit_c5(traj: ScalarTrajectory, mu: float, tau_max: float | None = None) -> float:
    """Smallest ``C5`` with ``|A(tau)| <= C5 (e^(mu tau) - 1)`` on the stored grid."""
    tau = traj.tau_grid
    mask = tau > 0
    if tau_max is not None:
        mask &= tau <= tau_max
    denom = np.expm1(mu * tau[mask]).reshape((-1,) + (1,) * (traj.a_ratio.ndim - 1))
    return float(np.max(np.abs(traj.a_ratio[mask]) / denom))


def spatial_derivative_bounds(traj: ScalarTrajectory, support_radius: float = 1.0,
                              tau_max: float | None = None):
    """Central-difference suprema ``(|Y_x|, |Y_xx|, |Y_xix / Y_xi|)``.

    The last axis of the trajectory arrays must be a uniform ``x`` lattice
    with at least 8 points inside the support.
    """
    x = np.atleast_1d(np.asarray(traj.x, dtype=float))
    if x.size < 3 or np.sum(np.abs(x) < support_radius) < 8:
        raise ResolutionError("need at least 8 x-points inside the kernel support")
    hx = np.diff(x)
    if not np.allclose(hx, hx[0], rtol=1e-9):
        raise ConfigurationError("x lattice must be uniform")
    hx = hx[0]
    sel = slice(None)
    if tau_max is not None:
        sel = traj.tau_grid <= tau_max
    Y = traj.values[sel]
    L = np.log(traj.y_xi[sel])
    yx = (Y[..., 2:] - Y[..., :-2]) / (2 * hx)
    yxx = (Y[..., 2:] - 2 * Y[..., 1:-1] + Y[..., :-2]) / hx ** 2
    lx = (L[..., 2:] - L[..., :-2]) / (2 * hx)
    return float(np.max(np.abs(yx))), float(np.max(np.abs(yxx))), float(np.max(np.abs(lx)))
