"""Q-Wiener paths, their spatial derivatives and time mollification.

A kernel is either *modal*, ``Q(x, y) = sum_k c_k e_k(x) e_k(y)`` with
smooth compactly supported ``e_k`` (the separable ``a(x) a(y)`` case has a
single mode), or a plain callable.  Modal kernels expose exact derivative
kernels through the mode derivatives, and an exact low-rank factor of any
Gram matrix, so jointly sampled ``W`` and ``dW/dx`` paths are consistent
to machine precision.  Callable kernels go through a jittered Cholesky
factorisation of the grid Gram matrix.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.linalg import cholesky, eigh
from scipy.sparse.linalg import eigsh

from .errors import (CapabilityError, ConfigurationError,
                     KernelConditioningError, PSDViolationError,
                     ResolutionError)

GRAM_CAP = 4096
JITTER_START = 1e-14
JITTER_MAX = 1e-8
TRUNCATION_TOL = 1e-10


# ---------------------------------------------------------------------------
# smooth compactly supported factors


def _bump_derivs(s: np.ndarray, order: int) -> np.ndarray:
    """``d^order/ds^order exp(-1/(1-s^2))`` (zero outside |s| < 1)."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    w = 1.0 - si * si
    b = np.exp(-1.0 / w)
    g1 = -2.0 * si / w ** 2
    if order == 0:
        val = b
    elif order == 1:
        val = g1 * b
    elif order == 2:
        g2 = -(2.0 + 6.0 * si * si) / w ** 3
        val = (g2 + g1 * g1) * b
    elif order == 3:
        g2 = -(2.0 + 6.0 * si * si) / w ** 3
        g3 = -(24.0 * si + 24.0 * si ** 3) / w ** 4
        val = (g3 + 3 * g1 * g2 + g1 ** 3) * b
    else:
        raise CapabilityError(f"bump derivatives implemented up to order 3, got {order}")
    out[inside] = val
    return out


@dataclass(frozen=True)
class Factor1D:
    """``e(x) = bump(s) * trig(k pi s)`` with ``s = (x - center) / radius``."""

    kind: str = "bump"
    center: float = 0.0
    radius: float = 1.0
    k: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bump", "bump_cos", "bump_sin"):
            raise ConfigurationError(f"unknown factor kind {self.kind!r}")
        if self.radius <= 0:
            raise ConfigurationError("factor radius must be positive")

    def __call__(self, x, order: int = 0) -> np.ndarray:
        s = (np.asarray(x, dtype=float) - self.center) / self.radius
        scale = self.radius ** (-order)
        if self.kind == "bump":
            return scale * _bump_derivs(s, order)
        phase = 0.0 if self.kind == "bump_cos" else -0.5 * math.pi
        om = self.k * math.pi
        total = np.zeros_like(s)
        for j in range(order + 1):
            trig = om ** (order - j) * np.cos(om * s + phase + 0.5 * math.pi * (order - j))
            total = total + math.comb(order, j) * _bump_derivs(s, j) * trig
        return scale * total

    @property
    def extent(self) -> float:
        return abs(self.center) + self.radius

    @classmethod
    def from_config(cls, cfg) -> "Factor1D":
        if isinstance(cfg, str):
            return cls(kind=cfg)
        name = cfg.get("name", cfg.get("kind", "bump"))
        return cls(kind=name, center=float(cfg.get("center", 0.0)),
                   radius=float(cfg.get("radius", 1.0)), k=float(cfg.get("k", 1.0)))


@dataclass(frozen=True)
class Mode:
    weight: float
    factors: tuple[Factor1D, ...]

    def __call__(self, pts: np.ndarray, deriv: Sequence[int]) -> np.ndarray:
        out = np.ones(pts.shape[0])
        for a, fac in enumerate(self.factors):
            out = out * fac(pts[:, a], deriv[a])
        return out


def as_points(x, dim: int = 1) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(-1, 1) if dim == 1 else pts.reshape(1, -1)
    if pts.shape[1] != dim:
        raise ConfigurationError(f"points have dimension {pts.shape[1]}, kernel has {dim}")
    return pts


def _unit(dim, direction, order):
    d = [0] * dim
    if order:
        d[direction] = order
    return tuple(d)


# ---------------------------------------------------------------------------
# kernels


@dataclass
class CovarianceKernel:
    dim: int
    support_radius: float
    modes: tuple[Mode, ...] | None = None
    amplitude: float = 1.0
    q_func: Callable | None = None
    derivative_funcs: dict = field(default_factory=dict)
    separable_factor: Callable | None = None
    diag_positive: dict = field(default_factory=dict)
    descriptor: dict | None = None

    @property
    def is_modal(self) -> bool:
        return self.modes is not None

    def features(self, x, deriv=None) -> np.ndarray:
        """Columns ``sqrt(amplitude c_k) d^deriv e_k(x)``; shape (n, K)."""
        if not self.is_modal:
            raise CapabilityError("kernel has no modal representation")
        pts = as_points(x, self.dim)
        deriv = tuple(deriv) if deriv is not None else (0,) * self.dim
        cols = [math.sqrt(self.amplitude * m.weight) * m(pts, deriv) for m in self.modes]
        return np.stack(cols, axis=1)

    def gram(self, x, y=None, dx=None, dy=None) -> np.ndarray:
        """``d^dx_x d^dy_y Q(x_i, y_j)`` for multi-indices ``dx``, ``dy``."""
        y = x if y is None else y
        zero = (0,) * self.dim
        dx = tuple(dx) if dx is not None else zero
        dy = tuple(dy) if dy is not None else zero
        if self.is_modal:
            return self.features(x, dx) @ self.features(y, dy).T
        px, py = as_points(x, self.dim), as_points(y, self.dim)
        if dx == zero and dy == zero:
            fn = self.q_func
        else:
            fn = self.derivative_funcs.get((dx, dy))
            if fn is None:
                raise CapabilityError(f"no derivative kernel for orders {dx}, {dy}")
        if self.dim == 1:
            g = fn(px[:, 0][:, None], py[:, 0][None, :])
        else:
            g = fn(px[:, None, :], py[None, :, :])
        return self.amplitude * np.broadcast_to(np.asarray(g, dtype=float),
                                                (px.shape[0], py.shape[0])).copy()

    def q(self, x, y=None):
        return self.gram(x, y)

    def q_dx_dy(self, x, y=None, direction: int = 0):
        u = _unit(self.dim, direction, 1)
        return self.gram(x, y, u, u)

    def q_dxx_dyy(self, x, y=None, direction: int = 0):
        u = _unit(self.dim, direction, 2)
        return self.gram(x, y, u, u)

    def diag(self, x, deriv=None) -> np.ndarray:
        """``Q^{(deriv, deriv)}(x, x)`` without forming the full matrix."""
        if self.is_modal:
            F = self.features(x, deriv)
            return np.sum(F * F, axis=1)
        pts = as_points(x, self.dim)
        return np.array([self.gram(p[None, :], None, deriv, deriv)[0, 0] for p in pts])

    def scaled(self, factor: float) -> "CovarianceKernel":
        """Same kernel with ``Q`` multiplied by ``factor``."""
        return CovarianceKernel(self.dim, self.support_radius, self.modes,
                                self.amplitude * factor, self.q_func,
                                self.derivative_funcs, self.separable_factor,
                                self.diag_positive, self.descriptor)

    def factor(self, x, derivs: Sequence[tuple] | None = None) -> np.ndarray:
        """A matrix ``F`` with ``F F^T`` equal to the (joint) Gram matrix.

        ``derivs`` stacks blocks ``[d^a W(x)]`` for each multi-index ``a``;
        ``None`` means the value block only.
        """
        zero = (0,) * self.dim
        derivs = [zero] if derivs is None else [tuple(d) for d in derivs]
        if self.is_modal:
            return np.concatenate([self.features(x, d) for d in derivs], axis=0)
        pts = as_points(x, self.dim)
        blocks = [[self.gram(pts, pts, a, b) for b in derivs] for a in derivs]
        G = np.block(blocks)
        return _psd_factor(G)


def _psd_factor(G: np.ndarray) -> np.ndarray:
    """Factor of a PSD matrix, restricted to its non-vanishing diagonal.

    Cholesky with jitter doubling from ``1e-14 trace`` up to ``1e-8 trace``;
    above ``GRAM_CAP`` active points a truncated eigen-expansion keeping
    ``1 - 1e-10`` of the trace is used instead.
    """
    n = G.shape[0]
    F = np.zeros((n, 0))
    diag = np.diag(G)
    active = np.nonzero(diag > 0)[0]
    if active.size == 0:
        return np.zeros((n, 1))
    Ga = G[np.ix_(active, active)]
    Ga = 0.5 * (Ga + Ga.T)
    trace = float(np.trace(Ga))
    if active.size > GRAM_CAP:
        k = 32
        while True:
            k = min(k, active.size - 1)
            vals, vecs = eigsh(Ga, k=k, which="LA")
            vals = np.clip(vals, 0, None)
            if vals.sum() >= (1 - TRUNCATION_TOL) * trace or k >= active.size - 1:
                break
            k *= 2
        La = vecs * np.sqrt(vals)
    else:
        jitter = JITTER_START * trace
        La = None
        while jitter <= JITTER_MAX * trace * (1 + 1e-12):
            try:
                La = cholesky(Ga + jitter * np.eye(active.size), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter *= 2
        if La is None:
            raise KernelConditioningError(
                f"Cholesky failed with jitter up to {JITTER_MAX:g} * trace")
    F = np.zeros((n, La.shape[1]))
    F[active] = La
    return F


def _validation_lattice(dim, radius, n_max=64):
    per_axis = max(2, int(round(n_max ** (1.0 / dim))))
    ax = np.linspace(-radius * 0.999, radius * 0.999, per_axis)
    mesh = np.meshgrid(*([ax] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)[:n_max]


def validate_kernel(kernel: CovarianceKernel) -> CovarianceKernel:
    pts = _validation_lattice(kernel.dim, kernel.support_radius)
    G = kernel.gram(pts)
    asym = np.max(np.abs(G - G.T))
    if asym > 1e-12 * max(1.0, np.max(np.abs(G))):
        raise PSDViolationError(f"kernel is not symmetric (max asymmetry {asym:g})")
    vals = eigh(G, eigvals_only=True)
    if vals.min() < -1e-9 * max(vals.max(), 0.0) - 1e-300:
        raise PSDViolationError(f"Gram matrix has eigenvalue {vals.min():g}")
    # points beyond the support in sup-norm must carry no covariance
    outer = np.full((1, kernel.dim), kernel.support_radius * 1.01 + 1e-9)
    probe = np.concatenate([outer, -outer, pts[:4]], axis=0)
    g_out = kernel.gram(probe[:2], probe)
    if np.max(np.abs(g_out)) > 0:
        raise ConfigurationError("kernel does not vanish outside support_radius")
    inner = _validation_lattice(kernel.dim, 0.9 * kernel.support_radius, n_max=257 ** kernel.dim)
    inner = np.concatenate([inner, np.zeros((1, kernel.dim))], axis=0)
    flags = {"q": bool(np.all(kernel.diag(inner) > 0))}
    for i in range(kernel.dim):
        for order, key in ((1, "q_dx_dy"), (2, "q_dxx_dyy")):
            try:
                flags[f"{key}[{i}]"] = bool(np.all(kernel.diag(inner, _unit(kernel.dim, i, order)) > 0))
            except CapabilityError:
                flags[f"{key}[{i}]"] = None
    kernel.diag_positive = flags
    return kernel


def _axis_factors(cfg, dim):
    if isinstance(cfg, list):
        if len(cfg) != dim:
            raise ConfigurationError("per-axis factor list must match dimension")
        return tuple(Factor1D.from_config(c) for c in cfg)
    return tuple([Factor1D.from_config(cfg)] * dim)


def build_kernel(spec: dict) -> CovarianceKernel:
    """Construct and validate a kernel from a descriptor.

    Descriptor kinds:
      ``separable``  ``{"factor": {...}}`` gives ``Q = a(x) a(y)``;
      ``modes``      ``{"modes": [{"c": 1.0, "factor": {...}}, ...]}``;
      ``bump_pair``  cos- and sin-modulated bumps (tensorised in d > 1);
      ``callable``   ``{"q": fn, "support_radius": R, "derivatives": {...}}``.
    """
    spec = dict(spec)
    kind = spec.get("kind", "separable")
    dim = int(spec.get("dim", 1))
    amplitude = float(spec.get("amplitude", 1.0))
    declared = spec.get("support_radius")
    separable = None

    if kind == "callable":
        if declared is None:
            raise ConfigurationError("callable kernel needs support_radius")
        kernel = CovarianceKernel(dim, float(declared), None, amplitude,
                                  spec["q"], dict(spec.get("derivatives", {})),
                                  descriptor=None)
        return validate_kernel(kernel)

    if kind == "separable":
        factors = _axis_factors(spec.get("factor", {"name": "bump"}), dim)
        modes = (Mode(1.0, factors),)
        m = modes[0]
        separable = lambda x, m=m, d=dim: m(as_points(x, d), (0,) * d)
    elif kind == "modes":
        modes = []
        for mcfg in spec["modes"]:
            c = float(mcfg.get("c", 1.0))
            if c < 0:
                raise PSDViolationError(f"negative mode weight c={c}")
            modes.append(Mode(c, _axis_factors(mcfg.get("factor", {"name": "bump"}), dim)))
        modes = tuple(modes)
    elif kind == "bump_pair":
        radius = float(spec.get("radius", 1.0))
        k = float(spec.get("k", 1.0))
        pair = (Factor1D("bump_cos", 0.0, radius, k), Factor1D("bump_sin", 0.0, radius, k))
        modes = []
        for idx in np.ndindex(*([2] * dim)):
            modes.append(Mode(1.0, tuple(pair[i] for i in idx)))
        modes = tuple(modes)
    else:
        raise ConfigurationError(f"unknown kernel kind {kind!r}")

    extent = max(max(f.extent for f in m.factors) for m in modes)
    if declared is not None and float(declared) < extent - 1e-12:
        raise ConfigurationError(
            f"support_radius {declared} smaller than factor extent {extent}")
    radius = float(declared) if declared is not None else extent
    kernel = CovarianceKernel(dim, radius, modes, amplitude, None, {},
                              separable, descriptor={k: v for k, v in spec.items()})
    return validate_kernel(kernel)


# ---------------------------------------------------------------------------
# paths


@dataclass
class NoisePath:
    """Sampled Q-Wiener path(s).

    ``increments`` has shape ``(n_steps, n_x)`` for one path or
    ``(n_paths, n_steps, n_x)`` for a batch; ``derivative_increments`` maps a
    direction index to arrays of the same shape.
    """

    time_grid: np.ndarray
    space_grid: np.ndarray
    increments: np.ndarray
    chol_factor: np.ndarray | None = None
    seed: object = None
    derivative_increments: dict | None = None

    @property
    def batched(self) -> bool:
        return self.increments.ndim == 3

    @property
    def n_steps(self) -> int:
        return len(self.time_grid) - 1

    def _cum(self, inc):
        zeros = np.zeros(inc.shape[:-2] + (1, inc.shape[-1]))
        return np.concatenate([zeros, np.cumsum(inc, axis=-2)], axis=-2)

    def values(self) -> np.ndarray:
        """``W_t(x)`` on the grid, ``W_0 = 0``."""
        return self._cum(self.increments)

    def derivative_values(self, direction: int = 0) -> np.ndarray:
        if not self.derivative_increments or direction not in self.derivative_increments:
            raise CapabilityError("path carries no derivative increments for this direction")
        return self._cum(self.derivative_increments[direction])

    def path(self, i: int) -> "NoisePath":
        if not self.batched:
            return self
        d = None
        if self.derivative_increments:
            d = {k: v[i] for k, v in self.derivative_increments.items()}
        seed = self.seed[i] if isinstance(self.seed, (list, tuple)) else self.seed
        return NoisePath(self.time_grid, self.space_grid, self.increments[i],
                         self.chol_factor, seed, d)

    def scaled(self, factor: float) -> "NoisePath":
        d = None
        if self.derivative_increments:
            d = {k: factor * v for k, v in self.derivative_increments.items()}
        return NoisePath(self.time_grid, self.space_grid, factor * self.increments,
                         self.chol_factor, self.seed, d)

    def to_ndjson(self, fh=None) -> str | None:
        """Write one ``{t, x, w}`` record per time level (``path`` index if batched)."""
        buf = io.StringIO() if fh is None else fh
        W = self.values()
        xs = self.space_grid.tolist()
        xs = [p[0] for p in xs] if self.space_grid.shape[1] == 1 else xs
        batch = W if self.batched else W[None]
        for p, Wp in enumerate(batch):
            for n, t in enumerate(self.time_grid):
                rec = {"t": float(t), "x": xs, "w": Wp[n].tolist()}
                if self.batched:
                    rec = {"path": p, **rec}
                buf.write(json.dumps(rec) + "\n")
        return buf.getvalue() if fh is None else None

    @classmethod
    def from_ndjson(cls, text_or_fh) -> "NoisePath":
        lines = text_or_fh.splitlines() if isinstance(text_or_fh, str) else text_or_fh.read().splitlines()
        recs = [json.loads(l) for l in lines if l.strip()]
        if not recs:
            raise ConfigurationError("empty NoisePath stream")
        batched = "path" in recs[0]
        x = np.asarray(recs[0]["x"], dtype=float)
        x = x.reshape(-1, 1) if x.ndim == 1 else x
        if batched:
            n_paths = max(r["path"] for r in recs) + 1
            groups = [[r for r in recs if r["path"] == p] for p in range(n_paths)]
        else:
            groups = [recs]
        t = np.array([r["t"] for r in groups[0]])
        W = np.array([[r["w"] for r in g] for g in groups])
        inc = np.diff(W, axis=1)
        return cls(t, x, inc if batched else inc[0])


def _seed_list(seed, n_paths):
    if n_paths is None:
        return None
    if isinstance(seed, (list, tuple, np.ndarray)):
        if len(seed) != n_paths:
            raise ConfigurationError("seed list length must equal n_paths")
        return [int(s) for s in seed]
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n_paths)]


def _draw(factor, dt, seeds, single_seed):
    r = factor.shape[1]
    sq = np.sqrt(dt)[:, None]
    if seeds is None:
        rng = np.random.default_rng(single_seed)
        Z = rng.standard_normal((len(dt), r))
        return (sq * Z) @ factor.T
    out = np.empty((len(seeds), len(dt), factor.shape[0]))
    for i, s in enumerate(seeds):
        Z = np.random.default_rng(s).standard_normal((len(dt), r))
        out[i] = (sq * Z) @ factor.T
    return out


def _check_time_grid(time_grid):
    t = np.asarray(time_grid, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ConfigurationError("time_grid must be a non-empty 1-D array")
    if np.any(np.diff(t) <= 0):
        raise ConfigurationError("time_grid must be strictly increasing")
    return t


def sample_path(kernel: CovarianceKernel, time_grid, space_grid, seed,
                n_paths: int | None = None) -> NoisePath:
    """Increments ``N(0, dt_k * Gram)``, i.i.d. over steps, reproducible per seed.

    With ``n_paths`` a batch is drawn; per-path seeds are spawned from
    ``seed`` (or taken from it when it is a sequence).
    """
    t = _check_time_grid(time_grid)
    pts = as_points(space_grid, kernel.dim)
    F = kernel.factor(pts)
    seeds = _seed_list(seed, n_paths)
    inc = _draw(F, np.diff(t), seeds, seed)
    return NoisePath(t, pts, inc, F, seeds if seeds is not None else seed)


def sample_derivative_path(kernel: CovarianceKernel, time_grid, space_grid,
                           direction, seed, n_paths: int | None = None) -> NoisePath:
    """Jointly sample ``W`` and ``d_i W`` for each requested direction ``i``.

    One factor of the stacked Gram matrix over ``[W, d_i W, ...]`` drives all
    blocks, so the derivative paths are the spatial derivatives of ``W`` in
    law and, for modal kernels, pathwise.
    """
    dirs = [direction] if np.isscalar(direction) else list(direction)
    for d in dirs:
        if not 0 <= int(d) < kernel.dim:
            raise CapabilityError(f"direction {d} outside 0..{kernel.dim - 1}")
    t = _check_time_grid(time_grid)
    pts = as_points(space_grid, kernel.dim)
    n = pts.shape[0]
    derivs = [(0,) * kernel.dim] + [_unit(kernel.dim, int(d), 1) for d in dirs]
    F = kernel.factor(pts, derivs)
    seeds = _seed_list(seed, n_paths)
    joint = _draw(F, np.diff(t), seeds, seed)
    base = joint[..., :n]
    dinc = {int(d): joint[..., (j + 1) * n:(j + 2) * n] for j, d in enumerate(dirs)}
    return NoisePath(t, pts, np.ascontiguousarray(base), F[:n],
                     seeds if seeds is not None else seed,
                     {k: np.ascontiguousarray(v) for k, v in dinc.items()})


# ---------------------------------------------------------------------------
# mollification


@lru_cache(maxsize=1)
def _rho_norm() -> float:
    val, _ = integrate.quad(lambda r: float(_bump_derivs(np.array([2 * r - 1]), 0)[0]), 0, 1,
                            epsabs=1e-14, epsrel=1e-13)
    return val


def rho(r) -> np.ndarray:
    """Normalised bump on [0, 1]: smooth, unit mass, supported in [0, 1]."""
    return _bump_derivs(2 * np.asarray(r, dtype=float) - 1, 0) / _rho_norm()


def rho_prime(r) -> np.ndarray:
    return 2 * _bump_derivs(2 * np.asarray(r, dtype=float) - 1, 1) / _rho_norm()


def holder_constant(time_grid, values, alpha: float) -> float:
    """``max_{i<j} |W_j - W_i| / |t_j - t_i|^alpha`` over grid pairs and columns."""
    t = np.asarray(time_grid)
    W = np.asarray(values)
    W = W.reshape(W.shape[0], -1)
    K = 0.0
    for lag in range(1, len(t)):
        dW = np.abs(W[lag:] - W[:-lag]).max(axis=1)
        dt = (t[lag:] - t[:-lag]) ** alpha
        K = max(K, float(np.max(dW / dt)))
    return K


def _interp_rows(t, W, s):
    """Piecewise-linear ``W(s)`` for s of any shape; ``W(s) = 0`` for s < t[0]."""
    flat = s.ravel()
    idx = np.clip(np.searchsorted(t, flat, side="right") - 1, 0, len(t) - 2)
    t0, t1 = t[idx], t[idx + 1]
    lam = np.clip((flat - t0) / (t1 - t0), 0.0, 1.0)
    out = (1 - lam)[:, None] * W[idx] + lam[:, None] * W[idx + 1]
    out[flat < t[0]] = 0.0
    return out.reshape(s.shape + (W.shape[1],))


def _quadrature(width, dt_min):
    n = int(min(4096, max(65, math.ceil(8 * width / dt_min) + 1)))
    r = np.linspace(0.0, 1.0, n)
    trap = np.full(n, 1.0 / (n - 1))
    trap[[0, -1]] *= 0.5
    w = trap * rho(r)
    w /= w.sum()
    wp = trap * rho_prime(r)
    return r, w, wp


def convolve(t, W, times, width):
    """``int_0^1 W(t - width r) rho(r) dr`` at ``times`` (trapezoid, convex weights)."""
    r, w, _ = _quadrature(width, float(np.min(np.diff(t))) if len(t) > 1 else width)
    s = np.asarray(times)[:, None] - width * r[None, :]
    vals = _interp_rows(t, W, s)
    return np.einsum("tr,trx->tx", np.broadcast_to(w, s.shape), vals)


def convolve_derivative(t, W, times, width):
    """``d/dt`` of :func:`convolve`, via ``(1/width) int W(t - width r) rho'(r) dr``."""
    r, _, wp = _quadrature(width, float(np.min(np.diff(t))) if len(t) > 1 else width)
    s = np.asarray(times)[:, None] - width * r[None, :]
    vals = _interp_rows(t, W, s)
    return np.einsum("tr,trx->tx", np.broadcast_to(wp, s.shape), vals) / width


@dataclass
class MollifiedPath:
    """Time-mollified companion of a :class:`NoisePath`.

    ``width`` is the smoothing width actually used (per path when batched);
    ``holder_width`` is ``(delta / K)^(1/alpha)`` from the Hölder estimate.
    ``sup_error`` is the measured grid error, always ``<= delta``.
    """

    base: NoisePath
    delta: float
    alpha: float
    holder_constant: np.ndarray
    holder_width: np.ndarray
    width: np.ndarray
    sup_error: np.ndarray
    values_grid: np.ndarray
    derivative_values_grid: dict | None = None
    rho_name: str = "bump"

    @property
    def effective_delta(self):
        return self.width

    @property
    def time_grid(self):
        return self.base.time_grid

    @property
    def space_grid(self):
        return self.base.space_grid

    @property
    def batched(self):
        return self.base.batched

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values_grid, axis=-2)

    def values(self) -> np.ndarray:
        return self.values_grid

    def _per_path(self, fn, times, which):
        t = self.base.time_grid
        if self.batched:
            return np.stack([fn(t, which[i], times, float(self.width[i]))
                             for i in range(which.shape[0])])
        return fn(t, which, times, float(self.width))

    def evaluate(self, times) -> np.ndarray:
        return self._per_path(convolve, np.asarray(times, dtype=float), self.base.values())

    def derivative(self, times) -> np.ndarray:
        """Time derivative of ``W^(delta)``, evaluated from the mollifier derivative."""
        return self._per_path(convolve_derivative, np.asarray(times, dtype=float),
                              self.base.values())


def _mollify_single(t, W, dW_paths, delta, alpha, min_width):
    K = holder_constant(t, W, alpha)
    for D in dW_paths:
        K = max(K, holder_constant(t, D, alpha))
    hw = (delta / K) ** (1.0 / alpha) if K > 0 else math.inf
    width = hw if np.isfinite(hw) else 10.0 * (t[-1] - t[0] + 1.0)
    while True:
        if width < min_width:
            raise ResolutionError(
                f"smoothing width {width:g} below resolvable {min_width:g}; refine the time grid")
        Wd = convolve(t, W, t, width)
        err = float(np.max(np.abs(Wd - W)))
        derr = []
        for D in dW_paths:
            derr.append((convolve(t, D, t, width), D))
        err_all = max([err] + [float(np.max(np.abs(a - b))) for a, b in derr])
        if err_all <= delta:
            return K, hw, width, err_all, Wd, [a for a, _ in derr]
        width *= 0.5


def mollify(path: NoisePath, delta: float, alpha: float = 0.4,
            min_width_fraction: float = 1e-9) -> MollifiedPath:
    """Mollify in time with a per-path smoothing width.

    Starts from the Hölder width ``(delta / K)^(1/alpha)`` and halves it until
    the grid sup-error of the path (and of its derivative paths, if any) is at
    most ``delta``.  The bound is therefore a constructive guarantee.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    t = path.time_grid
    if len(t) < 2:
        raise ConfigurationError("cannot mollify an empty path")
    min_width = min_width_fraction * float(np.min(np.diff(t)))
    W = path.values()
    dirs = sorted(path.derivative_increments) if path.derivative_increments else []
    dvals = [path.derivative_values(d) for d in dirs]

    if not path.batched:
        K, hw, width, err, Wd, dWd = _mollify_single(t, W, dvals, delta, alpha, min_width)
        dmap = {d: v for d, v in zip(dirs, dWd)} or None
        return MollifiedPath(path, delta, alpha, np.float64(K), np.float64(hw),
                             np.float64(width), np.float64(err), Wd, dmap)
    Ks, hws, widths, errs, Wds = [], [], [], [], []
    dW_out = {d: [] for d in dirs}
    for i in range(W.shape[0]):
        K, hw, width, err, Wd, dWd = _mollify_single(
            t, W[i], [v[i] for v in dvals], delta, alpha, min_width)
        Ks.append(K); hws.append(hw); widths.append(width); errs.append(err); Wds.append(Wd)
        for d, v in zip(dirs, dWd):
            dW_out[d].append(v)
    dmap = {d: np.stack(v) for d, v in dW_out.items()} or None
    return MollifiedPath(path, delta, alpha, np.array(Ks), np.array(hws),
                         np.array(widths), np.array(errs), np.stack(Wds), dmap)


class NoiseStream:
    """Step-by-step sampler for long runs where storing a path is too costly.

    ``stream(n)`` returns the increment over the ``n``-th step (steps must be
    requested in order).  The draws coincide with :func:`sample_path` for
    the same kernel, grid, step and seed(s).
    """

    def __init__(self, kernel: CovarianceKernel, space_grid, dt: float, seed,
                 n_paths: int | None = None, shape=None):
        self.factor = kernel.factor(as_points(space_grid, kernel.dim))
        self.dt = float(dt)
        self.seeds = _seed_list(seed, n_paths)
        self.rngs = ([np.random.default_rng(s) for s in self.seeds] if self.seeds is not None
                     else [np.random.default_rng(seed)])
        self.batched = self.seeds is not None
        self.shape = shape
        self._next = 0

    def __call__(self, n: int) -> np.ndarray:
        if n != self._next:
            raise ConfigurationError(f"noise stream expected step {self._next}, got {n}")
        self._next += 1
        r = self.factor.shape[1]
        sq = math.sqrt(self.dt)
        Z = np.stack([g.standard_normal((1, r))[0] for g in self.rngs])
        inc = sq * Z @ self.factor.T
        if not self.batched:
            inc = inc[0]
        if self.shape is not None:
            inc = inc.reshape(inc.shape[:-1] + tuple(self.shape))
        return inc
