"""Bistable reaction terms and their structural constants.

A reaction is stored with its first two derivatives; all maps are
vectorised over numpy arrays.  ``mu = f'(0)``, ``p_decay = -f'(1)`` and
``c_f = sup f'`` over ``[-2*c0, 2*c0]`` feed the time scales used by the
scalar flows, the field solver and the super/sub-solution construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import ConfigurationError, EvaluationError

ScalarMap = Callable[[np.ndarray], np.ndarray]

ZERO_TOL = 1e-12
ROOT_TOL = 1e-12


@dataclass(frozen=True)
class ReactionFunction:
    f: ScalarMap
    df: ScalarMap
    d2f: ScalarMap
    c0_bound: float = 1.5
    name: str = "custom"
    coefficients: tuple[float, ...] | None = None
    mu: float = field(default=np.nan)
    p_decay: float = field(default=np.nan)
    c_f: float = field(default=np.nan)
    growth_c: float = field(default=np.nan)
    growth_q: float = field(default=np.nan)

    @classmethod
    def from_maps(cls, f, df, d2f, c0_bound=1.5, name="custom",
                  coefficients=None, growth_q=None):
        """Build a reaction and fill in the derived constants."""
        proto = cls(f, df, d2f, c0_bound=float(c0_bound), name=name,
                    coefficients=coefficients)
        mu, p, c_f = constants(proto)
        if growth_q is None:
            growth_q = 2 * len(coefficients) - 1 if coefficients else 3.0
        u = _lattice(-2 * proto.c0_bound, 2 * proto.c0_bound, 1e-3)
        growth_c = float(np.max(np.abs(proto.f(u)) / (1 + np.abs(u) ** growth_q)))
        return cls(f, df, d2f, c0_bound=float(c0_bound), name=name,
                   coefficients=coefficients, mu=mu, p_decay=p, c_f=c_f,
                   growth_c=growth_c, growth_q=float(growth_q))

    def with_c0(self, c0_bound: float) -> "ReactionFunction":
        return ReactionFunction.from_maps(self.f, self.df, self.d2f, c0_bound,
                                          self.name, self.coefficients,
                                          self.growth_q)

    @property
    def band(self) -> float:
        """Half-width ``2*c0`` of the admissible initial-value band."""
        return 2.0 * self.c0_bound


def odd_polynomial(coefficients: Sequence[float], c0_bound: float = 1.5,
                   name: str | None = None) -> ReactionFunction:
    """Reaction ``f(u) = sum_k a_k u**(2k+1)`` from ``[a_0, a_1, ...]``."""
    coeffs = tuple(float(c) for c in coefficients)
    if not coeffs:
        raise ConfigurationError("empty coefficient list")
    full = np.zeros(2 * len(coeffs))
    full[1::2] = coeffs
    poly = np.polynomial.Polynomial(full)
    d1, d2 = poly.deriv(1), poly.deriv(2)

    def f(u):
        return poly(np.asarray(u, dtype=float))

    def df(u):
        return d1(np.asarray(u, dtype=float))

    def d2f(u):
        return d2(np.asarray(u, dtype=float))

    return ReactionFunction.from_maps(f, df, d2f, c0_bound,
                                      name or "odd_poly", coeffs)


def cubic(c0_bound: float = 1.5) -> ReactionFunction:
    """``f(u) = u - u**3``; mu = 1, p = 2."""
    return odd_polynomial([1.0, -1.0], c0_bound, name="cubic")


def steep(c0_bound: float = 1.5) -> ReactionFunction:
    """``f(u) = u (1 - u**2)(1 + 9 u**2)``; mu = 1, p = 20.

    The steep wells make the generation window
    ``alpha/mu + kappa/p < C1 < 1/mu`` non-empty for ``alpha > 1/2``,
    ``kappa > 1``, which the cubic cannot satisfy.
    """
    return odd_polynomial([1.0, 8.0, -9.0], c0_bound, name="steep")


REGISTRY = {"cubic": cubic, "steep": steep}


def reaction_from_config(cfg) -> ReactionFunction:
    """Accepts a name, or a mapping with ``name`` or ``odd_coefficients``."""
    if isinstance(cfg, str):
        cfg = {"name": cfg}
    c0 = float(cfg.get("c0", 1.5))
    if "odd_coefficients" in cfg:
        return odd_polynomial(cfg["odd_coefficients"], c0)
    name = cfg.get("name", "cubic")
    if name not in REGISTRY:
        raise ConfigurationError(f"unknown reaction {name!r}")
    return REGISTRY[name](c0)


def _lattice(lo, hi, step, extra=(-1.0, 0.0, 1.0)):
    n = int(round((hi - lo) / step))
    u = np.linspace(lo, hi, n + 1)
    pts = [e for e in extra if lo <= e <= hi]
    return np.unique(np.concatenate([u, pts]))


def constants(f: ReactionFunction) -> tuple[float, float, float]:
    """Return ``(mu, p_decay, c_f)``.

    ``c_f`` is the lattice maximum of ``f'`` on ``[-2c0, 2c0]`` refined by a
    golden-section search inside the neighbouring lattice cells.
    """
    mu = float(f.df(np.array(0.0)))
    p = float(-f.df(np.array(1.0)))
    lo, hi = -2 * f.c0_bound, 2 * f.c0_bound
    u = _lattice(lo, hi, 1e-3)
    d = f.df(u)
    i = int(np.argmax(d))
    best = float(d[i])
    if 0 < i < len(u) - 1:
        res = minimize_scalar(lambda v: -float(f.df(np.array(v))),
                              bracket=(u[i - 1], u[i], u[i + 1]),
                              method="golden", tol=1e-12)
        if -res.fun >= best and lo <= res.x <= hi:
            best = float(-res.fun)
    return mu, p, best


@dataclass
class ConditionResult:
    name: str
    passed: bool
    witness: float | None = None
    detail: str = ""


@dataclass
class ValidationReport:
    conditions: list[ConditionResult]

    @property
    def violations(self) -> list[ConditionResult]:
        return [c for c in self.conditions if not c.passed]

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.valid


def _find_roots(fn, u, vals):
    roots = list(u[vals == 0.0])
    sign = np.sign(vals)
    idx = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
    for i in idx:
        roots.append(brentq(lambda v: float(fn(np.array(v))), u[i], u[i + 1],
                            xtol=ROOT_TOL))
    return np.unique(np.round(np.array(roots, dtype=float), 12))


def validate_reaction(candidate: ReactionFunction,
                      lattice_step: float = 1e-3) -> ValidationReport:
    """Check the six structural conditions on a lattice.

    (i) only zeros -1, 0, 1; (ii) f'(+-1) = -p < 0, f'(0) = mu > 0;
    (iii) polynomial growth; (iv) f' bounded above; (v) oddness;
    (vi) f(u) <= -p (u - 1) for u >= 1.
    """
    if lattice_step <= 0:
        raise ValueError("lattice_step must be positive")
    c0 = candidate.c0_bound
    wide = _lattice(-2 * c0 - 1, 2 * c0 + 1, lattice_step)
    with np.errstate(all="ignore"):
        fw = candidate.f(wide)
        dfw = candidate.df(wide)
    bad = ~np.isfinite(fw) | ~np.isfinite(dfw)
    if bad.any():
        pt = float(wide[np.argmax(bad)])
        raise EvaluationError(f"non-finite reaction value at u={pt}", point=pt)

    u = wide[(wide >= -2 * c0) & (wide <= 2 * c0)]
    fu = candidate.f(u)
    dfu = candidate.df(u)
    out = []

    roots = _find_roots(candidate.f, u, fu)
    stray = [r for r in roots if min(abs(r - z) for z in (-1, 0, 1)) > 1e-9]
    at_zeros = [float(abs(candidate.f(np.array(z)))) for z in (-1.0, 0.0, 1.0)]
    missing = [z for z, v in zip((-1, 0, 1), at_zeros) if v > ZERO_TOL]
    ok = not stray and not missing
    out.append(ConditionResult(
        "i", ok, witness=(stray[0] if stray else (missing[0] if missing else None)),
        detail=f"roots={roots.tolist()}"))

    mu = float(candidate.df(np.array(0.0)))
    dp, dm = float(candidate.df(np.array(1.0))), float(candidate.df(np.array(-1.0)))
    ok = mu > 0 and dp < 0 and abs(dp - dm) <= 1e-12 * max(1.0, abs(dp))
    witness = None
    if mu <= 0:
        witness = 0.0
    elif not ok:
        witness = 1.0
    out.append(ConditionResult("ii", ok, witness,
                               f"f'(0)={mu}, f'(1)={dp}, f'(-1)={dm}"))

    q = candidate.growth_q if np.isfinite(candidate.growth_q) else 3.0
    c_growth = float(np.max(np.abs(fu) / (1 + np.abs(u) ** q)))
    out.append(ConditionResult("iii", bool(np.isfinite(c_growth)), None,
                               f"C={c_growth}, q={q}"))

    c_max = float(np.max(dfu))
    out.append(ConditionResult("iv", bool(np.isfinite(c_max) and c_max > 0),
                               None if c_max > 0 else float(u[np.argmax(dfu)]),
                               f"sup f'={c_max}"))

    odd_err = np.abs(candidate.f(-u) + fu)
    tol = 1e-12 * (1 + np.abs(fu))
    ok = bool(np.all(odd_err <= tol))
    out.append(ConditionResult("v", ok,
                               None if ok else float(u[np.argmax(odd_err - tol)]),
                               f"max |f(-u)+f(u)|={odd_err.max()}"))

    p = -dp
    right = wide[wide >= 1.0]
    excess = candidate.f(right) + p * (right - 1.0)
    ok = bool(np.all(excess <= 1e-12 * (1 + np.abs(candidate.f(right)))))
    out.append(ConditionResult("vi", ok,
                               None if ok else float(right[np.argmax(excess)]),
                               f"max f(u)+p(u-1)={excess.max()}"))
    return ValidationReport(out)
