import math

import numpy as np
import pytest

from acsharp.errors import ParameterError, PreconditionError, ResolutionError, StepSizeError
from acsharp.noise import NoisePath, build_kernel, mollify, sample_derivative_path, sample_path
from acsharp.reaction import cubic, steep
from acsharp.scalar_dynamics import (cubic_closed_form, fit_c5, flow_mollified, flow_ode, flow_sde,
                                     ode_generation_time, ode_initial_stability,
                                     spatial_derivative_bounds, xi_derivative, xi_lattice)


@pytest.fixture(scope="module")
def f():
    return cubic(1.5)


@pytest.fixture(scope="module")
def kern():
    return build_kernel({"kind": "bump_pair"})


def test_zero_is_equilibrium_with_exponential_derivative(f):
    tr = flow_ode(f, 0.0, 5.0)
    assert np.all(tr.values == 0)
    assert np.allclose(tr.y_xi, np.exp(tr.tau_grid), rtol=1e-12)


def test_closed_form_value(f):
    tr = flow_ode(f, 0.5, 2.0, step=1e-4)
    assert tr.values[-1] == pytest.approx(0.97361, abs=5e-6)
    assert abs(tr.values[-1] - float(cubic_closed_form(2.0, 0.5))) < 1e-12


def test_closed_form_over_lattice(f):
    xis = xi_lattice(0.01, 0.6, f.c0_bound)
    tr = flow_ode(f, xis, 10.0)
    exact = cubic_closed_form(tr.tau_grid[:, None], xis[None])
    assert np.max(np.abs(tr.values - exact)) <= 1e-8


def test_stable_zero_is_fixed(f):
    tr = flow_ode(f, 1.0, 10.0)
    assert np.all(tr.values == 1.0)


def test_step_precondition(f):
    with pytest.raises(PreconditionError):
        flow_ode(f, 0.5, 1.0, step=0.01)


def test_generation_time_parameter_errors(f):
    with pytest.raises(ParameterError):
        ode_generation_time(f, 0.6, 1.1, 0.01)
    with pytest.raises(ParameterError):
        ode_generation_time(f, 0.51, 0.52, 0.01)


def test_generation_time_steep():
    g = ode_generation_time(steep(), 0.51, 1.01, 1e-3, c1=0.7)
    assert g.check
    lo, hi = g.interval
    assert lo < 0.7 < hi


def test_initial_stability(f):
    eps, beta, alpha = 0.01, 0.3, 0.51
    delta = 2 * alpha * f.c_f / f.mu
    shift = eps ** (beta + delta)
    tr = flow_ode(f, np.array([1.0, 1.0 + shift]), 10.0)
    gap = tr.values[:, 1] - tr.values[:, 0]
    assert gap[0] == pytest.approx(shift, rel=1e-12)
    assert np.all(np.diff(gap) <= 0)
    ratios = [ode_initial_stability(f, 0.5, alpha, beta, delta, 3 * abs(math.log(e)), e) / e ** beta
              for e in (0.04, 0.02, 0.01)]
    assert max(ratios) <= 1


def test_initial_stability_precondition(f):
    with pytest.raises(PreconditionError):
        ode_initial_stability(f, 0.0, 0.51, 0.3, 1.02, 5.0, 0.01)


def test_vanishing_noise_equals_ode(f, kern):
    ode = flow_ode(f, 0.3, 3.0)
    sde = flow_sde(f, kern, 0.3, 0.1, 0.01, 400.0, 3.0, step=1e-3, seed=4)
    assert np.max(np.abs(sde.values - ode.values)) <= 1e-10


def test_seed_reproducibility(f, kern):
    a = flow_sde(f, kern, 0.0, 0.2, 0.05, 1.0, 2.0, seed=17)
    b = flow_sde(f, kern, 0.0, 0.2, 0.05, 1.0, 2.0, seed=17)
    assert np.array_equal(a.values, b.values)


def test_step_size_error(f, kern):
    with pytest.raises(StepSizeError):
        flow_sde(f, kern, 0.0, 0.0, 0.05, 1.0, 1.0, step=0.2, seed=1)


def test_linearised_variance(f, kern):
    eps, gamma, xi, x = 0.01, 1.0, 0.3, 0.0
    step = 1e-3
    tr = flow_sde(f, kern, xi, x, eps, gamma, 1.0, step, seed=99, n_paths=10_000, store=False)
    ode = flow_ode(f, xi, 1.0, step)
    dev = tr.final - ode.values[-1]
    g = ode.y_xi[-1] / ode.y_xi
    q = float(kern.q(np.array([x]), np.array([x]))[0, 0])
    predicted = eps ** (2 * gamma + 1) * q * np.trapezoid(g ** 2, ode.tau_grid)
    assert abs(dev.var() / predicted - 1) < 0.2


def test_y_xi_finite_difference(f):
    h = 1e-5
    xi = np.array([0.2 - h, 0.2, 0.2 + h])
    tr = flow_ode(f, xi, 4.0)
    fd = (tr.values[:, 2] - tr.values[:, 0]) / (2 * h)
    assert np.max(np.abs(fd / tr.y_xi[:, 1] - 1)) <= 1e-3
    lfd = (np.log(tr.y_xi[:, 2]) - np.log(tr.y_xi[:, 0])) / (2 * h)
    sel = tr.tau_grid > 0.1
    assert np.max(np.abs(lfd[sel] / tr.a_ratio[sel, 1] - 1)) <= 1e-2
    assert tr.y_xi[0, 1] == 1.0 and tr.a_ratio[0, 1] == 0.0
    yx, a = xi_derivative(tr, f)
    assert np.allclose(yx, tr.y_xi, rtol=1e-12) and np.allclose(a, tr.a_ratio, atol=1e-12)


def test_y_xi_positive_on_noisy_paths(f, kern):
    tr = flow_sde(f, kern, xi_lattice(0.02, 0.6, f.c0_bound, 16), 0.3, 0.02, 1.0, 4.0, seed=3, n_paths=5)
    assert np.all(tr.y_xi > 0)


def test_mollified_zero_path_equals_ode(f):
    t = np.linspace(0, 0.1, 1001)
    zero = NoisePath(t, np.array([[0.0]]), np.zeros((1000, 1)))
    m = mollify(zero, 1e-3)
    tr = flow_mollified(f, m, 0.4, 0.0, 0.05, 1.0, 2.0, step=1e-3)
    assert np.max(np.abs(tr.values - flow_ode(f, 0.4, 2.0).values)) <= 1e-12


@pytest.mark.parametrize("delta", [1e-2, 1e-3])
def test_mollified_gronwall_envelope(f, kern, delta):
    eps, gamma, c1 = 0.02, 1.0, 0.5
    tau_end = c1 * abs(math.log(eps))
    step = 1e-3
    n = int(round(tau_end / step))
    tau_end = n * step
    path = sample_path(kern, eps * step * np.arange(n + 1), np.array([0.0]), seed=5, n_paths=20)
    m = mollify(path, delta)
    xis = xi_lattice(eps, 0.6, f.c0_bound, 16)
    raw = flow_sde(f, None, xis, 0.0, eps, gamma, tau_end, step, path=path)
    mol = flow_mollified(f, m, xis, 0.0, eps, gamma, tau_end, step)
    gap = np.abs(mol.values - raw.values).max(axis=(0, 2))
    assert np.all(gap <= eps ** (gamma - f.c_f * c1) * delta)


def test_a_ratio_bound_constant_is_stable(f, kern):
    c5 = []
    for eps in (0.04, 0.02):
        tau_end = abs(math.log(eps))
        tr = flow_sde(f, kern, xi_lattice(eps, 0.6, f.c0_bound, 32), 0.0, eps, 1.0, tau_end,
                      0.005, seed=8, n_paths=10)
        c5.append(fit_c5(tr, f.mu))
    assert all(np.isfinite(c5))
    assert 0.5 < c5[1] / c5[0] < 2.0


def test_spatial_bounds_zero_noise(f, kern):
    x = np.linspace(-0.9, 0.9, 19)
    tr = flow_sde(f, kern, 0.3, x, 0.02, 400.0, 2.0, 0.005, seed=1)
    assert spatial_derivative_bounds(tr) == (0.0, 0.0, 0.0)


def test_spatial_bounds_constant_kernel(f):
    def ind(p):
        return (np.abs(p[:, 0]) <= 1.5).astype(float)
    k = build_kernel({"kind": "callable", "q": lambda a, b: np.outer(ind(a), ind(b)),
                      "support_radius": 2.0})
    x = np.linspace(-0.9, 0.9, 19)
    tr = flow_sde(f, k, 0.3, x, 0.02, 0.5, 2.0, 0.005, seed=2)
    # only the Cholesky jitter distinguishes the points
    yx, _, _ = spatial_derivative_bounds(tr, support_radius=2.0)
    assert yx <= 1e-5


def test_spatial_bounds_resolution(f, kern):
    tr = flow_sde(f, kern, 0.3, np.linspace(-0.9, 0.9, 5), 0.02, 1.0, 1.0, 0.005, seed=1)
    with pytest.raises(ResolutionError):
        spatial_derivative_bounds(tr)


@pytest.mark.slow
def test_spatial_derivative_scaling(f, kern):
    gamma, c1, alpha = 1.0, 0.5, 0.6
    x = np.linspace(-0.9, 0.9, 19)
    sups = []
    eps_list = (0.04, 0.02, 0.01)
    for eps in eps_list:
        tau_end = c1 * abs(math.log(eps))
        tr = flow_sde(f, kern, xi_lattice(eps, alpha, f.c0_bound, 16), x, eps, gamma, tau_end,
                      0.005, seed=21, n_paths=200)
        per_path = [spatial_derivative_bounds(type(tr)(tr.tau_grid, tr.xi, tr.x, tr.values[:, p],
                                                       tr.y_xi[:, p], tr.a_ratio[:, p]))[0]
                    for p in range(200)]
        sups.append(np.median(per_path))
    slope = np.polyfit(np.log(eps_list), np.log(sups), 1)[0]
    predicted = gamma + 0.5 - f.c_f * c1
    assert abs(slope - predicted) <= 0.25 * predicted


def test_derivative_noise_drives_z(f, kern):
    tr = flow_sde(f, kern, 0.2, 0.3, 0.05, 1.0, 1.0, 0.005, seed=4, with_z=True)
    assert set(tr.z) == {0}
    assert np.isfinite(tr.z[0]).all()
    path = sample_derivative_path(kern, 0.05 * tr.tau_grid, np.array([0.3]), 0, seed=4)
    assert path.derivative_increments is not None
