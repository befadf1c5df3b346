import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acsharp.errors import BlowUpError, ConfigurationError, InitialConditionError, StepSizeError
from acsharp.field_solver import (FieldGrid, FieldState, boundedness_monitor, build_initial, evolve,
                                  mollified_vs_raw_gap, read_binary, read_ndjson)
from acsharp.noise import build_kernel, mollify, sample_path
from acsharp.reaction import ReactionFunction, cubic
from acsharp.scalar_dynamics import flow_ode


@pytest.fixture(scope="module")
def kern():
    return build_kernel({"kind": "bump_pair"})


def zero_reaction():
    z = lambda u: 0.0 * u  # noqa: E731
    return ReactionFunction.from_maps(z, z, z, c0_bound=2.0, name="zero")


def test_heat_equation_preserves_constants():
    g = FieldGrid(1, -2, 2, 101, "neumann")
    st_ = FieldState(g, np.full(g.shape, 0.7), eps=0.1, gamma=1.0)
    tr = evolve(st_, zero_reaction(), None, 0.5, 0.01)
    assert np.max(np.abs(tr.final.u - 0.7)) <= 1e-13


@pytest.mark.parametrize("dim,n", [(1, 201), (2, 33)])
def test_space_homogeneous_reduction(dim, n):
    f = cubic(1.5)
    g = FieldGrid(dim, -2, 2, n, "neumann")
    eps = 0.05
    dt = 1e-3 * eps
    H = 200 * dt
    tr = evolve(FieldState(g, np.full(g.shape, 0.5), eps=eps, gamma=1.0), f, None, H, dt,
                checkpoint_times=[0.0, H / 2, H])
    ode = flow_ode(f, 0.5, H / eps, step=dt / eps)
    assert np.max(np.abs(tr.u[-1] - ode.values[-1])) <= 1e-6
    assert np.max(np.abs(tr.u[1] - ode.values[100])) <= 1e-6


def test_standing_wave_is_stationary():
    f = cubic(3.0)
    eps = 0.01
    g = FieldGrid(1, -10, 10, 2048)
    u0 = np.tanh((g.axis - 0.3) / math.sqrt(2 * eps))
    dt = 0.01 * eps
    tr = evolve(FieldState(g, u0, eps=eps, gamma=1.0), f, None, eps, dt)
    assert np.max(np.abs(tr.final.u - u0)) <= 1e-2


def test_step_size_guard():
    g = FieldGrid(1, -2, 2, 21, "neumann")
    with pytest.raises(StepSizeError):
        evolve(FieldState(g, np.zeros(g.shape), eps=0.01, gamma=1.0), cubic(), None, 0.01, 0.01)


def test_tanh_initial_profile():
    g = FieldGrid(1, -10, 10, 2048)
    ini = build_initial({"kind": "tanh"}, g, c0_bound=3.0)
    assert abs(ini.zero) < 1e-12
    assert ini.norms["sum"] < 3.0
    with pytest.raises(InitialConditionError, match="sup\\|u0''\\|"):
        build_initial({"kind": "tanh"}, g, c0_bound=1.5)


def test_shifted_zero():
    g = FieldGrid(1, -10, 10, 2048)
    assert build_initial({"kind": "tanh", "shift": 0.3}, g, 3.0).zero == pytest.approx(0.3, abs=1e-12)


def test_oscillating_profile_rejected():
    g = FieldGrid(1, -10, 10, 2048)
    with pytest.raises(InitialConditionError):
        build_initial({"kind": "sin", "scale": 3.0}, g, c0_bound=20.0)
    with pytest.raises(InitialConditionError):
        build_initial({"kind": "sin", "scale": 6.0}, g, c0_bound=100.0)


def test_envelopes_order():
    g = FieldGrid(2, -2, 2, 65, "neumann")
    ini = build_initial({"kind": "cosine"}, g, c0_bound=4.0)
    assert np.all(ini.u0_minus <= ini.u0) and np.all(ini.u0 <= ini.u0_plus)


def test_zero_noise_never_hits():
    f = cubic(1.5)
    g = FieldGrid(1, -10, 10, 1024)
    ini = build_initial({"kind": "tanh", "scale": 0.25}, g, 1.5)
    tr = evolve(ini.state(0.05, 1.0), f, None, 0.1, 0.005)
    assert boundedness_monitor(tr, 1.5)["tau1"] == math.inf


def test_large_gamma_no_hits(kern):
    f = cubic(1.5)
    g = FieldGrid(1, -10, 10, 512)
    ini = build_initial({"kind": "tanh", "scale": 0.25}, g, 1.5)
    eps, dt = 0.05, 0.005
    st_ = ini.state(eps, 3.0)
    st_.u = np.broadcast_to(st_.u, (100,) + g.shape).copy()
    path = sample_path(kern, dt * np.arange(21), g.points(), seed=1, n_paths=100)
    tr = evolve(st_, f, path, 0.1, dt, raise_on_blowup=False)
    assert np.mean(np.isfinite(boundedness_monitor(tr, 1.5)["tau1"])) == 0.0


def test_adversarial_noise_fires_monitor(kern):
    f = cubic(1.5)
    g = FieldGrid(1, -10, 10, 512)
    ini = build_initial({"kind": "tanh", "scale": 0.25}, g, 1.5)
    eps, dt = 0.05, 0.005
    path = sample_path(kern.scaled(1e6), dt * np.arange(21), g.points(), seed=2)
    tr = evolve(ini.state(eps, 0.0), f, path, 0.1, dt, raise_on_blowup=False)
    tau1 = boundedness_monitor(tr, 1.5)["tau1"]
    assert 0 < tau1 <= 0.1
    with pytest.raises(BlowUpError) as exc:
        evolve(ini.state(eps, 0.0), f, path, 0.1, dt)
    assert exc.value.step >= 1


def test_noise_grid_mismatch(kern):
    g = FieldGrid(1, -10, 10, 64)
    path = sample_path(kern, [0, 0.01], np.linspace(-1, 1, 5), seed=0)
    with pytest.raises(ConfigurationError):
        evolve(FieldState(g, np.zeros(g.shape), eps=0.1, gamma=1.0), cubic(), path, 0.01, 0.01)


@settings(max_examples=10, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(0.0, 0.3))
def test_discrete_comparison(shift, gap):
    f = cubic(1.5)
    g = FieldGrid(1, -4, 4, 129, "neumann")
    ua = 0.9 * np.tanh(g.axis - shift)
    ub = np.minimum(ua + gap, 1.2)
    eps, dt = 0.1, 0.01
    ta = evolve(FieldState(g, ua, eps=eps, gamma=1.0), f, None, 0.2, dt, checkpoint_times=[0.05, 0.1, 0.2])
    tb = evolve(FieldState(g, ub, eps=eps, gamma=1.0), f, None, 0.2, dt, checkpoint_times=[0.05, 0.1, 0.2])
    assert np.all(ta.u <= tb.u + 1e-9)


def test_convergence_under_refinement():
    f = cubic(1.5)
    eps, T = 0.1, 0.1

    def run(n, dt):
        g = FieldGrid(1, -2, 2, n, "neumann")
        u0 = 0.8 * np.tanh(2 * g.axis) + 0.1
        return evolve(FieldState(g, u0, eps=eps, gamma=1.0), f, None, T, dt).final.u

    ref = run(64 * 16 + 1, 0.004 / 16)
    errs = []
    for k in range(3):
        n = 64 * 2 ** k + 1
        u = run(n, 0.004 / 2 ** k)
        stride = (64 * 16) // (n - 1)
        errs.append(np.sqrt(np.mean((u - ref[::stride]) ** 2)))
    assert errs[0] / errs[1] >= 1.7 and errs[1] / errs[2] >= 1.7


def test_mollified_gap_shrinks(kern):
    f = cubic(1.5)
    g = FieldGrid(1, -10, 10, 256)
    ini = build_initial({"kind": "tanh", "scale": 0.25}, g, 1.5)
    eps, dt = 0.05, 0.005
    path = sample_path(kern, dt * np.arange(21), g.points(), seed=3)
    raw = evolve(ini.state(eps, 0.5), f, path, 0.1, dt, checkpoint_times=[0.05, 0.1])
    gaps = []
    for delta in (1e-2, 1e-3, 1e-4):
        mol = evolve(ini.state(eps, 0.5), f, mollify(path, delta), 0.1, dt,
                     checkpoint_times=[0.05, 0.1], variant="mollified")
        gaps.append(float(np.max(mollified_vs_raw_gap(raw, mol))))
    assert gaps[0] >= gaps[1] >= gaps[2]
    assert gaps[2] < 1e-3


def test_gap_rejects_mismatched_runs():
    f = cubic(1.5)
    g = FieldGrid(1, -2, 2, 33, "neumann")
    a = evolve(FieldState(g, np.zeros(g.shape), eps=0.1, gamma=1.0), f, None, 0.02, 0.01)
    b = evolve(FieldState(g, np.zeros(g.shape), eps=0.1, gamma=1.0), f, None, 0.02, 0.005)
    with pytest.raises(ConfigurationError):
        mollified_vs_raw_gap(a, b)


def test_checkpoint_io(tmp_path):
    f = cubic(1.5)
    g1 = FieldGrid(1, -2, 2, 17, "neumann")
    tr = evolve(FieldState(g1, np.linspace(-1, 1, 17), eps=0.1, gamma=1.0), f, None, 0.02, 0.01,
                checkpoint_times=[0, 0.01, 0.02])
    buf = io.StringIO()
    tr.write_ndjson(buf)
    t, u = read_ndjson(io.StringIO(buf.getvalue()))
    assert np.array_equal(t, tr.times) and np.array_equal(u, tr.u)
    g2 = FieldGrid(2, -2, 2, 9, "neumann")
    tr2 = evolve(FieldState(g2, np.zeros(g2.shape), eps=0.1, gamma=1.0), f, None, 0.02, 0.01)
    with pytest.raises(ConfigurationError):
        tr2.write_ndjson(io.StringIO())
    tr2.write_binary(tmp_path / "ck.bin")
    header, data = read_binary(tmp_path / "ck.bin")
    assert header["grid"]["dim"] == 2 and np.array_equal(data, tr2.u)
