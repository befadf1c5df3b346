import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acsharp.errors import ConfigurationError, EvaluationError
from acsharp.reaction import (ReactionFunction, constants, cubic, odd_polynomial,
                              reaction_from_config, steep, validate_reaction)


def test_cubic_is_valid_with_expected_constants():
    f = cubic(2.0)
    rep = validate_reaction(f, 1e-3)
    assert rep.valid, rep.violations
    assert [c.name for c in rep.conditions] == ["i", "ii", "iii", "iv", "v", "vi"]
    mu, p, cf = constants(f)
    assert (mu, p) == pytest.approx((1.0, 2.0), abs=1e-14)
    assert cf == pytest.approx(1.0, abs=1e-10)


def test_scaled_cubic_constants():
    f = odd_polynomial([2.0, -2.0])
    assert constants(f) == pytest.approx((2.0, 4.0, 2.0), abs=1e-10)


def test_cf_with_small_band():
    assert constants(cubic(1.0))[2] == pytest.approx(1.0, abs=1e-10)


def test_flipped_sign_fails_ii():
    f = odd_polynomial([-1.0, 1.0])
    rep = validate_reaction(f)
    names = {c.name: c for c in rep.violations}
    assert "ii" in names
    assert names["ii"].witness == 0.0


def test_condition_vi_identity_for_cubic():
    f = cubic(2.0)
    assert float(f.f(np.array(2.0))) == -6.0
    u = np.arange(1.0, 4.0, 1e-3)
    # f(u) + 2(u - 1) = -(u - 1)^2 (u + 2)
    assert np.allclose(f.f(u) + 2 * (u - 1), -(u - 1) ** 2 * (u + 2), atol=1e-12)
    assert np.all(f.f(u) + 2 * (u - 1) <= 1e-12)


def test_stray_zero_detected():
    # u (1 - u^2) (4 - u^2) has extra zeros at +-2
    f = odd_polynomial([4.0, -5.0, 1.0], c0_bound=1.5)
    rep = validate_reaction(f)
    bad = {c.name: c for c in rep.violations}
    assert "i" in bad and abs(abs(bad["i"].witness) - 2.0) < 1e-6


def test_nonfinite_reaction_names_point():
    f = ReactionFunction.from_maps(lambda u: np.where(np.abs(u) > 3.5, np.nan, u - u ** 3),
                                   lambda u: 1 - 3 * u ** 2, lambda u: -6 * u, c0_bound=1.5)
    with pytest.raises(EvaluationError) as exc:
        validate_reaction(f)
    assert exc.value.point is not None and abs(exc.value.point) > 3.5


def test_steep_is_valid():
    f = steep(3.0)
    assert validate_reaction(f).valid
    mu, p, cf = constants(f)
    assert mu == pytest.approx(1.0) and p == pytest.approx(20.0)
    assert cf > 4


def test_validation_is_deterministic():
    a = validate_reaction(cubic(2.0))
    b = validate_reaction(cubic(2.0))
    assert a == b


def test_reaction_from_config():
    assert reaction_from_config("cubic").name == cubic().name
    assert reaction_from_config({"odd_coefficients": [2, -2]}).mu == pytest.approx(2.0)
    with pytest.raises(ConfigurationError):
        reaction_from_config({"name": "nope"})


def test_oddness_quadrature():
    f = cubic(2.0)
    u = np.linspace(-1, 1, 2001)
    assert abs(np.trapezoid(f.f(u), u)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(-6.0, 6.0))
def test_growth_bound(u):
    f = cubic(3.0)
    assert abs(float(f.f(np.array(u)))) <= f.growth_c * (1 + abs(u) ** f.growth_q) + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 5.0))
def test_scaling_of_constants(s):
    mu, p, cf = constants(odd_polynomial([s, -s]))
    assert mu == pytest.approx(s) and p == pytest.approx(2 * s) and cf == pytest.approx(s, rel=1e-9)
