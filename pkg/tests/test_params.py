import math
from fractions import Fraction

import mpmath as mp
import pytest
from hypothesis import given, settings, strategies as st

from ciforge.params import (
    CHAIN_NAMES,
    DomainError,
    ParameterOverflowError,
    SchemeParams,
    a_threshold,
    chain_a0,
    check_chain,
    dimension_bounds,
    gamma_max,
    infimum_closed_form,
    infimum_scan,
    prelimit_box_dimension,
    scales,
    validate,
)


def example1(a=1e6):
    b = 1.1
    g = 0.9 * (b - 1) * (1 - 0.25 - 2 * 0.25 * b) / (b + 1)
    return SchemeParams(beta=0.25, b=b, gamma=g, alpha=1e-4, a=a, T=1.0)


def exact_invariants(beta, b, gamma, alpha):
    """Independent exact-rational evaluation of the parameter invariants."""
    be, bb, g, al = (Fraction(x) for x in (beta, b, gamma, alpha))
    return {
        "β<1/3": 0 < be < Fraction(1, 3),
        "b<(1-β)/(2β)": 1 < bb < (1 - be) / (2 * be),
        "γ<(b-1)(1-β-2βb)/(b+1)": 0 < g < (bb - 1) * (1 - be - 2 * be * bb) / (bb + 1),
        "closing": -be * bb - be + 1 + g - bb + 5 * al * bb < -2 * be * bb**2 - g * bb - 3 * al * bb,
        "6αb": 6 * al * bb <= (bb - 1) * (1 - be),
    }


def test_validate_example1_all_invariants_pass():
    p = example1()
    oracle = exact_invariants(p.beta, p.b, p.gamma, p.alpha)
    assert all(oracle.values())
    rep = validate(p)
    assert rep.passed
    assert all(c.passed for c in rep.invariants)
    # a-floor entries exist and are classified separately from invariants.
    assert {c.kind for c in rep.a_floor} == {"a-floor"}


def test_validate_a_floor_reports_threshold():
    rep = validate(example1(), with_a0=True)
    c = rep.by_name("10π·a^(-γ)<1")
    assert not c.passed
    # 10 pi a^-gamma = 1 at a = (10 pi)^(1/gamma).
    expected = (10 * math.pi) ** (1 / example1().gamma)
    assert c.a0 == pytest.approx(expected, rel=1e-6)


def test_validate_beta_third_fails():
    rep = validate(SchemeParams(beta=1 / 3, b=1.2, gamma=0.01, alpha=1e-4, a=2))
    assert not rep.passed
    assert "β<1/3" in rep.failures()


def test_validate_b_too_large():
    rep = validate(SchemeParams(beta=0.25, b=2.0, gamma=0.01, alpha=1e-4, a=2))
    c = rep.by_name("b<(1-β)/(2β)")
    assert c.rhs == pytest.approx(1.5)
    assert not c.passed


@settings(max_examples=60, deadline=None)
@given(
    beta=st.fractions(Fraction(1, 100), Fraction(33, 100)),
    b=st.fractions(Fraction(101, 100), Fraction(4)),
    u=st.fractions(Fraction(1, 100), Fraction(99, 100)),
    alpha=st.fractions(Fraction(1, 10**6), Fraction(1, 100)),
)
def test_validate_agrees_with_exact_oracle(beta, b, u, alpha):
    gm = (b - 1) * (1 - beta - 2 * beta * b) / (b + 1)
    gamma = u * abs(gm) if gm != 0 else u
    oracle = exact_invariants(beta, b, gamma, alpha)
    rep = validate(SchemeParams(float(beta), float(b), float(gamma), float(alpha), 2.0))
    # Skip cases within float rounding of a boundary.
    assume_margin = min(abs(c.slack) for c in rep.invariants)
    if assume_margin < 1e-12:
        return
    assert rep.passed == all(oracle.values())


def test_scales_lambda_example():
    p = SchemeParams(beta=0.25, b=2, gamma=0.01, alpha=1e-4, a=3)
    assert float(scales(p, 1).lambda_q) == pytest.approx(18 * math.pi, rel=1e-15)


def test_scales_delta_example():
    p = SchemeParams(beta=0.25, b=2, gamma=0.01, alpha=1e-4, a=3)
    assert float(scales(p, 0).delta_q) == pytest.approx((6 * math.pi) ** -0.5, rel=1e-15)


def test_scales_tau0():
    p = SchemeParams(beta=0.25, b=2, gamma=0.01, alpha=1e-4, a=3, T=15)
    assert scales(p, 0).tau_q == 1


def test_scales_hand_formulas_q1():
    p = SchemeParams(beta=0.05, b=1.5, gamma=0.15, alpha=1e-4, a=2, T=3.0)
    l0, l1 = 4 * math.pi, 6 * math.pi
    d0, d1, d2 = l0**-0.1, l1**-0.1, (2 * math.pi * math.ceil(2**2.25)) ** -0.1
    th1 = 1 / (d0**0.5 * l0 ** (1 + 3e-4))
    s1 = scales(p, 1)
    assert float(s1.theta_q) == pytest.approx(th1, rel=1e-13)
    assert float(s1.tau_q) == pytest.approx(l0**-0.15 * th1, rel=1e-13)
    assert float(s1.ell_q) == pytest.approx(d2**0.5 / (d1**0.5 * l1 ** (1 + 0.075 + 1.5e-4)), rel=1e-13)
    assert "ceil" in s1.formulas["lambda"]


def test_scales_extended_precision_large_a():
    p = SchemeParams(beta=0.25, b=1.1, gamma=0.008, alpha=1e-4, a=1e80)
    s = scales(p, 4)
    assert mp.log10(s.lambda_q) > 80 * 1.1**4
    with pytest.raises(ParameterOverflowError):
        scales(SchemeParams(0.1, 3.0, 0.01, 1e-4, 1e300), 15)


@pytest.mark.parametrize("a", [2.0, 10.0, 1e3, 1e8])
def test_scales_monotone(a):
    p = SchemeParams(beta=0.1, b=1.5, gamma=0.1, alpha=1e-4, a=a)
    ss = [scales(p, q) for q in range(4)]
    for s0, s1 in zip(ss, ss[1:]):
        assert s1.lambda_q > s0.lambda_q
        assert s1.delta_q < s0.delta_q
    for q in range(1, 3):
        assert ss[q + 1].tau_q < ss[q].tau_q


def test_theta_tau_ordering_for_large_a():
    p = example1(a=1e200)
    for q in range(1, 4):
        s, s1 = scales(p, q), scales(p, q + 1)
        assert s1.theta_q < s.tau_q < s.theta_q


def test_check_chain_structure():
    rep = check_chain(SchemeParams(0.05, 1.5, 0.15, 1e-4, 2.0, 3.0), 0)
    names = [c.name for c in rep.checks]
    assert sorted(names) == sorted(CHAIN_NAMES)
    assert len(set(names)) == len(names)


def test_check_chain_bisection_threshold():
    p = example1()
    a0 = chain_a0(p, 0)
    assert a0 is not None and a0 > 1e6
    import dataclasses

    assert check_chain(dataclasses.replace(p, a=a0 * 1.01), 0).passed
    assert not check_chain(dataclasses.replace(p, a=a0 / 1.01), 0).passed


def test_check_chain_alpha_too_large_fails_closing():
    p = example1()
    import dataclasses

    p = dataclasses.replace(p, alpha=(p.b - 1) * (1 - p.beta) / (5 * p.b))
    name = CHAIN_NAMES[-1]
    for a in (1e6, 1e50, 1e150):
        assert not check_chain(dataclasses.replace(p, a=a), 0).by_name(name).passed
    assert a_threshold(p, lambda x: check_chain(x, 0).by_name(name).passed, log10_a_max=200) is None


def test_dimension_bounds_boundaries():
    assert dimension_bounds(1 / 3, 1.1, 0.0, 0.0)["lower_bound"] == pytest.approx(1.0, abs=1e-15)
    assert dimension_bounds(1 / 3, 1.1, 0.0, 0.0)["theorem_bound"] == pytest.approx(1.0, abs=1e-15)
    assert dimension_bounds(0.25, 1.1, 0.001, 0.0)["theorem_bound"] == pytest.approx(5 / 6, abs=1e-15)
    with pytest.raises(DomainError):
        dimension_bounds(0.4, 1.1, 0.01, 0.0)
    with pytest.raises(DomainError):
        dimension_bounds(0.0, 1.1, 0.01, 0.0)


@pytest.mark.parametrize("beta", [0.02, 0.1, 0.2, 0.3])
@pytest.mark.parametrize("b_frac", [0.1, 0.5, 0.9])
def test_box_bound_in_unit_interval(beta, b_frac):
    b = 1 + b_frac * ((1 - beta) / (2 * beta) - 1)
    g = 0.5 * gamma_max(beta, b)
    v = dimension_bounds(beta, b, g, 1e-6)["box_dim_bound"]
    assert 0 < v < 1


def test_infimum_scan_five_sixths():
    r = infimum_scan(0.25)
    assert abs(r["value"] - 5 / 6) <= 1e-3


@pytest.mark.parametrize("beta", [0.01 + 0.032 * i for i in range(10)])
def test_infimum_scan_matches_closed_form(beta):
    assert abs(infimum_scan(beta)["value"] - (0.5 + 0.5 * 2 * beta / (1 - beta))) <= 1e-3
    assert infimum_closed_form(beta) == pytest.approx(0.5 + beta / (1 - beta))


def test_prelimit_box_dimension_finite():
    p = SchemeParams(0.05, 1.5, 0.15, 1e-4, 2.0, 3.0)
    assert math.isfinite(prelimit_box_dimension(p, 2))
