from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import bisect

from polymer.kernels import (
    Kernel,
    KernelError,
    check_kernel_properties,
    envelopes,
    eval_f,
    eval_fprime,
    eval_fsecond,
    x_max,
)

BETAS = (0.1, 0.25, 0.5, 0.75, 0.9)
betas = st.floats(0.01, 0.99)


def dr(beta=0.5):
    return Kernel.durrett_rogers(beta)


def test_f_at_zero_and_one():
    assert eval_f(dr(), 0.0) == 0.0
    for b in BETAS:
        assert eval_f(dr(b), 1.0) == 0.5


def test_f_at_two_against_decimal():
    getcontext().prec = 40
    two = Decimal(2)
    expected = two / (1 + two * two.sqrt())
    assert eval_f(dr(0.5), 2.0) == pytest.approx(float(expected), rel=1e-15)
    assert float(expected) == pytest.approx(0.522408, abs=1e-6)


def test_zero_and_constant_kernels():
    assert eval_f(Kernel.zero(), 7.3) == 0.0
    assert eval_f(Kernel.constant(3.0), -2.0) == 3.0
    assert eval_fprime(Kernel.constant(3.0), 1.0) == 0.0


def test_nonneg_power_values():
    k = Kernel.nonneg_power(0.5)
    assert eval_f(k, 0.0) == 1.0
    assert eval_f(k, 3.0) == pytest.approx(0.5)
    assert eval_f(k, -3.0) == pytest.approx(0.5)


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.2, 1.5, float("nan")])
def test_beta_outside_unit_interval_rejected(beta):
    with pytest.raises(KernelError):
        Kernel.durrett_rogers(beta)
    with pytest.raises(KernelError):
        Kernel.nonneg_power(beta)


def test_fprime_values():
    assert eval_fprime(dr(0.3), 0.0) == 1.0
    # closed form at 0.5 for beta = 0.5
    p = 0.5**1.5
    assert eval_fprime(dr(0.5), 0.5) == pytest.approx((1 - 0.5 * p) / (1 + p) ** 2, rel=1e-15)
    h = 1e-6
    fd = (eval_f(dr(0.5), 0.5 + h) - eval_f(dr(0.5), 0.5 - h)) / (2 * h)
    assert abs(eval_fprime(dr(0.5), 0.5) - fd) <= 1e-8
    getcontext().prec = 40
    q = Decimal("0.5") ** Decimal("1.5")
    exact = (1 - Decimal("0.5") * q) / (1 + q) ** 2
    assert eval_fprime(dr(0.5), 0.5) == pytest.approx(float(exact), rel=1e-15)


@pytest.mark.parametrize("kernel", [dr(0.25), dr(0.5), dr(0.9), Kernel.nonneg_power(0.5)])
def test_fprime_matches_finite_differences(kernel):
    xs = np.linspace(-100.0, 100.0, 4001)
    xs = xs[np.abs(xs) > 1e-3]
    h = 1e-5
    fd = (eval_f(kernel, xs + h) - eval_f(kernel, xs - h)) / (2 * h)
    assert np.max(np.abs(eval_fprime(kernel, xs) - fd)) <= 1e-6


@pytest.mark.parametrize("kernel", [dr(0.25), dr(0.75), Kernel.nonneg_power(0.5)])
def test_fsecond_matches_finite_differences(kernel):
    xs = np.linspace(-50.0, 50.0, 2001)
    xs = xs[np.abs(xs) > 1e-2]
    h = 1e-5
    fd = (eval_fprime(kernel, xs + h) - eval_fprime(kernel, xs - h)) / (2 * h)
    assert np.max(np.abs(eval_fsecond(kernel, xs) - fd)) <= 1e-5


@pytest.mark.parametrize("beta", BETAS)
def test_lipschitz_constant_is_one_at_origin(beta):
    xs = np.linspace(-20, 20, 400001)
    d = np.abs(eval_fprime(dr(beta), xs))
    assert d.max() <= 1.0 + 1e-12
    assert xs[np.argmax(d)] == pytest.approx(0.0, abs=1e-9)


@given(betas, st.floats(-1e6, 1e6))
def test_odd_and_bounded(beta, x):
    k = dr(beta)
    assert eval_f(k, -x) == -eval_f(k, x)
    assert abs(eval_f(k, x)) <= 1.0


@given(betas, st.floats(-1e3, 1e3))
def test_nonneg_power_positive(beta, x):
    assert eval_f(Kernel.nonneg_power(beta), x) > 0.0


@pytest.mark.parametrize("beta, expected", [(0.5, 2 ** (2 / 3)), (0.25, 4**0.8)])
def test_x_max_against_bisection(beta, expected):
    k = dr(beta)
    root = bisect(lambda x: eval_fprime(k, x), 1.0, 4.0, xtol=1e-13)
    assert abs(x_max(k) - root) <= 1e-9
    assert x_max(k) == pytest.approx(expected, rel=1e-14)


@given(betas)
def test_x_max_at_least_one(beta):
    assert x_max(dr(beta)) >= 1.0


def test_x_max_needs_durrett_rogers():
    with pytest.raises(KernelError):
        x_max(Kernel.nonneg_power(0.5))


@pytest.mark.parametrize("beta", BETAS)
def test_all_five_properties(beta):
    rep = check_kernel_properties(dr(beta), 1e-3, -2.0, 50.0)
    assert [c.name for c in rep.checks] == [
        "sup_norm", "unimodal", "middle_not_below_ends", "fprime_ge_minus_f", "peak_below_power",
    ]
    assert rep.passed
    assert all(c.worst_margin >= 0.0 for c in rep.checks)


def test_spot_value_of_property_four():
    k = dr(0.5)
    # f'(-0.5) = f'(0.5) = 0.4493315... by evenness; -f(-0.5) = 0.3693980...
    assert eval_fprime(k, -0.5) == pytest.approx(0.4493315, abs=1e-7)
    assert -eval_f(k, -0.5) == pytest.approx(0.3693981, abs=1e-7)
    assert eval_fprime(k, -0.5) >= -eval_f(k, -0.5)


def test_property_checks_reject_other_kernels_and_bad_grids():
    with pytest.raises(KernelError):
        check_kernel_properties(Kernel.zero())
    with pytest.raises(KernelError):
        check_kernel_properties(dr(), grid_step=0.0)


@pytest.mark.parametrize("kernel", [dr(0.1), dr(0.5), dr(0.9), Kernel.nonneg_power(0.3)])
def test_envelopes_dominate_derivatives(kernel):
    env = envelopes(kernel)
    rng = np.random.default_rng(1)
    d = np.exp(rng.uniform(np.log(1e-5), np.log(1e8), 20000))
    lip = np.array([env.lookup(v)[0] for v in d])
    curv = np.array([env.lookup(v)[1] for v in d])
    # the envelope at d must bound |f'| and |f''| at every y with |y| >= d; sample y = d * (1 + u)
    y = d * (1.0 + rng.exponential(0.5, d.size))
    assert np.all(np.abs(eval_fprime(kernel, y)) <= lip)
    assert np.all(np.abs(eval_fsecond(kernel, y)) <= curv)
    assert np.all(np.diff(env.lip) <= 0.0) and np.all(np.diff(env.curv) <= 0.0)
