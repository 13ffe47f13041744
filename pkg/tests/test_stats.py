import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from medvis.stats import betainc, paired_t_test, t_cdf, t_sf_two_sided

from . import oracles


@pytest.mark.parametrize("t,dof", [(0.5, 1), (1.0, 3), (2.3, 5), (-1.7, 9), (4.0, 29), (0.01, 2)])
def test_two_sided_p_matches_quadrature(t, dof):
    assert t_sf_two_sided(t, dof) == pytest.approx(oracles.t_two_sided_p(t, dof), rel=1e-10)


def test_cauchy_closed_form():
    # one degree of freedom is Cauchy: P(|T| >= 1) = 1/2
    assert t_sf_two_sided(1.0, 1) == pytest.approx(0.5, abs=1e-14)
    assert t_cdf(0.0, 7) == pytest.approx(0.5, abs=1e-14)


def test_betainc_endpoints():
    assert betainc(2.0, 3.0, 0.0) == 0.0
    assert betainc(2.0, 3.0, 1.0) == 1.0
    # I_x(1, 1) = x
    assert betainc(1.0, 1.0, 0.3) == pytest.approx(0.3, abs=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_paired_test_matches_oracle(seed):
    import numpy as np

    rng = np.random.default_rng(seed)
    a = rng.normal(0.8, 0.05, 12).tolist()
    b = (np.array(a) - rng.normal(0.01, 0.02, 12)).tolist()
    res = paired_t_test(a, b)
    t, p = oracles.paired_t_oracle(a, b)
    assert res.t == pytest.approx(t, rel=1e-10)
    assert res.p == pytest.approx(p, rel=1e-8)
    assert res.n == 12


def test_identical_samples_give_p_one():
    res = paired_t_test([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
    assert res.p == 1.0 and res.t == 0.0 and not res.degenerate


def test_constant_shift_is_degenerate():
    res = paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert res.degenerate and res.p == 0.0 and math.isinf(res.t)


def test_needs_two_pairs():
    with pytest.raises(ValueError):
        paired_t_test([1.0], [0.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [0.0])


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=10), st.integers(0, 1000))
def test_p_in_unit_interval_and_antisymmetric(a, seed):
    import numpy as np

    b = (np.array(a) + np.random.default_rng(seed).normal(0, 1, len(a))).tolist()
    ab, ba = paired_t_test(a, b), paired_t_test(b, a)
    assert 0.0 <= ab.p <= 1.0
    assert ab.p == pytest.approx(ba.p, abs=1e-12)
    assert ab.t == pytest.approx(-ba.t, rel=1e-12, abs=1e-12)
