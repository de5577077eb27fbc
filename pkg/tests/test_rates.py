import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edglab.rates import (KernelSpec, RateSequence as R, eval_rate, kernel_from_dict,
                          validate_hypotheses)

from conftest import product_kernels, sum_kernels


def test_eval_rate_product_example():
    k = KernelSpec.product(R.constant(1), R.linear(1))
    assert eval_rate(k, 3, 5) == 3.0


def test_eval_rate_zero_cluster_exports_nothing():
    k = KernelSpec.sum(R.constant(1), R.linear(1), eps=0.1)
    assert eval_rate(k, 0, 7) == 0.0


def test_eval_rate_sum_example():
    k = KernelSpec.sum(R.constant(1), R.linear(1), R.constant(1), R.constant(1), eps=0.1)
    assert eval_rate(k, 2, 4) == pytest.approx(4.1, abs=1e-15)


def test_eval_rate_rejects_negative_index():
    with pytest.raises(ValueError):
        eval_rate(KernelSpec.product(R.constant(1), R.constant(1)), -1, 0)


def test_index_overflow():
    with pytest.raises(OverflowError):
        R.linear(1).evaluate(2**60)


@given(st.one_of(product_kernels(), sum_kernels()), st.integers(0, 200), st.integers(0, 200))
def test_eval_rate_nonnegative_and_zero_row(k, j, m):
    v = eval_rate(k, j, m)
    assert v >= 0 and math.isfinite(v)
    assert eval_rate(k, 0, m) == 0.0
    assert eval_rate(k, j, m) == v  # deterministic


@given(product_kernels(), st.integers(1, 100), st.integers(0, 100))
def test_product_separability(k, j, m):
    k11 = eval_rate(k, 1, 1)
    assert eval_rate(k, j, m) == pytest.approx(eval_rate(k, j, 1) * eval_rate(k, 1, m) / k11,
                                               rel=1e-12)


def test_telescoping_products():
    b = R.telescoping(4).evaluate(np.arange(1, 51), start=1)
    assert np.allclose(np.cumprod(b), np.arange(1, 51.0) ** 4, rtol=1e-12)


def test_log_corrected_avoids_singularity():
    assert R.log_corrected(1).evaluate(1) == pytest.approx(1 / math.log(1 + math.e))
    assert R.log_corrected(1).evaluate(0) == 0.0


def test_table_extensions():
    assert R.table([1.3, 0.7], "periodic").evaluate(np.arange(5)).tolist() == [1.3, 0.7, 1.3, 0.7, 1.3]
    assert R.table([1, 2], "constant").evaluate(10) == 2
    assert R.table([1, 2], "power").evaluate(9) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        R.from_dict({"kind": "table", "values": [1, 2]})


def test_rate_sequence_rejects_negative_values():
    with pytest.raises(ValueError):
        R.constant(-1.0)


def test_kernel_roundtrip():
    k = KernelSpec.sum(R.table([1.3, 0.7], "periodic"), R.linear(1), eps=0.05, lam=0.5)
    assert kernel_from_dict(k.to_dict()) == k


def test_declared_bounds_checked():
    k = KernelSpec.product(R.constant(1), R.linear(1), declared={"a_min": 2.0})
    with pytest.raises(ValueError):
        k.bounds(20)
    KernelSpec.product(R.constant(1), R.linear(1), declared={"a_min": 1.0}).bounds(20)


def test_h1_examples():
    ok = validate_hypotheses(KernelSpec.product(R.constant(1), R.linear(1)), 1000, ["H1"])
    assert ok.passed("H1")
    bad = validate_hypotheses(KernelSpec.product(R.constant(1), R.constant(1)), 1000, ["H1"])
    assert not bad.passed("H1")
    assert bad["H1"].witness is not None


def test_h3_h4_example_bounds_by_scan():
    k = KernelSpec.sum(R.constant(1), R.linear(1), R.constant(1), R.constant(1), eps=0.01)
    rep = validate_hypotheses(k, 500, ["H3", "H4"])
    assert rep.passed("H3") and rep.passed("H4")
    # independent scan of the bounds
    j = np.arange(1, 502)
    assert rep.bounds.a_min == np.min(np.ones(502)) == 1.0
    assert rep.bounds.b_bar == np.max(j / j) == 1.0
    assert rep.bounds.L == 1.0


def test_h3_fails_for_product():
    rep = validate_hypotheses(KernelSpec.product(R.constant(1), R.linear(1)), 100, ["H3"])
    assert not rep.passed("H3")


def test_h2_telescoping():
    k = KernelSpec.product(R.constant(1), R.telescoping(4))
    assert validate_hypotheses(k, 1000, ["H2"]).passed("H2")


def test_growth_classes():
    k = KernelSpec.product(R.log_corrected(1), R.log_corrected(2))
    rep = validate_hypotheses(k, 1000, ["growth_O_j", "growth_O_j_over_ln_j"])
    assert rep.passed("growth_O_j") and rep.passed("growth_O_j_over_ln_j")
    k2 = KernelSpec.product(R.constant(1), R.power(1, 1.5))
    assert not validate_hypotheses(k2, 1000, ["growth_O_j"]).passed("growth_O_j")


@given(sum_kernels())
def test_h4_growth_constant_bounds_kernel(k):
    rep = validate_hypotheses(k, 200, ["H4"])
    if not rep.passed("H4"):
        return
    c = rep["H4"].evidence["growth_constant"]
    b = rep.bounds
    for j in (1, 3, 17, 150):
        for m in (0, 2, 40, 199):
            bound = c * (b.a_bar * m + b.b_bar * j + k.eps * b.beta_bar * b.alpha_bar * j * m)
            assert eval_rate(k, j, m) <= bound * (1 + 1e-12)


def test_range_precondition():
    with pytest.raises(ValueError):
        validate_hypotheses(KernelSpec.product(R.constant(1), R.linear(1)), 5)
