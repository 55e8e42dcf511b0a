import math

import numpy as np
import pytest

from himosa import checks
from himosa.oracle import (OracleReport, compare, dense_mha_oracle, naive_bicubic_oracle, naive_conv_oracle,
                           psnr_oracle)


def test_report_line_format():
    assert OracleReport("op", 1e-3, 2e-4, 1e-4).line() == "op\t1.000e-03\t2.000e-04\tFAIL"
    assert OracleReport("op", 0.0, 0.0, 0.0).passed


def test_compare_shape_mismatch_fails():
    assert not compare("x", np.zeros(2), np.zeros(3), 1.0).passed


def test_dense_mha_single_token_is_value_path():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3))
    wq, wk, wv = (rng.standard_normal((2, 3, 2)) for _ in range(3))
    wo = rng.standard_normal((2, 2, 3))
    want = sum(x @ wv[h] @ wo[h] for h in range(2))
    np.testing.assert_allclose(dense_mha_oracle(x, wq, wk, wv, wo), want, rtol=1e-13)


def test_dense_mha_identity_weights():
    x = np.random.default_rng(1).standard_normal((5, 4))
    eye = np.eye(4)[None]
    s = x @ x.T / 2.0
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(dense_mha_oracle(x, eye, eye, eye, eye), a @ x, rtol=1e-12)


def test_conv_oracle_identity_kernel():
    x = np.random.default_rng(2).standard_normal((1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(naive_conv_oracle(x, w), x)


def test_bicubic_oracle_constant():
    img = np.full((8, 8, 3), 200, dtype=np.uint8)
    assert np.all(naive_bicubic_oracle(img, 4) == 200)


def test_psnr_oracle_identical_is_inf():
    a = np.zeros((3, 3))
    assert math.isinf(psnr_oracle(a, a))


def test_oracle_suite_all_pass():
    reports = checks.oracle_suite()
    assert reports and all(r.passed for r in reports), [r.line() for r in reports if not r.passed]


@pytest.mark.parametrize("name", sorted(checks._grad_cases()))
def test_each_gradient_case_two_seeds(name):
    import numpy as np
    for seed in (10, 11):
        build, inputs = checks._grad_cases()[name](np.random.default_rng(seed))
        rep = checks.grad_report(name, build, inputs)
        assert rep.passed, rep.line()


def test_gradient_check_catches_a_wrong_backward():
    from himosa.tensor import Tensor, _record
    from himosa import tensor as T
    x = Tensor(np.random.default_rng(0).standard_normal(4), requires_grad=True)

    def wrong_square():
        return T.sum(_record(x.data ** 2, (x,), lambda g: (g * x.data,)))  # should be 2x
    assert not checks.grad_report("bad", wrong_square, [x]).passed
