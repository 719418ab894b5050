"""The finite-difference harness itself."""

import numpy as np
import pytest

from ssmfuse import gradcheck as G
from ssmfuse import tensor as T
from ssmfuse.tensor import Tensor, _make


def wrong_square(a: Tensor) -> Tensor:
    """x**2 with a deliberately wrong derivative (x instead of 2x)."""
    return _make(a.data**2, (a,), lambda g: (g * a.data,), "wrong_square")


class TestHarness:
    def test_detects_a_wrong_backward(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        err = G.check(lambda: T.sum_all(wrong_square(x)), {"x": x})["x"]
        assert err > 0.3

    def test_rel_error_floor(self):
        assert G.rel_error(np.zeros(3), np.full(3, 1e-12)) < 1e-3
        assert G.rel_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)

    def test_unreached_parameter_has_zero_gradient(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        (gx, gy) = G.analytic_grads(lambda: T.sum_all(T.exp(x)), [x, y])
        assert np.all(gy == 0) and np.allclose(gx, np.e)

    def test_perturbation_restores_values(self):
        x = np.array([0.3, 0.7])
        G.numeric_grad(lambda: float(np.sum(np.sin(x))), x)
        np.testing.assert_array_equal(x, [0.3, 0.7])


class TestSuite:
    def test_primitives_and_block(self):
        report = G.run_suite(0, variants=False)
        assert report.ok, report.to_text()
        names = {r["check"].split(":")[0] for r in report.rows}
        assert {"selective_scan_zoh", "scan_chunked_4", "discretize_zoh", "block"} <= names
        assert any(r["check"] == "block:A_log" for r in report.rows)

    @pytest.mark.slow
    def test_variants(self):
        report = G.run_suite(1, variants=True)
        assert report.ok, report.to_text()
        labels = {r["check"].split(":")[0] for r in report.rows}
        assert {"block[separate-A]", "block[euler]", "block[chunk=3]", "block[depth=2]",
                "block[mlp-fusion]"} <= labels

    def test_report_text(self):
        report = G.GradcheckReport([{"check": "a", "rel_err": 1e-9, "ok": True},
                                    {"check": "bb", "rel_err": 2e-3, "ok": False}], 1e-4)
        assert not report.ok and report.max_error == 2e-3
        lines = report.to_text().splitlines()
        assert lines[0].split() == ["check", "max_rel_err", "status"]
        assert lines[2].endswith("FAIL")
