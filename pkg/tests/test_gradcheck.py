import numpy as np
import pytest

from pairwise_mlm.gradcheck import (GradCheckReport, GradCheckResult,
                                    check_gradients, check_model_gradients,
                                    relative_error)
from pairwise_mlm.numcore import (Function, Module, Tensor, float64_mode,
                                  parameter)


class _SquareWithWrongGradient(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        # should be 2x
        return (grad * 3.0 * self.x,)


class _Quadratic(Module):
    def __init__(self, broken: bool):
        self.w = parameter(np.array([0.5, -1.5, 2.0]))
        self.unused = parameter(np.array([1.0]))
        self.broken = broken

    def loss(self) -> Tensor:
        squared = _SquareWithWrongGradient.apply(self.w) if self.broken else self.w * self.w
        return squared.sum()


### TESTS ###
def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert relative_error([1.0], [-1.0]) == pytest.approx(1.0)


def test_correct_gradients_pass():
    with float64_mode():
        module = _Quadratic(broken=False)
        report = check_gradients(module.loss, module)

    assert report.passed, report.worst
    assert [r.param_name for r in report.results] == ["w", "unused"]
    assert report.results[1].relative_error == 0.0, "untouched parameters compare against zero"
    assert module.w.grad is None, "gradients are cleared after the check"


def test_broken_backward_is_detected():
    with float64_mode():
        module = _Quadratic(broken=True)
        report = check_gradients(module.loss, module)

    assert not report.passed
    assert report.worst.param_name == "w"
    assert report.worst.relative_error == pytest.approx(0.2, rel=1e-3)


def test_element_subsampling():
    with float64_mode():
        module = _Quadratic(broken=False)
        report = check_gradients(module.loss, module, max_elements_per_param=2)

    assert report.results[0].n_checked == 2
    assert report.results[1].n_checked == 1


def test_tiny_model_gradients():
    report = check_model_gradients("tiny", seed=0)

    assert report.passed, f"worst parameter: {report.worst}"
    names = {r.param_name for r in report.results}
    assert "encoder.token_embedding" in names
    assert "pair_head.w2" in names and "token_head.w2" in names


def test_pmlm_only_gradients():
    report = check_model_gradients("tiny", seed=1, pmlm_only_with_diagonal=True)

    assert report.passed, f"worst parameter: {report.worst}"


def test_report_rendering():
    report = GradCheckReport(
        tolerance=1e-4,
        step=1e-4,
        results=(
            GradCheckResult(param_name="encoder.w_q", relative_error=2e-6, n_checked=16, passed=True),
            GradCheckResult(param_name="pair_head.w1", relative_error=3e-2, n_checked=16, passed=False),
        ),
    )
    text = report.get_rendered_str()

    assert "worst: pair_head.w1" in text
    assert "FAILED (1 of 2 parameters)" in text
