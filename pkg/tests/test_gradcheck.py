import time

import numpy as np
import pytest

from deepcs import tensor as T
from deepcs.cli import main
from deepcs.gradcheck import (TOLERANCE, GradCase, broken_case, check_case, default_cases, format_results,
                              run_suite)


@pytest.fixture(scope="module")
def suite():
    t0 = time.perf_counter()
    results = run_suite()
    return results, time.perf_counter() - t0


def test_suite_passes_under_two_minutes(suite):
    results, seconds = suite
    failed = [(r.name, r.rel_error) for r in results if not r.passed]
    assert not failed
    assert seconds < 120
    assert TOLERANCE == 1e-5


def test_suite_covers_every_differentiable_path(suite):
    names = " ".join(r.name for r in suite[0])
    for op in ("conv2d", "conv_transpose2d", "batchnorm train", "relu", "sigmoid", "tanh", "add", "sub", "mul",
               "hadamard", "scale", "square", "concat", "mse", "loss_measurement", "loss_recurrent", "loss_mse",
               "recurrence T=3", "21-layer net", "apply_mask", "measure"):
        assert op in names, op


def test_case_shapes_within_bound():
    with T.precision(64):
        for case in default_cases():
            x = case.inputs[0]  # the activation; later inputs are kernels or targets
            assert x.ndim == 4
            assert all(s <= b for s, b in zip(x.shape, (2, 6, 6, 4))), case.name


def test_injected_fault_detected():
    res = run_suite([broken_case()])
    assert len(res) == 1 and not res[0].passed
    assert res[0].rel_error > 0.1
    assert "FAIL" in format_results(res)


def test_harness_agrees_on_known_gradient():
    case = GradCase("cube", lambda x: T.total(T.hadamard(T.square(x), x)), [np.linspace(-1, 1, 8).reshape(1, 2, 2, 2)])
    with T.precision(64):
        assert check_case(case).rel_error < 1e-8


def default_cases_64():
    with T.precision(64):
        return default_cases()


def test_cli_exit_codes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert f"{len(default_cases_64())}/{len(default_cases_64())} passed" in out
    assert "FAIL" not in out
    with pytest.raises(ValueError):
        run_suite(bits=16)
