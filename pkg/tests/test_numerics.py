import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from transducerlab import numerics as nm
from transducerlab.numerics import Tensor


def test_logsumexp_equal_weights():
    assert nm.logsumexp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-12)


def test_logsumexp_neg_inf_identity():
    assert nm.logsumexp([-np.inf, 3.0]) == pytest.approx(3.0, abs=0.0)
    assert nm.logsumexp([-np.inf, -np.inf]) == -np.inf


def test_logsumexp_large_magnitudes_match_exact_small_case():
    # exact arithmetic at small magnitude, then the same offsets shifted up
    small = nm.logsumexp([0.0, 0.0])
    assert small == pytest.approx(math.log(2.0), abs=1e-12)
    big = nm.logsumexp([1000.0, 1000.0])
    assert math.isfinite(big)
    assert big == pytest.approx(1000.0 + math.log(2.0), abs=1e-9)


def test_logsumexp_empty_errors():
    with pytest.raises(nm.NumericsError, match="empty reduction"):
        nm.logsumexp([])


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=24))
def test_logsumexp_bounds(values):
    out = nm.logsumexp(values)
    assert out >= max(values) - 1e-9
    assert out <= max(values) + math.log(len(values)) + 1e-9


def test_layer_norm_constant_input_is_zero():
    x = np.full(5, 3.7)
    out = nm.layer_norm(x, np.ones(5), np.zeros(5), eps=1e-5)
    assert np.allclose(out, 0.0)


def test_layer_norm_unit_variance_symmetry():
    out = nm.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-12)
    assert np.allclose(out, [1.0, -1.0], atol=1e-6)


def test_layer_norm_matches_scripted_formula():
    rng = np.random.default_rng(0)
    x = rng.normal(size=16)
    gain = rng.normal(size=16)
    bias = rng.normal(size=16)
    eps = 1e-5
    expected = gain * (x - x.mean()) / np.sqrt(x.var() + eps) + bias
    out = nm.layer_norm(x, gain, bias, eps)
    assert np.allclose(out, expected, atol=1e-12)


def test_layer_norm_statistics():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=50.0, size=256)
    out = nm.layer_norm(x, np.ones(256), np.zeros(256), eps=1e-8)
    assert abs(out.mean()) < 1e-10
    assert abs(out.var() - 1.0) < 1e-6


def test_layer_norm_length_mismatch():
    with pytest.raises(nm.NumericsError):
        nm.layer_norm(np.zeros(3), np.ones(4), np.zeros(3), eps=1e-5)


def test_grad_check_quadratic():
    theta = nm.parameter(np.array(3.0))
    report = nm.grad_check(lambda: theta * theta, {"theta": theta}, step=1e-4)
    assert report.max_rel_err < 1e-8
    entry = report.table[0]
    assert entry.analytic == pytest.approx(6.0, abs=1e-9)
    assert entry.numeric == pytest.approx(6.0, abs=1e-6)


def test_grad_accumulation_is_additive():
    theta = nm.parameter(np.array(2.0))
    (theta * theta).backward()
    (theta * theta).backward()
    assert theta.grad == pytest.approx(8.0)
    theta.zero_grad()
    assert theta.grad is None


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = nm.parameter(rng.normal(size=(3, 4)))
    b = nm.parameter(rng.normal(size=(4, 2)))
    v = nm.parameter(rng.normal(size=7))
    gain = nm.parameter(rng.normal(size=7))
    bias = nm.parameter(rng.normal(size=7))
    w = nm.parameter(rng.normal(size=(3, 4)))

    cases = {
        "matmul": lambda: nm.tsum(nm.tanh(a @ b)),
        "mul": lambda: nm.tsum(nm.mul(a, w)),
        "sigmoid": lambda: nm.tsum(nm.sigmoid(a)),
        "tanh": lambda: nm.tsum(nm.tanh(a)),
        "softmax": lambda: nm.tsum(nm.mul(nm.softmax(a), w)),
        "layer_norm": lambda: nm.tsum(nm.layer_norm(v, gain, bias, eps=1e-5)),
        "logsumexp": lambda: nm.logsumexp(v),
    }
    params = {"a": a, "b": b, "v": v, "gain": gain, "bias": bias, "w": w}
    for name, fn in cases.items():
        report = nm.grad_check(fn, params, step=1e-4)
        assert report.max_rel_err < 1e-4, f"{name}: {report.worst_param}"


def test_grad_check_reports_nonfinite_loss():
    theta = nm.parameter(np.array(0.0))

    def fn():
        with np.errstate(divide="ignore"):
            val = np.log(np.maximum(theta.data, 0.0))
        return nm.make_node(val, (theta,), lambda g: (np.zeros_like(theta.data),))

    with pytest.raises(nm.NumericsError, match="non-finite"):
        nm.grad_check(fn, {"theta": theta}, step=1e-4)


def test_no_grad_suppresses_tape():
    theta = nm.parameter(np.array(1.5))
    with nm.no_grad():
        out = theta * theta
    assert not out.requires_grad
    assert out._parents == ()


def test_tensor_section_roundtrip(tmp_path):
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    path = tmp_path / "sections.bin"
    with open(path, "wb") as fh:
        nm.write_tensor_section(fh, "enc.0.wx", arr)
        nm.write_tensor_section(fh, "scalar", np.array(7.5))
    with open(path, "rb") as fh:
        name1, out1 = nm.read_tensor_section(fh)
        name2, out2 = nm.read_tensor_section(fh)
    assert name1 == "enc.0.wx" and np.array_equal(out1, arr)
    assert name2 == "scalar" and out2 == pytest.approx(7.5)


def test_tensor_section_truncation_errors(tmp_path):
    path = tmp_path / "bad.bin"
    arr = np.ones((3, 3))
    with open(path, "wb") as fh:
        nm.write_tensor_section(fh, "w", arr)
    blob = path.read_bytes()[:-5]
    path.write_bytes(blob)
    import io

    with pytest.raises(nm.NumericsError, match="truncated"):
        nm.read_tensor_section(io.BytesIO(blob))
