import math

import numpy as np
import pytest

from transducerlab import network as net
from transducerlab import numerics as nm
from transducerlab.network import ArchSpec, FrameMatrix, LstmPLayer
from transducerlab.tokenizer import TokenSeq


def test_parse_arch_spec_with_lookahead():
    spec = net.parse_arch_spec("2560p800_2x6")
    assert (spec.cells, spec.proj, spec.tau, spec.layers) == (2560, 800, 2, 6)


def test_parse_arch_spec_without_lookahead():
    spec = net.parse_arch_spec("1280p640x6")
    assert (spec.cells, spec.proj, spec.tau, spec.layers) == (1280, 640, 0, 6)


def test_parse_arch_spec_four_frame_lookahead():
    spec = net.parse_arch_spec("1600p800_4x6")
    assert (spec.cells, spec.proj, spec.tau, spec.layers) == (1600, 800, 4, 6)


def test_parse_arch_spec_roundtrips_name():
    for name in ("2560p800_2x6", "1280p640x6", "1600p800_4x6"):
        assert net.parse_arch_spec(name).name == name


@pytest.mark.parametrize("bad,pos", [
    ("p800x6", 0),
    ("1600q800x6", 4),
    ("1600p800_x6", 9),
    ("1600p800x6z", 10),
])
def test_parse_arch_spec_reports_position(bad, pos):
    with pytest.raises(net.ArchParseError, match=f"position {pos}"):
        net.parse_arch_spec(bad)


def test_total_lookahead_values():
    spec = ArchSpec(cells=8, proj=4, tau=4, layers=6)
    assert net.total_lookahead(spec) == net.Lookahead(frames=24, ms=720)
    spec2 = ArchSpec(cells=8, proj=4, tau=2, layers=6)
    assert net.total_lookahead(spec2) == net.Lookahead(frames=12, ms=360)
    spec0 = ArchSpec(cells=8, proj=4, tau=0, layers=6)
    assert net.total_lookahead(spec0) == net.Lookahead(frames=0, ms=0)


def test_stack_frames_shapes():
    feat = FrameMatrix(np.zeros((6, 80)))
    out = net.stack_frames(feat, 3)
    assert (out.T, out.D) == (2, 240)


def test_stack_frames_identity():
    feat = FrameMatrix(np.arange(12.0).reshape(4, 3))
    out = net.stack_frames(feat, 1)
    assert np.array_equal(out.values, feat.values)


def test_stack_frames_pads_last_window():
    feat = FrameMatrix(np.ones((7, 2)))
    out = net.stack_frames(feat, 3)
    assert (out.T, out.D) == (3, 6)
    assert np.array_equal(out.values[2], [1, 1, 0, 0, 0, 0])


def tiny_layer(seed=0, in_dim=3, cells=4, proj=2):
    rng = np.random.default_rng(seed)
    return LstmPLayer(
        wx=nm.parameter(rng.normal(scale=0.4, size=(in_dim, 4 * cells))),
        wh=nm.parameter(rng.normal(scale=0.4, size=(proj, 4 * cells))),
        gain=nm.parameter(rng.uniform(0.5, 1.5, size=4 * cells)),
        bias=nm.parameter(rng.normal(scale=0.1, size=4 * cells)),
        wp=nm.parameter(rng.normal(scale=0.4, size=(cells, proj))),
    )


def scripted_lstm_step(layer, x, h_prev, c_prev):
    """Independent gate-by-gate evaluation used as the formula oracle."""
    cells = layer.cells
    z = x @ layer.wx.data + h_prev @ layer.wh.data
    mean = z.mean()
    var = ((z - mean) ** 2).mean()
    zn = layer.gain.data * (z - mean) / math.sqrt(var + layer.eps) + layer.bias.data

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    gate_i = sig(zn[:cells])
    gate_f = sig(zn[cells:2 * cells])
    gate_g = np.tanh(zn[2 * cells:3 * cells])
    gate_o = sig(zn[3 * cells:])
    c = gate_f * c_prev + gate_i * gate_g
    h = (gate_o * np.tanh(c)) @ layer.wp.data
    return h, c


def test_lstm_zero_weights_zero_output():
    layer = tiny_layer()
    for t in (layer.wx, layer.wh, layer.bias, layer.wp):
        t.data[...] = 0.0
    out, state = net.lstm_p_forward(layer, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(out.data, 0.0)
    assert np.allclose(state[0], 0.0)


def test_lstm_single_step_matches_scripted_oracle():
    layer = tiny_layer(seed=3)
    rng = np.random.default_rng(7)
    xs = rng.normal(size=(1, 3))
    out, _ = net.lstm_p_forward(layer, xs)
    expected, _ = scripted_lstm_step(layer, xs[0], np.zeros(2), np.zeros(4))
    assert np.allclose(out.data[0], expected, atol=1e-12)


def test_lstm_sequence_matches_scripted_recurrence():
    layer = tiny_layer(seed=5)
    rng = np.random.default_rng(11)
    xs = rng.normal(size=(6, 3))
    out, final = net.lstm_p_forward(layer, xs)
    h = np.zeros(2)
    c = np.zeros(4)
    for t in range(6):
        h, c = scripted_lstm_step(layer, xs[t], h, c)
        assert np.allclose(out.data[t], h, atol=1e-12)
    assert np.allclose(final[0], h, atol=1e-12)
    assert np.allclose(final[1], c, atol=1e-12)


def test_lstm_is_causal():
    layer = tiny_layer(seed=9)
    rng = np.random.default_rng(2)
    xs = rng.normal(size=(5, 3))
    base, _ = net.lstm_p_forward(layer, xs)
    bumped = xs.copy()
    bumped[4] += 10.0
    out, _ = net.lstm_p_forward(layer, bumped)
    assert np.array_equal(out.data[:4], base.data[:4])


def test_lstm_step_matches_sequence_forward():
    layer = tiny_layer(seed=13)
    rng = np.random.default_rng(4)
    xs = rng.normal(size=(4, 3))
    seq, _ = net.lstm_p_forward(layer, xs)
    state = layer.zero_state()
    for t in range(4):
        h, state = net.lstm_p_step(layer, xs[t], state)
        assert np.allclose(h, seq.data[t], atol=1e-12)


def test_lstm_shape_mismatch():
    layer = tiny_layer()
    with pytest.raises(net.NetworkError, match="in_dim"):
        net.lstm_p_forward(layer, np.zeros((4, 7)))


@pytest.mark.parametrize("seed", range(5))
def test_lstm_cell_gradients(seed):
    layer = tiny_layer(seed=seed)
    rng = np.random.default_rng(100 + seed)
    xs = nm.parameter(rng.normal(size=(3, 3)))
    target = rng.normal(size=(3, 2))

    def fn():
        out, _ = net.lstm_p_forward(layer, xs)
        diff = out - target
        return nm.tsum(nm.mul(diff, diff))

    params = {"xs": xs, **{k: v for k, v in layer.tensors().items()}}
    report = nm.grad_check(fn, params, step=1e-4)
    assert report.max_rel_err < 1e-4, report.worst_param


def test_context_identity_when_single_ones_vector():
    hs = np.random.default_rng(0).normal(size=(5, 3))
    out = net.context_forward(np.ones((1, 3)), hs)
    assert np.array_equal(out.data, hs)


def test_context_zero_vectors_give_zero():
    hs = np.random.default_rng(1).normal(size=(4, 3))
    out = net.context_forward(np.zeros((3, 3)), hs)
    assert np.allclose(out.data, 0.0)


def test_context_matches_scripted_summation():
    rng = np.random.default_rng(3)
    tau = 2
    v = rng.normal(size=(tau + 1, 4))
    hs = rng.normal(size=(6, 4))
    out = net.context_forward(v, hs)
    padded = np.vstack([hs, np.zeros((tau, 4))])
    expected = np.zeros((6, 4))
    for t in range(6):
        for d in range(tau + 1):
            expected[t] += v[d] * padded[t + d]
    assert np.allclose(out.data, expected, atol=1e-12)


def test_context_dim_mismatch():
    with pytest.raises(net.NetworkError):
        net.context_forward(np.ones((2, 3)), np.ones((4, 5)))


@pytest.mark.parametrize("seed", range(5))
def test_context_gradients(seed):
    rng = np.random.default_rng(seed)
    v = nm.parameter(rng.normal(size=(3, 4)))
    hs = nm.parameter(rng.normal(size=(5, 4)))
    weights = rng.normal(size=(5, 4))

    def fn():
        return nm.tsum(nm.mul(net.context_forward(v, hs), weights))

    report = nm.grad_check(fn, {"v": v, "hs": hs}, step=1e-4)
    assert report.max_rel_err < 1e-4, report.worst_param


def toy_arch(tau=1, layers=2):
    return ArchSpec(cells=5, proj=4, tau=tau, layers=layers, pred_layers=2,
                    feature_dim=2, stack_factor=3)


def toy_model(tau=1, layers=2, n_labels=3, seed=0):
    return net.init_model(toy_arch(tau, layers), n_labels=n_labels, seed=seed)


def test_rnnt_forward_minimal_shape():
    params = toy_model()
    feat = np.zeros((1, 6))
    lat = net.rnnt_forward(params, feat, TokenSeq(()))
    assert lat.logits.shape == (1, 1, 4)


def test_rnnt_forward_receptive_field_perturbation():
    params = toy_model(tau=1, layers=2)
    rng = np.random.default_rng(8)
    feat = rng.normal(size=(9, 6))
    base = net.encoder_forward(params, feat)
    horizon = 2 * 1  # layers * tau
    t_check = 3
    bumped = feat.copy()
    bumped[t_check + horizon + 1] += 5.0
    out = net.encoder_forward(params, bumped)
    assert np.array_equal(out.data[:t_check + 1], base.data[:t_check + 1])


def test_rnnt_forward_strict_causality_without_lookahead():
    params = toy_model(tau=0, layers=2)
    rng = np.random.default_rng(8)
    feat = rng.normal(size=(7, 6))
    base = net.encoder_forward(params, feat)
    bumped = feat.copy()
    bumped[5] -= 3.0
    out = net.encoder_forward(params, bumped)
    assert np.array_equal(out.data[:5], base.data[:5])


def test_prediction_network_is_independent_of_acoustics():
    params = toy_model()
    labels = TokenSeq((1, 2))
    a = net.prediction_forward(params, labels)
    b = net.prediction_forward(params, labels)
    assert np.array_equal(a.data, b.data)
    lat1 = net.rnnt_forward(params, np.zeros((2, 6)), labels)
    lat2 = net.rnnt_forward(params, np.ones((2, 6)), labels)
    assert lat1.logits.shape == lat2.logits.shape


def test_context_parameter_count_delta():
    base = toy_model(tau=0, layers=2)
    ahead = toy_model(tau=2, layers=2)
    arch = toy_arch()
    delta = ahead.parameter_count() - base.parameter_count()
    assert delta == 2 * (2 + 1) * arch.proj  # layers * (tau+1) * proj


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradients(seed):
    from transducerlab import transducer_loss as tl

    params = toy_model(seed=seed, n_labels=3)
    rng = np.random.default_rng(40 + seed)
    feat = rng.normal(size=(3, 6))
    labels = TokenSeq((1, 3))

    def fn():
        lat = net.rnnt_forward(params, feat, labels)
        return tl.rnnt_nll(lat, labels)

    report = nm.grad_check(fn, params.named_tensors(), step=1e-4)
    assert report.max_rel_err < 1e-4, report.worst_param


def test_checkpoint_roundtrip(tmp_path):
    params = toy_model(seed=4)
    path = tmp_path / "model.ckpt"
    net.save_checkpoint(path, params)
    loaded = net.load_checkpoint(path)
    assert loaded.arch == params.arch
    for name, t in params.named_tensors().items():
        assert np.array_equal(loaded.named_tensors()[name].data, t.data), name


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(net.NetworkError, match="magic"):
        net.load_checkpoint(path)


def test_model_copy_is_deep():
    params = toy_model()
    clone = params.copy()
    clone.pred_embed.data[0, 0] += 1.0
    assert params.pred_embed.data[0, 0] != clone.pred_embed.data[0, 0]
