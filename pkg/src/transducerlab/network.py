"""Transducer model: encoder, prediction and joint networks.

The encoder stacks layer-normalized LSTM layers with a projection; when the
architecture asks for per-layer lookahead, each layer's output sequence is
re-mixed with the next ``tau`` frames through elementwise context vectors, so
the final output at frame t sees at most t + layers*tau.

Architecture names follow ``MpN_FxL``: M memory cells, projection to N, F
lookahead frames per layer (omitted means none), L layers. The prediction
network always uses 2 layers of the same LSTM without lookahead.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import numerics as nm
from .numerics import Tensor, make_node
from .tokenizer import TokenSeq
from .transducer_loss import LogitLattice


class NetworkError(ValueError):
    pass


class ArchParseError(NetworkError):
    pass


# ---------------------------------------------------------------------------
# Architecture description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchSpec:
    cells: int
    proj: int
    tau: int
    layers: int
    pred_layers: int = 2
    feature_dim: int = 8
    stack_factor: int = 3
    frame_ms: int = 10

    def __post_init__(self):
        for name in ("cells", "proj", "layers", "pred_layers", "feature_dim",
                     "stack_factor", "frame_ms"):
            if getattr(self, name) < 1:
                raise NetworkError(f"{name} must be >= 1")
        if self.tau < 0:
            raise NetworkError("tau must be >= 0")

    @property
    def name(self) -> str:
        mid = f"_{self.tau}" if self.tau else ""
        return f"{self.cells}p{self.proj}{mid}x{self.layers}"

    @property
    def encoder_frame_ms(self) -> int:
        return self.frame_ms * self.stack_factor


def parse_arch_spec(name: str, **overrides) -> ArchSpec:
    """Parse ``MpN[_F]xL`` with positive integers; reports the failing position."""
    pos = 0

    def take_int(what: str) -> int:
        nonlocal pos
        start = pos
        while pos < len(name) and name[pos].isdigit():
            pos += 1
        if start == pos:
            raise ArchParseError(f"expected {what} at position {start} in {name!r}")
        value = int(name[start:pos])
        if value < 1 and what != "lookahead":
            raise ArchParseError(f"{what} must be positive at position {start} in {name!r}")
        return value

    def expect(ch: str) -> None:
        nonlocal pos
        if pos >= len(name) or name[pos] != ch:
            raise ArchParseError(f"expected {ch!r} at position {pos} in {name!r}")
        pos += 1

    cells = take_int("cell count")
    expect("p")
    proj = take_int("projection size")
    tau = 0
    if pos < len(name) and name[pos] == "_":
        pos += 1
        tau = take_int("lookahead")
    expect("x")
    layers = take_int("layer count")
    if pos != len(name):
        raise ArchParseError(f"trailing characters at position {pos} in {name!r}")
    return ArchSpec(cells=cells, proj=proj, tau=tau, layers=layers, **overrides)


@dataclass(frozen=True)
class Lookahead:
    frames: int
    ms: int


def total_lookahead(spec: ArchSpec) -> Lookahead:
    """Total encoder lookahead: layers * tau frames at the stacked frame rate."""
    frames = spec.layers * spec.tau
    return Lookahead(frames=frames, ms=frames * spec.encoder_frame_ms)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

@dataclass
class FrameMatrix:
    """T x D feature rows; 10 ms frames before stacking."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise NetworkError("feature matrix must be 2-d")
        if not np.isfinite(self.values).all():
            raise NetworkError("non-finite feature values")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


def stack_frames(feat: FrameMatrix, factor: int) -> FrameMatrix:
    """Concatenate ``factor`` consecutive frames; the last window is zero-padded."""
    if factor < 1:
        raise NetworkError("stack factor must be >= 1")
    if factor == 1:
        return FrameMatrix(feat.values.copy())
    t_out = -(-feat.T // factor)
    padded = np.zeros((t_out * factor, feat.D))
    padded[:feat.T] = feat.values
    return FrameMatrix(padded.reshape(t_out, factor * feat.D))


# ---------------------------------------------------------------------------
# Layer-normalized LSTM with projection
# ---------------------------------------------------------------------------

@dataclass
class LstmPLayer:
    """Gate order i|f|g|o in one 4C block, layer norm on the concatenated
    pre-activations, cell output projected from C cells down to N."""

    wx: Tensor    # (in_dim, 4C)
    wh: Tensor    # (N, 4C)
    gain: Tensor  # (4C,)
    bias: Tensor  # (4C,)
    wp: Tensor    # (C, N)
    eps: float = 1e-5

    @property
    def in_dim(self) -> int:
        return self.wx.data.shape[0]

    @property
    def cells(self) -> int:
        return self.wp.data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.wp.data.shape[1]

    def zero_state(self) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(self.out_dim), np.zeros(self.cells)

    def tensors(self) -> dict[str, Tensor]:
        return {"wx": self.wx, "wh": self.wh, "gain": self.gain,
                "bias": self.bias, "wp": self.wp}


def _sigm(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _cell_step(xw_t, h_prev, c_prev, wh, gain, bias, wp, eps):
    """One recurrence step; returns (h, c, cache-for-backward)."""
    cells = c_prev.shape[0]
    z = xw_t + h_prev @ wh
    ivar = 1.0 / math.sqrt(z.var() + eps)
    zhat = (z - z.mean()) * ivar
    zn = gain * zhat + bias
    gi = _sigm(zn[:cells])
    gf = _sigm(zn[cells:2 * cells])
    gg = np.tanh(zn[2 * cells:3 * cells])
    go = _sigm(zn[3 * cells:])
    c = gf * c_prev + gi * gg
    tc = np.tanh(c)
    m = go * tc
    h = m @ wp
    return h, c, (zhat, ivar, gi, gf, gg, go, c_prev, tc, m, h_prev)


def lstm_p_forward(layer: LstmPLayer, xs, state=None):
    """Run the layer over a (T, in_dim) sequence.

    Returns the (T, N) output sequence as a differentiable node plus the
    final (h, c) state as plain arrays. Gradients do not flow into a caller
    supplied initial state.
    """
    xs = xs if isinstance(xs, Tensor) else Tensor(xs)
    if xs.data.ndim != 2 or xs.data.shape[1] != layer.in_dim:
        raise NetworkError(
            f"input dim {xs.data.shape} does not match layer in_dim {layer.in_dim}")
    steps = xs.data.shape[0]
    h_prev, c_prev = layer.zero_state() if state is None else (
        np.asarray(state[0], dtype=np.float64), np.asarray(state[1], dtype=np.float64))
    wx, wh, gain, bias, wp = layer.wx, layer.wh, layer.gain, layer.bias, layer.wp
    xw = xs.data @ wx.data
    hs = np.empty((steps, layer.out_dim))
    caches = []
    for t in range(steps):
        h_prev, c_prev, cache = _cell_step(
            xw[t], h_prev, c_prev, wh.data, gain.data, bias.data, wp.data, layer.eps)
        hs[t] = h_prev
        caches.append(cache)
    final_state = (h_prev.copy(), c_prev.copy())

    def bwd(g_hs):
        dwh = np.zeros_like(wh.data)
        dgain = np.zeros_like(gain.data)
        dbias = np.zeros_like(bias.data)
        dwp = np.zeros_like(wp.data)
        dxw = np.empty_like(xw)
        dh_next = np.zeros(layer.out_dim)
        dc_next = np.zeros(layer.cells)
        for t in range(steps - 1, -1, -1):
            zhat, ivar, gi, gf, gg, go, c_prev_t, tc, m, h_prev_t = caches[t]
            dh = g_hs[t] + dh_next
            dm = wp.data @ dh
            dwp += np.outer(m, dh)
            do = dm * tc
            dc = dc_next + dm * go * (1.0 - tc * tc)
            dzn = np.concatenate([
                dc * gg * gi * (1.0 - gi),
                dc * c_prev_t * gf * (1.0 - gf),
                dc * gi * (1.0 - gg * gg),
                do * go * (1.0 - go),
            ])
            dc_next = dc * gf
            dgain += dzn * zhat
            dbias += dzn
            dzhat = dzn * gain.data
            dz = ivar * (dzhat - dzhat.mean() - zhat * (dzhat * zhat).mean())
            dxw[t] = dz
            dwh += np.outer(h_prev_t, dz)
            dh_next = wh.data @ dz
        return (dxw @ wx.data.T, xs.data.T @ dxw, dwh, dgain, dbias, dwp)

    return make_node(hs, (xs, wx, wh, gain, bias, wp), bwd), final_state


def lstm_p_step(layer: LstmPLayer, x: np.ndarray, state):
    """Single inference step on plain arrays (no tape)."""
    h_prev, c_prev = state
    xw = np.asarray(x, dtype=np.float64) @ layer.wx.data
    h, c, _ = _cell_step(xw, h_prev, c_prev, layer.wh.data, layer.gain.data,
                         layer.bias.data, layer.wp.data, layer.eps)
    return h, (h, c)


def context_forward(vectors, hs):
    """g[t] = sum_d vectors[d] * hs[t+d]; rows past the end count as zero.

    ``vectors`` is (tau+1, N); lookahead tau is its leading extent minus one.
    """
    vectors = vectors if isinstance(vectors, Tensor) else Tensor(vectors)
    hs = hs if isinstance(hs, Tensor) else Tensor(hs)
    if vectors.data.ndim != 2 or hs.data.ndim != 2 or \
            vectors.data.shape[1] != hs.data.shape[1]:
        raise NetworkError("context vectors must match the sequence width")
    steps = hs.data.shape[0]
    out = np.zeros_like(hs.data)
    for d in range(vectors.data.shape[0]):
        if steps - d > 0:
            out[:steps - d] += vectors.data[d] * hs.data[d:]

    def bwd(g):
        dv = np.zeros_like(vectors.data)
        dhs = np.zeros_like(hs.data)
        for d in range(vectors.data.shape[0]):
            if steps - d > 0:
                dv[d] = (g[:steps - d] * hs.data[d:]).sum(axis=0)
                dhs[d:] += g[:steps - d] * vectors.data[d]
        return dv, dhs

    return make_node(out, (vectors, hs), bwd)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

@dataclass
class EncoderLayer:
    lstm: LstmPLayer
    context: Tensor | None  # (tau+1, N) when the arch uses lookahead


@dataclass
class JointParams:
    w_enc: Tensor  # (N, J)
    w_pre: Tensor  # (N, J)
    bias: Tensor   # (J,)
    w_out: Tensor  # (J, V+1)


@dataclass
class ModelParams:
    arch: ArchSpec
    n_labels: int  # V: emittable pieces, blank excluded
    encoder: list[EncoderLayer]
    pred_embed: Tensor  # (V+1, N); row 0 doubles as the start-of-sequence input
    prediction: list[LstmPLayer]
    joint: JointParams

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for l, layer in enumerate(self.encoder):
            for key, t in layer.lstm.tensors().items():
                out[f"enc.{l}.{key}"] = t
            if layer.context is not None:
                out[f"enc.{l}.ctx"] = layer.context
        out["pred.embed"] = self.pred_embed
        for m, layer in enumerate(self.prediction):
            for key, t in layer.tensors().items():
                out[f"pred.{m}.{key}"] = t
        out["joint.w_enc"] = self.joint.w_enc
        out["joint.w_pre"] = self.joint.w_pre
        out["joint.bias"] = self.joint.bias
        out["joint.w_out"] = self.joint.w_out
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.named_tensors().values())

    def copy(self) -> "ModelParams":
        clone = load_state(save_state(self))
        return clone


def _uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_lstm_layer(rng, in_dim: int, cells: int, proj: int) -> LstmPLayer:
    return LstmPLayer(
        wx=nm.parameter(_uniform(rng, (in_dim, 4 * cells), in_dim, 4 * cells)),
        wh=nm.parameter(_uniform(rng, (proj, 4 * cells), proj, 4 * cells)),
        gain=nm.parameter(np.ones(4 * cells)),
        bias=nm.parameter(np.zeros(4 * cells)),
        wp=nm.parameter(_uniform(rng, (cells, proj), cells, proj)),
    )


def _init_context(rng, tau: int, proj: int) -> Tensor:
    v = np.zeros((tau + 1, proj))
    v[0] = 1.0
    if tau > 0:
        v[1:] = rng.uniform(-0.25, 0.25, size=(tau, proj))
    return nm.parameter(v)


def init_encoder_stack(rng: np.random.Generator, arch: ArchSpec) -> list[EncoderLayer]:
    """Encoder layers drawn first from the stream, so a pretraining run seeded
    like a full model starts from byte-identical encoder weights."""
    encoder = []
    in_dim = arch.feature_dim * arch.stack_factor
    for _ in range(arch.layers):
        lstm = _init_lstm_layer(rng, in_dim, arch.cells, arch.proj)
        ctx = _init_context(rng, arch.tau, arch.proj) if arch.tau > 0 else None
        encoder.append(EncoderLayer(lstm=lstm, context=ctx))
        in_dim = arch.proj
    return encoder


def init_model(arch: ArchSpec, n_labels: int, seed: int,
               joint_dim: int | None = None) -> ModelParams:
    """Seeded uniform fan-in/fan-out init; identical seeds give identical bytes."""
    if n_labels < 1:
        raise NetworkError("need at least one emittable label")
    rng = np.random.default_rng(seed)
    joint_dim = joint_dim or 2 * arch.proj
    encoder = init_encoder_stack(rng, arch)
    pred_embed = nm.parameter(_uniform(rng, (n_labels + 1, arch.proj),
                                       n_labels + 1, arch.proj))
    prediction = []
    p_in = arch.proj
    for _ in range(arch.pred_layers):
        prediction.append(_init_lstm_layer(rng, p_in, arch.cells, arch.proj))
        p_in = arch.proj
    joint = JointParams(
        w_enc=nm.parameter(_uniform(rng, (arch.proj, joint_dim), arch.proj, joint_dim)),
        w_pre=nm.parameter(_uniform(rng, (arch.proj, joint_dim), arch.proj, joint_dim)),
        bias=nm.parameter(np.zeros(joint_dim)),
        w_out=nm.parameter(_uniform(rng, (joint_dim, n_labels + 1),
                                    joint_dim, n_labels + 1)),
    )
    return ModelParams(arch=arch, n_labels=n_labels, encoder=encoder,
                       pred_embed=pred_embed, prediction=prediction, joint=joint)


def encoder_layers_forward(layers: list[EncoderLayer], feat) -> Tensor:
    """Stacked-feature rows -> (T, N) outputs through an encoder layer stack."""
    hs = feat if isinstance(feat, Tensor) else Tensor(
        feat.values if isinstance(feat, FrameMatrix) else feat)
    for l, layer in enumerate(layers):
        hs, _ = lstm_p_forward(layer.lstm, hs)
        if layer.context is not None:
            hs = context_forward(layer.context, hs)
        if not np.isfinite(hs.data).all():
            raise NetworkError(f"non-finite activation in encoder layer {l}")
    return hs


def encoder_forward(params: ModelParams, feat) -> Tensor:
    return encoder_layers_forward(params.encoder, feat)


def prediction_forward(params: ModelParams, labels: TokenSeq) -> Tensor:
    """[start] + labels -> (U+1, N) prediction outputs; blind to acoustics."""
    ids = [0] + list(labels.ids)
    if any(i > params.n_labels for i in labels.ids):
        raise NetworkError("label id exceeds vocabulary")
    hs = nm.gather_rows(params.pred_embed, ids)
    for m, layer in enumerate(params.prediction):
        hs, _ = lstm_p_forward(layer, hs)
        if not np.isfinite(hs.data).all():
            raise NetworkError(f"non-finite activation in prediction layer {m}")
    return hs


def joint_forward(params: ModelParams, enc: Tensor, pre: Tensor) -> Tensor:
    """(T,N) x (U+1,N) -> (T, U+1, V+1) logits, blank at output index 0."""
    a = enc @ params.joint.w_enc
    b = pre @ params.joint.w_pre
    mixed = nm.tanh(nm.pairwise_sum(a, b) + params.joint.bias)
    t_dim, u_dim, j_dim = mixed.data.shape
    flat = nm.reshape(mixed, (t_dim * u_dim, j_dim)) @ params.joint.w_out
    return nm.reshape(flat, (t_dim, u_dim, params.n_labels + 1))


def rnnt_forward(params: ModelParams, feat, labels: TokenSeq) -> LogitLattice:
    """Full model pass over an already stacked utterance."""
    enc = encoder_forward(params, feat)
    pre = prediction_forward(params, labels)
    logits = joint_forward(params, enc, pre)
    if not np.isfinite(logits.data).all():
        raise NetworkError("non-finite activation in joint network")
    return LogitLattice(logits=logits.data, tensor=logits)


# ---------------------------------------------------------------------------
# Checkpoints: magic, kind tag, u32 header fields, then tensor sections.
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"RNTCKPT1"
KIND_TRANSDUCER = 0
KIND_LM = 1


def write_container(fh: BinaryIO, kind: int, header: list[int],
                    tensors: dict[str, Tensor]) -> None:
    fh.write(CKPT_MAGIC)
    fh.write(struct.pack("<II", kind, len(header)))
    for value in header:
        fh.write(struct.pack("<I", value))
    fh.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        nm.write_tensor_section(fh, name, t.data)


def read_container(fh: BinaryIO) -> tuple[int, list[int], dict[str, np.ndarray]]:
    magic = fh.read(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise NetworkError(f"bad checkpoint magic {magic!r}")
    kind, n_fields = struct.unpack("<II", fh.read(8))
    header = [struct.unpack("<I", fh.read(4))[0] for _ in range(n_fields)]
    (n_tensors,) = struct.unpack("<I", fh.read(4))
    tensors = {}
    for _ in range(n_tensors):
        name, arr = nm.read_tensor_section(fh)
        tensors[name] = arr
    return kind, header, tensors


def save_state(params: ModelParams) -> bytes:
    import io

    buf = io.BytesIO()
    a = params.arch
    header = [a.cells, a.proj, a.tau, a.layers, a.pred_layers, a.feature_dim,
              a.stack_factor, a.frame_ms, params.n_labels,
              params.joint.bias.data.shape[0]]
    write_container(buf, KIND_TRANSDUCER, header, params.named_tensors())
    return buf.getvalue()


def load_state(blob: bytes) -> ModelParams:
    import io

    kind, header, tensors = read_container(io.BytesIO(blob))
    if kind != KIND_TRANSDUCER:
        raise NetworkError(f"checkpoint kind {kind} is not a transducer model")
    cells, proj, tau, layers, pred_layers, feature_dim, stack_factor, frame_ms, \
        n_labels, joint_dim = header
    arch = ArchSpec(cells=cells, proj=proj, tau=tau, layers=layers,
                    pred_layers=pred_layers, feature_dim=feature_dim,
                    stack_factor=stack_factor, frame_ms=frame_ms)
    params = init_model(arch, n_labels, seed=0, joint_dim=joint_dim)
    named = params.named_tensors()
    if set(named) != set(tensors):
        raise NetworkError("checkpoint tensor names do not match architecture")
    for name, t in named.items():
        if t.data.shape != tensors[name].shape:
            raise NetworkError(f"shape mismatch for {name}")
        t.data[...] = tensors[name]
    return params


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    Path(path).write_bytes(save_state(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return load_state(Path(path).read_bytes())
