"""Minimal deterministic training core.

A model is a flat float32 parameter vector plus a declarative spec of conv /
relu / global-average-pool / dense layers. Forward, softmax cross-entropy
with analytic gradients, and Adam with decoupled weight decay are all pure
functions, so repeated calls are bit-identical on a machine.

Internals are dtype-generic: arrays flow through in the dtype of the
parameter vector (float32 in production; float64 in numerical tests), while
explicit reductions (losses, sums over the batch) accumulate in 64-bit.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadMagic, InvalidConfig, InvalidLabel, InvalidShape, \
    SpecMismatch, Truncated, VersionMismatch
from .seeding import make_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


Layer = Union[Conv, Dense, Relu, GlobalAvgPool]


def _layer_token(layer: Layer) -> str:
    if isinstance(layer, Conv):
        return f"conv({layer.out_channels},k{layer.kernel},s{layer.stride})"
    if isinstance(layer, Dense):
        return f"dense({layer.out_features})"
    if isinstance(layer, Relu):
        return "relu"
    if isinstance(layer, GlobalAvgPool):
        return "gap"
    raise InvalidConfig(f"unknown layer {layer!r}")


def _layer_from_token(token: str) -> Layer:
    if token == "relu":
        return Relu()
    if token == "gap":
        return GlobalAvgPool()
    if token.startswith("conv(") and token.endswith(")"):
        c, k, s = token[5:-1].split(",")
        return Conv(int(c), int(k[1:]), int(s[1:]))
    if token.startswith("dense(") and token.endswith(")"):
        return Dense(int(token[6:-1]))
    raise InvalidConfig(f"unknown layer token {token!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative network description; fully determines the parameter count."""

    input_resolution: int
    layers: tuple
    num_classes: int

    def __post_init__(self):
        if self.input_resolution < 1:
            raise InvalidConfig("input_resolution must be >= 1")
        if not self.layers or not isinstance(self.layers[-1], Dense) \
                or self.layers[-1].out_features != self.num_classes:
            raise InvalidConfig(
                "final layer must be dense with out_features == num_classes")
        for layer in self.layers:
            if isinstance(layer, Conv) and (layer.kernel < 1 or layer.stride < 1
                                            or layer.out_channels < 1):
                raise InvalidConfig(f"bad conv layer {layer}")
            if isinstance(layer, Dense) and layer.out_features < 1:
                raise InvalidConfig(f"bad dense layer {layer}")

    def canonical(self) -> str:
        tokens = ";".join(_layer_token(l) for l in self.layers)
        return f"in={self.input_resolution};{tokens};classes={self.num_classes}"

    def spec_hash(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("ascii")).digest()

    @staticmethod
    def from_canonical(text: str) -> "ModelSpec":
        parts = text.split(";")
        if not parts[0].startswith("in=") or not parts[-1].startswith("classes="):
            raise InvalidConfig(f"bad model spec string {text!r}")
        layers = tuple(_layer_from_token(t) for t in parts[1:-1])
        return ModelSpec(int(parts[0][3:]), layers, int(parts[-1][8:]))

    def param_shapes(self):
        """(weight_shape, bias_shape) per parameterized layer, in layer order."""
        shapes = []
        kind, c, h, w = "spatial", 1, self.input_resolution, self.input_resolution
        for layer in self.layers:
            if isinstance(layer, Conv):
                if kind != "spatial":
                    raise InvalidConfig("conv after flattening is not supported")
                pad = layer.kernel // 2
                shapes.append(((layer.out_channels, c, layer.kernel, layer.kernel),
                               (layer.out_channels,)))
                h = (h + 2 * pad - layer.kernel) // layer.stride + 1
                w = (w + 2 * pad - layer.kernel) // layer.stride + 1
                c = layer.out_channels
                if h < 1 or w < 1:
                    raise InvalidConfig("conv reduces spatial size below 1")
            elif isinstance(layer, GlobalAvgPool):
                if kind != "spatial":
                    raise InvalidConfig("global_avg_pool needs spatial input")
                kind, c, h, w = "flat", c, 1, 1
            elif isinstance(layer, Dense):
                in_features = c if kind == "flat" else c * h * w
                shapes.append(((layer.out_features, in_features),
                               (layer.out_features,)))
                kind, c = "flat", layer.out_features
            elif isinstance(layer, Relu):
                pass
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(ws)) + int(np.prod(bs))
                   for ws, bs in self.param_shapes())


def default_model_spec(resolution: int = 32, num_classes: int = 4) -> ModelSpec:
    """3-block conv feature extractor with a dense classification head."""
    return ModelSpec(
        input_resolution=resolution,
        layers=(Conv(8, 3, 1), Relu(),
                Conv(16, 3, 2), Relu(),
                Conv(32, 3, 2), Relu(),
                GlobalAvgPool(), Dense(num_classes)),
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------

@dataclass
class ParamVector:
    """Flat float32 view of all model weights, bound to its spec by hash."""

    values: np.ndarray
    spec_hash: bytes

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise InvalidShape("param vector must be 1-D")
        if len(self.spec_hash) != 32:
            raise SpecMismatch("spec_hash must be a 32-byte digest")

    def check(self, spec: ModelSpec) -> None:
        if self.spec_hash != spec.spec_hash():
            raise SpecMismatch("param vector was built for a different model spec")
        if self.values.shape[0] != spec.param_count():
            raise SpecMismatch(
                f"param vector length {self.values.shape[0]} != spec count "
                f"{spec.param_count()}")

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec_hash)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """He-normal weights, zero biases, drawn from a Philox stream."""
    rng = make_rng("init", seed, spec.canonical())
    chunks = []
    for w_shape, b_shape in spec.param_shapes():
        fan_in = int(np.prod(w_shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        chunks.append(rng.standard_normal(int(np.prod(w_shape))) * std)
        chunks.append(np.zeros(int(np.prod(b_shape))))
    values = np.concatenate(chunks).astype(np.float32)
    return ParamVector(values, spec.spec_hash())


def unpack_params(spec: ModelSpec, theta: np.ndarray):
    """Reshape the flat vector into per-layer (W, b) views."""
    out = []
    offset = 0
    for w_shape, b_shape in spec.param_shapes():
        w_size = int(np.prod(w_shape))
        b_size = int(np.prod(b_shape))
        out.append((theta[offset:offset + w_size].reshape(w_shape),
                    theta[offset + w_size:offset + w_size + b_size]))
        offset += w_size + b_size
    if offset != theta.shape[0]:
        raise SpecMismatch(f"param vector length {theta.shape[0]} != {offset}")
    return out


# ParamVector file format: magic, u16 version, 32-byte spec hash, u64 count,
# then count little-endian float32 values.
PARAM_MAGIC = b"FKPV"
PARAM_VERSION = 1
_PARAM_HEADER = struct.Struct("<4sH32sQ")


def save_params(path, params: ParamVector) -> None:
    payload = _PARAM_HEADER.pack(PARAM_MAGIC, PARAM_VERSION, params.spec_hash,
                                 params.values.shape[0])
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(params.values.astype("<f4").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as fh:
        raw = fh.read()
    return params_from_bytes(raw)


def params_to_bytes(params: ParamVector) -> bytes:
    return _PARAM_HEADER.pack(PARAM_MAGIC, PARAM_VERSION, params.spec_hash,
                              params.values.shape[0]) \
        + params.values.astype("<f4").tobytes()


def params_from_bytes(raw: bytes) -> ParamVector:
    if len(raw) < _PARAM_HEADER.size:
        raise Truncated("param vector header incomplete")
    magic, version, spec_hash, count = _PARAM_HEADER.unpack_from(raw)
    if magic != PARAM_MAGIC:
        raise BadMagic(f"expected {PARAM_MAGIC!r}, got {magic!r}")
    if version != PARAM_VERSION:
        raise VersionMismatch(f"param vector version {version} unsupported")
    need = _PARAM_HEADER.size + 4 * count
    if len(raw) < need:
        raise Truncated(f"param vector payload needs {need} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", count=count,
                           offset=_PARAM_HEADER.size).copy()
    return ParamVector(values, spec_hash)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _conv_forward(x, weight, bias, stride):
    b, c, h, w = x.shape
    out_c, _, k, _ = weight.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)) \
        .reshape(b * out_h * out_w, c * k * k)
    out = cols @ weight.reshape(out_c, -1).T + bias
    out = out.reshape(b, out_h, out_w, out_c).transpose(0, 3, 1, 2)
    return out, (cols, x.shape, xp.shape, stride, k, pad, out_h, out_w)


def _conv_backward(dout, weight, cache):
    cols, x_shape, xp_shape, stride, k, pad, out_h, out_w = cache
    b, c, h, w = x_shape
    out_c = weight.shape[0]
    dflat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)) \
        .reshape(b * out_h * out_w, out_c)
    dweight = (dflat.T @ cols).reshape(weight.shape)
    dbias = dflat.sum(axis=0, dtype=np.float64).astype(dout.dtype)
    dcols = (dflat @ weight.reshape(out_c, -1)) \
        .reshape(b, out_h, out_w, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * out_h:stride,
                j:j + stride * out_w:stride] += dcols[:, :, :, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w], dweight, dbias


def _forward_arrays(spec: ModelSpec, theta: np.ndarray, batch: np.ndarray,
                    keep_cache: bool = False):
    """Run the network on raw arrays in the dtype of `theta`.

    batch: [B, H, W]. Returns (logits, caches); caches is None unless
    keep_cache, in which case it holds what the backward pass needs.
    """
    layer_params = unpack_params(spec, theta)
    x = batch.astype(theta.dtype, copy=False)[:, None, :, :]
    caches = [] if keep_cache else None
    p_idx = 0
    for layer in spec.layers:
        if isinstance(layer, Conv):
            weight, bias = layer_params[p_idx]
            p_idx += 1
            x, cache = _conv_forward(x, weight, bias, layer.stride)
            if keep_cache:
                caches.append(("conv", cache))
        elif isinstance(layer, Relu):
            mask = x > 0
            x = x * mask
            if keep_cache:
                caches.append(("relu", mask))
        elif isinstance(layer, GlobalAvgPool):
            shape = x.shape
            x = x.mean(axis=(2, 3), dtype=np.float64).astype(theta.dtype)
            if keep_cache:
                caches.append(("gap", shape))
        elif isinstance(layer, Dense):
            weight, bias = layer_params[p_idx]
            p_idx += 1
            flat = x.reshape(x.shape[0], -1)
            out = flat @ weight.T + bias
            if keep_cache:
                caches.append(("dense", (flat, x.shape)))
            x = out
    return x, caches


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically shifted."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_and_grad_arrays(spec: ModelSpec, theta: np.ndarray,
                          batch: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its analytic gradient, as raw arrays."""
    labels = np.asarray(labels)
    if batch.shape[0] == 0:
        raise InvalidShape("batch must be nonempty")
    if labels.shape != (batch.shape[0],):
        raise InvalidShape("labels must be one class index per batch row")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise InvalidLabel(
            f"labels must lie in [0, {spec.num_classes}), got "
            f"[{labels.min()}, {labels.max()}]")

    logits, caches = _forward_arrays(spec, theta, batch, keep_cache=True)
    n = batch.shape[0]
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean(dtype=np.float64))

    probs = np.exp(log_probs).astype(theta.dtype)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1
    dlogits /= theta.dtype.type(n)

    layer_params = unpack_params(spec, theta)
    grads = [None] * len(layer_params)
    p_idx = len(layer_params)
    dx = dlogits
    for layer, (kind, cache) in zip(reversed(spec.layers), reversed(caches)):
        if kind == "dense":
            p_idx -= 1
            weight, _ = layer_params[p_idx]
            flat, in_shape = cache
            dweight = dx.T @ flat
            dbias = dx.sum(axis=0, dtype=np.float64).astype(theta.dtype)
            grads[p_idx] = (dweight, dbias)
            dx = (dx @ weight).reshape(in_shape)
        elif kind == "gap":
            shape = cache
            area = shape[2] * shape[3]
            dx = np.broadcast_to((dx / theta.dtype.type(area))[:, :, None, None],
                                 shape).astype(theta.dtype, copy=True)
        elif kind == "relu":
            dx = dx * cache
        elif kind == "conv":
            p_idx -= 1
            weight, _ = layer_params[p_idx]
            dx, dweight, dbias = _conv_backward(dx, weight, cache)
            grads[p_idx] = (dweight, dbias)
    grad = np.concatenate([np.concatenate([w.ravel(), b.ravel()])
                           for w, b in grads]).astype(theta.dtype)
    return loss, grad


def forward(spec: ModelSpec, params: ParamVector, batch: np.ndarray) -> np.ndarray:
    """Logits [B, C] for a batch of images [B, H, W]."""
    params.check(spec)
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 3 or batch.shape[1] != spec.input_resolution \
            or batch.shape[2] != spec.input_resolution:
        raise InvalidShape(
            f"batch must be [B, {spec.input_resolution}, "
            f"{spec.input_resolution}], got {batch.shape}")
    logits, _ = _forward_arrays(spec, params.values, batch)
    return logits


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: np.ndarray,
                  labels: np.ndarray):
    """Mean cross-entropy over the batch plus the analytic gradient."""
    params.check(spec)
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 3 or batch.shape[1] != spec.input_resolution \
            or batch.shape[2] != spec.input_resolution:
        raise InvalidShape(f"bad batch shape {batch.shape}")
    loss, grad = _loss_and_grad_arrays(spec, params.values, batch, labels)
    return loss, ParamVector(grad, params.spec_hash)


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def fresh(n: int, dtype=np.float32) -> "AdamState":
        return AdamState(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), 0)


def _adam_step_arrays(theta, grad, state: AdamState, lr, weight_decay):
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise SpecMismatch("params, grad, and Adam state lengths must agree")
    dt = theta.dtype.type
    step = state.step + 1
    if weight_decay:
        theta = theta * dt(1.0 - lr * weight_decay)
    m = ADAM_BETA1 * state.m + dt(1 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + dt(1 - ADAM_BETA2) * grad * grad
    m_hat = m / dt(1 - ADAM_BETA1 ** step)
    v_hat = v / dt(1 - ADAM_BETA2 ** step)
    theta = theta - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(ADAM_EPS))
    return theta.astype(grad.dtype), AdamState(m, v, step)


def adam_step(params: ParamVector, grad: ParamVector, state: AdamState,
              lr: float, weight_decay: float = 0.0):
    """One optimizer step; weight decay shrinks params before the Adam update."""
    if params.spec_hash != grad.spec_hash:
        raise SpecMismatch("gradient belongs to a different model spec")
    if lr < 0 or weight_decay < 0:
        raise InvalidConfig("lr and weight_decay must be nonnegative")
    new_theta, new_state = _adam_step_arrays(params.values, grad.values, state,
                                             lr, weight_decay)
    return ParamVector(new_theta, params.spec_hash), new_state


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    decay_factor: float = 0.5
    decay_every: int = 100

    def __post_init__(self):
        # base_lr 0 is allowed so a no-op optimizer run stays expressible
        if self.base_lr < 0:
            raise InvalidConfig("base_lr must be nonnegative")
        if not 0 < self.decay_factor <= 1:
            raise InvalidConfig("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise InvalidConfig("decay_every must be >= 1")


def lr_at(schedule: LrSchedule, round_index: int) -> float:
    """Step decay: base * factor ** floor(round / every)."""
    if round_index < 0:
        raise InvalidConfig("round index must be >= 0")
    return schedule.base_lr * schedule.decay_factor ** (round_index // schedule.decay_every)
