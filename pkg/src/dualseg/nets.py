"""Shared encoder, linear classification heads and the classifier-weight transformer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    in_channels: int = 3
    D: int = 16
    C: int = 4
    H: int = 16
    W: int = 16
    heads: int = 2

    def __post_init__(self) -> None:
        if self.heads < 1 or self.D % self.heads != 0:
            raise ConfigError(f"feature width D={self.D} is not divisible by heads={self.heads}")
        if self.C < 2:
            raise ConfigError(f"need at least two classes, got C={self.C}")
        if self.H < 1 or self.W < 1 or self.in_channels < 1:
            raise ConfigError("H, W and in_channels must be positive")

    @property
    def d_k(self) -> int:
        return self.D // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


# Fixed 3x3 smoothing stencil shared by the encoder's mixing pass and the humidity blur.
MIX_STENCIL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


@dataclass
class EncoderParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    mix: np.ndarray  # [3, 3, D], constant

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class HeadParams:
    weight: Tensor
    bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def copy(self, requires_grad: bool | None = None) -> "HeadParams":
        rg = self.weight.requires_grad if requires_grad is None else requires_grad
        return HeadParams(
            Tensor(self.weight.data.copy(), requires_grad=rg),
            Tensor(self.bias.data.copy(), requires_grad=rg),
        )


@dataclass
class CwtParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    heads: int = 1

    def tensors(self) -> dict[str, Tensor]:
        return {
            "w_q": self.w_q,
            "w_k": self.w_k,
            "w_v": self.w_v,
            "ln_gain": self.ln_gain,
            "ln_bias": self.ln_bias,
            "mlp_w1": self.mlp_w1,
            "mlp_b1": self.mlp_b1,
            "mlp_w2": self.mlp_w2,
            "mlp_b2": self.mlp_b2,
        }


@dataclass
class FeatureBatch:
    pixels: Tensor  # [B, H, W, D]
    pooled: Tensor  # [B, D]


@dataclass
class ModelParams:
    dims: ModelDims
    encoder: EncoderParams
    student: HeadParams
    teacher1: HeadParams
    teacher2: HeadParams
    cwt: CwtParams
    extra: dict = field(default_factory=dict)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group in ("encoder", "student", "teacher1", "teacher2", "cwt"):
            for k, v in getattr(self, group).tensors().items():
                out[f"{group}.{k}"] = v
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.requires_grad}


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True)


def _zeros(n: int, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=requires_grad)


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Glorot-uniform weights and zero biases, except the weight generator's output layer.

    That layer starts with zero weights and a unit bias so every class weight is 1
    at step 0.

    Teachers start as exact gradient-free copies of the student head.
    """
    rng = np.random.default_rng(seed)
    D, C = dims.D, dims.C
    encoder = EncoderParams(
        w1=_glorot(rng, dims.in_channels, D),
        b1=_zeros(D),
        w2=_glorot(rng, D, D),
        b2=_zeros(D),
        mix=np.repeat(MIX_STENCIL[:, :, None], D, axis=2),
    )
    student = HeadParams(_glorot(rng, D, C), _zeros(C))
    cwt = CwtParams(
        w_q=_glorot(rng, D, D),
        w_k=_glorot(rng, 2 * D, D),
        w_v=_glorot(rng, 2 * D, D),
        ln_gain=Tensor(np.ones(D), requires_grad=True),
        ln_bias=_zeros(D),
        mlp_w1=_glorot(rng, D, D),
        mlp_b1=_zeros(D),
        # zero output layer + unit bias: the generated class weights start at exactly 1
        mlp_w2=Tensor(np.zeros((D, C)), requires_grad=True),
        mlp_b2=Tensor(np.ones(C), requires_grad=True),
        heads=dims.heads,
    )
    return ModelParams(
        dims=dims,
        encoder=encoder,
        student=student,
        teacher1=student.copy(requires_grad=False),
        teacher2=student.copy(requires_grad=False),
        cwt=cwt,
    )


def encode(params: EncoderParams, images: Tensor) -> FeatureBatch:
    """Per-pixel two-layer MLP, fixed 3x3 mixing, then spatial mean pooling."""
    if images.ndim != 4 or images.shape[-1] != params.w1.shape[0]:
        raise ShapeError(f"encode: expected [B,H,W,{params.w1.shape[0]}] images, got {images.shape}")
    b, h, w, c = images.shape
    d = params.w2.shape[1]
    flat = T.reshape(images, (b * h * w, c))
    z = T.relu(T.add(T.matmul(flat, params.w1), params.b1))
    z = T.relu(T.add(T.matmul(z, params.w2), params.b2))
    pixels = T.spatial_mix(T.reshape(z, (b, h, w, d)), params.mix)
    pooled = T.mean(pixels, axis=(1, 2))
    return FeatureBatch(pixels=pixels, pooled=pooled)


def head_forward(params: HeadParams, features: FeatureBatch) -> Tensor:
    """Per-pixel logits ``[B, H, W, C]``."""
    px = features.pixels
    b, h, w, d = px.shape
    if d != params.weight.shape[0]:
        raise ShapeError(f"head_forward: feature width {d} != head input {params.weight.shape[0]}")
    c = params.weight.shape[1]
    out = T.add(T.matmul(T.reshape(px, (b * h * w, d)), params.weight), params.bias)
    return T.reshape(out, (b, h, w, c))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with the batch axis as the sequence."""
    d = q.shape[1]
    if d % heads != 0:
        raise ConfigError(f"width {d} not divisible by heads={heads}")
    dk = d // heads
    outs = []
    for i in range(heads):
        lo, hi = i * dk, (i + 1) * dk
        qh, kh, vh = T.slice_axis(q, lo, hi), T.slice_axis(k, lo, hi), T.slice_axis(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dk))
        outs.append(T.matmul(T.softmax(scores), vh))
    return outs[0] if heads == 1 else T.concat(outs)


def cwt_forward(params: CwtParams, h_s: Tensor, h_t: Tensor) -> Tensor:
    """Per-sample class weights ``[B, C]`` from student queries against teacher keys/values."""
    d = params.w_q.shape[0]
    if h_s.ndim != 2 or h_s.shape[1] != d:
        raise ShapeError(f"cwt_forward: student features must be [B,{d}], got {h_s.shape}")
    if h_t.shape != (h_s.shape[0], 2 * d):
        raise ShapeError(f"cwt_forward: teacher features must be [{h_s.shape[0]},{2 * d}], got {h_t.shape}")
    q = T.matmul(h_s, params.w_q)
    k = T.matmul(h_t, params.w_k)
    v = T.matmul(h_t, params.w_v)
    att = attention(q, k, v, params.heads)
    z = T.layer_norm(att, params.ln_gain, params.ln_bias)
    z = T.relu(T.add(T.matmul(z, params.mlp_w1), params.mlp_b1))
    return T.add(T.matmul(z, params.mlp_w2), params.mlp_b2)
