"""
FusionNet forward pipeline.

    F_ir  = E_ir(I_ir)                  two 3x3 conv + ReLU, 1 -> C -> C
    F_vis = E_vis(I_vis)                two 3x3 conv + ReLU, 3 -> C -> C
    A     = sigmoid(conv(relu(conv(concat(F_ir, F_vis)))))    2C -> C -> C
    F_att = A * F_ir + (1 - A) * F_vis
    alpha = sigmoid(conv(relu(conv(F_att))))                  C -> C/2 -> 1
    fused = alpha * I_ir + (1 - alpha) * I_vis_Y

All convolutions are 3x3 with padding 1, so every stage keeps H x W.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Literal, Optional, Tuple

import numpy as np

from .errors import ContractError, DimensionError
from .images import ImagePair
from .tensor import Tensor, concat_channels, conv2d, relu, sigmoid

DEFAULT_CHANNELS = 64
KERNEL = 3

InitScheme = Literal["he_xavier", "zeros"]


@dataclass
class ConvParams:
    weight: Tensor  # [Cout, Cin, k, k]
    bias: Tensor  # [Cout]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


@dataclass
class EncoderParams:
    conv1: ConvParams
    conv2: ConvParams


@dataclass
class AttentionParams:
    conv1: ConvParams
    conv2: ConvParams


@dataclass
class AlphaHeadParams:
    conv1: ConvParams
    conv2: ConvParams


_BLOCKS = ("encoder_ir", "encoder_vis", "attention", "alpha_head")
_LAYERS = ("conv1", "conv2")


@dataclass
class FusionNetParams:
    encoder_ir: EncoderParams
    encoder_vis: EncoderParams
    attention: AttentionParams
    alpha_head: AlphaHeadParams

    @property
    def channels(self) -> int:
        return self.encoder_ir.conv1.out_channels

    def named_parameters(self) -> Dict[str, Tensor]:
        """Parameters in a fixed order, named like `attention.conv2.weight`."""
        out: Dict[str, Tensor] = {}
        for block in _BLOCKS:
            for layer in _LAYERS:
                conv: ConvParams = getattr(getattr(self, block), layer)
                out[f"{block}.{layer}.weight"] = conv.weight
                out[f"{block}.{layer}.bias"] = conv.bias
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    @classmethod
    def from_named(cls, tensors: Dict[str, Tensor]) -> "FusionNetParams":
        def conv(block: str, layer: str) -> ConvParams:
            try:
                return ConvParams(tensors[f"{block}.{layer}.weight"], tensors[f"{block}.{layer}.bias"])
            except KeyError as e:
                raise ContractError(f"missing parameter {e.args[0]}") from e

        params = cls(
            EncoderParams(conv("encoder_ir", "conv1"), conv("encoder_ir", "conv2")),
            EncoderParams(conv("encoder_vis", "conv1"), conv("encoder_vis", "conv2")),
            AttentionParams(conv("attention", "conv1"), conv("attention", "conv2")),
            AlphaHeadParams(conv("alpha_head", "conv1"), conv("alpha_head", "conv2")),
        )
        _check_architecture(params)
        return params


def layer_shapes(channels: int = DEFAULT_CHANNELS) -> Dict[str, Tuple[int, int, str]]:
    """(in, out, activation after) for every conv layer, keyed by `block.layer`."""
    if channels < 2 or channels % 2:
        raise ContractError(f"channel count must be an even number >= 2, got {channels}")
    c, half = channels, channels // 2
    return {
        "encoder_ir.conv1": (1, c, "relu"),
        "encoder_ir.conv2": (c, c, "relu"),
        "encoder_vis.conv1": (3, c, "relu"),
        "encoder_vis.conv2": (c, c, "relu"),
        "attention.conv1": (2 * c, c, "relu"),
        "attention.conv2": (c, c, "sigmoid"),
        "alpha_head.conv1": (c, half, "relu"),
        "alpha_head.conv2": (half, 1, "sigmoid"),
    }


def _check_architecture(params: FusionNetParams) -> None:
    for key, (cin, cout, _) in layer_shapes(params.channels).items():
        block, layer = key.split(".")
        conv: ConvParams = getattr(getattr(params, block), layer)
        want = (cout, cin, KERNEL, KERNEL)
        if conv.weight.shape != want or conv.bias.shape != (cout,):
            raise DimensionError(f"{key}: weight {conv.weight.shape} / bias {conv.bias.shape}, expected {want}")


def init_params(seed: int = 0, scheme: InitScheme = "he_xavier", channels: int = DEFAULT_CHANNELS) -> FusionNetParams:
    """
    Deterministic initialization.

    he_xavier: He-normal (std sqrt(2 / fan_in)) for layers followed by ReLU,
    Xavier-uniform (limit sqrt(6 / (fan_in + fan_out))) for sigmoid outputs,
    zero biases. zeros: every weight and bias is 0 (debug scheme).
    """
    if scheme not in ("he_xavier", "zeros"):
        raise ContractError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    for key, (cin, cout, act) in layer_shapes(channels).items():
        shape = (cout, cin, KERNEL, KERNEL)
        fan_in, fan_out = cin * KERNEL * KERNEL, cout * KERNEL * KERNEL
        if scheme == "zeros":
            w = np.zeros(shape)
        elif act == "relu":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=shape)
        tensors[f"{key}.weight"] = Tensor(w, requires_grad=True, name=f"{key}.weight")
        tensors[f"{key}.bias"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{key}.bias")
    return FusionNetParams.from_named(tensors)


def _convex(weight: Tensor, a: Tensor, b: Tensor, what: str) -> Tensor:
    # b + w * (a - b) == w * a + (1 - w) * b, and stays within [min(a, b), max(a, b)] in floating point
    if not (weight.shape == a.shape == b.shape):
        raise DimensionError(f"{what}: shapes differ {weight.shape}, {a.shape}, {b.shape}")
    return b + weight * (a - b)


def encode(image: Tensor, params: EncoderParams) -> Tensor:
    if image.ndim != 3 or image.shape[0] != params.conv1.in_channels:
        raise DimensionError(f"encoder expects [{params.conv1.in_channels}, H, W], got {image.shape}")
    return relu(params.conv2(relu(params.conv1(image))))


def attention_blend(A: Tensor, f_ir: Tensor, f_vis: Tensor) -> Tensor:
    return _convex(A, f_ir, f_vis, "attention_blend")


def _attend(f_ir: Tensor, f_vis: Tensor, params: AttentionParams) -> Tuple[Tensor, Tensor, Tensor]:
    if f_ir.shape != f_vis.shape:
        raise DimensionError(f"modality_attention: F_ir {f_ir.shape} vs F_vis {f_vis.shape}")
    f_cat = concat_channels(f_ir, f_vis)
    A = sigmoid(params.conv2(relu(params.conv1(f_cat))))
    return f_cat, A, attention_blend(A, f_ir, f_vis)


def modality_attention(f_ir: Tensor, f_vis: Tensor, params: AttentionParams) -> Tuple[Tensor, Tensor]:
    """Returns the mask A and the blended features F_attn."""
    _, A, f_attn = _attend(f_ir, f_vis, params)
    return A, f_attn


def alpha_map(f_attn: Tensor, params: AlphaHeadParams) -> Tensor:
    if f_attn.ndim != 3 or f_attn.shape[0] != params.conv1.in_channels:
        raise DimensionError(f"alpha head expects [{params.conv1.in_channels}, H, W], got {f_attn.shape}")
    return sigmoid(params.conv2(relu(params.conv1(f_attn))))


def blend(alpha: Tensor, ir: Tensor, vis_y: Tensor) -> Tensor:
    return _convex(alpha, ir, vis_y, "blend")


@dataclass
class ForwardArtifacts:
    f_ir: Tensor
    f_vis: Tensor
    f_cat: Tensor
    attention: Tensor  # A
    f_attn: Tensor
    alpha: Tensor
    fused: Tensor


def forward(pair: ImagePair, params: FusionNetParams, alpha_override: Optional[float] = None) -> ForwardArtifacts:
    """
    Run the whole pipeline on one pair.

    `alpha_override` replaces the learned alpha map with a constant (debug only).
    """
    f_ir = encode(pair.ir, params.encoder_ir)
    f_vis = encode(pair.vis, params.encoder_vis)
    f_cat, A, f_attn = _attend(f_ir, f_vis, params.attention)
    alpha = alpha_map(f_attn, params.alpha_head)
    if alpha_override is not None:
        if not 0.0 <= alpha_override <= 1.0:
            raise ContractError(f"alpha override must be in [0, 1], got {alpha_override}")
        alpha = Tensor(np.full(alpha.shape, alpha_override), dtype=alpha.dtype)
    fused = blend(alpha, pair.ir, pair.vis_y)
    return ForwardArtifacts(f_ir, f_vis, f_cat, A, f_attn, alpha, fused)
