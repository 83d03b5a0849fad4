"""Integer-only matmul kernels for deployment-style inference.

Every product runs as int32 x int32 -> int32 with the result mapped
back to float by one combined scalar per site.  Accumulator safety is a
build-time property: with b-bit operands and inner dimension k, the
magnitude of any dot product is at most lim_a * lim_b * k, which must
stay below 2^31.  For 8-bit signed operands that allows k up to 2^15.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeMismatchError
from .quant import IntTensor, QuantConfig, quantize_signed, quantize_unsigned, range_scalar_signed
from .tensor import softmax_values

INT32_MAX = 2 ** 31 - 1


def check_accumulator(k: int, lim_a: int, lim_b: int) -> None:
    """Reject inner dimensions that could overflow int32 accumulation."""
    worst = lim_a * lim_b * k
    if worst > INT32_MAX:
        raise ConfigurationError(
            f"inner dimension {k} can overflow int32: worst case "
            f"{lim_a}*{lim_b}*{k} = {worst} > {INT32_MAX}")


def _operand_limit(t: IntTensor) -> int:
    if t.bits > 8:
        raise ConfigurationError(
            f"integer kernels take operands of at most 8 bits, got {t.bits}")
    return 2 ** (t.bits - 1) - 1 if t.signed else 2 ** t.bits - 1


def int_matmul(a: IntTensor, b: IntTensor) -> np.ndarray:
    """a @ b over int32, returning the raw int32 accumulator array."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"int_matmul: cannot multiply {a.shape} by {b.shape}")
    check_accumulator(a.shape[-1], _operand_limit(a), _operand_limit(b))
    return a.data @ b.data


@dataclass
class IntDenseLayer:
    """One dense site prepared offline: integer weights, the fixed input
    scale learned during training, and their product folded into a
    single output scalar.  Bias stays float and is added after the
    product is mapped back to float."""

    weight: IntTensor
    input_scale: float
    combined_scale: float
    bias: np.ndarray | None = None
    input_bits: int = 8

    def __post_init__(self):
        if self.input_scale <= 0:
            raise ConfigurationError(f"input scale must be positive, got {self.input_scale}")
        check_accumulator(self.weight.shape[-2],
                          2 ** (self.input_bits - 1) - 1,
                          _operand_limit(self.weight))

    @classmethod
    def from_weights(cls, weight: np.ndarray, bias: np.ndarray | None,
                     input_scale: float, cfg: QuantConfig) -> "IntDenseLayer":
        """Quantize a float weight matrix range-preservingly."""
        s_w = range_scalar_signed(weight, cfg)
        w_int = quantize_signed(weight, s_w, cfg)
        b = None if bias is None else np.asarray(bias, dtype=np.float32)
        return cls(weight=w_int, input_scale=float(input_scale),
                   combined_scale=float(input_scale) * s_w, bias=b,
                   input_bits=cfg.bits)


def dense_forward_int(x: np.ndarray, layer: IntDenseLayer, cfg: QuantConfig) -> np.ndarray:
    """Quantize the activation, multiply in int32, map back to float."""
    x_int = quantize_signed(x, layer.input_scale, cfg)
    acc = int_matmul(x_int, layer.weight)
    out = (layer.combined_scale * acc.astype(np.float64)).astype(np.float32)
    if layer.bias is not None:
        out = out + layer.bias
    return out


@dataclass
class IntAttentionSite:
    """Fixed scalars for one attention block's two activation products.

    The query/key product uses signed grids; the softmax output is
    non-negative and uses the unsigned grid for an extra bit of
    resolution.  Scalars are per-tensor and shared across heads.
    """

    s_q: float
    s_k: float
    s_u: float
    s_v: float
    d_k: int

    def __post_init__(self):
        for name in ("s_q", "s_k", "s_u", "s_v"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_k < 1:
            raise ConfigurationError(f"d_k must be positive, got {self.d_k}")


def attention_forward_int(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                          site: IntAttentionSite, cfg: QuantConfig,
                          mask: np.ndarray | None = None) -> np.ndarray:
    """Scaled dot-product attention with both products in int32.

    q, k, v are [..., length, d_k] float arrays (heads already split);
    softmax itself stays float, its output is re-quantized unsigned.
    """
    q_int = quantize_signed(q, site.s_q, cfg)
    k_int = quantize_signed(k, site.s_k, cfg)
    scores_scale = site.s_q * site.s_k / math.sqrt(site.d_k)
    scores = (scores_scale * int_matmul(q_int, k_int.transposed()).astype(np.float64)
              ).astype(np.float32)
    if mask is not None:
        scores = scores + mask
    u = softmax_values(scores, axis=-1)
    u_int = quantize_unsigned(u, site.s_u, cfg.as_unsigned())
    v_int = quantize_signed(v, site.s_v, cfg)
    out = (site.s_u * site.s_v * int_matmul(u_int, v_int).astype(np.float64)
           ).astype(np.float32)
    return out
