"""Uniform integer quantization and its training-time surrogates.

A float tensor X is represented as s * X_int where s is a positive
per-tensor scalar and X_int holds b-bit integers.  Signed tensors clip
to [-p, p] with p = 2^(b-1) - 1 (symmetric grid, no zero offset);
non-negative tensors use the full unsigned range [0, 2^b - 1].

Two ways to pick s:
  * range-preserving: s = max|x| / p, recomputed from the live tensor
    (used for weights and biases so the grid always covers the tensor);
  * learned threshold: s = 2^z with z trained by gradient descent
    (used for activations, where clipping outliers can beat covering
    them).

All rounding happens in float64 so that the training-time fake-quant
path and the integer inference path agree on every integer exactly.
Rounding is round-half-to-even throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeMismatchError

LN2 = math.log(2.0)

# scale floor for all-zero tensors; keeps s > 0 without moving any grid point
ZERO_RANGE_FLOOR = 2.0 ** -24


@dataclass(frozen=True)
class QuantConfig:
    """Bit-width and signedness of one quantization grid."""

    bits: int = 8
    signed: bool = True
    power_of_two_scalars: bool = False

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ConfigurationError(f"bits must be in [2, 16], got {self.bits}")

    @property
    def positive_limit(self) -> int:
        """p = 2^(b-1) - 1, the symmetric signed clipping bound."""
        return 2 ** (self.bits - 1) - 1

    @property
    def unsigned_limit(self) -> int:
        return 2 ** self.bits - 1

    @property
    def limit(self) -> int:
        return self.positive_limit if self.signed else self.unsigned_limit

    def as_unsigned(self) -> "QuantConfig":
        return replace(self, signed=False)

    def as_signed(self) -> "QuantConfig":
        return replace(self, signed=True)


class ThresholdScalar:
    """A learned clipping range for one tensor, stored as z = log2(s).

    Training in the log domain keeps s positive and makes the step size
    proportional to s.  `grad` accumulates dL/dz as a plain float;
    frozen scalars receive no gradient.
    """

    __slots__ = ("z", "frozen", "site_name", "grad")

    def __init__(self, z: float = 0.0, site_name: str = "", frozen: bool = False):
        self.z = float(z)
        self.frozen = frozen
        self.site_name = site_name
        self.grad = 0.0

    @property
    def scale(self) -> float:
        return 2.0 ** self.z

    def forward_scale(self, cfg: QuantConfig) -> float:
        # power-of-two mode snaps the forward scale; gradients still
        # flow to the continuous z underneath
        if cfg.power_of_two_scalars:
            return 2.0 ** round(self.z)
        return 2.0 ** self.z

    def zero_grad(self) -> None:
        self.grad = 0.0

    def __repr__(self):
        return f"ThresholdScalar({self.site_name!r}, z={self.z:.4f}, frozen={self.frozen})"


@dataclass
class IntTensor:
    """Integer codes plus the scalar that maps them back to float."""

    data: np.ndarray  # int32 container, values within the declared range
    scale: float
    bits: int
    signed: bool

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int32)
        if self.scale <= 0:
            raise ConfigurationError(f"scale must be positive, got {self.scale}")
        lo, hi = self.value_range()
        if self.data.size and (self.data.min() < lo or self.data.max() > hi):
            raise ConfigurationError(
                f"integer codes outside [{lo}, {hi}] for {self.bits}-bit "
                f"{'signed' if self.signed else 'unsigned'} tensor")

    def value_range(self) -> tuple[int, int]:
        if self.signed:
            p = 2 ** (self.bits - 1) - 1
            return -p, p
        return 0, 2 ** self.bits - 1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return (self.scale * self.data.astype(np.float64)).astype(np.float32)

    def transposed(self) -> "IntTensor":
        return IntTensor(np.ascontiguousarray(np.swapaxes(self.data, -1, -2)),
                         self.scale, self.bits, self.signed)


def bankers_round(x):
    """Round half to even; scalars return int, arrays return int32."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot round non-finite values")
    r = np.rint(arr)
    if np.isscalar(x) or arr.ndim == 0:
        return int(r)
    return r.astype(np.int32)


def _round_clip(x: np.ndarray, s: float, lo: int, hi: int):
    """Shared rounding core: returns (x/s, round(x/s), clipped, inside-mask).

    Everything is float64 so the fake-quant and integer paths agree
    bit-for-bit on which grid point each element lands on.
    """
    xs = x.astype(np.float64) / s
    if not np.all(np.isfinite(xs)):
        raise ValueError("cannot quantize non-finite values")
    q = np.rint(xs)
    qc = np.clip(q, lo, hi)
    inside = (q >= lo) & (q <= hi)
    return xs, q, qc, inside


def quantize_signed(x: np.ndarray, s: float, cfg: QuantConfig) -> IntTensor:
    """clip(round(x / s), -p, p) as an IntTensor."""
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    p = cfg.positive_limit
    _, _, qc, _ = _round_clip(np.asarray(x), s, -p, p)
    return IntTensor(qc.astype(np.int32), float(s), cfg.bits, signed=True)


def quantize_unsigned(x: np.ndarray, s: float, cfg: QuantConfig) -> IntTensor:
    """clip(round(x / s), 0, 2^b - 1); rejects negative inputs."""
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    x = np.asarray(x)
    if x.size and x.min() < 0:
        idx = tuple(int(i) for i in np.argwhere(x < 0)[0])
        raise ValueError(f"negative element {x[idx]} at index {idx} in unsigned quantization")
    _, _, qc, _ = _round_clip(x, s, 0, cfg.unsigned_limit)
    return IntTensor(qc.astype(np.int32), float(s), cfg.bits, signed=False)


def range_scalar_signed(x: np.ndarray, cfg: QuantConfig) -> float:
    """s = max|x| / p, so the largest element maps exactly to +-p."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot derive a range from an empty tensor")
    m = float(np.max(np.abs(x.astype(np.float64))))
    if m == 0.0:
        return ZERO_RANGE_FLOOR
    return m / cfg.positive_limit


def range_scalar_unsigned(x: np.ndarray, cfg: QuantConfig) -> float:
    """s = max(x) / (2^b - 1) for non-negative tensors."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot derive a range from an empty tensor")
    if x.min() < 0:
        idx = tuple(int(i) for i in np.argwhere(x < 0)[0])
        raise ValueError(f"negative element {x[idx]} at index {idx} in unsigned range")
    m = float(np.max(x.astype(np.float64)))
    if m == 0.0:
        return ZERO_RANGE_FLOOR
    return m / cfg.unsigned_limit


def threshold_gradient(x: np.ndarray, s: float, cfg: QuantConfig) -> np.ndarray:
    """Per-element d(fake_quant(x))/dz at z = log2(s), float64.

    Unsaturated elements: s * ln2 * (round(x/s) - x/s); saturated ones:
    s * ln2 * (clip bound), i.e. the output tracks the moving grid edge.
    """
    lo = -cfg.positive_limit if cfg.signed else 0
    hi = cfg.limit
    xs, _, qc, inside = _round_clip(np.asarray(x), s, lo, hi)
    return (s * LN2) * np.where(inside, qc - xs, qc)


def fake_quant(x: T.Tensor, threshold: ThresholdScalar, cfg: QuantConfig) -> T.Tensor:
    """Round-and-clip x onto the grid s * [lo, hi], differentiably.

    Forward output is s * clip(round(x/s)).  dL/dx passes straight
    through for unsaturated elements and is zero for clipped ones;
    dL/dz accumulates onto the threshold unless it is frozen.
    """
    s = threshold.forward_scale(cfg)
    lo = -cfg.positive_limit if cfg.signed else 0
    hi = cfg.limit
    xs, _, qc, inside = _round_clip(x.data, s, lo, hi)
    out = T.Tensor((s * qc).astype(np.float32))

    def backward_fn(g):
        if not threshold.frozen:
            local = (s * LN2) * np.where(inside, qc - xs, qc)
            threshold.grad += float(np.sum(g.astype(np.float64) * local))
        return (g * inside,)

    return T.record(out, [x], backward_fn, "fake_quant")


def fake_quant_range_preserving(x: T.Tensor, cfg: QuantConfig) -> T.Tensor:
    """Quantize with s recomputed from the live tensor (weights, biases).

    The scale tracks max|x| so no element ever saturates, and the
    gradient is the identity straight-through estimate.
    """
    if cfg.signed:
        s = range_scalar_signed(x.data, cfg)
        lo, hi = -cfg.positive_limit, cfg.positive_limit
    else:
        s = range_scalar_unsigned(x.data, cfg)
        lo, hi = 0, cfg.unsigned_limit
    _, _, qc, _ = _round_clip(x.data, s, lo, hi)
    out = T.Tensor((s * qc).astype(np.float32))

    def backward_fn(g):
        return (g,)

    return T.record(out, [x], backward_fn, "fake_quant_rp")
