"""Software IEEE 754 half precision and the mixed-precision training policy.

The codec converts between float32 and 16-bit patterns (1 sign, 5
exponent, 10 mantissa bits) with round-to-nearest-even, subnormals,
signed zeros, infinities and NaN payload preservation.  On top of it sit:

* :class:`LossScaler` -- dynamic power-of-two loss scaling with growth on
  streaks of finite gradients and backoff (plus optimizer skip) on overflow;
* :class:`PrecisionPolicy` -- the per-op cast table for the four training
  levels FULL (o0), MIXED_SAFE (o1), MIXED_CAST (o2) and HALF (o3);
* :class:`MasterWeights` -- float32 master parameters with optional
  half-rounded working copies refreshed after every optimizer step;
* :func:`fma_mixed` -- a 4x4 tile multiply with half inputs and float32
  accumulation, mirroring hardware fused multiply-add units.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, record_op

_u16 = np.uint16
_u32 = np.uint32

HALF_MAX = 65504.0
HALF_MIN_NORMAL = 2.0**-14
HALF_MIN_SUBNORMAL = 2.0**-24


def encode_fp16_array(x) -> np.ndarray:
    """Round-to-nearest-even conversion of float32 values to half bits."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    b = x.view(_u32)
    sign = ((b >> 16) & _u32(0x8000)).astype(_u32)
    f_exp = b & _u32(0x7F800000)
    f_sig = b & _u32(0x007FFFFF)

    out = np.empty(b.shape, dtype=_u32)

    # inf / NaN / overflow-to-inf
    big = f_exp >= _u32(0x47800000)
    is_naninf = f_exp == _u32(0x7F800000)
    is_nan = is_naninf & (f_sig != 0)
    nan_bits = _u32(0x7C00) | (f_sig >> _u32(13))
    nan_bits = np.where(nan_bits == _u32(0x7C00), nan_bits + _u32(1), nan_bits)
    out[big] = np.where(is_nan, nan_bits, _u32(0x7C00))[big]

    # underflow to subnormal or signed zero
    small = (~big) & (f_exp <= _u32(0x38000000))
    zero = f_exp < _u32(0x33000000)
    e = (f_exp >> _u32(23)).astype(_u32)
    shift = np.where(small & ~zero, _u32(113) - e, _u32(0))
    sig = _u32(0x00800000) | f_sig
    sticky = sig & ((_u32(1) << shift) - _u32(1))
    shifted = sig >> shift
    round_up = ((shifted & _u32(0x3FFF)) != _u32(0x1000)) | (sticky != 0)
    sub_bits = (shifted + np.where(round_up, _u32(0x1000), _u32(0))) >> _u32(13)
    out[small] = np.where(zero, _u32(0), sub_bits)[small]

    # normal range (rounding may carry into the exponent, overflowing to inf)
    normal = ~(big | small)
    h_exp = (f_exp - _u32(0x38000000)) >> _u32(13)
    rounded = f_sig + np.where((f_sig & _u32(0x3FFF)) != _u32(0x1000), _u32(0x1000), _u32(0))
    out[normal] = (h_exp + (rounded >> _u32(13)))[normal]

    return (sign | out).astype(_u16).reshape(x.shape)


def decode_fp16_array(h) -> np.ndarray:
    """Exact widening of half bit patterns to float32."""
    h = np.asarray(h, dtype=_u16).astype(_u32)
    sign = (h & _u32(0x8000)) << _u32(16)
    h_exp = h & _u32(0x7C00)
    h_sig = h & _u32(0x03FF)

    # subnormals and zeros decode exactly as sig * 2^-24
    subval = (h_sig.astype(np.float32) * np.float32(2.0**-24)).view(_u32)
    naninf = sign | _u32(0x7F800000) | (h_sig << _u32(13))
    normal = sign | (((h & _u32(0x7FFF)) + _u32(0x1C000)) << _u32(13))

    bits = np.where(
        h_exp == 0,
        sign | subval,
        np.where(h_exp == _u32(0x7C00), naninf, normal),
    ).astype(_u32)
    return bits.view(np.float32)


@dataclass(frozen=True)
class Half:
    """One half-precision value, held as its 16-bit pattern."""

    bits: int

    @classmethod
    def from_float(cls, x: float) -> "Half":
        return cls(int(encode_fp16_array(np.float32(x)).ravel()[0]))

    def to_float(self) -> float:
        return float(decode_fp16_array(np.uint16(self.bits)).ravel()[0])

    @property
    def sign(self) -> int:
        return (self.bits >> 15) & 0x1

    @property
    def exponent(self) -> int:
        return (self.bits >> 10) & 0x1F

    @property
    def mantissa(self) -> int:
        return self.bits & 0x3FF


def encode_fp16(x: float) -> Half:
    return Half.from_float(x)


def decode_fp16(h: Half) -> float:
    return h.to_float()


def fp16_round_array(x) -> np.ndarray:
    """Round every float32 element through the half codec and back."""
    return decode_fp16_array(encode_fp16_array(x))


def quantize_tensor(x: Tensor) -> Tensor:
    """Tensor-level half rounding; the gradient passes straight through."""
    result = Tensor(fp16_round_array(x.data))

    def vjp(g):
        return (g,)

    return record_op(result, (x,), vjp)


# ---------------------------------------------------------------------------
# loss scaling


class ScaleDecision(enum.Enum):
    APPLY = "apply"
    SKIP = "skip"


def _is_pow2(x: float) -> bool:
    m, _ = math.frexp(x)
    return x > 0 and m == 0.5


@dataclass
class LossScaler:
    """Dynamic loss scale: grow on streaks of finite steps, back off on overflow.

    The scale is always an exact power of two (so scaling is bit-exact in
    float32 absent overflow) and never drops below 1.
    """

    scale: float = 2.0**16
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    growth_interval: int = 2000
    good_steps: int = field(default=0)

    def __post_init__(self):
        if not _is_pow2(self.scale) or self.scale < 1.0:
            raise ConfigError(f"loss scale must be a power of two >= 1, got {self.scale}")
        if not _is_pow2(self.growth_factor) or self.growth_factor < 1.0:
            raise ConfigError(f"growth_factor must be a power of two >= 1")
        if not _is_pow2(self.backoff_factor) or self.backoff_factor > 1.0:
            raise ConfigError(f"backoff_factor must be a power of two <= 1")
        if self.growth_interval < 1:
            raise ConfigError("growth_interval must be >= 1")

    def step(self, grads_finite: bool) -> ScaleDecision:
        if grads_finite:
            self.good_steps += 1
            if self.good_steps >= self.growth_interval:
                self.scale *= self.growth_factor
                self.good_steps = 0
            return ScaleDecision.APPLY
        self.scale = max(1.0, self.scale * self.backoff_factor)
        self.good_steps = 0
        return ScaleDecision.SKIP


def scale_loss(loss: Tensor, scaler: LossScaler) -> Tensor:
    """Multiply the loss by the current scale before backpropagation."""
    from .tensor import scale as _scale

    return _scale(loss, scaler.scale)


def unscale_grads(grads, scaler: LossScaler) -> bool:
    """Divide gradient arrays by the scale in place; report finiteness.

    Returns False when any gradient contains a non-finite value, in which
    case the caller should feed the overflow to :meth:`LossScaler.step`.
    """
    inv = 1.0 / scaler.scale
    finite = True
    for g in grads:
        if g is None:
            continue
        g *= np.float32(inv)
        if not np.isfinite(g).all():
            finite = False
    return finite


# ---------------------------------------------------------------------------
# precision policy


class PrecisionLevel(enum.Enum):
    FULL = "o0"
    MIXED_SAFE = "o1"
    MIXED_CAST = "o2"
    HALF = "o3"


_CAST_TABLE = {
    # level: (conv inputs, conv weights, conv outputs, norm outputs,
    #         softmax outputs, network input)
    PrecisionLevel.FULL: (False, False, False, False, False, False),
    PrecisionLevel.MIXED_SAFE: (True, True, False, False, False, False),
    PrecisionLevel.MIXED_CAST: (True, True, True, False, False, True),
    PrecisionLevel.HALF: (True, True, True, True, True, True),
}


class PrecisionPolicy:
    """Which tensors get rounded through half precision, per training level.

    FULL performs no rounding anywhere.  MIXED_SAFE rounds convolution
    operands only (accumulation stays float32); normalization, softmax,
    losses and reductions are untouched.  MIXED_CAST additionally keeps
    half working copies of the weights and half activations after each
    convolution.  HALF rounds everything and keeps no float32 masters.
    """

    def __init__(self, level=PrecisionLevel.FULL):
        if isinstance(level, str):
            level = PrecisionLevel(level.lower())
        self.level = level
        (
            self.quant_conv_inputs,
            self.quant_conv_weights,
            self.quant_conv_outputs,
            self.quant_norm_outputs,
            self.quant_softmax_outputs,
            self.quant_network_input,
        ) = _CAST_TABLE[level]

    @property
    def keeps_master_copies(self) -> bool:
        return self.level is not PrecisionLevel.HALF

    @property
    def uses_working_copies(self) -> bool:
        return self.level is PrecisionLevel.MIXED_CAST

    @property
    def quantize_gradients(self) -> bool:
        return self.level is PrecisionLevel.HALF

    def cast_activation(self, t: Tensor) -> Tensor:
        return quantize_tensor(t) if self.quant_conv_inputs else t

    def cast_weight(self, t: Tensor) -> Tensor:
        return quantize_tensor(t) if self.quant_conv_weights else t

    def cast_conv_output(self, t: Tensor) -> Tensor:
        return quantize_tensor(t) if self.quant_conv_outputs else t

    def cast_norm_output(self, t: Tensor) -> Tensor:
        return quantize_tensor(t) if self.quant_norm_outputs else t

    def cast_softmax_output(self, t: Tensor) -> Tensor:
        return quantize_tensor(t) if self.quant_softmax_outputs else t

    def cast_network_input(self, t: Tensor) -> Tensor:
        return quantize_tensor(t) if self.quant_network_input else t

    def __repr__(self):
        return f"PrecisionPolicy({self.level.value})"


class MasterWeights:
    """Float32 master parameters with optional half working copies.

    Under o2, :meth:`refresh` re-derives each working copy as the half
    rounding of its master after every optimizer step.  Under o3 there are
    no float32 masters: the stored parameters themselves are rounded in
    place instead.
    """

    def __init__(self, params, policy: PrecisionPolicy):
        self.policy = policy
        self.masters = params  # name -> Tensor (float32)
        self.working = None
        if policy.uses_working_copies:
            self.working = {
                name: Tensor(fp16_round_array(t.data), requires_grad=True)
                for name, t in params.items()
            }
        elif not policy.keeps_master_copies:
            self.refresh()

    def forward_params(self):
        """Parameter map the forward pass should read from."""
        return self.working if self.working is not None else self.masters

    def refresh(self):
        if self.working is not None:
            for name, t in self.masters.items():
                self.working[name].data = fp16_round_array(t.data)
        elif not self.policy.keeps_master_copies:
            for t in self.masters.values():
                t.data = fp16_round_array(t.data)


def fma_mixed(a_bits, b_bits, c) -> np.ndarray:
    """4x4 fused tile: decode half tiles A, B and accumulate into float32 C.

    The product sum for each output element runs in float32 over k in
    ascending order, then C is added once.
    """
    a_bits = np.asarray(a_bits, dtype=_u16)
    b_bits = np.asarray(b_bits, dtype=_u16)
    c = np.asarray(c, dtype=np.float32)
    if a_bits.shape != (4, 4) or b_bits.shape != (4, 4) or c.shape != (4, 4):
        raise ShapeError("fma_mixed operates on 4x4 tiles")
    a = decode_fp16_array(a_bits)
    b = decode_fp16_array(b_bits)
    out = np.zeros((4, 4), dtype=np.float32)
    for i in range(4):
        for j in range(4):
            acc = np.float32(0.0)
            for k in range(4):
                acc = np.float32(acc + a[i, k] * b[k, j])
            out[i, j] = np.float32(acc + c[i, j])
    return out
