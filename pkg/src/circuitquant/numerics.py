"""Software emulation of the low-precision formats used by the engine.

FP8 values follow the OCP E4M3 layout: 1 sign bit, 4 exponent bits (bias 7),
3 mantissa bits, no infinities and a single NaN code per sign (``S.1111.111``).
Overflow saturates to +-448. BF16 is the upper half of an IEEE single.

Everything here is a pure function over numpy arrays or Python scalars.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

F8_BIAS = 7
F8_MANT_BITS = 3
F8_MAX = 448.0
F8_MIN_NORMAL = 2.0**-6
F8_MIN_SUBNORMAL = 2.0**-9
F8_NAN = 0x7F
F8_NEG_NAN = 0xFF

_F8_MIN_EXP = 1 - F8_BIAS  # exponent of the smallest normal binade
_F8_MAX_EXP = 8

SUPPORTED_RTN_BITS = (4, 8, 16)


class Precision(IntEnum):
    """Compute precision of a graph component, ordered by fidelity."""

    P4 = 4
    P8 = 8
    P16 = 16
    P32 = 32

    @property
    def label(self) -> str:
        return {4: "int4", 8: "fp8_e4m3", 16: "bf16", 32: "fp32"}[int(self)]


@dataclass(frozen=True)
class QuantParams:
    n_bits: int
    delta: float


def _decode_table() -> np.ndarray:
    codes = np.arange(256, dtype=np.int64)
    sign = np.where(codes & 0x80, -1.0, 1.0)
    exp = (codes >> 3) & 0xF
    mant = codes & 0x7
    mag = np.where(
        exp == 0,
        mant * 2.0 ** (_F8_MIN_EXP - F8_MANT_BITS),
        (8 + mant) * np.ldexp(1.0, exp - F8_BIAS - F8_MANT_BITS),
    )
    vals = sign * mag
    vals[(codes & 0x7F) == 0x7F] = np.nan
    return vals


F8_TABLE = _decode_table()
F8_TABLE.setflags(write=False)


def decode_f8(bits):
    """Exact value of an E4M3 bit pattern (scalar or uint8 array)."""
    arr = np.asarray(bits)
    if arr.dtype.kind not in "ui":
        raise TypeError("decode_f8 expects integer bit patterns")
    out = F8_TABLE[arr.astype(np.int64) & 0xFF]
    if np.ndim(bits) == 0:
        return float(out)
    return out


def round_f8(x, dtype=np.float32) -> np.ndarray:
    """Round onto the E4M3 grid (RNE, saturating) and return the values.

    This is ``decode_f8(encode_f8(x))`` without materialising the codes.
    """
    xf = np.asarray(x, dtype=np.float64)
    a = np.abs(xf)
    with np.errstate(invalid="ignore"):
        _, e = np.frexp(a)
        lead = np.maximum(e - 1, _F8_MIN_EXP)
        quantum = np.ldexp(1.0, lead - F8_MANT_BITS)
        r = np.round(a / quantum) * quantum
    r = np.minimum(r, F8_MAX)
    r = np.copysign(r, xf)
    r = np.where(np.isnan(xf), np.nan, r)
    return r.astype(dtype)


def encode_f8(x):
    """Encode reals to E4M3 bit patterns (round-to-nearest-even, saturating).

    Returns a Python int for scalar input, a uint8 array otherwise.
    """
    xf = np.asarray(x, dtype=np.float64)
    v = round_f8(xf, dtype=np.float64)
    nan = np.isnan(v)
    a = np.where(nan, 0.0, np.abs(v))
    sign = np.signbit(v) & ~nan
    _, e = np.frexp(a)
    lead = e - 1
    normal = a >= F8_MIN_NORMAL
    exp_field = np.where(normal, lead + F8_BIAS, 0)
    unit = np.ldexp(1.0, np.where(normal, lead, _F8_MIN_EXP) - F8_MANT_BITS)
    sig = np.rint(a / unit).astype(np.int64)
    mant = np.where(normal, sig - 8, sig)
    code = (exp_field.astype(np.int64) << 3) | mant
    code = np.where(sign, code | 0x80, code)
    code = np.where(nan, np.where(np.signbit(xf), F8_NEG_NAN, F8_NAN), code)
    code = code.astype(np.uint8)
    if xf.ndim == 0:
        return int(code)
    return code


def _unpack(codes: np.ndarray):
    c = codes.astype(np.int64)
    sign = (c >> 7) & 1
    exp = (c >> 3) & 0xF
    mant = c & 0x7
    sig = np.where(exp == 0, mant, mant + 8)
    e = np.maximum(exp, 1) - F8_BIAS  # value = sig * 2^(e - 3)
    return sign, e, sig


def add_f8(a, b):
    """Correctly rounded E4M3 addition on bit patterns.

    The smaller operand is right-shifted onto the larger operand's exponent,
    keeping guard/round/sticky bits, then the sum is normalised and rounded to
    nearest-even. NaN operands propagate; overflow saturates.
    """
    scalar = np.ndim(a) == 0 and np.ndim(b) == 0
    ca, cb = np.broadcast_arrays(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
    ca = ca & 0xFF
    cb = cb & 0xFF
    nan = ((ca & 0x7F) == 0x7F) | ((cb & 0x7F) == 0x7F)

    sa, ea, ma = _unpack(ca)
    sb, eb, mb = _unpack(cb)

    # order operands so that |x| >= |y|
    swap = (eb > ea) | ((eb == ea) & (mb > ma))
    sx = np.where(swap, sb, sa)
    ex = np.where(swap, eb, ea)
    mx = np.where(swap, mb, ma)
    sy = np.where(swap, sa, sb)
    ey = np.where(swap, ea, eb)
    my = np.where(swap, ma, mb)

    GRS = 3
    x = mx << GRS
    d = ex - ey
    y_full = my << GRS
    shift = np.minimum(d, 62)
    y = y_full >> shift
    lost = y_full & ((np.int64(1) << shift) - 1)
    y = y | (lost != 0).astype(np.int64)

    same = sx == sy
    s = np.where(same, x + y, x - y)
    e = ex.copy()

    # carry out of the top: 1x.xxx -> shift right keeping sticky
    carry = s >= (16 << GRS)
    s = np.where(carry, (s >> 1) | (s & 1), s)
    e = np.where(carry, e + 1, e)

    # cancellation: shift left until normalised or at the subnormal floor
    for _ in range(8):
        need = (s > 0) & (s < (8 << GRS)) & (e > _F8_MIN_EXP)
        s = np.where(need, s << 1, s)
        e = np.where(need, e - 1, e)

    low = s & ((1 << GRS) - 1)
    sig = s >> GRS
    half = 1 << (GRS - 1)
    round_up = (low > half) | ((low == half) & ((sig & 1) == 1))
    sig = sig + round_up.astype(np.int64)
    over = sig >= 16
    sig = np.where(over, sig >> 1, sig)
    e = np.where(over, e + 1, e)

    # saturate at 448 = 1.110b * 2^8
    sat = (e > _F8_MAX_EXP) | ((e == _F8_MAX_EXP) & (sig > 14))
    e = np.where(sat, _F8_MAX_EXP, e)
    sig = np.where(sat, 14, sig)

    normal = sig >= 8
    exp_field = np.where(normal, e + F8_BIAS, 0)
    mant = np.where(normal, sig - 8, sig)
    code = (exp_field << 3) | mant

    zero = sig == 0
    # exact cancellation gives +0 under RNE unless both operands are -0
    zsign = np.where(same, sx, 0)
    rsign = np.where(zero, zsign, sx)
    code = code | (rsign << 7)
    code = np.where(nan, F8_NAN, code).astype(np.uint8)
    if scalar:
        return int(code)
    return code


def f8_exponent(bits) -> np.ndarray:
    """Unbiased exponent of the leading bit (subnormals report their true binade)."""
    v = np.abs(decode_f8(np.asarray(bits)))
    _, e = np.frexp(v)
    return e - 1


def round_bf16(x) -> np.ndarray:
    """Round float32 values to BF16 (RNE) and return them as float32."""
    f = np.ascontiguousarray(x, dtype=np.float32)
    u = f.view(np.uint32).astype(np.uint64)
    bias = ((u >> 16) & 1) + 0x7FFF
    r = ((u + bias) >> 16) << 16
    out = r.astype(np.uint32).view(np.float32)
    return np.where(np.isnan(f), f, out)


def encode_bf16(x):
    r = round_bf16(x)
    return (r.view(np.uint32) >> 16).astype(np.uint16)


def decode_bf16(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return b.view(np.float32)


def quantize_rtn(w, n_bits: int) -> tuple[np.ndarray, QuantParams]:
    """Symmetric round-to-nearest onto a uniform grid of step max|w| / 2^(N-1)."""
    if n_bits not in SUPPORTED_RTN_BITS:
        raise ValueError(f"n_bits must be one of {SUPPORTED_RTN_BITS}, got {n_bits}")
    arr = np.asarray(w)
    if arr.size == 0:
        raise ValueError("quantize_rtn needs a non-empty input")
    wf = arr.astype(np.float64)
    amax = float(np.max(np.abs(wf)))
    if amax == 0.0:
        return arr.copy(), QuantParams(n_bits, 0.0)
    delta = amax / 2.0 ** (n_bits - 1)
    q = delta * np.round(wf / delta)
    return q.astype(arr.dtype if arr.dtype.kind == "f" else np.float64), QuantParams(n_bits, delta)


def step_size(p: Precision) -> float:
    """Smallest positive normal magnitude of the format."""
    p = Precision(p)
    if p is Precision.P8:
        return F8_MIN_NORMAL
    if p is Precision.P4:
        # integer grids have no fixed floor; report the FP8 floor they sit under
        return F8_MIN_NORMAL
    return 2.0**-126


def quantize_to(x, p: Precision) -> np.ndarray:
    """Round a float32 tensor to the given compute precision.

    P4 uses per-tensor 4-bit RTN, P8 the E4M3 grid, P16 BF16, P32 is identity.
    """
    p = Precision(p)
    x = np.asarray(x, dtype=np.float32)
    if p is Precision.P32:
        return x
    if p is Precision.P16:
        return round_bf16(x)
    if p is Precision.P8:
        return round_f8(x)
    q, _ = quantize_rtn(x, 4)
    return q.astype(np.float32)


def bytes_per_element(p: Precision) -> float:
    return {Precision.P4: 0.5, Precision.P8: 1.0, Precision.P16: 2.0, Precision.P32: 4.0}[Precision(p)]
