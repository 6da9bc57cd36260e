"""Blockwise 4-bit normal-float quantization with double-quantized scales.

Frozen base weights are stored as packed 4-bit codes into a 16-level
normal-float codebook, one absolute-maximum scale per block. The per-block
absmax constants are themselves quantized to 8 bits per block, with one
full-precision scale per superblock of blocks ("double quantization").
Dequantization is exact and deterministic; it is the path every forward
pass takes, so all three operations here are pure functions of their
inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError, IntegrityError

# 16-level normal-float code points: quantiles of N(0,1) at evenly spaced
# probabilities over each sign half (tail probability 0.9677083), a forced
# zero, normalized so the endpoints are exactly -1 and +1. Frozen from an
# inverse-normal-CDF computation at float64; tests regenerate them
# independently. The positive half carries 8 levels, the negative half 7,
# so the widest gap sits between -1.0 and its neighbor.
NF4_CODE_POINTS = (
    -1.0,
    -0.6961928906037205,
    -0.5250730386952291,
    -0.3949174906993099,
    -0.2844413576181077,
    -0.18477343519288886,
    -0.09104999214427946,
    0.0,
    0.07958032909416937,
    0.16093017270493618,
    0.2461122939299359,
    0.33791519352165506,
    0.44070980241319013,
    0.562616970075237,
    0.7229567278928821,
    1.0,
)

COMPUTE_WIDTHS = ("fp32", "bf16-emulated")
C2_CODECS = ("affine8", "fp8-e4m3")

C1_RECORD_BYTES = 4  # one fp32 scale per superblock


@dataclass(frozen=True)
class NF4Codebook:
    """Ordered 4-bit code points in [-1, 1].

    Invariants: exactly 16 strictly increasing values, an exact 0.0 entry,
    endpoints -1.0 and +1.0.
    """

    values: tuple = NF4_CODE_POINTS

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (16,):
            raise ConfigError(f"codebook must have 16 values, got {v.shape}")
        if not np.all(np.diff(v) > 0):
            raise ConfigError("codebook values must be strictly increasing")
        if v[0] != -1.0 or v[-1] != 1.0:
            raise ConfigError("codebook endpoints must be -1.0 and +1.0")
        if 0.0 not in self.values:
            raise ConfigError("codebook must contain an exact 0.0")

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.asarray(self.values, dtype=dtype)

    @property
    def zero_index(self) -> int:
        return self.values.index(0.0)

    @property
    def max_gap(self) -> float:
        v = np.asarray(self.values, dtype=np.float64)
        return float(np.diff(v).max())


DEFAULT_CODEBOOK = NF4Codebook()


@dataclass(frozen=True)
class PrecisionPolicy:
    """Numeric behavior fixed for the lifetime of a run.

    compute_width: dtype of dequantized values and matmul accumulation.
        "bf16-emulated" rounds to bfloat16 (nearest-even) after each
        primitive op while storing in fp32 arrays.
    c2_codec: how per-block absmax constants are encoded to 8 bits.
    """

    compute_width: str = "fp32"
    c2_codec: str = "affine8"

    def __post_init__(self):
        if self.compute_width not in COMPUTE_WIDTHS:
            raise ConfigError(f"compute_width must be one of {COMPUTE_WIDTHS}")
        if self.c2_codec not in C2_CODECS:
            raise ConfigError(f"c2_codec must be one of {C2_CODECS}")


def round_to_bf16(x: np.ndarray) -> np.ndarray:
    """Round fp32 values to the bfloat16 grid (round-to-nearest-even), keep fp32 storage."""
    a = np.asarray(x, dtype=np.float32)
    u = a.view(np.uint32)
    rounding = ((u >> 16) & 1) + np.uint32(0x7FFF)
    out = ((u + rounding) & np.uint32(0xFFFF0000)).view(np.float32)
    return np.where(np.isnan(a), a, out).astype(np.float32)


def apply_compute_width(x: np.ndarray, policy: PrecisionPolicy) -> np.ndarray:
    if policy.compute_width == "bf16-emulated":
        return round_to_bf16(x)
    return np.asarray(x, dtype=np.float32)


# ---------------------------------------------------------------------------
# fp8 E4M3 codec (sign, 4 exponent bits, 3 mantissa bits, bias 7, no inf,
# 0xFF/0x7F = NaN, max finite 448). Only the nonnegative half is used here
# because absmax values are scaled into [0, 1] before encoding.
# ---------------------------------------------------------------------------


def _fp8_e4m3_decode_table() -> np.ndarray:
    codes = np.arange(256, dtype=np.uint32)
    sign = np.where(codes >> 7, -1.0, 1.0)
    exp = (codes >> 3) & 0xF
    man = codes & 0x7
    sub = (man / 8.0) * 2.0**-6
    norm = (1.0 + man / 8.0) * np.exp2(exp.astype(np.float64) - 7.0)
    vals = sign * np.where(exp == 0, sub, norm)
    vals[(exp == 15) & (man == 7)] = np.nan
    return vals.astype(np.float64)


_FP8_TABLE = _fp8_e4m3_decode_table()
# nonnegative finite values sorted ascending, with their byte codes
_FP8_POS_CODES = np.array(
    sorted((c for c in range(128) if not np.isnan(_FP8_TABLE[c])), key=lambda c: _FP8_TABLE[c]),
    dtype=np.uint8,
)
_FP8_POS_VALUES = _FP8_TABLE[_FP8_POS_CODES]


def fp8_e4m3_encode(x: np.ndarray) -> np.ndarray:
    """Encode nonnegative values to the nearest finite e4m3 byte (ties to lower code)."""
    v = np.clip(np.asarray(x, dtype=np.float64), 0.0, _FP8_POS_VALUES[-1])
    mids = (_FP8_POS_VALUES[1:] + _FP8_POS_VALUES[:-1]) / 2.0
    idx = np.searchsorted(mids, v, side="left")
    return _FP8_POS_CODES[idx]


def fp8_e4m3_decode(codes: np.ndarray) -> np.ndarray:
    vals = _FP8_TABLE[np.asarray(codes, dtype=np.uint8)]
    return vals


# ---------------------------------------------------------------------------
# Quantized tensor container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizedTensor:
    """NF4 codes plus two-level quantization constants for one weight matrix.

    codes holds two 4-bit indices per byte, row-major over the flattened
    tensor (element 2i in the low nibble). c2_codes holds one encoded absmax
    byte per block; c1_scales one fp32 scale per superblock. Immutable after
    construction and safe to share across threads.
    """

    shape: tuple
    codes: bytes
    block_size: int
    c2_codes: bytes
    superblock_size: int
    c1_scales: np.ndarray  # fp32, one per superblock
    c2_codec: str = "affine8"
    codebook: NF4Codebook = field(default=DEFAULT_CODEBOOK)

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.n_elements / self.block_size)

    @property
    def n_superblocks(self) -> int:
        return math.ceil(self.n_blocks / self.superblock_size)

    def payload_nbytes(self) -> int:
        """Serialized data bytes: ceil(n/2) + one byte per block + 4 per superblock."""
        return (self.n_elements + 1) // 2 + self.n_blocks + self.n_superblocks * C1_RECORD_BYTES

    def validate(self) -> None:
        if len(self.codes) != (self.n_elements + 1) // 2:
            raise IntegrityError(
                f"codes length {len(self.codes)} != expected {(self.n_elements + 1) // 2}"
            )
        if len(self.c2_codes) != self.n_blocks:
            raise IntegrityError(f"c2_codes length {len(self.c2_codes)} != {self.n_blocks} blocks")
        if self.c1_scales.shape != (self.n_superblocks,):
            raise IntegrityError(
                f"c1_scales shape {self.c1_scales.shape} != ({self.n_superblocks},)"
            )
        absmax = self.decoded_absmax()
        bad = np.nonzero(~(absmax >= 0))[0]
        if bad.size:
            raise IntegrityError(f"decoded absmax invalid at block {int(bad[0])}")

    def unpacked_codes(self) -> np.ndarray:
        """4-bit indices as a uint8 array of length n_elements."""
        raw = np.frombuffer(self.codes, dtype=np.uint8)
        lo = raw & 0x0F
        hi = raw >> 4
        out = np.empty(raw.size * 2, dtype=np.uint8)
        out[0::2] = lo
        out[1::2] = hi
        return out[: self.n_elements]

    def decoded_absmax(self) -> np.ndarray:
        """Per-block absmax decoded through the c2 codec, fp32, length n_blocks."""
        c2 = np.frombuffer(self.c2_codes, dtype=np.uint8)
        sb_index = np.arange(self.n_blocks) // self.superblock_size
        scales = self.c1_scales[sb_index].astype(np.float64)
        if self.c2_codec == "affine8":
            vals = scales * (c2.astype(np.float64) / 255.0)
        else:
            unit = fp8_e4m3_decode(c2)
            bad = np.nonzero(np.isnan(unit))[0]
            if bad.size:
                raise IntegrityError(f"c2 code decodes to NaN at block {int(bad[0])}")
            vals = scales * unit
        return vals.astype(np.float32)


def _pack_nibbles(codes: np.ndarray) -> bytes:
    codes = codes.astype(np.uint8)
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).tobytes()


def _encode_absmax(absmax: np.ndarray, superblock_size: int, codec: str):
    """Second quantization level: absmax -> (byte codes, per-superblock fp32 scale).

    The scale is the largest absmax in the superblock, so the unit-interval
    ratios are exact at the top and a zero superblock round-trips to zeros.
    """
    n_blocks = absmax.size
    n_super = math.ceil(n_blocks / superblock_size)
    codes = np.zeros(n_blocks, dtype=np.uint8)
    scales = np.zeros(n_super, dtype=np.float32)
    for s in range(n_super):
        seg = absmax[s * superblock_size : (s + 1) * superblock_size]
        smax = float(seg.max()) if seg.size else 0.0
        scales[s] = np.float32(smax)
        if smax == 0.0:
            continue
        unit = seg.astype(np.float64) / np.float64(scales[s])
        if codec == "affine8":
            codes[s * superblock_size : s * superblock_size + seg.size] = np.clip(
                np.rint(unit * 255.0), 0, 255
            ).astype(np.uint8)
        else:
            codes[s * superblock_size : s * superblock_size + seg.size] = fp8_e4m3_encode(unit)
    return codes.tobytes(), scales


def quantize_nf4(
    tensor: np.ndarray,
    block_size: int = 64,
    superblock_size: int = 256,
    policy: PrecisionPolicy = PrecisionPolicy(),
    codebook: NF4Codebook = DEFAULT_CODEBOOK,
) -> QuantizedTensor:
    """Quantize a real matrix to blockwise NF4 with double-quantized absmax.

    Each element is mapped to the nearest code point after scaling by its
    block's absmax; ties go to the lower index. Blocks with absmax 0 take
    the zero code point everywhere. Raises on non-finite input (reported
    with the offending flat element index) and on block_size < 2.
    """
    if block_size < 2:
        raise ConfigError(f"block_size must be >= 2, got {block_size}")
    if superblock_size < 1:
        raise ConfigError(f"superblock_size must be >= 1, got {superblock_size}")
    arr = np.asarray(tensor, dtype=np.float32)
    flat = arr.reshape(-1)
    bad = np.nonzero(~np.isfinite(flat))[0]
    if bad.size:
        raise DataError(f"non-finite value at flat element index {int(bad[0])}")
    n = flat.size
    n_blocks = math.ceil(n / block_size)
    pad = n_blocks * block_size - n
    padded = np.concatenate([flat, np.zeros(pad, dtype=np.float32)]) if pad else flat
    blocks = padded.reshape(n_blocks, block_size)

    absmax = np.abs(blocks).max(axis=1).astype(np.float32)
    safe = np.where(absmax == 0.0, np.float32(1.0), absmax)
    normalized = blocks / safe[:, None]

    cb = codebook.as_array(np.float64)
    mids = (cb[1:] + cb[:-1]) / 2.0
    idx = np.searchsorted(mids, normalized.astype(np.float64).reshape(-1), side="left")
    idx = idx.astype(np.uint8)
    zero_mask = np.repeat(absmax == 0.0, block_size)
    idx[zero_mask] = codebook.zero_index
    idx = idx[:n]

    c2_codes, c1_scales = _encode_absmax(absmax, superblock_size, policy.c2_codec)
    qt = QuantizedTensor(
        shape=tuple(arr.shape),
        codes=_pack_nibbles(idx),
        block_size=block_size,
        c2_codes=c2_codes,
        superblock_size=superblock_size,
        c1_scales=c1_scales,
        c2_codec=policy.c2_codec,
        codebook=codebook,
    )
    return qt


def dequantize(qt: QuantizedTensor, policy: PrecisionPolicy = PrecisionPolicy()) -> np.ndarray:
    """Exact inverse mapping: codebook[code] * decoded_absmax(block), in compute width."""
    qt.validate()
    idx = qt.unpacked_codes()
    if idx.size and int(idx.max()) >= 16:
        block = int(np.argmax(idx >= 16) // qt.block_size)
        raise IntegrityError(f"code index out of range in block {block}")
    cb = qt.codebook.as_array(np.float32)
    vals = cb[idx]
    absmax = qt.decoded_absmax()
    block_of = np.arange(qt.n_elements) // qt.block_size
    out = vals * absmax[block_of]
    return apply_compute_width(out, policy).reshape(qt.shape)


def quantized_matmul(
    x: np.ndarray, qt: QuantizedTensor, policy: PrecisionPolicy = PrecisionPolicy()
) -> np.ndarray:
    """x @ dequantize(qt), checked and computed in the policy's compute width."""
    x = np.asarray(x)
    if x.ndim != 2 or len(qt.shape) != 2:
        raise DimensionError("quantized_matmul expects 2-D operands")
    if x.shape[1] != qt.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {x.shape} @ {qt.shape}")
    w = dequantize(qt, policy)
    out = apply_compute_width(x, policy) @ w
    return apply_compute_width(out, policy)


def storage_bits_per_param(
    n_elements: int, block_size: int = 64, superblock_size: int = 256, double_quant: bool = True
) -> float:
    """Closed-form payload bits per element.

    With double quantization: 4 + 8/block + 32/(block*superblock).
    Without: absmax stored as raw fp32 per block, 4 + 32/block.
    """
    n_blocks = math.ceil(n_elements / block_size)
    if double_quant:
        n_super = math.ceil(n_blocks / superblock_size)
        payload = (n_elements + 1) // 2 + n_blocks + n_super * C1_RECORD_BYTES
    else:
        payload = (n_elements + 1) // 2 + n_blocks * 4
    return payload * 8 / n_elements
