"""Binary checkpoint container shared by every module that persists tensors.

Layout (little-endian throughout):

    magic "QLFG" | format version u32 | entry count u32 | directory | payloads

Directory entry: name length u32, UTF-8 name, dtype tag u8, shape rank u64,
dims as u64 each, absolute byte offset u64, byte length u64.

Dtype tags: 0 = fp32 raw row-major, 1 = fp64 raw, 2 = quantized NF4 payload,
3 = UTF-8 metadata text. A quantized payload is: block_size u32,
superblock_size u32, c2 codec tag u8, then codes, c2 codes and c1 records in
that order. Metadata (precision policy, model config, adapter settings)
travels as a JSON text entry named "__meta__".
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError
from .quantize import C2_CODECS, QuantizedTensor

MAGIC = b"QLFG"
FORMAT_VERSION = 1

DTYPE_FP32 = 0
DTYPE_FP64 = 1
DTYPE_QUANT_NF4 = 2
DTYPE_META_UTF8 = 3

META_NAME = "__meta__"

_CODEC_TAG = {name: i for i, name in enumerate(C2_CODECS)}
_CODEC_NAME = {i: name for name, i in _CODEC_TAG.items()}


@dataclass
class _Entry:
    name: str
    dtype_tag: int
    shape: tuple
    payload: bytes


def _quant_payload(qt: QuantizedTensor) -> bytes:
    head = struct.pack(
        "<IIB", qt.block_size, qt.superblock_size, _CODEC_TAG[qt.c2_codec]
    )
    return head + qt.codes + qt.c2_codes + qt.c1_scales.astype("<f4").tobytes()


def _parse_quant_payload(shape: tuple, payload: bytes) -> QuantizedTensor:
    if len(payload) < 9:
        raise IntegrityError("quantized payload truncated before header")
    block_size, superblock_size, codec_tag = struct.unpack("<IIB", payload[:9])
    if codec_tag not in _CODEC_NAME:
        raise IntegrityError(f"unknown c2 codec tag {codec_tag}")
    n = int(np.prod(shape))
    n_codes = (n + 1) // 2
    n_blocks = math.ceil(n / block_size)
    n_super = math.ceil(n_blocks / superblock_size)
    expected = 9 + n_codes + n_blocks + 4 * n_super
    if len(payload) != expected:
        raise IntegrityError(f"quantized payload is {len(payload)} bytes, expected {expected}")
    off = 9
    codes = payload[off : off + n_codes]
    off += n_codes
    c2 = payload[off : off + n_blocks]
    off += n_blocks
    c1 = np.frombuffer(payload[off:], dtype="<f4").astype(np.float32)
    qt = QuantizedTensor(
        shape=tuple(shape),
        codes=codes,
        block_size=block_size,
        c2_codes=c2,
        superblock_size=superblock_size,
        c1_scales=c1,
        c2_codec=_CODEC_NAME[codec_tag],
    )
    qt.validate()
    return qt


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors (ndarray or QuantizedTensor) plus optional JSON metadata."""
    entries: list[_Entry] = []
    if meta is not None:
        text = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
        entries.append(_Entry(META_NAME, DTYPE_META_UTF8, (len(text),), text))
    for name in sorted(tensors):
        t = tensors[name]
        if isinstance(t, QuantizedTensor):
            entries.append(_Entry(name, DTYPE_QUANT_NF4, t.shape, _quant_payload(t)))
        else:
            arr = np.asarray(t)
            if arr.dtype == np.float64:
                tag, spec = DTYPE_FP64, "<f8"
            else:
                tag, spec = DTYPE_FP32, "<f4"
            entries.append(_Entry(name, tag, arr.shape, arr.astype(spec).tobytes()))

    dir_blob = b""
    dir_size = len(MAGIC) + 4 + 4
    fixed = []
    for e in entries:
        name_b = e.name.encode("utf-8")
        fixed.append(name_b)
        dir_size += 4 + len(name_b) + 1 + 8 + 8 * len(e.shape) + 8 + 8
    offset = dir_size
    for e, name_b in zip(entries, fixed):
        dir_blob += struct.pack("<I", len(name_b)) + name_b
        dir_blob += struct.pack("<B", e.dtype_tag)
        dir_blob += struct.pack("<Q", len(e.shape))
        for d in e.shape:
            dir_blob += struct.pack("<Q", d)
        dir_blob += struct.pack("<QQ", offset, len(e.payload))
        offset += len(e.payload)

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(entries)))
        f.write(dir_blob)
        for e in entries:
            f.write(e.payload)


def load_checkpoint(path):
    """Read a container; returns (tensors dict, meta dict or None)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise IntegrityError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported format version {version}")
    off = 12
    tensors: dict = {}
    meta = None
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (tag,) = struct.unpack_from("<B", blob, off)
        off += 1
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        shape = tuple(struct.unpack_from(f"<{rank}Q", blob, off)) if rank else ()
        off += 8 * rank
        payload_off, payload_len = struct.unpack_from("<QQ", blob, off)
        off += 16
        payload = blob[payload_off : payload_off + payload_len]
        if len(payload) != payload_len:
            raise IntegrityError(f"payload for {name!r} truncated")
        if tag == DTYPE_META_UTF8:
            meta = json.loads(payload.decode("utf-8"))
        elif tag == DTYPE_QUANT_NF4:
            tensors[name] = _parse_quant_payload(shape, payload)
        elif tag == DTYPE_FP32:
            tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
        elif tag == DTYPE_FP64:
            tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        else:
            raise IntegrityError(f"unknown dtype tag {tag} for {name!r}")
    return tensors, meta
