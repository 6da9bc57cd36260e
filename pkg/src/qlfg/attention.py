"""Causal attention kernels: a naive reference and a tiled streaming kernel.

Both compute softmax(Q K^T * scale + causal mask) V for one head. The naive
kernel materializes the full seq x seq score matrix; the streaming kernel
walks K/V tiles keeping a running row max, normalizer and output
accumulator, rescaling on every tile, and never holds more than one
seq x tile_size score block. The two must agree to 1e-5 in fp32 for every
tile size, which is the testable contract standing in for the fused-kernel
integration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

MASK_NEG = -1e9  # additive stand-in for -inf in the naive kernel


@dataclass(frozen=True)
class AttentionInputs:
    q: np.ndarray  # (seq, head_dim)
    k: np.ndarray
    v: np.ndarray
    causal: bool = True
    scale: float | None = None  # default 1/sqrt(head_dim)
    tile_size: int = 16

    def __post_init__(self):
        if self.q.shape != self.k.shape or self.q.shape != self.v.shape:
            raise DimensionError(
                f"Q/K/V shapes disagree: {self.q.shape} {self.k.shape} {self.v.shape}"
            )
        if self.q.ndim != 2:
            raise DimensionError("attention inputs must be 2-D (seq, head_dim)")
        if self.tile_size < 1:
            raise ConfigError(f"tile_size must be >= 1, got {self.tile_size}")

    @property
    def effective_scale(self) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(self.q.shape[1])


def attention_naive(inp: AttentionInputs, return_probs: bool = False):
    """Reference kernel; materializes the full score matrix."""
    q, k, v = inp.q, inp.k, inp.v
    seq = q.shape[0]
    dtype = q.dtype
    scores = (q @ k.T) * dtype.type(inp.effective_scale)
    if inp.causal:
        mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
        scores = np.where(mask, dtype.type(MASK_NEG), scores)
    scores = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=1, keepdims=True)
    out = weights @ v
    if return_probs:
        return out, weights
    return out


def attention_streaming(inp: AttentionInputs) -> np.ndarray:
    """Online-softmax kernel over K/V tiles.

    State per query row: running max m, normalizer l, accumulator row.
    Fully masked tiles contribute nothing; the running max starts at -inf
    and is substituted with 0 for the subtraction until a finite score
    arrives, which keeps exp() away from inf - inf.
    """
    q, k, v = inp.q, inp.k, inp.v
    seq, head_dim = q.shape
    dtype = q.dtype
    tile = inp.tile_size
    scale = dtype.type(inp.effective_scale)

    m = np.full(seq, -np.inf, dtype=dtype)
    l = np.zeros(seq, dtype=dtype)
    acc = np.zeros((seq, head_dim), dtype=dtype)
    rows = np.arange(seq)

    for t0 in range(0, seq, tile):
        t1 = min(t0 + tile, seq)
        s = (q @ k[t0:t1].T) * scale  # (seq, tile)
        if inp.causal:
            masked = rows[:, None] < np.arange(t0, t1)[None, :]
            s = np.where(masked, -np.inf, s)
        tile_max = s.max(axis=1)
        new_m = np.maximum(m, tile_max)
        safe_m = np.where(np.isinf(new_m), dtype.type(0.0), new_m)
        p = np.exp(s - safe_m[:, None])
        if inp.causal:
            p = np.where(masked, dtype.type(0.0), p)
        correction = np.exp(m - safe_m)
        correction = np.where(np.isneginf(m) & np.isneginf(new_m), dtype.type(1.0), correction)
        l = l * correction + p.sum(axis=1)
        acc = acc * correction[:, None] + p @ v[t0:t1]
        m = new_m

    return acc / l[:, None]


def attention_workspace_bytes(seq: int, head_dim: int, tile_size: int, kernel: str) -> int:
    """Peak fp32 score/state workspace the kernel needs, in bytes.

    naive: the full seq x seq score matrix. streaming: one seq x tile score
    block, the m/l/correction row state, and the output accumulator.
    """
    if seq < 1 or head_dim < 1 or tile_size < 1:
        raise ConfigError("workspace arguments must be positive")
    if kernel == "naive":
        return seq * seq * 4
    if kernel == "streaming":
        return seq * min(tile_size, seq) * 4 + 3 * seq * 4 + seq * head_dim * 4
    raise ConfigError(f"unknown kernel {kernel!r}")


def run_kernel(inp: AttentionInputs, kernel: str) -> np.ndarray:
    if kernel == "naive":
        return attention_naive(inp)
    if kernel == "streaming":
        return attention_streaming(inp)
    raise ConfigError(f"unknown kernel {kernel!r}; expected 'naive' or 'streaming'")
