"""Low-rank adapter algebra for frozen base matrices.

An adapter attaches a trainable update delta_W = B @ A to a frozen base
W0 (d x k), contributing scale * x @ A.T @ B.T to the forward pass with
scale = alpha / r. B starts at zero so a fresh adapter is an exact no-op.
Dropout applies to the adapter input path only, never to the base path.
All functions here are pure given explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .quantize import PrecisionPolicy, QuantizedTensor, dequantize

TARGET_SELECTORS = (
    "key_query",
    "all_attention",
    "all_ffn",
    "all_layers",
    "attention_plus_ffn_output",
)

# roles picked per selector; "output" roles are the attention output
# projection and the FFN down (output) projection
_ATTENTION_ROLES = ("attn.q", "attn.k", "attn.v", "attn.o")
_FFN_ROLES = ("ffn.gate", "ffn.up", "ffn.down", "ffn.in", "ffn.out")
_OUTPUT_ROLES = ("attn.o", "ffn.down", "ffn.out")


@dataclass
class LoRAAdapter:
    """One low-rank pair attached to a named base matrix."""

    A: np.ndarray  # (r, k)
    B: np.ndarray  # (d, r)
    rank_r: int
    alpha: float
    dropout_p: float
    target_name: str

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank_r

    def delta_w(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)


@dataclass(frozen=True)
class TargetSet:
    """A selector plus the concrete matrix names it resolves to."""

    selector: str
    resolved: tuple


def _role_of(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[1:]) if parts[0].startswith("layer") else name


def resolve_targets(selector: str, weight_names) -> TargetSet:
    """Resolve a selector against a model's dotted weight names.

    Only per-layer attention/FFN matrices are candidates; norms,
    embeddings and the LM head are never adapter targets.
    """
    if selector not in TARGET_SELECTORS:
        raise ConfigError(
            f"unknown target selector {selector!r}; expected one of {TARGET_SELECTORS}"
        )
    picked = []
    for name in weight_names:
        role = _role_of(name)
        if role not in _ATTENTION_ROLES and role not in _FFN_ROLES:
            continue
        if selector == "key_query" and role in ("attn.k", "attn.q"):
            picked.append(name)
        elif selector == "all_attention" and role in _ATTENTION_ROLES:
            picked.append(name)
        elif selector == "all_ffn" and role in _FFN_ROLES:
            picked.append(name)
        elif selector == "all_layers":
            picked.append(name)
        elif selector == "attention_plus_ffn_output" and role in _OUTPUT_ROLES:
            picked.append(name)
    return TargetSet(selector=selector, resolved=tuple(picked))


def init_adapter(
    d: int, k: int, r: int, alpha: float, dropout_p: float, seed: int, target_name: str = ""
) -> LoRAAdapter:
    """A ~ N(0, 1/r) from the seeded generator, B = 0, so delta_W starts at 0."""
    if r < 1:
        raise ConfigError(f"rank must be >= 1, got {r}")
    if r > min(d, k):
        raise ConfigError(f"rank {r} exceeds min(d={d}, k={k})")
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigError(f"dropout_p must be in [0, 1), got {dropout_p}")
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    A = (rng.standard_normal((r, k)) / np.sqrt(r)).astype(np.float32)
    B = np.zeros((d, r), dtype=np.float32)
    return LoRAAdapter(A=A, B=B, rank_r=r, alpha=alpha, dropout_p=dropout_p, target_name=target_name)


def dropout_mask(shape, p: float, seed: int) -> np.ndarray:
    """Inverted-dropout mask: keep with prob 1-p, scale kept entries by 1/(1-p)."""
    if p == 0.0:
        return np.ones(shape, dtype=np.float32)
    rng = np.random.default_rng(seed)
    keep = rng.random(shape) >= p
    return keep.astype(np.float32) / np.float32(1.0 - p)


def _base_dense(base, policy: PrecisionPolicy) -> np.ndarray:
    if isinstance(base, QuantizedTensor):
        return dequantize(base, policy)
    return np.asarray(base)


def adapter_forward(
    x: np.ndarray,
    base,
    ad: LoRAAdapter,
    training: bool = False,
    seed: int = 0,
    policy: PrecisionPolicy = PrecisionPolicy(),
) -> np.ndarray:
    """x @ W0.T + (alpha/r) * dropout(x) @ A.T @ B.T.

    With training=False dropout is the identity, so repeated calls on the
    same input are bit-identical.
    """
    x = np.asarray(x)
    w0 = _base_dense(base, policy)
    if x.ndim != 2:
        raise DimensionError("adapter_forward expects a 2-D input")
    if x.shape[1] != w0.shape[1]:
        raise DimensionError(f"input width {x.shape[1]} != base k {w0.shape[1]}")
    if ad.A.shape[1] != w0.shape[1] or ad.B.shape[0] != w0.shape[0]:
        raise DimensionError(
            f"adapter ({ad.B.shape[0]}x{ad.A.shape[1]}) does not fit base {w0.shape}"
        )
    z = x * dropout_mask(x.shape, ad.dropout_p, seed) if training else x
    return x @ w0.T + np.float32(ad.scaling) * ((z @ ad.A.T) @ ad.B.T)


def adapter_grads(x: np.ndarray, upstream_grad: np.ndarray, ad: LoRAAdapter):
    """Analytic gradients of the scaled low-rank path w.r.t. A and B.

    The base is frozen; its gradient is never formed. For
    y = s * x A^T B^T with upstream G: dA = s B^T G^T x, dB = s G^T x A^T.
    """
    x = np.asarray(x)
    g = np.asarray(upstream_grad)
    if x.ndim != 2 or g.ndim != 2:
        raise DimensionError("adapter_grads expects 2-D operands")
    if g.shape[0] != x.shape[0]:
        raise DimensionError(f"batch dims disagree: x {x.shape} vs grad {g.shape}")
    if x.shape[1] != ad.A.shape[1] or g.shape[1] != ad.B.shape[0]:
        raise DimensionError("operand widths do not match the adapter")
    s = ad.scaling
    grad_b = s * (g.T @ (x @ ad.A.T))
    grad_a = s * (ad.B.T @ g.T @ x)
    return grad_a, grad_b


def merge(ad: LoRAAdapter, base_dense: np.ndarray) -> np.ndarray:
    """W0 + (alpha/r) * B @ A, for adapter-free inference."""
    w0 = np.asarray(base_dense)
    if ad.B.shape[0] != w0.shape[0] or ad.A.shape[1] != w0.shape[1]:
        raise DimensionError(f"adapter does not fit base {w0.shape}")
    return w0 + ad.delta_w().astype(w0.dtype)


def count_trainable(model_dims, targets: TargetSet, r: int):
    """Adapter parameter count r*(d+k) summed over targets, and its fraction of the base.

    model_dims is the complete (name, d, k) list for the architecture; the
    fraction denominator is the total base parameter count sum(d*k).
    """
    if r < 1:
        raise ConfigError(f"rank must be >= 1, got {r}")
    dims = {name: (d, k) for name, d, k in model_dims}
    total = sum(d * k for _, d, k in model_dims)
    count = 0
    for name in targets.resolved:
        if name not in dims:
            raise ConfigError(f"target {name!r} not present in model dims")
        d, k = dims[name]
        count += r * (d + k)
    return count, count / total
