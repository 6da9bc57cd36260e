"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery to backpropagate a tiny decoder-only transformer into
its adapter matrices: a Tensor wrapper recording a tape of closures, plus
the primitive ops the model needs. Frozen weights participate as plain
ndarrays (no nodes, no gradient buffers), so the set of leaves with
gradients is exactly the set of trainable parameters. Dtype follows the
data, which lets the same graph run at fp64 for oracle tests.
"""

from __future__ import annotations

import numpy as np

from . import attention as attn_mod
from .errors import DimensionError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse sweep from this node; grad defaults to ones (use on scalars)."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data) if grad is None else np.asarray(grad))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(isinstance(p, Tensor) for p in parents):
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shapes disagree: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _node(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g * s)

    return _node(a.data * a.data.dtype.type(s), (a,), backward)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (dropout masks)."""
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def linear_frozen(x: Tensor, w: np.ndarray) -> Tensor:
    """y = x @ w.T with w a frozen dense matrix; gradient flows to x only."""
    x = _as_tensor(x)
    if x.data.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input width {x.data.shape[-1]} != k {w.shape[1]}")

    def backward(g):
        x._accumulate(g @ w)

    return _node(x.data @ w.T, (x,), backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g.T)

    return _node(a.data.T, (a,), backward)


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        x._accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _node(out, (x,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation gelu."""
    x = _as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        dt = (1.0 - t**2) * du
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x.data * dt))

    return _node(out, (x,), backward)


def rmsnorm(x: Tensor, weight: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Row-wise RMS normalization with a frozen gain vector."""
    x = _as_tensor(x)
    d = x.data.shape[-1]
    ms = np.mean(x.data**2, axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    xhat = x.data * inv

    def backward(g):
        gw = g * weight
        dot = np.sum(gw * x.data, axis=-1, keepdims=True)
        x._accumulate(inv * gw - (inv**3 / d) * dot * x.data)

    return _node(xhat * weight, (x,), backward)


def rope_rotate(x: np.ndarray, positions: np.ndarray, head_dim: int, base: float = 10000.0,
                inverse: bool = False) -> np.ndarray:
    """Rotary position mixing of pair dims (2j, 2j+1) within one head; pure function."""
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    if inverse:
        ang = -ang
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    x_even = x[:, 0::2]
    x_odd = x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = x_even * cos - x_odd * sin
    out[:, 1::2] = x_even * sin + x_odd * cos
    return out


def causal_self_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    kernel: str = "naive",
    tile_size: int = 16,
    rope: bool = True,
) -> Tensor:
    """Multi-head causal attention as one taped node.

    Forward runs the selected kernel per head (rotary mixing applied to q/k
    first). Backward uses the standard dense attention gradient built from
    recomputed naive probabilities, which is exact for the naive forward and
    within kernel tolerance for the streaming forward; the rotation is
    orthogonal so its gradient is the inverse rotation.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    seq, d_model = q.data.shape
    if d_model % n_heads:
        raise DimensionError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    hd = d_model // n_heads
    positions = np.arange(seq)
    scale_val = 1.0 / np.sqrt(hd)

    out = np.empty_like(q.data)
    saved = []
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        qh = rope_rotate(q.data[:, sl], positions, hd) if rope else q.data[:, sl]
        kh = rope_rotate(k.data[:, sl], positions, hd) if rope else k.data[:, sl]
        vh = v.data[:, sl]
        inp = attn_mod.AttentionInputs(q=qh, k=kh, v=vh, causal=True, scale=scale_val,
                                       tile_size=tile_size)
        out[:, sl] = attn_mod.run_kernel(inp, kernel)
        saved.append((qh, kh, vh, inp))

    def backward(g):
        dq = np.zeros_like(q.data)
        dk = np.zeros_like(k.data)
        dv = np.zeros_like(v.data)
        for h in range(n_heads):
            sl = slice(h * hd, (h + 1) * hd)
            qh, kh, vh, inp = saved[h]
            p = attn_mod.attention_naive(inp, return_probs=True)[1]
            go = g[:, sl]
            dvh = p.T @ go
            dp = go @ vh.T
            ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
            dqh = (ds @ kh) * qh.dtype.type(scale_val)
            dkh = (ds.T @ qh) * qh.dtype.type(scale_val)
            if rope:
                dqh = rope_rotate(dqh, positions, hd, inverse=True)
                dkh = rope_rotate(dkh, positions, hd, inverse=True)
            dq[:, sl] = dqh
            dk[:, sl] = dkh
            dv[:, sl] = dvh
        q._accumulate(dq)
        k._accumulate(dk)
        v._accumulate(dv)

    return _node(out, (q, k, v), backward)


def cross_entropy_sum(logits: Tensor, targets: np.ndarray, mask: np.ndarray):
    """Masked sum of next-token NLL; returns (loss_sum Tensor, active count).

    targets/mask cover the same positions as the logit rows. Softmax is
    computed stably; backward is (softmax - onehot) on masked rows only.
    """
    logits = _as_tensor(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logprobs = z - logsumexp
    rows = np.arange(targets.shape[0])
    nll = -logprobs[rows, targets]
    active = mask.astype(logits.data.dtype)
    loss_sum = float(np.sum(nll * active))
    count = int(mask.sum())

    def backward(g):
        soft = np.exp(logprobs)
        soft[rows, targets] -= 1.0
        logits._accumulate(g * soft * active[:, None])

    out = _node(np.asarray(loss_sum, dtype=logits.data.dtype), (logits,), backward)
    return out, count
