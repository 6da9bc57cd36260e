"""Tiny decoder-only transformer with named, individually targetable matrices.

LLaMA-style block: pre-RMSNorm, rotary q/k, causal attention, gated-SiLU FFN
(plain-GELU variant available), byte-level tokenizer. Every linear weight
carries a dotted name (layer0.attn.q, layer2.ffn.down, ...) that target-set
resolution and checkpointing operate on. Base weights can be frozen into
blockwise NF4 with adapters attached per target set; after freezing, only
adapter matrices ever receive gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .adapters import LoRAAdapter, TargetSet, dropout_mask, init_adapter, resolve_targets
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, DimensionError
from .quantize import PrecisionPolicy, QuantizedTensor, dequantize, quantize_nf4
from .util import stable_seed

BOS_ID, EOS_ID, PAD_ID = 256, 257, 258
BYTE_VOCAB = 259

FFN_KINDS = ("gated_silu", "plain_gelu")


def encode_text(text: str) -> list[int]:
    """Byte-level tokenization; specials sit above the 256 byte values."""
    return list(text.encode("utf-8"))


def decode_tokens(ids) -> str:
    return bytes(int(t) for t in ids if int(t) < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class NanoTransformerConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 344
    vocab_size: int = BYTE_VOCAB
    max_seq: int = 256
    ffn_kind: str = "gated_silu"

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.n_heads, self.d_ffn, self.vocab_size) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.max_seq < 1:
            raise ConfigError("max_seq must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.ffn_kind not in FFN_KINDS:
            raise ConfigError(f"ffn_kind must be one of {FFN_KINDS}")

    def layer_roles(self):
        if self.ffn_kind == "gated_silu":
            return ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.gate", "ffn.up", "ffn.down")
        return ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.in", "ffn.out")

    def matrix_shape(self, role: str):
        d, f = self.d_model, self.d_ffn
        return {
            "attn.q": (d, d), "attn.k": (d, d), "attn.v": (d, d), "attn.o": (d, d),
            "ffn.gate": (f, d), "ffn.up": (f, d), "ffn.down": (d, f),
            "ffn.in": (f, d), "ffn.out": (d, f),
        }[role]


class NanoTransformer:
    """Holds named weights plus (after freezing) quantized bases and adapters."""

    def __init__(self, cfg: NanoTransformerConfig):
        self.cfg = cfg
        self.weights: dict[str, np.ndarray] = {}
        self.bases: dict[str, QuantizedTensor] = {}
        self.dense_cache: dict[str, np.ndarray] = {}
        self.adapters: dict[str, LoRAAdapter] = {}
        self.adapter_params: dict[str, tuple[ag.Tensor, ag.Tensor]] = {}
        self.target_set: TargetSet | None = None
        self.frozen = False
        self.policy = PrecisionPolicy()
        self.attn_kernel = "naive"
        self.attn_tile = 16
        self.dtype = np.float32
        self.dropout_seed = 0  # reseeded by the trainer

    # -- structure ---------------------------------------------------------

    def targetable_names(self) -> list[str]:
        return [f"layer{i}.{role}" for i in range(self.cfg.n_layers)
                for role in self.cfg.layer_roles()]

    def weight_names(self) -> list[str]:
        names = ["embed"]
        for i in range(self.cfg.n_layers):
            names.append(f"layer{i}.norm_attn")
            names.append(f"layer{i}.norm_ffn")
            names.extend(f"layer{i}.{role}" for role in self.cfg.layer_roles())
        names.extend(["final_norm", "lm_head"])
        return names

    def model_dims(self) -> list[tuple[str, int, int]]:
        """(name, d, k) for every weight; vectors count as (d, 1)."""
        dims = []
        for name in self.weight_names():
            w = self.weights[name]
            dims.append((name, w.shape[0], w.shape[1] if w.ndim == 2 else 1))
        return dims

    def param_count(self) -> int:
        return sum(w.size for w in self.weights.values())

    def base_param_count(self) -> int:
        """Base parameters including quantized matrices, excluding adapters."""
        return (sum(w.size for w in self.weights.values())
                + sum(qt.n_elements for qt in self.bases.values()))

    def base_matrix(self, name: str) -> np.ndarray:
        if name in self.dense_cache:
            return self.dense_cache[name]
        return self.weights[name]

    # -- forward graph -----------------------------------------------------

    def _linear(self, name: str, x: ag.Tensor, training: bool, microstep: int) -> ag.Tensor:
        y = ag.linear_frozen(x, self.base_matrix(name))
        if name in self.adapter_params:
            a_t, b_t = self.adapter_params[name]
            ad = self.adapters[name]
            z = x
            if training and ad.dropout_p > 0.0:
                mask = dropout_mask(x.shape, ad.dropout_p,
                                    stable_seed(self.dropout_seed, microstep, name))
                z = ag.mul_const(x, mask.astype(self.dtype))
            path = ag.matmul(ag.matmul(z, ag.transpose(a_t)), ag.transpose(b_t))
            y = ag.add(y, ag.scale(path, ad.scaling))
        return y

    def forward_graph(self, tokens: np.ndarray, training: bool = False,
                      microstep: int = 0) -> ag.Tensor:
        """Build the taped forward for one sequence; returns the logits node."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise DimensionError("forward_graph takes a single token sequence")
        if tokens.size and int(tokens.max()) >= self.cfg.vocab_size:
            raise DataError(
                f"token id {int(tokens.max())} out of range for vocab {self.cfg.vocab_size}"
            )
        x = ag.Tensor(self.weights["embed"][tokens])
        for i in range(self.cfg.n_layers):
            h = ag.rmsnorm(x, self.weights[f"layer{i}.norm_attn"])
            q = self._linear(f"layer{i}.attn.q", h, training, microstep)
            k = self._linear(f"layer{i}.attn.k", h, training, microstep)
            v = self._linear(f"layer{i}.attn.v", h, training, microstep)
            a = ag.causal_self_attention(q, k, v, self.cfg.n_heads,
                                         kernel=self.attn_kernel, tile_size=self.attn_tile)
            x = ag.add(x, self._linear(f"layer{i}.attn.o", a, training, microstep))
            h2 = ag.rmsnorm(x, self.weights[f"layer{i}.norm_ffn"])
            if self.cfg.ffn_kind == "gated_silu":
                gate = ag.silu(self._linear(f"layer{i}.ffn.gate", h2, training, microstep))
                up = self._linear(f"layer{i}.ffn.up", h2, training, microstep)
                f = self._linear(f"layer{i}.ffn.down", ag.mul(gate, up), training, microstep)
            else:
                f = self._linear(f"layer{i}.ffn.out",
                                 ag.gelu(self._linear(f"layer{i}.ffn.in", h2, training,
                                                      microstep)),
                                 training, microstep)
            x = ag.add(x, f)
        x = ag.rmsnorm(x, self.weights["final_norm"])
        return ag.linear_frozen(x, self.weights["lm_head"])

    def loss_graph(self, tokens: np.ndarray, loss_mask: np.ndarray, training: bool = False,
                   microstep: int = 0):
        """(loss_sum node, active target count, logits array) for one sequence."""
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.asarray(loss_mask)
        if mask.shape != tokens.shape:
            raise DimensionError(f"mask shape {mask.shape} != tokens {tokens.shape}")
        logits = self.forward_graph(tokens, training=training, microstep=microstep)
        if tokens.size < 2 or not mask[1:].any():
            return None, 0, logits
        loss_sum, count = ag.cross_entropy_sum(
            _slice_rows(logits, tokens.size - 1), tokens[1:], mask[1:]
        )
        return loss_sum, count, logits

    # -- lifecycle ---------------------------------------------------------

    def freeze_and_quantize(self, policy: PrecisionPolicy = PrecisionPolicy(),
                            block_size: int = 64, superblock_size: int = 256) -> "NanoTransformer":
        """Replace every targetable matrix by its quantized form; norms/embeddings stay fp32."""
        self.policy = policy
        for name in self.targetable_names():
            qt = quantize_nf4(self.weights[name], block_size, superblock_size, policy)
            self.bases[name] = qt
            self.dense_cache[name] = dequantize(qt, policy).astype(self.dtype)
            del self.weights[name]
        self.frozen = True
        return self

    def attach_adapters(self, selector: str, r: int, alpha: float, dropout_p: float,
                        seed: int) -> "NanoTransformer":
        if not self.frozen:
            raise ConfigError("attach_adapters requires a frozen model")
        ts = resolve_targets(selector, self.targetable_names())
        self.target_set = ts
        self.adapters = {}
        self.adapter_params = {}
        for name in ts.resolved:
            d, k = self.bases[name].shape
            ad = init_adapter(d, k, r, alpha, dropout_p, stable_seed(seed, name),
                              target_name=name)
            ad.A = ad.A.astype(self.dtype)
            ad.B = ad.B.astype(self.dtype)
            self.adapters[name] = ad
            self.adapter_params[name] = (ag.Tensor(ad.A, requires_grad=True),
                                         ag.Tensor(ad.B, requires_grad=True))
        return self

    def clone_adapter_state(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {n: (a.data.copy(), b.data.copy()) for n, (a, b) in self.adapter_params.items()}

    def restore_adapter_state(self, state) -> None:
        for n, (a, b) in state.items():
            self.adapter_params[n][0].data = a.copy()
            self.adapter_params[n][1].data = b.copy()
            self.adapters[n].A = self.adapter_params[n][0].data
            self.adapters[n].B = self.adapter_params[n][1].data

    def to_dtype(self, dtype) -> "NanoTransformer":
        """Cast all weights (and caches/adapters) for oracle runs at fp64."""
        self.dtype = dtype
        self.weights = {n: w.astype(dtype) for n, w in self.weights.items()}
        self.dense_cache = {n: w.astype(dtype) for n, w in self.dense_cache.items()}
        for n, ad in self.adapters.items():
            ad.A = ad.A.astype(dtype)
            ad.B = ad.B.astype(dtype)
            self.adapter_params[n] = (ag.Tensor(ad.A, requires_grad=True),
                                      ag.Tensor(ad.B, requires_grad=True))
        return self

    # -- inference helpers ---------------------------------------------------

    def sequence_logprobs(self, tokens) -> np.ndarray:
        """Log-probability of each next token: entry t scores tokens[t+1]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        logits = self.forward_graph(tokens).data
        z = logits - logits.max(axis=-1, keepdims=True)
        logprobs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return logprobs[np.arange(tokens.size - 1), tokens[1:]]

    def greedy_generate(self, prompt_tokens, max_new: int = 64) -> list[int]:
        out = list(int(t) for t in prompt_tokens)
        for _ in range(max_new):
            ctx = out[-self.cfg.max_seq:]
            logits = self.forward_graph(np.asarray(ctx)).data
            nxt = int(np.argmax(logits[-1]))
            out.append(nxt)
            if nxt == EOS_ID:
                break
        return out


def _slice_rows(logits: ag.Tensor, n: int) -> ag.Tensor:
    """First n rows of the logits node, gradient scattered back."""

    def backward(g):
        full = np.zeros_like(logits.data)
        full[:n] = g
        logits._accumulate(full)

    return ag._node(logits.data[:n], (logits,), backward)


RESIDUAL_OUT_ROLES = ("attn.o", "ffn.down", "ffn.out")


def build_model(cfg: NanoTransformerConfig, seed: int) -> NanoTransformer:
    """Deterministic dense fp32 initialization from the seed.

    Linear weights use 1/sqrt(fan_in) scaling, with residual-branch outputs
    (attn.o, ffn.down/out) shrunk by a further 1/(2*n_layers). The base
    stays frozen for its whole adapter-training life, so two properties
    matter more than trainability: the readout needs dynamic range for
    confident predictions (a timid lm_head caps the reachable logit gap and
    floors the fine-tuning loss), and the exact, never-quantized embedding
    must dominate the residual stream so blockwise quantization of the
    layer matrices perturbs next-token argmaxes only marginally.
    """
    model = NanoTransformer(cfg)
    rng = np.random.default_rng(seed)
    model.weights["embed"] = rng.standard_normal((cfg.vocab_size, cfg.d_model)
                                                 ).astype(np.float32)
    for i in range(cfg.n_layers):
        model.weights[f"layer{i}.norm_attn"] = np.ones(cfg.d_model, dtype=np.float32)
        model.weights[f"layer{i}.norm_ffn"] = np.ones(cfg.d_model, dtype=np.float32)
        for role in cfg.layer_roles():
            shape = cfg.matrix_shape(role)
            std = 1.0 / np.sqrt(shape[1])
            if role in RESIDUAL_OUT_ROLES:
                std /= 2.0 * cfg.n_layers
            model.weights[f"layer{i}.{role}"] = (rng.standard_normal(shape) * std
                                                 ).astype(np.float32)
    model.weights["final_norm"] = np.ones(cfg.d_model, dtype=np.float32)
    model.weights["lm_head"] = (rng.standard_normal((cfg.vocab_size, cfg.d_model))
                                * (1.0 / np.sqrt(cfg.d_model))).astype(np.float32)
    return model


def save_model(model: NanoTransformer, path) -> None:
    """Persist the model to the shared container.

    Frozen targetable matrices go out as quantized payloads, everything else
    as fp32; adapters use the <target>.lora_A / <target>.lora_B convention.
    The precision policy and config ride in the header metadata.
    """
    tensors: dict = {}
    tensors.update(model.weights)
    tensors.update(model.bases)
    for name, ad in model.adapters.items():
        tensors[f"{name}.lora_A"] = ad.A
        tensors[f"{name}.lora_B"] = ad.B
    meta = {
        "kind": "nano_transformer",
        "config": {
            "n_layers": model.cfg.n_layers, "d_model": model.cfg.d_model,
            "n_heads": model.cfg.n_heads, "d_ffn": model.cfg.d_ffn,
            "vocab_size": model.cfg.vocab_size, "max_seq": model.cfg.max_seq,
            "ffn_kind": model.cfg.ffn_kind,
        },
        "policy": {"compute_width": model.policy.compute_width,
                   "c2_codec": model.policy.c2_codec},
        "frozen": model.frozen,
        "attention": {"kernel": model.attn_kernel, "tile_size": model.attn_tile},
    }
    if model.adapters:
        first = next(iter(model.adapters.values()))
        meta["adapters"] = {
            "selector": model.target_set.selector if model.target_set else None,
            "r": first.rank_r, "alpha": first.alpha, "dropout_p": first.dropout_p,
        }
    save_checkpoint(path, tensors, meta)


def load_model(path) -> NanoTransformer:
    tensors, meta = load_checkpoint(path)
    if not meta or meta.get("kind") != "nano_transformer":
        raise DataError(f"{path} is not a model checkpoint")
    cfg = NanoTransformerConfig(**meta["config"])
    model = NanoTransformer(cfg)
    model.policy = PrecisionPolicy(**meta["policy"])
    model.attn_kernel = meta["attention"]["kernel"]
    model.attn_tile = int(meta["attention"]["tile_size"])
    adapter_names = {}
    for name, t in tensors.items():
        if name.endswith(".lora_A") or name.endswith(".lora_B"):
            adapter_names.setdefault(name.rsplit(".", 1)[0], {})[name[-1]] = t
        elif isinstance(t, QuantizedTensor):
            model.bases[name] = t
            model.dense_cache[name] = dequantize(t, model.policy).astype(np.float32)
        else:
            model.weights[name] = t
    model.frozen = bool(meta.get("frozen"))
    if adapter_names:
        ameta = meta["adapters"]
        model.target_set = TargetSet(selector=ameta["selector"],
                                     resolved=tuple(sorted(adapter_names)))
        for name, ab in sorted(adapter_names.items()):
            ad = LoRAAdapter(A=ab["A"], B=ab["B"], rank_r=int(ameta["r"]),
                             alpha=float(ameta["alpha"]), dropout_p=float(ameta["dropout_p"]),
                             target_name=name)
            model.adapters[name] = ad
            model.adapter_params[name] = (ag.Tensor(ad.A, requires_grad=True),
                                          ag.Tensor(ad.B, requires_grad=True))
    return model


def forward_loss(model: NanoTransformer, token_batch, loss_mask):
    """Masked token-mean cross entropy over a batch plus the full logits.

    Rows are processed independently (causal prediction of token t+1 from
    position t); positions whose mask is zero contribute nothing, so an
    all-zero mask yields loss 0.0 with a warning.
    """
    batch = np.atleast_2d(np.asarray(token_batch, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(loss_mask))
    if mask.shape != batch.shape:
        raise DimensionError(f"mask shape {mask.shape} != batch {batch.shape}")
    total, count = 0.0, 0
    logits_rows = []
    for row in range(batch.shape[0]):
        loss_sum, c, logits = model.loss_graph(batch[row], mask[row])
        logits_rows.append(logits.data)
        if loss_sum is not None:
            total += float(loss_sum.data)
            count += c
    if count == 0:
        warnings.warn("loss mask selects no positions; loss defined as 0", RuntimeWarning)
        return 0.0, np.stack(logits_rows)
    return total / count, np.stack(logits_rows)
