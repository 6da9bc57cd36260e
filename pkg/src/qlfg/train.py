"""Fine-tuning loop: AdamW with blockwise 8-bit moment state, cosine schedule
with linear warmup, gradient accumulation, response-only loss masking, EOS
appending, group-by-length batching, and run accounting.

The optimizer step is token-mean exact under accumulation: micro-batches
accumulate summed NLL gradients and the division by the total masked-token
count happens once per optimizer step, so batch 4 / micro 1 equals micro 4
in one pass up to addition order.
"""

from __future__ import annotations

import math
import os
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .adapters import TARGET_SELECTORS
from .attention import attention_workspace_bytes
from .datapipe import render_alpaca
from .errors import ConfigError, DataError, NumericalAbort
from .nanomodel import EOS_ID, NanoTransformer, encode_text, save_model
from .util import stable_seed

OPTIMIZERS = ("adamw_fp32", "adamw_8bit")
# paged_* spellings common in fine-tuning configs map to the plain optimizers;
# state paging is a GPU-memory mechanism with no effect on the math
OPTIMIZER_ALIASES = {
    "paged_adamw_8bit": "adamw_8bit",
    "paged_adamw_32bit": "adamw_fp32",
    "adamw_32bit": "adamw_fp32",
}

MOMENT_BLOCK_SIZE = 256
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 4
    micro_batch_size: int = 1
    num_epochs: int = 1
    learning_rate: float = 3e-4
    cutoff_len: int = 1024
    lora_r: int = 4
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    target_modules: str = "attention_plus_ffn_output"
    train_on_inputs: bool = False
    add_eos_token: bool = True
    group_by_length: bool = True
    optimizer: str = "adamw_8bit"
    lr_scheduler: str = "cosine"
    weight_decay: float = 0.0
    warmup_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        self.optimizer = OPTIMIZER_ALIASES.get(self.optimizer, self.optimizer)
        if self.batch_size < 1 or self.micro_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.batch_size % self.micro_batch_size:
            raise ConfigError(
                f"micro_batch_size {self.micro_batch_size} must divide batch_size {self.batch_size}"
            )
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS} (or a paged alias)")
        if self.lr_scheduler != "cosine":
            raise ConfigError("only the cosine lr scheduler is supported")
        if self.target_modules not in TARGET_SELECTORS:
            raise ConfigError(f"unknown target_modules {self.target_modules!r}")


@dataclass
class RunReport:
    peak_model_bytes: int = 0
    peak_optimizer_bytes: int = 0
    peak_activation_bytes_estimate: int = 0
    trainable_params: int = 0
    trainable_fraction: float = 0.0
    wall_seconds: float = 0.0
    final_loss: float = 0.0
    loss_curve: list = field(default_factory=list)
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup from 0 to learning_rate, then cosine decay to 0."""
    if total_steps < cfg.warmup_steps:
        raise ConfigError(f"total_steps {total_steps} < warmup_steps {cfg.warmup_steps}")
    if step < 0:
        raise ConfigError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    if step >= total_steps:
        return 0.0
    span = total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# 8-bit moment state
# ---------------------------------------------------------------------------


def _encode_blockwise(x: np.ndarray, signed: bool, block: int = MOMENT_BLOCK_SIZE):
    """8-bit block code with one fp32 absmax per block.

    The first moment uses a signed linear code. The second moment (signed
    False) is coded linearly in sqrt(v/absmax): with a linear-in-v code,
    entries whose gradient is ~20x below their block's largest decode to
    exactly zero while the first moment still decodes nonzero, and the
    m/(sqrt(v)+eps) update explodes. The sqrt-domain code keeps the v cutoff
    strictly below the m cutoff, so any entry with surviving momentum also
    has surviving variance.
    """
    flat = x.reshape(-1).astype(np.float32)
    n_blocks = math.ceil(flat.size / block)
    pad = n_blocks * block - flat.size
    padded = np.concatenate([flat, np.zeros(pad, dtype=np.float32)]) if pad else flat
    blocks = padded.reshape(n_blocks, block)
    absmax = np.abs(blocks).max(axis=1).astype(np.float32)
    safe = np.where(absmax == 0, np.float32(1.0), absmax)
    unit = blocks / safe[:, None]
    if signed:
        codes = np.clip(np.rint(unit * 127.0), -127, 127).astype(np.int8)
    else:
        codes = np.clip(np.rint(np.sqrt(np.maximum(unit, 0.0)) * 255.0), 0, 255
                        ).astype(np.uint8)
    return codes.reshape(-1)[: flat.size], absmax


def _decode_blockwise(codes, absmax, signed: bool, shape, block: int = MOMENT_BLOCK_SIZE):
    block_of = np.arange(codes.size) // block
    if signed:
        vals = codes.astype(np.float32) / np.float32(127.0) * absmax[block_of]
    else:
        unit = codes.astype(np.float32) / np.float32(255.0)
        vals = unit * unit * absmax[block_of]
    return vals.reshape(shape)


@dataclass
class OptimizerState8bit:
    """Per-tensor blockwise 8-bit Adam moments (fp32 fallback keeps raw arrays)."""

    quantized: bool
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    block_size: int = MOMENT_BLOCK_SIZE
    tensors: dict = field(default_factory=dict)  # name -> dict of state arrays

    def init_tensor(self, name: str, shape):
        n = int(np.prod(shape))
        if self.quantized:
            nb = math.ceil(n / self.block_size)
            self.tensors[name] = {
                "shape": tuple(shape),
                "m_codes": np.zeros(n, dtype=np.int8),
                "v_codes": np.zeros(n, dtype=np.uint8),
                "m_absmax": np.zeros(nb, dtype=np.float32),
                "v_absmax": np.zeros(nb, dtype=np.float32),
            }
        else:
            self.tensors[name] = {
                "shape": tuple(shape),
                "m": np.zeros(shape, dtype=np.float32),
                "v": np.zeros(shape, dtype=np.float32),
            }

    def moments(self, name: str):
        st = self.tensors[name]
        if self.quantized:
            m = _decode_blockwise(st["m_codes"], st["m_absmax"], True, st["shape"],
                                  self.block_size)
            v = _decode_blockwise(st["v_codes"], st["v_absmax"], False, st["shape"],
                                  self.block_size)
            return m, v
        return st["m"], st["v"]

    def store_moments(self, name: str, m: np.ndarray, v: np.ndarray):
        st = self.tensors[name]
        if self.quantized:
            st["m_codes"], st["m_absmax"] = _encode_blockwise(m, True, self.block_size)
            st["v_codes"], st["v_absmax"] = _encode_blockwise(v, False, self.block_size)
        else:
            st["m"], st["v"] = m.astype(np.float32), v.astype(np.float32)

    def state_bytes(self) -> int:
        total = 0
        for st in self.tensors.values():
            n = int(np.prod(st["shape"]))
            if self.quantized:
                total += 2 * (n + 4 * math.ceil(n / self.block_size))
            else:
                total += 8 * n
        return total


def optimizer_state_bytes(param_sizes, quantized: bool, block_size: int = MOMENT_BLOCK_SIZE) -> int:
    """Closed-form state footprint for a list of tensor element counts."""
    if quantized:
        return sum(2 * (n + 4 * math.ceil(n / block_size)) for n in param_sizes)
    return sum(8 * n for n in param_sizes)


def adamw_step_8bit(params: dict, grads: dict, state: OptimizerState8bit,
                    lr: float, weight_decay: float) -> None:
    """Decoupled AdamW over named parameter arrays, updating in place.

    Moments are decoded from their 8-bit blocks, updated, and re-encoded;
    with state.quantized False this is textbook fp32 AdamW. Non-finite
    gradients abort with the tensor name and step.
    """
    if lr < 0:
        raise ConfigError("lr must be >= 0")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for {name!r} at step {t}")
        p = params[name]
        m, v = state.moments(name)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + weight_decay * p)
        state.store_moments(name, m, v)


# ---------------------------------------------------------------------------
# Tokenization and batching
# ---------------------------------------------------------------------------


@dataclass
class TokenizedExample:
    ids: np.ndarray
    mask: np.ndarray
    rec_id: str = ""

    @property
    def length(self) -> int:
        return int(self.ids.size)


def mask_targets(prompt_tokens, response_tokens, cfg: TrainConfig):
    """Concatenate prompt+response(+EOS) and build the loss mask.

    Mask is 0 over prompt positions and 1 over response (and EOS) positions
    unless train_on_inputs is set. Overlong examples lose prompt tokens from
    the left, never response tokens; a response longer than the cutoff is
    right-truncated before the EOS. Empty responses return None with a warning.
    """
    prompt = list(prompt_tokens)
    response = list(response_tokens)
    if not response:
        warnings.warn("record skipped: empty response", RuntimeWarning)
        return None
    if cfg.add_eos_token:
        response = response + [EOS_ID]
    if len(response) > cfg.cutoff_len:
        response = response[: cfg.cutoff_len - 1] + [EOS_ID] if cfg.add_eos_token else \
            response[: cfg.cutoff_len]
        prompt = []
    overflow = len(prompt) + len(response) - cfg.cutoff_len
    if overflow > 0:
        prompt = prompt[overflow:]
    ids = np.asarray(prompt + response, dtype=np.int64)
    if cfg.train_on_inputs:
        mask = np.ones(ids.size, dtype=np.int64)
    else:
        mask = np.asarray([0] * len(prompt) + [1] * len(response), dtype=np.int64)
    return ids, mask


def tokenize_corpus(corpus, cfg: TrainConfig) -> list[TokenizedExample]:
    examples = []
    for i, rec in enumerate(corpus):
        prompt_text, response_text = render_alpaca(rec)
        pair = mask_targets(encode_text(prompt_text), encode_text(response_text), cfg)
        if pair is None:
            continue
        ids, mask = pair
        examples.append(TokenizedExample(ids=ids, mask=mask, rec_id=f"{rec.source_tag}/{i}"))
    return examples


def random_batches(examples, micro_batch_size: int, seed: int):
    """Seeded shuffle then chunk; the baseline batching group-by-length is judged against."""
    rng = np.random.default_rng(stable_seed(seed, "record_shuffle"))
    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    return [shuffled[i : i + micro_batch_size]
            for i in range(0, len(shuffled), micro_batch_size)]


def _min_waste_partition(lengths, micro: int, n_chunks: int):
    """Split sorted lengths into exactly n_chunks contiguous runs of size
    <= micro minimizing total padding.

    Some optimal partition is contiguous in sorted order (swapping a
    crossing pair never reduces a chunk max below a member), so this DP is
    optimal over all partitions with that chunk count; random batching uses
    the same count, which is what makes its waste an upper bound.
    """
    n = len(lengths)
    prefix = np.concatenate([[0], np.cumsum(lengths)])
    inf = float("inf")
    cost = np.full((n + 1, n_chunks + 1), inf)
    choice = np.zeros((n + 1, n_chunks + 1), dtype=np.int64)
    cost[0][0] = 0.0
    for i in range(1, n + 1):
        k_lo = math.ceil(i / micro)
        for k in range(k_lo, min(i, n_chunks) + 1):
            # prefer the largest feasible chunk on ties, matching plain
            # full-chunk batching when all lengths are equal
            for s in range(min(micro, i), 0, -1):
                prev = cost[i - s][k - 1]
                if prev == inf:
                    continue
                c = prev + lengths[i - 1] * s - (prefix[i] - prefix[i - s])
                if c < cost[i][k]:
                    cost[i][k] = c
                    choice[i][k] = s
    sizes = []
    i, k = n, n_chunks
    while i > 0:
        s = int(choice[i][k])
        sizes.append(s)
        i -= s
        k -= 1
    return sizes[::-1]


def group_by_length_batches(examples, cfg: TrainConfig, seed: int):
    """Length-bucketed micro-batches with seeded batch order.

    Records are shuffled (same stream as random batching), stably sorted by
    token length, and partitioned into the padding-minimal contiguous
    micro-batches with the same batch count random batching would produce;
    the batch order is then shuffled. Equal-length corpora therefore yield
    the same batch composition as random batching, and measured padding
    waste can never exceed it.
    """
    if not examples:
        return []
    rng = np.random.default_rng(stable_seed(seed, "record_shuffle"))
    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    shuffled.sort(key=lambda ex: ex.length)  # stable
    micro = cfg.micro_batch_size
    n_chunks = math.ceil(len(shuffled) / micro)
    sizes = _min_waste_partition([ex.length for ex in shuffled], micro, n_chunks)
    batches = []
    at = 0
    for s in sizes:
        batches.append(shuffled[at : at + s])
        at += s
    order_rng = np.random.default_rng(stable_seed(seed, "batch_order"))
    return [batches[i] for i in order_rng.permutation(len(batches))]


def padding_waste(batches) -> float:
    """Pad tokens / total slot tokens when each micro-batch pads to its longest row."""
    pad = total = 0
    for b in batches:
        longest = max(ex.length for ex in b)
        total += longest * len(b)
        pad += sum(longest - ex.length for ex in b)
    return pad / total if total else 0.0


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def model_storage_bytes(model: NanoTransformer) -> int:
    """Quantized payload bytes plus the fp32 residue (norms, embeddings, head)."""
    total = sum(qt.payload_nbytes() for qt in model.bases.values())
    total += sum(w.size * 4 for w in model.weights.values())
    return total


def activation_bytes_estimate(model: NanoTransformer, seq_len: int) -> int:
    """Rough fp32 activation footprint for one sequence.

    Per layer: six d_model-wide rows plus three ffn-wide rows, plus the
    attention kernel workspace per head; plus one logits row block.
    """
    cfg = model.cfg
    hd = cfg.d_model // cfg.n_heads
    per_layer = 4 * (6 * seq_len * cfg.d_model + 3 * seq_len * cfg.d_ffn)
    per_layer += cfg.n_heads * attention_workspace_bytes(
        seq_len, hd, min(model.attn_tile, seq_len), model.attn_kernel
    )
    return cfg.n_layers * per_layer + 4 * seq_len * cfg.vocab_size


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------


def total_optimizer_steps(n_records: int, cfg: TrainConfig) -> int:
    return math.ceil(n_records / cfg.batch_size) * cfg.num_epochs


def train(model: NanoTransformer, corpus, cfg: TrainConfig, checkpoint_dir=None):
    """Run the fine-tuning loop; returns (model, RunReport).

    The model must be frozen; adapters are attached per the config when not
    already present. Deterministic for a fixed seed (fp32, any kernel):
    batching, dropout and initialization all derive from cfg.seed.
    """
    if not corpus:
        raise DataError("corpus is empty")
    if not model.frozen:
        raise ConfigError("train requires a frozen (quantized) model")
    if not model.adapters:
        model.attach_adapters(cfg.target_modules, cfg.lora_r, cfg.lora_alpha,
                              cfg.lora_dropout, cfg.seed)
    model.dropout_seed = cfg.seed

    examples = tokenize_corpus(corpus, cfg)
    if not examples:
        raise DataError("no usable records after tokenization")
    steps_total = total_optimizer_steps(len(examples), cfg)
    if cfg.num_epochs > 0 and steps_total < cfg.warmup_steps:
        raise ConfigError(
            f"schedule horizon {steps_total} steps is shorter than warmup {cfg.warmup_steps}"
        )

    params: dict[str, np.ndarray] = {}
    for name, (a_t, b_t) in model.adapter_params.items():
        params[f"{name}.lora_A"] = a_t.data
        params[f"{name}.lora_B"] = b_t.data
    state = OptimizerState8bit(quantized=cfg.optimizer == "adamw_8bit")
    for pname, arr in params.items():
        state.init_tensor(pname, arr.shape)

    trainable = sum(arr.size for arr in params.values())
    report = RunReport(
        peak_model_bytes=model_storage_bytes(model),
        peak_optimizer_bytes=state.state_bytes(),
        peak_activation_bytes_estimate=activation_bytes_estimate(
            model, max(ex.length for ex in examples)
        ),
        trainable_params=trainable,
        trainable_fraction=trainable / model.base_param_count(),
    )

    micros_per_step = cfg.batch_size // cfg.micro_batch_size
    start = time.perf_counter()
    step = 0
    microstep = 0
    last_good = model.clone_adapter_state()

    try:
        for epoch in range(cfg.num_epochs):
            epoch_seed = stable_seed(cfg.seed, "epoch", epoch)
            if cfg.group_by_length:
                batches = group_by_length_batches(examples, cfg, epoch_seed)
            else:
                batches = random_batches(examples, cfg.micro_batch_size, epoch_seed)
            for group_start in range(0, len(batches), micros_per_step):
                group = batches[group_start : group_start + micros_per_step]
                for _, (a_t, b_t) in model.adapter_params.items():
                    a_t.zero_grad()
                    b_t.zero_grad()
                loss_total, token_total = 0.0, 0
                for micro in group:
                    for ex in micro:
                        loss_sum, count, _ = model.loss_graph(
                            ex.ids, ex.mask, training=True, microstep=microstep
                        )
                        if loss_sum is not None:
                            if not np.isfinite(loss_sum.data):
                                raise NumericalAbort(
                                    f"non-finite loss at step {step} ({ex.rec_id})"
                                )
                            loss_sum.backward()
                            loss_total += float(loss_sum.data)
                            token_total += count
                    microstep += 1
                if token_total == 0:
                    continue
                grads = {}
                for name, (a_t, b_t) in model.adapter_params.items():
                    grads[f"{name}.lora_A"] = (
                        a_t.grad if a_t.grad is not None else np.zeros_like(a_t.data)
                    ) / token_total
                    grads[f"{name}.lora_B"] = (
                        b_t.grad if b_t.grad is not None else np.zeros_like(b_t.data)
                    ) / token_total
                lr = lr_at(step, cfg, steps_total)
                adamw_step_8bit(params, grads, state, lr, cfg.weight_decay)
                report.loss_curve.append(loss_total / token_total)
                step += 1
                last_good = model.clone_adapter_state()
    except NumericalAbort as abort:
        model.restore_adapter_state(last_good)
        path = None
        if checkpoint_dir is not None:
            path = os.path.join(str(checkpoint_dir), "last_good.qlfg")
            save_model(model, path)
        raise NumericalAbort(str(abort), last_good_checkpoint=path) from abort

    report.steps = step
    report.wall_seconds = time.perf_counter() - start
    report.final_loss = report.loss_curve[-1] if report.loss_curve else 0.0
    return model, report
