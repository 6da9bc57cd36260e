"""key=value run configuration files.

Keys follow the conventional fine-tuning names, lowercased with spaces as
underscores (lora_r, lora_target_modules, bnb_4bit_quantization_type, ...),
plus desk-model keys (n_layers, d_model, ...) and attention.kernel /
attention.tile_size. Unknown keys are rejected by name. Values are
True/False booleans, plain numbers, and selector names.
"""

from __future__ import annotations

from .errors import ConfigError
from .nanomodel import NanoTransformerConfig
from .quantize import PrecisionPolicy
from .train import TrainConfig

_TRAIN_KEYS = {
    "batch_size": int,
    "micro_batch_size": int,
    "num_epochs": int,
    "learning_rate": float,
    "cutoff_len": int,
    "lora_r": int,
    "lora_alpha": float,
    "lora_dropout": float,
    "lora_target_modules": str,
    "train_on_inputs": bool,
    "add_eos_token": bool,
    "group_by_length": bool,
    "optimizer": str,
    "lr_scheduler": str,
    "weight_decay": float,
    "warmup_steps": int,
    "seed": int,
}

_MODEL_KEYS = {
    "n_layers": int,
    "d_model": int,
    "n_heads": int,
    "d_ffn": int,
    "vocab_size": int,
    "max_seq": int,
    "ffn_kind": str,
    "model_seed": int,
}

_QUANT_KEYS = {
    "block_size": int,
    "superblock_size": int,
    "c2_codec": str,
}

_ATTN_KEYS = {
    "attention.kernel": str,
    "attention.tile_size": int,
}

# Quantization-table keys whose semantics are out of scope here; they are
# accepted only at their standard values so a pasted table still parses.
_PINNED_KEYS = {
    "prompt_template": ("alpaca",),
    "quantization_method": ("bitsandbytes", "blockwise_nf4"),
    "load_in_8bit": ("false",),
    "load_in_4bit": ("true",),
    "llm_int8_threshold": ("6.0",),
    "llm_int8_skip_modules": ("none",),
    "llm_int8_enable_fp32_cpu_offload": ("false",),
    "llm_int8_has_fp16_weight": ("false",),
    "bnb_4bit_quantization_type": ("nf4",),
    "bnb_4bit_use_double_quantization": ("true",),
}

_COMPUTE_DTYPE_MAP = {"float32": "fp32", "fp32": "fp32",
                      "bfloat16": "bf16-emulated", "bf16": "bf16-emulated"}

ALL_KEYS = (set(_TRAIN_KEYS) | set(_MODEL_KEYS) | set(_QUANT_KEYS) | set(_ATTN_KEYS)
            | set(_PINNED_KEYS) | {"bnb_4bit_compute_dtype"})


def _parse_bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def parse_config_text(text: str) -> dict:
    """Raw key -> string value mapping; rejects unknown and duplicate keys."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, value = (p.strip() for p in stripped.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def parse_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def canonical_config_text(raw: dict) -> str:
    """Sorted key=value rendering used for config hashing."""
    return "".join(f"{k}={raw[k]}\n" for k in sorted(raw))


class RunSetup:
    """Everything a training run needs, decoded from one config file."""

    def __init__(self, raw: dict):
        self.raw = dict(raw)
        for key, allowed in _PINNED_KEYS.items():
            if key in raw and raw[key].strip().lower() not in allowed:
                raise ConfigError(
                    f"{key}={raw[key]!r} is outside this pipeline's scope; "
                    f"allowed: {allowed}"
                )
        train_kwargs = {}
        for key, typ in _TRAIN_KEYS.items():
            if key not in raw:
                continue
            field = "target_modules" if key == "lora_target_modules" else key
            if typ is bool:
                train_kwargs[field] = _parse_bool(raw[key], key)
            else:
                train_kwargs[field] = typ(raw[key])
        self.train = TrainConfig(**train_kwargs)

        model_kwargs = {}
        self.model_seed = 0
        for key, typ in _MODEL_KEYS.items():
            if key not in raw:
                continue
            if key == "model_seed":
                self.model_seed = int(raw[key])
            else:
                model_kwargs[key] = typ(raw[key])
        if "max_seq" not in model_kwargs:
            model_kwargs["max_seq"] = self.train.cutoff_len
        self.model = NanoTransformerConfig(**model_kwargs)

        compute = _COMPUTE_DTYPE_MAP.get(
            raw.get("bnb_4bit_compute_dtype", "float32").strip().lower()
        )
        if compute is None:
            raise ConfigError(
                f"bnb_4bit_compute_dtype={raw['bnb_4bit_compute_dtype']!r} not supported"
            )
        self.policy = PrecisionPolicy(
            compute_width=compute,
            c2_codec=raw.get("c2_codec", "affine8").strip(),
        )
        self.block_size = int(raw.get("block_size", 64))
        self.superblock_size = int(raw.get("superblock_size", 256))
        self.attn_kernel = raw.get("attention.kernel", "naive").strip()
        if self.attn_kernel not in ("naive", "streaming"):
            raise ConfigError("attention.kernel must be naive or streaming")
        self.attn_tile = int(raw.get("attention.tile_size", 16))


def load_run_setup(path) -> RunSetup:
    return RunSetup(parse_config_file(path))
