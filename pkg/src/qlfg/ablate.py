"""Ablation sweeps on the desk model: adapter rank, target-set choice, and
attention kernel. Each sweep trains the same frozen base briefly under one
varied axis and tabulates parameter counts, state/workspace accounting,
final loss and wall time, mirroring the scale-up experiments these model.
"""

from __future__ import annotations

import copy
from dataclasses import replace

from .adapters import TARGET_SELECTORS, count_trainable, resolve_targets
from .attention import attention_workspace_bytes
from .configio import RunSetup
from .errors import ConfigError
from .nanomodel import build_model
from .train import optimizer_state_bytes, train

ABLATION_AXES = ("lora_r", "targets", "kernel")
RANK_SWEEP = (4, 8, 16, 64)


def _fresh_model(setup: RunSetup):
    model = build_model(setup.model, setup.model_seed)
    model.freeze_and_quantize(setup.policy, setup.block_size, setup.superblock_size)
    model.attn_kernel = setup.attn_kernel
    model.attn_tile = setup.attn_tile
    return model


def _run_once(setup: RunSetup, corpus, train_cfg):
    model = _fresh_model(setup)
    model, report = train(model, corpus, train_cfg)
    return report


def run_ablation(setup: RunSetup, corpus, axis: str):
    """Returns (column names, rows) for the requested sweep."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    base_cfg = setup.train
    rows = []

    if axis == "lora_r":
        cols = ["lora_r", "trainable_params", "optimizer_state_bytes",
                "final_loss", "wall_seconds"]
        for r in RANK_SWEEP:
            cfg = replace(base_cfg, lora_r=r)
            report = _run_once(setup, corpus, cfg)
            rows.append([r, report.trainable_params, report.peak_optimizer_bytes,
                         round(report.final_loss, 6), round(report.wall_seconds, 3)])
        return cols, rows

    if axis == "targets":
        cols = ["targets", "trainable_params", "optimizer_state_bytes",
                "final_loss", "wall_seconds"]
        for selector in TARGET_SELECTORS:
            cfg = replace(base_cfg, target_modules=selector)
            report = _run_once(setup, corpus, cfg)
            rows.append([selector, report.trainable_params, report.peak_optimizer_bytes,
                         round(report.final_loss, 6), round(report.wall_seconds, 3)])
        return cols, rows

    cols = ["kernel", "workspace_bytes", "final_loss", "wall_seconds"]
    hd = setup.model.d_model // setup.model.n_heads
    seq = setup.train.cutoff_len
    for kernel in ("naive", "streaming"):
        sweep_setup = copy.copy(setup)
        sweep_setup.attn_kernel = kernel
        report = _run_once(sweep_setup, corpus, base_cfg)
        workspace = attention_workspace_bytes(seq, hd, min(setup.attn_tile, seq), kernel)
        rows.append([kernel, workspace, round(report.final_loss, 6),
                     round(report.wall_seconds, 3)])
    return cols, rows


def accounting_preview(setup: RunSetup):
    """Dry-run numbers: trainable params per configured target set and the
    predicted optimizer state bytes, without training."""
    model = build_model(setup.model, setup.model_seed)
    dims = model.model_dims()
    ts = resolve_targets(setup.train.target_modules, model.targetable_names())
    params, fraction = count_trainable(dims, ts, setup.train.lora_r)
    sizes = []
    dims_map = {name: (d, k) for name, d, k in dims}
    for name in ts.resolved:
        d, k = dims_map[name]
        sizes.extend([setup.train.lora_r * k, d * setup.train.lora_r])
    state_bytes = optimizer_state_bytes(sizes, setup.train.optimizer == "adamw_8bit")
    return {
        "trainable_params": params,
        "trainable_fraction": fraction,
        "predicted_optimizer_state_bytes": state_bytes,
        "targets": list(ts.resolved),
    }
