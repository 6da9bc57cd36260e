"""Single entry point for the pipeline: curate, train, eval, ablate, report.

Every artifact-producing command writes exactly one run manifest next to its
output (<out>.manifest.json) recording the command, config hash, seeds,
input digests, output paths, tool version and timestamps. Manifest
timestamps are the only nondeterministic bytes any command produces.

Exit codes: 0 success, 2 configuration error, 3 data/integrity error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time


from . import __version__
from .ablate import ABLATION_AXES, accounting_preview, run_ablation
from .configio import canonical_config_text, load_run_setup
from .datapipe import compose, parse_mixplan, read_jsonl, write_jsonl
from .errors import ConfigError, DataError, NumericalAbort
from .evalharness import load_task_file, run_suite
from .nanomodel import build_model, load_model, save_model
from .train import train
from .util import canonical_json, sha256_hex

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _digest_file(path) -> str:
    with open(path, "rb") as f:
        return sha256_hex(f.read())


def _write_manifest(command: str, out_path: str, inputs: list, seeds: dict,
                    config_hash: str = "", extra_outputs: list | None = None) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seeds": seeds,
        "input_digests": {os.path.basename(p): _digest_file(p) for p in inputs},
        "output_paths": [out_path] + (extra_outputs or []),
        "tool_version": __version__,
        "timestamps": {"written_unix": time.time()},
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as f:
        f.write(canonical_json(manifest))


def _resolve_threads(args) -> int:
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("QLFG_THREADS", "1"))
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    return threads


def cmd_curate(args) -> int:
    plan = parse_mixplan(args.plan)
    if args.seed is not None:
        plan = type(plan)(components=plan.components, seed=args.seed,
                          dedup_threshold=plan.dedup_threshold)
    corpora = {}
    paths = sorted(glob.glob(os.path.join(args.corpora, "*.jsonl")))
    if not paths:
        raise DataError(f"no *.jsonl corpora under {args.corpora}")
    for p in paths:
        tag = os.path.splitext(os.path.basename(p))[0]
        corpora[tag] = read_jsonl(p, source_tag=tag)
    records, manifest = compose(corpora, plan)
    write_jsonl(args.out, records)
    with open(args.out + ".mix.json", "w", encoding="utf-8") as f:
        f.write(canonical_json(manifest))
    _write_manifest("curate", args.out, [args.plan] + paths,
                    {"plan_seed": plan.seed}, extra_outputs=[args.out + ".mix.json"])
    print(f"curated {manifest['kept_total']} records "
          f"({manifest['mixed_total'] - manifest['kept_total']} near-duplicates removed)")
    return EXIT_OK


def _trainable_line(params: int, fraction: float) -> str:
    return f"{params} ({fraction * 100:.4f}%)"


def cmd_train(args) -> int:
    setup = load_run_setup(args.config)
    if args.seed is not None:
        setup.train.seed = args.seed
    config_hash = sha256_hex(canonical_config_text(setup.raw).encode())
    if args.dry_run:
        preview = accounting_preview(setup)
        print("trainable:", _trainable_line(preview["trainable_params"],
                                            preview["trainable_fraction"]))
        print("predicted optimizer state bytes:",
              preview["predicted_optimizer_state_bytes"])
        return EXIT_OK
    corpus = read_jsonl(args.data)
    model = build_model(setup.model, setup.model_seed)
    model.freeze_and_quantize(setup.policy, setup.block_size, setup.superblock_size)
    model.attn_kernel = setup.attn_kernel
    model.attn_tile = setup.attn_tile
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    model, report = train(model, corpus, setup.train, checkpoint_dir=out_dir)
    save_model(model, args.out)
    report_path = args.out + ".report.json"
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(canonical_json(report.to_dict()))
    _write_manifest("train", args.out, [args.config, args.data],
                    {"train_seed": setup.train.seed, "model_seed": setup.model_seed},
                    config_hash, extra_outputs=[report_path])
    print("trainable:", _trainable_line(report.trainable_params, report.trainable_fraction))
    print(f"final loss: {report.final_loss:.6f} after {report.steps} steps "
          f"in {report.wall_seconds:.1f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    task_paths = sorted(glob.glob(os.path.join(args.tasks, "*.jsonl")))
    if not task_paths:
        raise DataError(f"no *.jsonl task files under {args.tasks}")
    tasks = {os.path.splitext(os.path.basename(p))[0]: load_task_file(p)
             for p in task_paths}
    models = {}
    for p in args.models:
        name = os.path.splitext(os.path.basename(p))[0]
        models[name] = load_model(p)
    _, leaderboard = run_suite(models, tasks, n_examples=args.n, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(canonical_json(leaderboard))
    _write_manifest("eval", args.out, task_paths + list(args.models),
                    {"eval_seed": args.seed})
    if "mean_win_rate" in leaderboard:
        for name, score in sorted(leaderboard["mean_win_rate"].items(),
                                  key=lambda kv: (-kv[1], kv[0])):
            print(f"{name}: mean win rate {score:.4f}")
    else:
        print("win rate column omitted (fewer than two ranked models)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    setup = load_run_setup(args.config)
    if args.seed is not None:
        setup.train.seed = args.seed
    config_hash = sha256_hex(canonical_config_text(setup.raw).encode())
    corpus = read_jsonl(args.data)
    cols, rows = run_ablation(setup, corpus, args.axis)
    lines = [",".join(cols)]
    lines += [",".join(str(v) for v in row) for row in rows]
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    _write_manifest("ablate", args.out, [args.config, args.data],
                    {"train_seed": setup.train.seed}, config_hash)
    print("\n".join(lines))
    return EXIT_OK


def _merge_leaderboards(paths):
    merged_scores: dict = {}
    merged_win: dict = {}
    metrics: list = []
    for p in paths:
        try:
            with open(p, "r", encoding="utf-8") as f:
                board = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{p}: malformed JSON: {e}") from e
        for m in board.get("metrics", []):
            if m not in metrics:
                metrics.append(m)
        for model, scores in board.get("scores", {}).items():
            slot = merged_scores.setdefault(model, {})
            for metric, value in scores.items():
                if metric in slot and slot[metric] != value:
                    raise DataError(
                        f"conflicting scores for {model}/{metric}: "
                        f"{slot[metric]} vs {value}"
                    )
                slot[metric] = value
        for model, rate in board.get("mean_win_rate", {}).items():
            if model in merged_win and merged_win[model] != rate:
                raise DataError(f"conflicting win rate for {model}")
            merged_win[model] = rate
    return merged_scores, merged_win, metrics


def cmd_report(args) -> int:
    scores, win, metrics = _merge_leaderboards(args.leaderboards)
    lines = ["# Benchmark report", ""]
    header = ["model"] + metrics + (["mean_win_rate"] if win else [])
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    order = sorted(scores, key=lambda m: (-win.get(m, 0.0), m))
    for model in order:
        row = [model]
        for metric in metrics:
            v = scores[model].get(metric)
            row.append(f"{v:.4f}" if v is not None else "n/a")
        if win:
            row.append(f"{win[model]:.4f}" if model in win else "n/a")
        lines.append("| " + " | ".join(row) + " |")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        _write_manifest("report", args.out, list(args.leaderboards), {})
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qlfg",
        description="Desk-scale quantized low-rank fine-tuning pipeline",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (results are identical for any N; "
                             "QLFG_THREADS is the fallback)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="mix tagged corpora per a plan and dedup")
    p.add_argument("--plan", required=True)
    p.add_argument("--corpora", required=True, help="directory of <tag>.jsonl files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="fine-tune adapters on a frozen quantized base")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="curated JSONL corpus")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dry-run", action="store_true",
                   help="print accounting without training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints on task files")
    p.add_argument("--tasks", required=True, help="directory of task JSONL files")
    p.add_argument("--models", nargs="+", required=True, help="checkpoint paths")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis and emit a CSV table")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge leaderboards into a markdown grid")
    p.add_argument("leaderboards", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse usage errors already exit with 2
        return int(e.code or 0)
    try:
        _resolve_threads(args)
        if args.command == "train" and not args.dry_run and not args.data:
            raise ConfigError("train requires --data unless --dry-run")
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        if e.last_good_checkpoint:
            print(f"last good checkpoint: {e.last_good_checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
