"""End-to-end pipeline demo: curate -> train -> eval -> report.

Curates the synthetic tagged corpora (showing the near-duplicate removal),
builds the training split from the toy tag-mapping source, fine-tunes the
desk model (~2 minutes on one core), then scores the tuned checkpoint
against its frozen base on the in-domain multiple-choice task and renders
the leaderboard as markdown. Everything lands under pipeline_out/.
"""

import os
import shutil
import subprocess
import sys

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, os.path.join(ROOT, "src"))

from qlfg.configio import load_run_setup
from qlfg.nanomodel import build_model, save_model

OUT = os.path.join(ROOT, "pipeline_out")


def run(*args):
    cmd = [sys.executable, "-m", "qlfg", *args]
    print("+", " ".join(args))
    result = subprocess.run(cmd, cwd=ROOT)
    if result.returncode != 0:
        raise SystemExit(result.returncode)


def main():
    os.makedirs(OUT, exist_ok=True)

    # 1. curation demo on the synthetic mixed corpora
    run("curate",
        "--plan", "data/mixplans/version5_like.plan",
        "--corpora", "data/corpora",
        "--out", os.path.join(OUT, "mixed.jsonl"))

    # 2. training split: the toy mapping source through the same machinery
    toy_dir = os.path.join(OUT, "toy_corpora")
    os.makedirs(toy_dir, exist_ok=True)
    shutil.copy(os.path.join(ROOT, "data", "overfit32.jsonl"),
                os.path.join(toy_dir, "toy_tags.jsonl"))
    plan = os.path.join(OUT, "toy.plan")
    with open(plan, "w") as f:
        # the toy records share one sentence frame, so their pairwise
        # similarity sits near 0.95; the threshold must clear that or the
        # dedup pass (correctly) collapses the corpus
        f.write("toy_tags=1.0\nseed=0\ndedup_threshold=0.98\n")
    train_data = os.path.join(OUT, "train_data.jsonl")
    run("curate", "--plan", plan, "--corpora", toy_dir, "--out", train_data)

    # 3. fine-tune the desk model
    model_ckpt = os.path.join(OUT, "tuned.qlfg")
    run("train", "--config", "configs/desk_train.cfg",
        "--data", train_data, "--out", model_ckpt)

    # 4. frozen base checkpoint for comparison
    setup = load_run_setup(os.path.join(ROOT, "configs", "desk_train.cfg"))
    base = build_model(setup.model, setup.model_seed)
    base.freeze_and_quantize(setup.policy, setup.block_size, setup.superblock_size)
    base_ckpt = os.path.join(OUT, "base.qlfg")
    save_model(base, base_ckpt)
    print("+ wrote frozen base checkpoint")

    # 5. evaluate both and render the report
    leaderboard = os.path.join(OUT, "leaderboard.json")
    run("eval", "--tasks", "data/tasks", "--models", model_ckpt, base_ckpt,
        "--n", "50", "--seed", "33", "--out", leaderboard)
    run("report", leaderboard, "--out", os.path.join(OUT, "report.md"))
    print(f"\nartifacts under {OUT}/")


if __name__ == "__main__":
    main()
