"""Regenerates the checked-in fixtures under data/ and configs/.

Everything is seeded, so reruns are byte-identical; tests treat the outputs
as goldens. The overfit corpus is a 32-entry made-up-word tag mapping whose
responses share a fixed sentence frame; the in-domain task asks for the same
tags as multiple choice.
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from qlfg.datapipe import CorpusRecord, render_alpaca, write_jsonl

DATA = os.path.join(os.path.dirname(__file__), "..", "data")
CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


def toy_word(rng, syllables):
    return "".join(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS))
                   for _ in range(syllables))


def toy_mapping(n=32, seed=99):
    rng = np.random.default_rng(seed)
    pairs, seen = [], set()
    while len(pairs) < n:
        key, val = toy_word(rng, 3), toy_word(rng, 2)
        if key in seen or val in seen:
            continue
        seen.update((key, val))
        pairs.append((key, val))
    return pairs


def overfit_corpus(pairs):
    return [CorpusRecord(instruction=f"Recall the tag for '{k}'.",
                         output=f"The tag is {v}.", source_tag="toy_tags")
            for k, v in pairs]


def mapping_mc_task(pairs, seed=7, items_per_pair=2):
    """Choices are full response sentences; context is the training prompt."""
    rng = np.random.default_rng(seed)
    values = [v for _, v in pairs]
    rows = []
    for k, v in pairs:
        prompt, _ = render_alpaca(CorpusRecord(
            instruction=f"Recall the tag for '{k}'.", output="x", source_tag="toy_tags"))
        for _ in range(items_per_pair):
            distractors = [f"The tag is {d}." for d in rng.choice(
                [w for w in values if w != v], size=3, replace=False)]
            gold_pos = int(rng.integers(0, 4))
            choices = distractors[:gold_pos] + [f"The tag is {v}."] + distractors[gold_pos:]
            rows.append({"context": prompt, "choices": choices, "gold": gold_pos})
    return rows


def random_text(rng, n):
    return "".join(rng.choice(list("abcdefghijklmnopqrstuvwxyz    "), n)).strip()


def curation_corpora(seed=5):
    """Tagged sources sized like a scaled-down open-data mix, with a few
    planted near-duplicates inside the biggest source."""
    rng = np.random.default_rng(seed)
    sizes = {
        "platypus_like": 250, "dolly_like": 150, "codegen_like": 40,
        "faithdial_like": 45, "multinews_like": 40, "lima_like": 10,
    }
    corpora = {}
    for tag, n in sizes.items():
        records = []
        for i in range(n):
            records.append(CorpusRecord(
                instruction=f"{tag} {i}: {random_text(rng, 70)}",
                output=random_text(rng, 45) or "fallback answer",
                source_tag=tag,
            ))
        corpora[tag] = records
    # plant 6 near-duplicates: trailing punctuation variants of existing rows
    for j in range(6):
        base = corpora["platypus_like"][j * 3]
        corpora["platypus_like"].append(CorpusRecord(
            instruction=base.instruction + ".", output=base.output,
            source_tag="platypus_like"))
    return corpora


def summarization_fixture(seed=13, n=4):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        body = random_text(rng, 80)
        rows.append({"document": f"Summarize: {body}",
                     "reference": " ".join(body.split()[:8])})
    return rows


DESK_CONFIG = """\
# Desk-scale fine-tuning run (32-record overfit demonstration).
batch_size=8
micro_batch_size=1
num_epochs=74
learning_rate=2e-3
cutoff_len=256
lora_r=16
lora_alpha=32
lora_dropout=0.0
lora_target_modules=all_layers
train_on_inputs=False
add_eos_token=True
group_by_length=True
prompt_template=alpaca
optimizer=paged_adamw_8bit
lr_scheduler=cosine
weight_decay=0
warmup_steps=20
seed=0

# desk model
n_layers=4
d_model=128
n_heads=4
d_ffn=344
vocab_size=259
max_seq=256
model_seed=1234

# quantization
block_size=64
superblock_size=256
c2_codec=affine8
bnb_4bit_compute_dtype=float32

attention.kernel=naive
attention.tile_size=16
"""

ABLATION_CONFIG = """\
# Short sweep configuration for the ablation axes.
batch_size=8
micro_batch_size=1
num_epochs=4
learning_rate=2e-3
cutoff_len=256
lora_r=4
lora_alpha=16
lora_dropout=0.0
lora_target_modules=attention_plus_ffn_output
train_on_inputs=False
add_eos_token=True
group_by_length=True
optimizer=paged_adamw_8bit
lr_scheduler=cosine
weight_decay=0
warmup_steps=4
seed=0

n_layers=4
d_model=128
n_heads=4
d_ffn=344
vocab_size=259
max_seq=256
model_seed=1234

attention.kernel=naive
attention.tile_size=16
"""

MIXPLAN = """\
# Version-5-like composition over the synthetic tagged sources.
dolly_like=1.0
platypus_like=1.0
codegen_like=0.1
faithdial_like=0.2
multinews_like=0.1
lima_like=1.0
seed=11
dedup_threshold=0.9
"""


def main():
    os.makedirs(os.path.join(DATA, "corpora"), exist_ok=True)
    os.makedirs(os.path.join(DATA, "tasks"), exist_ok=True)
    os.makedirs(os.path.join(DATA, "mixplans"), exist_ok=True)
    os.makedirs(CONFIGS, exist_ok=True)

    pairs = toy_mapping()
    write_jsonl(os.path.join(DATA, "overfit32.jsonl"), overfit_corpus(pairs))

    with open(os.path.join(DATA, "tasks", "toy_tags_mc.jsonl"), "w") as f:
        for row in mapping_mc_task(pairs):
            f.write(json.dumps(row, sort_keys=True) + "\n")
    with open(os.path.join(DATA, "tasks", "toy_summaries.jsonl"), "w") as f:
        for row in summarization_fixture():
            f.write(json.dumps(row, sort_keys=True) + "\n")

    for tag, records in curation_corpora().items():
        write_jsonl(os.path.join(DATA, "corpora", f"{tag}.jsonl"), records)

    with open(os.path.join(DATA, "mixplans", "version5_like.plan"), "w") as f:
        f.write(MIXPLAN)
    with open(os.path.join(CONFIGS, "desk_train.cfg"), "w") as f:
        f.write(DESK_CONFIG)
    with open(os.path.join(CONFIGS, "ablation.cfg"), "w") as f:
        f.write(ABLATION_CONFIG)
    print("fixtures written under data/ and configs/")


if __name__ == "__main__":
    main()
