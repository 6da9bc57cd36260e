"""Calibration sweep for the desk overfit configuration.

Tries learning rate / rank / batch variants on the 32-record toy mapping
corpus and reports both the last-step batch loss and the full-corpus masked
loss, which is the number the overfit gate checks.
"""

import sys
import warnings

import numpy as np

sys.path.insert(0, "src")

from qlfg.datapipe import CorpusRecord
from qlfg.nanomodel import NanoTransformerConfig, build_model, forward_loss
from qlfg.train import TrainConfig, train, tokenize_corpus

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


def toy_word(rng, syllables):
    return "".join(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS))
                   for _ in range(syllables))


def toy_mapping_corpus(n=32, seed=99, key_syllables=3, val_syllables=2):
    rng = np.random.default_rng(seed)
    pairs, seen = [], set()
    while len(pairs) < n:
        key, val = toy_word(rng, key_syllables), toy_word(rng, val_syllables)
        if key in seen or val in seen:
            continue
        seen.update((key, val))
        pairs.append((key, val))
    return [
        CorpusRecord(instruction=f"Recall the tag for '{k}'.",
                     output=f"The tag is {v}.", source_tag="toy")
        for k, v in pairs
    ], pairs


def corpus_loss(model, corpus, cfg):
    examples = tokenize_corpus(corpus, cfg)
    longest = max(ex.length for ex in examples)
    ids = np.full((len(examples), longest), 0, dtype=np.int64)
    mask = np.zeros((len(examples), longest), dtype=np.int64)
    for i, ex in enumerate(examples):
        ids[i, : ex.length] = ex.ids
        mask[i, : ex.length] = ex.mask
    loss, _ = forward_loss(model, ids, mask)
    return loss


def run(corpus, lr, r, batch=4, epochs=None, alpha=None, warmup=20, seed=0):
    steps_per_epoch = -(-len(corpus) // batch)
    epochs = epochs if epochs is not None else 296 // steps_per_epoch
    cfg = TrainConfig(batch_size=batch, micro_batch_size=1, num_epochs=epochs,
                      learning_rate=lr, cutoff_len=256, lora_r=r,
                      lora_alpha=alpha or 2 * r, lora_dropout=0.0,
                      target_modules="all_layers", optimizer="adamw_8bit",
                      warmup_steps=warmup, seed=seed)
    model = build_model(NanoTransformerConfig(), seed=1234)
    model.freeze_and_quantize()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, report = train(model, corpus, cfg)
        full = corpus_loss(model, corpus, cfg)
    print(f"lr={lr} r={r} batch={batch} steps={report.steps}: "
          f"last_batch={report.final_loss:.4f} corpus={full:.4f} "
          f"wall={report.wall_seconds:.0f}s", flush=True)
    return full


if __name__ == "__main__":
    corpus, _ = toy_mapping_corpus()
    short, _ = toy_mapping_corpus(val_syllables=1)
    run(corpus, 1.5e-3, 16)
    run(corpus, 2e-3, 8)
    run(corpus, 2e-3, 16, batch=8)
    run(short, 2e-3, 16)
    run(short, 2.5e-3, 16)
