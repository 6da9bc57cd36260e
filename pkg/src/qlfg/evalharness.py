"""Benchmark harness: multiple-choice scoring by length-normalized
log-likelihood, bigram-F1 summarization scoring, fixed-size seeded
subsetting, and mean-win-rate aggregation across model versions.

Win rate per metric: the fraction of other models a model strictly beats,
with ties worth half. Per metric the win rates of all ranked models sum to
n/2 exactly, which pins down the tie rule. Models missing any cell are
excluded from the ranking and listed in the result.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .nanomodel import BOS_ID, decode_tokens, encode_text
from .util import stable_seed

log = logging.getLogger(__name__)


@dataclass
class MCTask:
    """Multiple-choice items: (context, choices, gold index)."""

    items: list

    def __post_init__(self):
        for i, (context, choices, gold) in enumerate(self.items):
            if len(choices) < 2:
                raise DataError(f"item {i}: needs at least 2 choices")
            if not 0 <= gold < len(choices):
                raise DataError(f"item {i}: gold index {gold} out of range")


@dataclass
class SummarizationTask:
    items: list  # of (document, reference)


@dataclass
class MetricTable:
    rows: list  # model identifiers
    cols: list  # metric identifiers
    cells: dict  # (model, metric) -> float
    higher_is_better: dict = field(default_factory=dict)  # metric -> bool

    def value(self, model, metric):
        return self.cells.get((model, metric))


@dataclass
class WinRateResult:
    scores: dict  # model -> mean win rate
    excluded: list  # of {"model": ..., "reason": ...}


def sample_indices(n_items: int, n_examples: int, seed: int) -> list[int]:
    """The seeded, recorded subset every scorer uses."""
    if n_examples < 1:
        raise ConfigError(f"n_examples must be >= 1, got {n_examples}")
    if n_examples > n_items:
        raise ConfigError(f"n_examples {n_examples} exceeds item count {n_items}")
    rng = np.random.default_rng(stable_seed(seed, "subset", n_items, n_examples))
    return [int(i) for i in rng.permutation(n_items)[:n_examples]]


def choice_loglikelihood(model, context_tokens, choice_tokens) -> float:
    """Mean per-token log-likelihood of the choice continuation given the context."""
    prefix = list(context_tokens) if context_tokens else [BOS_ID]
    full = np.asarray(prefix + list(choice_tokens), dtype=np.int64)
    lp = model.sequence_logprobs(full)
    tail = lp[-len(choice_tokens):]
    return float(tail.mean())


def score_multiple_choice(model, task: MCTask, n_examples: int, seed: int) -> float:
    """Accuracy of argmax mean-token-log-likelihood choice selection.

    Ties pick the lowest choice index and are logged.
    """
    idx = sample_indices(len(task.items), n_examples, seed)
    correct = 0
    for i in idx:
        context, choices, gold = task.items[i]
        ctx_tokens = encode_text(context)
        scores = [choice_loglikelihood(model, ctx_tokens, encode_text(c)) for c in choices]
        best = int(np.argmax(scores))
        if scores.count(scores[best]) > 1:
            log.warning("tie on item %d; picking lowest index %d", i, best)
        if best == gold:
            correct += 1
    return correct / len(idx)


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _bigrams(text: str) -> Counter:
    toks = _TOKEN_RE.findall(text.lower())
    return Counter(zip(toks, toks[1:]))


def rouge2(candidate: str, reference: str) -> float:
    """Bigram-overlap F1 with clipped counts; 0 when either side has no bigrams."""
    cand = _bigrams(candidate)
    ref = _bigrams(reference)
    n_cand = sum(cand.values())
    n_ref = sum(ref.values())
    if n_cand == 0 or n_ref == 0:
        return 0.0
    overlap = sum(min(c, ref[g]) for g, c in cand.items())
    if overlap == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2 * p * r / (p + r)


def score_summarization(model, task: SummarizationTask, n_examples: int, seed: int,
                        max_new_tokens: int = 64) -> float:
    """Mean rouge2 of greedy generations against references."""
    idx = sample_indices(len(task.items), n_examples, seed)
    total = 0.0
    for i in idx:
        document, reference = task.items[i]
        out = model.greedy_generate(encode_text(document), max_new=max_new_tokens)
        generated = decode_tokens(out[len(encode_text(document)):])
        total += rouge2(generated, reference)
    return total / len(idx)


def mean_win_rate(table: MetricTable) -> WinRateResult:
    """Unweighted mean over metrics of per-metric win rates.

    win_rate(m) = (#models strictly beaten + 0.5 * #ties) / (n - 1), with
    direction per higher_is_better (default True). Requires >= 2 ranked
    models and >= 1 metric.
    """
    if len(table.cols) < 1:
        raise ConfigError("mean_win_rate needs at least one metric")
    excluded = []
    ranked = []
    for m in table.rows:
        missing = [c for c in table.cols if (m, c) not in table.cells]
        if missing:
            excluded.append({"model": m, "reason": f"missing cells: {missing}"})
        else:
            ranked.append(m)
    if len(ranked) < 2:
        raise ConfigError("mean_win_rate needs at least two fully scored models")
    n = len(ranked)
    scores = {m: 0.0 for m in ranked}
    for col in table.cols:
        better = table.higher_is_better.get(col, True)
        for m in ranked:
            mine = table.cells[(m, col)]
            wins = 0.0
            for other in ranked:
                if other == m:
                    continue
                theirs = table.cells[(other, col)]
                if mine == theirs:
                    wins += 0.5
                elif (mine > theirs) == better:
                    wins += 1.0
            scores[m] += wins / (n - 1)
    for m in scores:
        scores[m] /= len(table.cols)
    return WinRateResult(scores=scores, excluded=excluded)


def run_suite(models: dict, tasks: dict, n_examples: int = 50, seed: int = 0):
    """Score every model on every task and build the leaderboard.

    models: name -> object with sequence_logprobs / greedy_generate.
    tasks: name -> MCTask or SummarizationTask. A model failure on a task
    leaves the cell missing; such models are excluded from ranking with a
    note (win rate is omitted entirely when fewer than two models rank).
    """
    model_names = list(models)
    metric_names = []
    for tname, task in tasks.items():
        metric_names.append(f"{tname}.acc" if isinstance(task, MCTask) else f"{tname}.rouge2")
    cells = {}
    failures = []
    sampled = {}
    for tname, task in tasks.items():
        n = min(n_examples, len(task.items))
        sampled[tname] = sample_indices(len(task.items), n, seed)
        for mname, model in models.items():
            metric = f"{tname}.acc" if isinstance(task, MCTask) else f"{tname}.rouge2"
            try:
                if isinstance(task, MCTask):
                    cells[(mname, metric)] = score_multiple_choice(model, task, n, seed)
                else:
                    cells[(mname, metric)] = score_summarization(model, task, n, seed)
            except Exception as e:  # model failure -> missing cell
                log.warning("model %s failed on %s: %s", mname, tname, e)
                failures.append({"model": mname, "task": tname, "error": str(e)})
    table = MetricTable(rows=model_names, cols=metric_names, cells=cells,
                        higher_is_better={m: True for m in metric_names})
    leaderboard = {
        "models": model_names,
        "metrics": metric_names,
        "n_examples": n_examples,
        "seed": seed,
        "sampled_indices": sampled,
        "scores": {
            m: {c: cells[(m, c)] for c in metric_names if (m, c) in cells}
            for m in model_names
        },
        "failures": failures,
    }
    complete = [m for m in model_names
                if all((m, c) in cells for c in metric_names)]
    if len(complete) >= 2:
        result = mean_win_rate(table)
        leaderboard["mean_win_rate"] = result.scores
        leaderboard["exclusions"] = result.excluded
    else:
        leaderboard["exclusions"] = [
            {"model": m, "reason": "win rate undefined with fewer than two ranked models"}
            for m in model_names if m not in complete
        ]
    return table, leaderboard


# ---------------------------------------------------------------------------
# Task files: JSONL with context/choices/gold for multiple choice, or
# document/reference for summarization.
# ---------------------------------------------------------------------------


def load_task_file(path):
    mc_items = []
    summ_items = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e
            if "choices" in obj:
                mc_items.append((obj["context"], list(obj["choices"]), int(obj["gold"])))
            elif "document" in obj:
                summ_items.append((obj["document"], obj["reference"]))
            else:
                raise DataError(f"{path}:{lineno}: not a recognized task row")
    if mc_items and summ_items:
        raise DataError(f"{path}: mixes multiple-choice and summarization rows")
    if mc_items:
        return MCTask(items=mc_items)
    if summ_items:
        return SummarizationTask(items=summ_items)
    raise DataError(f"{path}: no task rows")
