"""Instruction-data curation: JSONL ingestion, alpaca templating, proportional
mixing of tagged sources, and embedding-based near-duplicate elimination.

Dedup is a greedy first-wins scan: a record is dropped iff its embedding's
cosine similarity with some already-kept record strictly exceeds the
threshold (boundary hits survive). The default embedder is a hashed
character-trigram counter so the pipeline has zero model assets; any
deterministic text -> vector function can be plugged in instead.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .util import stable_seed

ALPACA_WITH_INPUT = (
    "Below is an instruction that describes a task, paired with an input that "
    "provides further context. Write a response that appropriately completes "
    "the request.\n\n### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n"
    "### Response:\n"
)
ALPACA_NO_INPUT = (
    "Below is an instruction that describes a task. Write a response that "
    "appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n"
    "### Response:\n"
)

EMBED_DIM = 2048
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_TRIGRAM_HASH_SEED = 0x51464C47  # fixed constant so embeddings never drift


@dataclass
class CorpusRecord:
    instruction: str
    output: str
    input: str = ""
    source_tag: str = ""
    license_tag: str = ""

    def __post_init__(self):
        if not self.instruction.strip():
            raise DataError("record instruction is empty")
        if not self.output.strip():
            raise DataError("record output is empty")


@dataclass(frozen=True)
class MixPlan:
    """Per-source sampling amounts plus dedup settings.

    components map a source tag to either a fraction in (0, 1] or an
    absolute record cap (int >= 1); order matters, it is the concatenation
    order before dedup.
    """

    components: tuple  # of (source_tag, fraction-or-cap)
    seed: int = 0
    dedup_threshold: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.dedup_threshold <= 1.0:
            raise ConfigError("dedup_threshold must be in [0, 1]")
        for tag, amount in self.components:
            if isinstance(amount, float) and not 0.0 < amount <= 1.0:
                raise ConfigError(f"fraction for {tag!r} must be in (0, 1], got {amount}")
            if isinstance(amount, int) and amount < 1:
                raise ConfigError(f"cap for {tag!r} must be >= 1, got {amount}")


@dataclass
class EmbeddingProvider:
    name: str
    dim: int
    embed: object  # callable text -> np.ndarray


def render_alpaca(rec: CorpusRecord):
    """Canonical alpaca prompt/response pair; the with-input variant only when
    input is present."""
    if not rec.instruction.strip():
        raise DataError("cannot render a record with an empty instruction")
    if rec.input and rec.input.strip():
        prompt = ALPACA_WITH_INPUT.format(instruction=rec.instruction, input=rec.input)
    else:
        prompt = ALPACA_NO_INPUT.format(instruction=rec.instruction)
    return prompt, rec.output


def record_text(rec: CorpusRecord) -> str:
    """The text dedup embeds: full rendered prompt plus response."""
    prompt, response = render_alpaca(rec)
    return prompt + response


def embed_default(text: str) -> np.ndarray:
    """Hashed character-trigram count vector, dim 2048, L2-normalized.

    FNV-1a over each trigram (seeded with a fixed constant) picks the
    bucket. Texts with no trigrams embed to the zero vector with a warning.
    """
    vec = np.zeros(EMBED_DIM, dtype=np.float64)
    n = len(text)
    if n < 3:
        warnings.warn("text too short to embed; zero vector", RuntimeWarning)
        return vec
    for i in range(n - 2):
        h = _FNV_OFFSET ^ _TRIGRAM_HASH_SEED
        for ch in text[i : i + 3].encode("utf-8"):
            h = ((h ^ ch) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
        vec[h % EMBED_DIM] += 1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        warnings.warn("text embedded to zero vector", RuntimeWarning)
        return vec
    return vec / norm


DEFAULT_PROVIDER = EmbeddingProvider(name="hashed-trigram", dim=EMBED_DIM, embed=embed_default)


def dedup(records, provider: EmbeddingProvider = DEFAULT_PROVIDER, threshold: float = 0.9):
    """Greedy first-wins near-duplicate removal in input order.

    Returns (kept records, removed pairs) where each removed pair is
    (removed_index, kept_index, similarity) over the input list. Zero-norm
    embeddings are treated as similarity 0 against everything and kept.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], got {threshold}")
    kept: list = []
    kept_idx: list[int] = []
    removed_pairs: list[tuple[int, int, float]] = []
    kept_matrix = np.zeros((0, provider.dim), dtype=np.float64)
    for i, rec in enumerate(records):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            e = np.asarray(provider.embed(record_text(rec)), dtype=np.float64)
        norm = np.linalg.norm(e)
        if norm == 0.0:
            warnings.warn(f"record {i} has a zero-norm embedding; kept", RuntimeWarning)
            sims = np.zeros(len(kept))
        else:
            e = e / norm
            sims = kept_matrix @ e if kept_idx else np.zeros(0)
        if sims.size and float(sims.max()) > threshold:
            j = int(np.argmax(sims))
            removed_pairs.append((i, kept_idx[j], float(sims.max())))
            continue
        kept.append(rec)
        kept_idx.append(i)
        kept_matrix = np.vstack([kept_matrix, e[None, :] if norm else
                                 np.zeros((1, provider.dim))])
    return kept, removed_pairs


def compose(corpora: dict, plan: MixPlan, provider: EmbeddingProvider = DEFAULT_PROVIDER):
    """Sample each component, concatenate in plan order, dedup, and report.

    Sampling is floor(fraction * N) records via a seeded shuffle prefix
    (caps take min(cap, N)). Returns (records, manifest dict).
    """
    missing = [tag for tag, _ in plan.components if tag not in corpora]
    if missing:
        raise ConfigError(
            f"missing source tags {missing}; available: {sorted(corpora)}"
        )
    mixed: list[CorpusRecord] = []
    sampled_counts = {}
    for tag, amount in plan.components:
        pool = list(corpora[tag])
        if isinstance(amount, int):
            take = min(amount, len(pool))
        else:
            take = math.floor(amount * len(pool))
        rng = np.random.default_rng(stable_seed(plan.seed, "sample", tag))
        order = rng.permutation(len(pool))
        picked = [pool[i] for i in order[:take]]
        sampled_counts[tag] = {"available": len(pool), "sampled": take}
        mixed.extend(picked)
    kept, removed_pairs = dedup(mixed, provider, plan.dedup_threshold)
    removed_by_tag: dict[str, int] = {}
    for removed_i, _, _ in removed_pairs:
        removed_by_tag[mixed[removed_i].source_tag] = (
            removed_by_tag.get(mixed[removed_i].source_tag, 0) + 1
        )
    manifest = {
        "plan": {
            "components": [[tag, amount] for tag, amount in plan.components],
            "seed": plan.seed,
            "dedup_threshold": plan.dedup_threshold,
        },
        "per_source": {
            tag: {
                **counts,
                "removed": removed_by_tag.get(tag, 0),
                "kept": counts["sampled"] - removed_by_tag.get(tag, 0),
            }
            for tag, counts in sampled_counts.items()
        },
        "mixed_total": len(mixed),
        "kept_total": len(kept),
        "removed_pairs": [
            {"removed": r, "kept": k, "similarity": round(s, 6)}
            for r, k, s in removed_pairs
        ],
    }
    return kept, manifest


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def read_jsonl(path, source_tag: str = "") -> list[CorpusRecord]:
    """One record per line with keys instruction, output and optional input."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e
            if "instruction" not in obj or "output" not in obj:
                raise DataError(f"{path}:{lineno}: missing instruction/output keys")
            records.append(CorpusRecord(
                instruction=obj["instruction"], output=obj["output"],
                input=obj.get("input", "") or "",
                source_tag=source_tag or obj.get("source_tag", ""),
                license_tag=obj.get("license_tag", "") or "",
            ))
    return records


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {"instruction": rec.instruction, "input": rec.input,
                   "output": rec.output, "source_tag": rec.source_tag}
            f.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def parse_mixplan(path) -> MixPlan:
    """Text config: one `tag=fraction` (or integer cap) line per source plus
    optional `seed=` and `dedup_threshold=` lines."""
    components = []
    seed = 0
    threshold = 0.9
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "seed":
                seed = int(value)
            elif key == "dedup_threshold":
                threshold = float(value)
            else:
                if "." in value or "e" in value.lower():
                    components.append((key, float(value)))
                else:
                    components.append((key, int(value)))
    if not components:
        raise ConfigError(f"{path}: mix plan lists no sources")
    return MixPlan(components=tuple(components), seed=seed, dedup_threshold=threshold)
