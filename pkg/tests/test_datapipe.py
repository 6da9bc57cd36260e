"""Curation tests: template goldens, the hashed-trigram embedder, strict-
threshold dedup semantics, and proportional mixing arithmetic."""

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qlfg.datapipe import (
    CorpusRecord,
    EmbeddingProvider,
    MixPlan,
    compose,
    dedup,
    embed_default,
    parse_mixplan,
    read_jsonl,
    render_alpaca,
    write_jsonl,
)
from qlfg.errors import ConfigError, DataError
from qlfg.util import canonical_json

DOCS = Path(__file__).resolve().parents[1] / "docs"


def rec(instruction, output="fine.", input="", tag="t"):
    return CorpusRecord(instruction=instruction, output=output, input=input,
                        source_tag=tag)


def distinct_rec(i, rng, tag="t"):
    """A record whose random body outweighs the shared prompt template, so
    different records stay safely below the 0.9 similarity threshold."""
    body = "".join(rng.choice(list("abcdefghijklmnopqrstuvwxyz "), 70))
    answer = "".join(rng.choice(list("abcdefghijklmnopqrstuvwxyz "), 40))
    return CorpusRecord(instruction=f"Task {i}: {body}", output=answer,
                        source_tag=tag)


class TestRenderAlpaca:
    def test_with_input_headers_in_order(self):
        prompt, response = render_alpaca(rec("Add numbers.", "3", input="1 2"))
        assert "### Instruction:" in prompt and "### Input:" in prompt
        assert prompt.index("### Instruction:") < prompt.index("### Input:")
        assert prompt.rstrip().endswith("### Response:")
        assert response == "3"

    def test_without_input_no_input_header(self):
        prompt, _ = render_alpaca(rec("Say hi."))
        assert "### Input:" not in prompt

    def test_matches_golden_template_files(self):
        with_input = (DOCS / "alpaca_template_with_input.txt").read_text()
        no_input = (DOCS / "alpaca_template_no_input.txt").read_text()
        p1, _ = render_alpaca(rec("INSTR", "x", input="INP"))
        assert p1 == with_input.format(instruction="INSTR", input="INP")
        p2, _ = render_alpaca(rec("INSTR", "x"))
        assert p2 == no_input.format(instruction="INSTR")

    def test_injective_on_instruction_input(self):
        seen = set()
        for instruction, inp in [("a", ""), ("b", ""), ("a", "b"), ("ab", "")]:
            p, _ = render_alpaca(rec(instruction, input=inp))
            assert p not in seen
            seen.add(p)

    def test_empty_instruction_rejected(self):
        with pytest.raises(DataError):
            rec(" ")


class TestEmbedDefault:
    def test_identical_texts_cosine_one(self):
        a = embed_default("The quick brown fox")
        b = embed_default("The quick brown fox")
        assert float(a @ b) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_trigrams_cosine_zero(self):
        a = embed_default("aaaa")
        b = embed_default("zzzz")
        assert float(a @ b) == 0.0

    def test_near_duplicate_above_threshold(self):
        a = embed_default("the cat sat")
        b = embed_default("the cat sat.")
        assert float(a @ b) > 0.9

    def test_short_text_zero_vector_with_warning(self):
        with pytest.warns(RuntimeWarning):
            v = embed_default("ab")
        assert np.all(v == 0)

    def test_unit_norm(self):
        v = embed_default("some reasonably long sentence for the hasher")
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


def planted_provider(vectors):
    """Embeddings looked up by instruction text (pre-normalization optional)."""
    dim = len(next(iter(vectors.values())))

    def embed(text):
        for key, vec in vectors.items():
            if key in text:
                return np.asarray(vec, dtype=np.float64)
        return np.zeros(dim)

    return EmbeddingProvider(name="planted", dim=dim, embed=embed)


class TestDedup:
    def test_byte_identical_second_removed(self):
        rng = np.random.default_rng(1)
        a, b = distinct_rec(0, rng), distinct_rec(1, rng)
        records = [a, CorpusRecord(**a.__dict__.copy()), b]
        kept, removed = dedup(records)
        assert len(kept) == 2
        assert removed[0][0] == 1 and removed[0][1] == 0
        assert removed[0][2] == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_all_kept(self):
        vectors = {"one": [1, 0, 0], "two": [0, 1, 0], "three": [0, 0, 1]}
        provider = planted_provider(vectors)
        records = [rec("one"), rec("two"), rec("three")]
        kept, removed = dedup(records, provider)
        assert len(kept) == 3 and not removed

    def test_exact_boundary_kept_strict(self):
        # cosine exactly at the threshold must survive ("exceeding", strict)
        e1 = np.array([1.0, 0.0])
        e2 = np.array([0.9, np.sqrt(1 - 0.81)])
        provider = planted_provider({"first": e1, "second": e2})
        sim = float((e1 / np.linalg.norm(e1)) @ (e2 / np.linalg.norm(e2)))
        assert sim == pytest.approx(0.9, abs=1e-12)
        records = [rec("first"), rec("second")]
        kept, removed = dedup(records, provider, threshold=sim)
        assert len(kept) == 2 and not removed
        kept2, removed2 = dedup(records, provider, threshold=np.nextafter(sim, 0))
        assert len(kept2) == 1 and removed2

    def test_first_wins_order(self):
        records = [rec("Say hello."), rec("Say hello."), rec("Say hello.")]
        kept, removed = dedup(records)
        assert len(kept) == 1
        assert [(r, k) for r, k, _ in removed] == [(1, 0), (2, 0)]

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        records = [rec(f"Item {i}: " + "".join(rng.choice(list("abcdef"), 12)))
                   for i in range(30)]
        records += records[:5]  # plant duplicates
        kept, _ = dedup(records)
        kept2, removed2 = dedup(kept)
        assert len(kept2) == len(kept) and not removed2

    @settings(max_examples=20, deadline=None)
    @given(t1=st.floats(0.1, 0.9), t2=st.floats(0.1, 0.9))
    def test_threshold_monotonicity(self, t1, t2):
        rng = np.random.default_rng(7)
        records = [rec("Common preamble text number {} for overlap".format(i))
                   for i in range(12)]
        lo, hi = min(t1, t2), max(t1, t2)
        kept_lo, _ = dedup(records, threshold=lo)
        kept_hi, _ = dedup(records, threshold=hi)
        assert len(kept_lo) <= len(kept_hi)

    def test_zero_norm_embedding_kept_with_warning(self):
        provider = planted_provider({"real": [1.0, 0.0]})
        records = [rec("real"), rec("ghost")]  # ghost embeds to zero
        with pytest.warns(RuntimeWarning):
            kept, removed = dedup(records, provider)
        assert len(kept) == 2 and not removed

    def test_permutation_preserves_kept_count_for_disjoint_clusters(self):
        rng = np.random.default_rng(3)
        clusters = []
        for i in range(6):
            base = distinct_rec(i, rng)
            twin = CorpusRecord(instruction=base.instruction + ".",
                                output=base.output, source_tag="t")
            clusters.append((base, twin))
        flat = [r for pair in clusters for r in pair]
        kept_sizes = set()
        for perm_seed in range(4):
            order = np.random.default_rng(perm_seed).permutation(len(flat))
            kept, _ = dedup([flat[i] for i in order])
            kept_sizes.add(len(kept))
        assert kept_sizes == {6}  # one survivor per cluster, any order

    def test_bad_threshold(self):
        with pytest.raises(ConfigError):
            dedup([rec("x")], threshold=1.5)


def synthetic_corpora():
    rng = np.random.default_rng(2)

    def make(tag, n):
        out = []
        for i in range(n):
            body = "".join(rng.choice(list("abcdefghijklmnop"), 24))
            out.append(rec(f"{tag} task {i}: {body}", output=f"answer {i}", tag=tag))
        return out

    return {
        "platypus_like": make("platypus_like", 250),
        "dolly_like": make("dolly_like", 150),
        "codegen_like": make("codegen_like", 40),
        "faithdial_like": make("faithdial_like", 45),
        "multinews_like": make("multinews_like", 40),
        "lima_like": make("lima_like", 10),
    }


class TestCompose:
    def test_full_fraction_single_source_is_permutation(self):
        rng = np.random.default_rng(5)
        corpora = {"only": [distinct_rec(i, rng, tag="only") for i in range(20)]}
        plan = MixPlan(components=(("only", 1.0),), seed=3)
        records, manifest = compose(corpora, plan)
        assert sorted(r.instruction for r in records) == \
            sorted(r.instruction for r in corpora["only"])
        assert [r.instruction for r in records] != \
            [r.instruction for r in corpora["only"]]  # shuffled by seed
        assert manifest["kept_total"] == 20

    def test_floor_fraction_arithmetic(self):
        corpora = {
            "a": [rec(f"a item {i} {'y' * i}", tag="a") for i in range(10)],
            "b": [rec(f"b item {i} {'z' * i}", tag="b") for i in range(10)],
        }
        plan = MixPlan(components=(("a", 1.0), ("b", 0.1)), seed=0)
        records, manifest = compose(corpora, plan)
        assert manifest["mixed_total"] == 11  # floor(0.1 * 10) = 1
        assert manifest["per_source"]["b"]["sampled"] == 1

    def test_version5_shaped_plan_counts(self):
        corpora = synthetic_corpora()
        plan = MixPlan(components=(
            ("dolly_like", 1.0), ("platypus_like", 1.0), ("codegen_like", 0.1),
            ("faithdial_like", 0.2), ("multinews_like", 0.1), ("lima_like", 1.0),
        ), seed=11)
        records, manifest = compose(corpora, plan)
        expected = {
            "dolly_like": 150, "platypus_like": 250, "codegen_like": 4,
            "faithdial_like": 9, "multinews_like": 4, "lima_like": 10,
        }
        for tag, n in expected.items():
            assert manifest["per_source"][tag]["sampled"] == n
        assert manifest["mixed_total"] == sum(expected.values())

    def test_absolute_cap_component(self):
        corpora = {"big": [rec(f"big item {i} {'q' * (i % 7)}", tag="big")
                           for i in range(50)]}
        plan = MixPlan(components=(("big", 12),), seed=1)
        _, manifest = compose(corpora, plan)
        assert manifest["per_source"]["big"]["sampled"] == 12

    def test_missing_tag_lists_available(self):
        with pytest.raises(ConfigError, match="only_tag"):
            compose({"only_tag": [rec("x y z filler")]},
                    MixPlan(components=(("absent", 1.0),), seed=0))

    def test_deterministic_manifest_bytes(self):
        corpora = synthetic_corpora()
        plan = MixPlan(components=(("dolly_like", 0.5), ("lima_like", 1.0)), seed=9)
        out1 = compose(corpora, plan)
        out2 = compose(corpora, plan)
        assert canonical_json(out1[1]) == canonical_json(out2[1])
        assert [r.instruction for r in out1[0]] == [r.instruction for r in out2[0]]


class TestFiles:
    def test_jsonl_round_trip(self, tmp_path):
        records = [rec("Write a haiku.", "ok", input="about spring", tag="poems")]
        path = tmp_path / "corpus.jsonl"
        write_jsonl(path, records)
        loaded = read_jsonl(path, source_tag="poems")
        assert loaded[0].instruction == "Write a haiku."
        assert loaded[0].input == "about spring"

    def test_invalid_json_line_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"instruction": "x", "output": "y"}\nnot json\n')
        with pytest.raises(DataError, match="2"):
            read_jsonl(path)

    def test_missing_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"instruction": "x"}) + "\n")
        with pytest.raises(DataError):
            read_jsonl(path)

    def test_parse_mixplan(self, tmp_path):
        path = tmp_path / "plan.cfg"
        path.write_text(
            "# Version-5-like\ndolly_like=1.0\ncodegen_like=0.1\nextra=2000\n"
            "seed=42\ndedup_threshold=0.9\n"
        )
        plan = parse_mixplan(path)
        assert plan.components == (("dolly_like", 1.0), ("codegen_like", 0.1),
                                   ("extra", 2000))
        assert plan.seed == 42 and plan.dedup_threshold == 0.9

    def test_mixplan_without_sources_rejected(self, tmp_path):
        path = tmp_path / "plan.cfg"
        path.write_text("seed=1\n")
        with pytest.raises(ConfigError):
            parse_mixplan(path)
