"""Harness tests: choice scoring against oracle/uniform stubs, bigram-F1 hand
counts, the win-rate tie rule and its invariants, and suite assembly with
failure exclusion."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qlfg.errors import ConfigError, DataError
from qlfg.evalharness import (
    MCTask,
    MetricTable,
    SummarizationTask,
    load_task_file,
    mean_win_rate,
    rouge2,
    run_suite,
    sample_indices,
    score_multiple_choice,
)
from qlfg.nanomodel import decode_tokens, encode_text
from qlfg.util import canonical_json, stable_seed


def make_mc_task(n_items=60, n_choices=4, seed=0):
    rng = np.random.default_rng(seed)
    words = ["alpha", "bravo", "carbon", "delta", "ember", "falcon", "glass", "harbor"]
    items = []
    for i in range(n_items):
        choices = list(rng.choice(words, size=n_choices, replace=False))
        gold = int(rng.integers(0, n_choices))
        items.append((f"Question {i}: pick the marked word.", choices, gold))
    return MCTask(items=items)


class OracleModel:
    """Scores the gold continuation at logprob 0 and everything else low."""

    def __init__(self, task):
        self.gold_texts = {}
        for context, choices, gold in task.items:
            self.gold_texts[context] = choices[gold]

    def sequence_logprobs(self, tokens):
        text = decode_tokens(tokens)
        for context, gold in self.gold_texts.items():
            if text.startswith(context):
                tail = text[len(context):]
                val = 0.0 if tail == gold else -5.0
                return np.full(len(tokens) - 1, val)
        return np.full(len(tokens) - 1, -5.0)


class HashScoreModel:
    """Deterministic pseudo-random choice scores, independent of gold."""

    def sequence_logprobs(self, tokens):
        val = (stable_seed("score", bytes(int(t) for t in tokens)) % 1000) / 1000.0
        return np.full(len(tokens) - 1, -1.0 - val)


class EchoModel:
    """Greedy generation that emits a fixed text then stops."""

    def __init__(self, text):
        self.text = text

    def greedy_generate(self, prompt_tokens, max_new=64):
        return list(prompt_tokens) + encode_text(self.text)[:max_new]

    def sequence_logprobs(self, tokens):
        return np.full(len(tokens) - 1, -1.0)


class TestSampling:
    def test_seeded_and_recorded(self):
        idx1 = sample_indices(100, 50, seed=4)
        idx2 = sample_indices(100, 50, seed=4)
        assert idx1 == idx2
        assert len(set(idx1)) == 50

    def test_zero_examples_rejected(self):
        with pytest.raises(ConfigError):
            sample_indices(10, 0, seed=0)

    def test_oversubscription_rejected(self):
        with pytest.raises(ConfigError):
            sample_indices(10, 11, seed=0)


class TestMultipleChoice:
    def test_oracle_model_scores_one(self):
        task = make_mc_task()
        acc = score_multiple_choice(OracleModel(task), task, n_examples=50, seed=1)
        assert acc == 1.0

    def test_uniformish_model_within_binomial_bound(self):
        task = make_mc_task()
        acc = score_multiple_choice(HashScoreModel(), task, n_examples=50, seed=1)
        assert 0.09 <= acc <= 0.43  # binomial 99% interval around 0.25

    def test_tie_picks_lowest_index(self, caplog):
        class Flat:
            def sequence_logprobs(self, tokens):
                return np.zeros(len(tokens) - 1)

        items = [("Pick:", ["aaa", "bbb"], 1)]
        acc = score_multiple_choice(Flat(), MCTask(items=items), 1, seed=0)
        assert acc == 0.0  # lowest index 0 chosen, gold is 1

    def test_choice_order_permutation_invariance(self):
        task = make_mc_task(20, seed=3)
        model = HashScoreModel()
        acc = score_multiple_choice(model, task, n_examples=20, seed=5)
        rolled = []
        for context, choices, gold in task.items:
            shift = 1
            rolled_choices = choices[shift:] + choices[:shift]
            rolled.append((context, rolled_choices,
                           (gold - shift) % len(choices)))
        acc_rolled = score_multiple_choice(model, MCTask(items=rolled),
                                           n_examples=20, seed=5)
        assert acc == acc_rolled  # per-choice scores depend only on the text


class TestRouge2:
    def test_identical_texts(self):
        assert rouge2("the cat sat on the mat", "the cat sat on the mat") == 1.0

    def test_disjoint_texts(self):
        assert rouge2("alpha bravo carbon", "delta ember falcon") == 0.0

    def test_hand_counted_half(self):
        # bigrams: {"a b", "b c"} vs {"a b", "b d"}; overlap 1; P=R=1/2
        assert rouge2("a b c", "a b d") == pytest.approx(0.5)

    def test_no_bigrams_zero(self):
        assert rouge2("single", "word here") == 0.0
        assert rouge2("", "a b") == 0.0

    def test_tokenization_lowercases_and_splits(self):
        assert rouge2("A-B, c!", "a b c") == 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.text(alphabet="ab ", min_size=4, max_size=30),
           st.text(alphabet="ab ", min_size=4, max_size=30))
    def test_swap_symmetry(self, a, b):
        assert rouge2(a, b) == pytest.approx(rouge2(b, a), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.text(alphabet="abc ", min_size=0, max_size=40))
    def test_bounded(self, t):
        assert 0.0 <= rouge2(t, "a b c a b") <= 1.0


def table(cells, models, metrics, higher=None):
    return MetricTable(rows=models, cols=metrics, cells=cells,
                       higher_is_better=higher or {m: True for m in metrics})


class TestMeanWinRate:
    def test_two_model_dominance(self):
        cells = {("X", "m1"): 0.9, ("X", "m2"): 0.8,
                 ("Y", "m1"): 0.1, ("Y", "m2"): 0.2}
        result = mean_win_rate(table(cells, ["X", "Y"], ["m1", "m2"]))
        assert result.scores == {"X": 1.0, "Y": 0.0}

    def test_hand_enumerated_three_models(self):
        cells = {
            ("A", "M1"): 0.9, ("B", "M1"): 0.5, ("C", "M1"): 0.1,
            ("A", "M2"): 0.2, ("B", "M2"): 0.8, ("C", "M2"): 0.8,
        }
        result = mean_win_rate(table(cells, ["A", "B", "C"], ["M1", "M2"]))
        assert result.scores["A"] == pytest.approx(0.5)
        assert result.scores["B"] == pytest.approx(0.625)
        assert result.scores["C"] == pytest.approx(0.375)

    def test_all_identical_everyone_half(self):
        cells = {(m, c): 0.7 for m in "ABC" for c in ("m1", "m2")}
        result = mean_win_rate(table(cells, list("ABC"), ["m1", "m2"]))
        assert all(v == pytest.approx(0.5) for v in result.scores.values())

    def test_lower_is_better_direction(self):
        cells = {("A", "err"): 0.1, ("B", "err"): 0.9}
        result = mean_win_rate(table(cells, ["A", "B"], ["err"],
                                     higher={"err": False}))
        assert result.scores == {"A": 1.0, "B": 0.0}

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.lists(st.floats(0, 1, allow_nan=False), min_size=3,
                             max_size=3), min_size=2, max_size=6),
           st.integers(0, 2))
    def test_per_metric_sum_invariant(self, rows, col):
        models = [f"m{i}" for i in range(len(rows))]
        cells = {(m, f"c{j}"): rows[i][j] for i, m in enumerate(models)
                 for j in range(3)}
        t = table(cells, models, [f"c{j}" for j in range(3)])
        # restrict to a single metric to check the n/2 sum exactly
        single = table({(m, f"c{col}"): cells[(m, f"c{col}")] for m in models},
                       models, [f"c{col}"])
        result = mean_win_rate(single)
        assert sum(result.scores.values()) == pytest.approx(len(models) / 2)

    def test_monotone_rescale_invariance(self):
        rng = np.random.default_rng(6)
        models = [f"m{i}" for i in range(4)]
        base = {(m, "a"): float(rng.random()) for m in models}
        base.update({(m, "b"): float(rng.random()) for m in models})
        r1 = mean_win_rate(table(dict(base), models, ["a", "b"]))
        rescaled = {(m, c): (np.exp(3 * v) if c == "a" else v ** 3)
                    for (m, c), v in base.items()}
        r2 = mean_win_rate(table(rescaled, models, ["a", "b"]))
        for m in models:
            assert r1.scores[m] == pytest.approx(r2.scores[m])

    def test_missing_cell_excluded_with_note(self):
        cells = {("A", "m1"): 0.9, ("B", "m1"): 0.5, ("C", "m1"): 0.7,
                 ("A", "m2"): 0.2, ("B", "m2"): 0.8}  # C missing m2
        result = mean_win_rate(table(cells, ["A", "B", "C"], ["m1", "m2"]))
        assert set(result.scores) == {"A", "B"}
        assert result.excluded[0]["model"] == "C"
        assert "m2" in result.excluded[0]["reason"]

    def test_needs_two_ranked_models(self):
        with pytest.raises(ConfigError):
            mean_win_rate(table({("A", "m"): 1.0}, ["A"], ["m"]))


class TestRunSuite:
    def test_single_model_no_win_rate_column(self):
        task = make_mc_task(10)
        _, board = run_suite({"solo": OracleModel(task)}, {"quiz": task},
                             n_examples=5, seed=0)
        assert "mean_win_rate" not in board
        assert board["scores"]["solo"]["quiz.acc"] == 1.0

    def test_identical_models_both_half(self):
        task = make_mc_task(12)
        models = {"ck1": HashScoreModel(), "ck2": HashScoreModel()}
        _, board = run_suite(models, {"quiz": task}, n_examples=6, seed=0)
        assert board["mean_win_rate"] == {"ck1": 0.5, "ck2": 0.5}

    def test_failure_marks_missing_and_excludes(self):
        class Broken:
            def sequence_logprobs(self, tokens):
                raise RuntimeError("synthetic failure")

        task = make_mc_task(8)
        models = {"ok1": OracleModel(task), "ok2": HashScoreModel(), "bad": Broken()}
        _, board = run_suite(models, {"quiz": task}, n_examples=4, seed=0)
        assert board["failures"][0]["model"] == "bad"
        assert "bad" not in board["scores"] or "quiz.acc" not in board["scores"]["bad"]
        assert set(board["mean_win_rate"]) == {"ok1", "ok2"}

    def test_summarization_scoring(self):
        task = SummarizationTask(items=[("Document one.", "the quick brown fox"),
                                        ("Document two.", "lazy dogs sleep here")])
        model = EchoModel("the quick brown fox")
        _, board = run_suite({"echo": model, "blank": EchoModel("zzz qqq")},
                             {"summ": task}, n_examples=2, seed=0)
        assert board["scores"]["echo"]["summ.rouge2"] > \
            board["scores"]["blank"]["summ.rouge2"]

    def test_leaderboard_deterministic_bytes(self):
        task = make_mc_task(10)
        models = {"m1": HashScoreModel(), "m2": HashScoreModel()}
        b1 = run_suite(models, {"quiz": task}, n_examples=5, seed=3)[1]
        b2 = run_suite(models, {"quiz": task}, n_examples=5, seed=3)[1]
        assert canonical_json(b1) == canonical_json(b2)


class TestTaskFiles:
    def test_mc_file(self, tmp_path):
        path = tmp_path / "task.jsonl"
        path.write_text(
            '{"context": "Q1:", "choices": ["a", "b"], "gold": 1}\n'
            '{"context": "Q2:", "choices": ["x", "y", "z"], "gold": 0}\n'
        )
        task = load_task_file(path)
        assert isinstance(task, MCTask) and len(task.items) == 2

    def test_summarization_file(self, tmp_path):
        path = tmp_path / "cnn.jsonl"
        path.write_text('{"document": "text", "reference": "summary"}\n')
        task = load_task_file(path)
        assert isinstance(task, SummarizationTask)

    def test_mixed_rows_rejected(self, tmp_path):
        path = tmp_path / "task.jsonl"
        path.write_text(
            '{"context": "Q", "choices": ["a", "b"], "gold": 0}\n'
            '{"document": "d", "reference": "r"}\n'
        )
        with pytest.raises(DataError):
            load_task_file(path)

    def test_bad_gold_index(self, tmp_path):
        path = tmp_path / "task.jsonl"
        path.write_text('{"context": "Q", "choices": ["a", "b"], "gold": 5}\n')
        with pytest.raises(DataError):
            load_task_file(path)
