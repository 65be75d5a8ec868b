from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revlab.align import (
    align_drafts,
    embedding_similarity,
    matched_pairs,
    sentence_similarity,
    similarity_matrix,
)
from revlab.corpus import Op, SentenceRecord
from revlab.errors import ValidationError


def _draft(texts, essay="e1", draft=1):
    return [SentenceRecord(essay_id=essay, draft_index=draft, position=i, text=t)
            for i, t in enumerate(texts)]


# -- similarity -------------------------------------------------------------

def test_identity_is_one():
    assert sentence_similarity("the cat sat", "the cat sat") == 1.0


def test_disjoint_tokens_is_zero():
    assert sentence_similarity("abc", "xyz") == 0.0


def test_hand_cosine_two_thirds():
    # tf vectors (1,1,1,0) and (1,1,0,1): dot 2, norms sqrt(3) each
    assert abs(sentence_similarity("a b c", "a b d") - 2.0 / 3.0) < 1e-15


def test_one_iff_equal_multisets():
    assert sentence_similarity("b a", "a  b") == 1.0
    # parallel tf vectors but unequal multisets must stay below 1
    assert sentence_similarity("a b", "a a b b") < 1.0


def test_empty_strings():
    assert sentence_similarity("", "") == 1.0
    assert sentence_similarity("a", "") == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abcde"), max_size=6),
       st.lists(st.sampled_from("abcde"), max_size=6))
def test_similarity_symmetric_and_bounded(xs, ys):
    a, b = " ".join(xs), " ".join(ys)
    s = sentence_similarity(a, b)
    assert s == sentence_similarity(b, a)
    assert 0.0 <= s <= 1.0


def test_embedding_backend_cosine_mapping():
    vectors = {"up": np.array([1.0, 0.0]), "down": np.array([-1.0, 0.0]),
               "side": np.array([0.0, 1.0])}
    sim = embedding_similarity(vectors)
    assert sim("up", "up") == 1.0
    assert sim("up", "down") == pytest.approx(0.0)
    assert sim("up", "side") == pytest.approx(0.5)
    with pytest.raises(ValidationError, match="no precomputed vector"):
        sim("up", "unknown sentence")


# -- alignment --------------------------------------------------------------

def brute_force_best(scores):
    """Max total similarity over all monotone matchings (exhaustive)."""
    n, m = scores.shape

    @lru_cache(maxsize=None)
    def best(i, j):
        if i == n or j == m:
            return 0.0
        return max(
            best(i + 1, j + 1) + scores[i, j],
            best(i + 1, j),
            best(i, j + 1),
        )

    return best(0, 0)


def test_identical_drafts_all_nochange():
    texts = ["first point here", "second point there", "third one"]
    pairs = align_drafts(_draft(texts), _draft(texts, draft=2))
    assert [p.op for p in pairs] == [Op.NO_CHANGE] * 3


def test_appended_sentence_is_add():
    texts = ["first point here", "second point there"]
    pairs = align_drafts(_draft(texts), _draft(texts + ["brand new ending"], draft=2))
    assert [p.op for p in pairs] == [Op.NO_CHANGE, Op.NO_CHANGE, Op.ADD]
    assert pairs[2].sent_b.text == "brand new ending"


def test_four_by_four_paraphrase_matches_brute_force():
    a = _draft(["alpha beta gamma", "delta epsilon", "zeta eta theta", "iota kappa"])
    b = _draft(["alpha beta gamma", "delta epsilon mostly", "zeta eta theta", "iota kappa"],
               draft=2)
    sim = similarity_matrix(a, b)
    matched = matched_pairs(sim.scores)
    total = sum(sim.scores[i, j] for i, j in matched)
    assert total == pytest.approx(brute_force_best(sim.scores), abs=1e-12)
    assert matched == [(0, 0), (1, 1), (2, 2), (3, 3)]


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=4), max_size=6),
    st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=4), max_size=6),
)
def test_dp_total_equals_brute_force(xs, ys):
    a = _draft([" ".join(t) for t in xs])
    b = _draft([" ".join(t) for t in ys], draft=2)
    sim = similarity_matrix(a, b)
    matched = matched_pairs(sim.scores)
    total = sum(sim.scores[i, j] for i, j in matched)
    assert total == pytest.approx(brute_force_best(sim.scores), abs=1e-9)
    # monotonicity
    for (i1, j1), (i2, j2) in zip(matched, matched[1:]):
        assert i1 < i2 and j1 < j2


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=4), max_size=5),
    st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=4), max_size=5),
    st.floats(0.1, 0.9),
)
def test_coverage_every_sentence_in_exactly_one_pair(xs, ys, threshold):
    a = _draft([" ".join(t) for t in xs])
    b = _draft([" ".join(t) for t in ys], draft=2)
    pairs = align_drafts(a, b, threshold=threshold)
    got_a = [p.sent_a.position for p in pairs if p.sent_a is not None]
    got_b = [p.sent_b.position for p in pairs if p.sent_b is not None]
    assert sorted(got_a) == list(range(len(a)))
    assert sorted(got_b) == list(range(len(b)))


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.lists(st.sampled_from("abcd"), min_size=1, max_size=4), min_size=1, max_size=5),
    st.lists(st.lists(st.sampled_from("abcd"), min_size=1, max_size=4), min_size=1, max_size=5),
)
def test_raising_threshold_never_creates_modify(xs, ys):
    a = _draft([" ".join(t) for t in xs])
    b = _draft([" ".join(t) for t in ys], draft=2)
    low = align_drafts(a, b, threshold=0.3)
    high = align_drafts(a, b, threshold=0.7)

    def modify_keys(pairs):
        return {(p.sent_a.position, p.sent_b.position)
                for p in pairs if p.op == Op.MODIFY}

    assert modify_keys(high) <= modify_keys(low)


def test_below_threshold_match_splits_into_delete_add():
    a = _draft(["alpha beta", "wholly unrelated words"])
    b = _draft(["alpha beta", "completely different phrasing"], draft=2)
    pairs = align_drafts(a, b, threshold=0.5)
    assert [p.op for p in pairs] == [Op.NO_CHANGE, Op.DELETE, Op.ADD]


def test_empty_drafts_yield_pure_add_or_delete():
    b = _draft(["something new"], draft=2)
    pairs = align_drafts([], b, essay_id="e1")
    assert [p.op for p in pairs] == [Op.ADD]
    pairs = align_drafts(_draft(["something old"]), [])
    assert [p.op for p in pairs] == [Op.DELETE]
    assert align_drafts([], [], essay_id="e1") == []


def test_alignment_deterministic():
    a = _draft(["a b", "c d", "e f"])
    b = _draft(["a b x", "c d", "g h"], draft=2)
    assert align_drafts(a, b) == align_drafts(a, b)


def test_threshold_validation():
    with pytest.raises(ValidationError, match="threshold"):
        align_drafts(_draft(["x y"]), _draft(["x y"], draft=2), threshold=1.5)
