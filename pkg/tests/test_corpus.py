import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revlab import synth
from revlab.corpus import (
    AlignmentPair,
    Corpus,
    CorpusMeta,
    EssayPair,
    ImprovementRule,
    Label,
    Op,
    Revision,
    SentenceRecord,
    extract_revisions,
    improvement_score,
    load_annotations,
    load_corpus,
    load_folds,
    load_revisions_jsonl,
    make_folds,
    save_corpus,
    save_folds,
    save_revisions_jsonl,
)
from revlab.errors import ValidationError


def _meta_line(corpus_id="X", rule="given", rng=(0, 5)):
    return json.dumps({
        "kind": "meta", "corpus_id": corpus_id, "grade_level": "g",
        "feedback_source": "awe", "improvement_rule": rule,
        "improvement_range": list(rng),
    })


def _write(tmp_path, lines, name="c.jsonl"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_load_counts_mirror_input(tmp_path):
    lines = [_meta_line()]
    for e in ("e1", "e2"):
        lines.append(json.dumps({"kind": "essay", "essay_id": e, "improvement": 1}))
        for draft in (1, 2):
            lines.append(json.dumps({
                "kind": "sentence", "essay_id": e, "draft_index": draft,
                "position": 0, "text": f"{e} d{draft} text",
            }))
    lines.append(json.dumps({
        "kind": "revision", "revision_id": "r1", "essay_id": "e1", "op": "modify",
        "text_a": "x", "text_b": "y", "purpose": "reasoning", "label": "desirable",
    }))
    lines.append(json.dumps({
        "kind": "revision", "revision_id": "r2", "essay_id": "e2", "op": "add",
        "text_a": "", "text_b": "z", "purpose": "reasoning", "label": "undesirable",
    }))
    corpus = load_corpus(_write(tmp_path, lines))
    assert corpus.counts() == (2, 4, 2)


def test_delete_with_target_text_rejected(tmp_path):
    lines = [
        _meta_line(),
        json.dumps({"kind": "essay", "essay_id": "e1", "improvement": 0}),
        json.dumps({"kind": "revision", "revision_id": "r1", "essay_id": "e1",
                    "op": "delete", "text_a": "x", "text_b": "y",
                    "purpose": "reasoning", "label": "desirable"}),
    ]
    with pytest.raises(ValidationError, match="delete with target text"):
        load_corpus(_write(tmp_path, lines))


def test_malformed_json_reports_line_number(tmp_path):
    path = _write(tmp_path, [_meta_line(), "{not json"])
    with pytest.raises(ValidationError, match="line 2"):
        load_corpus(path)


def test_duplicate_essay_id_rejected(tmp_path):
    lines = [
        _meta_line(),
        json.dumps({"kind": "essay", "essay_id": "e1", "improvement": 0}),
        json.dumps({"kind": "essay", "essay_id": "e1", "improvement": 1}),
    ]
    with pytest.raises(ValidationError, match="duplicate essay id"):
        load_corpus(_write(tmp_path, lines))


def test_improvement_outside_range_rejected(tmp_path):
    lines = [
        _meta_line(rng=(0, 3)),
        json.dumps({"kind": "essay", "essay_id": "e1", "improvement": 4}),
    ]
    with pytest.raises(ValidationError, match="outside declared range"):
        load_corpus(_write(tmp_path, lines))


def test_augmented_revision_rejected_in_raw_corpus(tmp_path):
    lines = [
        _meta_line(),
        json.dumps({"kind": "essay", "essay_id": "e1", "improvement": 0}),
        json.dumps({"kind": "revision", "revision_id": "r1", "essay_id": "e1",
                    "op": "modify", "text_a": "x", "text_b": "y",
                    "purpose": "reasoning", "label": "desirable",
                    "augmented_from": "r0"}),
    ]
    with pytest.raises(ValidationError, match="augmented"):
        load_corpus(_write(tmp_path, lines))


def test_synth_suite_round_trips_to_identical_bytes(tmp_path):
    cfg = synth.tiny_config(seed=5)
    for task, corpus in synth.generate_suite(cfg).items():
        path = tmp_path / f"{task}.jsonl"
        save_corpus(corpus, path)
        first = path.read_bytes()
        save_corpus(load_corpus(path), path)
        assert path.read_bytes() == first


def test_revisions_jsonl_round_trip(tmp_path, revision_factory):
    revs = [
        revision_factory(rev_id="a"),
        revision_factory(rev_id="a.aug0", augmented_from="a"),
    ]
    path = tmp_path / "revs.jsonl"
    save_revisions_jsonl(revs, path)
    assert load_revisions_jsonl(path) == revs


# -- improvement_score ------------------------------------------------------

def _pair(score_a=None, score_b=None, improvement=0.0):
    return EssayPair(essay_id="e", draft_a=(), draft_b=(), improvement=improvement,
                     holistic_score_a=score_a, holistic_score_b=score_b)


def test_holistic_diff():
    assert improvement_score(_pair(2, 4), ImprovementRule.HOLISTIC_DIFF) == 2


def test_binary_sign_and_tie_goes_down():
    assert improvement_score(_pair(18, 20), ImprovementRule.BINARY_SIGN) == 1
    assert improvement_score(_pair(20, 18), ImprovementRule.BINARY_SIGN) == -1
    assert improvement_score(_pair(18, 18), ImprovementRule.BINARY_SIGN) == -1


def test_given_passthrough_and_range_check(tmp_path):
    assert improvement_score(_pair(improvement=3.0), ImprovementRule.GIVEN) == 3.0
    lines = [
        _meta_line(corpus_id="E", rng=(0, 3)),
        json.dumps({"kind": "essay", "essay_id": "e1", "improvement": 4}),
    ]
    with pytest.raises(ValidationError, match="outside declared range"):
        load_corpus(_write(tmp_path, lines))


def test_missing_holistic_scores_rejected():
    with pytest.raises(ValidationError, match="holistic"):
        improvement_score(_pair(score_a=2.0), ImprovementRule.HOLISTIC_DIFF)


def test_known_corpus_rule_mismatch_rejected():
    with pytest.raises(ValidationError, match="binary_sign"):
        CorpusMeta(corpus_id="C", grade_level="college", feedback_source="awe",
                   improvement_rule=ImprovementRule.GIVEN, improvement_range=(0, 1))


# -- extract_revisions ------------------------------------------------------

def _sent(essay, draft, pos, text):
    return SentenceRecord(essay_id=essay, draft_index=draft, position=pos, text=text)


def _modify_pair(i, essay="e1"):
    return AlignmentPair(
        alignment_id=f"{essay}:a{i}", essay_id=essay, op=Op.MODIFY,
        sent_a=_sent(essay, 1, i, f"old {i}"), sent_b=_sent(essay, 2, i, f"new {i}"),
    )


def test_extract_filters_to_reasoning():
    pairs = [_modify_pair(i) for i in range(3)]
    annotations = {
        "e1:a0": ("reasoning", Label.DESIRABLE),
        "e1:a1": ("Reasoning", Label.UNDESIRABLE),
        "e1:a2": ("other", Label.DESIRABLE),
    }
    revs = extract_revisions(pairs, annotations)
    assert [r.revision_id for r in revs] == ["e1:a0", "e1:a1"]
    assert all(r.purpose == "reasoning" for r in revs)


def test_extract_all_nochange_yields_nothing():
    sent = _sent("e1", 1, 0, "same text")
    sent_b = _sent("e1", 2, 0, "same text")
    pairs = [AlignmentPair(alignment_id="e1:a0", essay_id="e1", op=Op.NO_CHANGE,
                           sent_a=sent, sent_b=sent_b)]
    assert extract_revisions(pairs, {}) == []


def test_extract_count_matches_changed_pairs():
    pairs = [
        _modify_pair(0),
        AlignmentPair(alignment_id="e1:a1", essay_id="e1", op=Op.DELETE,
                      sent_a=_sent("e1", 1, 1, "gone")),
        AlignmentPair(alignment_id="e1:a2", essay_id="e1", op=Op.ADD,
                      sent_b=_sent("e1", 2, 1, "fresh")),
    ]
    annotations = {p.alignment_id: ("reasoning", Label.DESIRABLE) for p in pairs}
    changed = sum(1 for p in pairs if p.op != Op.NO_CHANGE)
    assert len(extract_revisions(pairs, annotations)) == changed


def test_extract_missing_annotation_rejected():
    with pytest.raises(ValidationError, match="no annotation"):
        extract_revisions([_modify_pair(0)], {})


def test_extract_unknown_alignment_rejected():
    annotations = {"e1:a0": ("reasoning", Label.DESIRABLE),
                   "nope": ("reasoning", Label.DESIRABLE)}
    with pytest.raises(ValidationError, match="unknown alignments"):
        extract_revisions([_modify_pair(0)], annotations)


def test_load_annotations_tsv(tmp_path):
    path = tmp_path / "ann.tsv"
    path.write_text("e1:a0\treasoning\tdesirable\ne1:a1\tother\tundesirable\n")
    table = load_annotations(path)
    assert table == {"e1:a0": ("reasoning", Label.DESIRABLE),
                     "e1:a1": ("other", Label.UNDESIRABLE)}


# -- folds ------------------------------------------------------------------

def _essay_only_corpus(n):
    essays = tuple(
        EssayPair(essay_id=f"e{i}", draft_a=(), draft_b=(), improvement=0.0)
        for i in range(n)
    )
    meta = CorpusMeta(corpus_id="X", grade_level="g", feedback_source="f",
                      improvement_rule=ImprovementRule.GIVEN, improvement_range=(0, 1))
    return Corpus(meta=meta, essays=essays)


def test_folds_balanced_20_essays():
    folds = make_folds(_essay_only_corpus(20), k=10, seed=1)
    sizes = [len(folds.essays_in(f)) for f in range(10)]
    assert sizes == [2] * 10


def test_folds_deterministic():
    c = _essay_only_corpus(17)
    assert make_folds(c, k=5, seed=3) == make_folds(c, k=5, seed=3)


def test_folds_143_essays_matches_published_corpus_size():
    folds = make_folds(_essay_only_corpus(143), k=10, seed=0)
    sizes = sorted(len(folds.essays_in(f)) for f in range(10))
    assert set(sizes) == {14, 15}
    assert sum(sizes) == 143


def test_folds_fewer_essays_than_k_rejected():
    with pytest.raises(ValidationError, match="fewer than k"):
        make_folds(_essay_only_corpus(5), k=10, seed=0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(4, 60), k=st.integers(2, 8), seed=st.integers(0, 2**16))
def test_folds_partition_property(n, k, seed):
    if n < k:
        return
    corpus = _essay_only_corpus(n)
    folds = make_folds(corpus, k=k, seed=seed)
    parts = [set(folds.essays_in(f)) for f in range(k)]
    assert set().union(*parts) == set(corpus.essay_ids())
    assert sum(len(p) for p in parts) == n  # pairwise disjoint
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1


def test_folds_file_round_trip(tmp_path):
    folds = make_folds(_essay_only_corpus(12), k=3, seed=2)
    path = tmp_path / "folds.json"
    save_folds(folds, path)
    assert load_folds(path) == folds
