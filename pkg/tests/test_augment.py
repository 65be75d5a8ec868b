import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revlab.augment import (
    AugmentTargets,
    SynonymLexicon,
    augment_to_target,
    replaceable_positions,
    synonym_replace,
    targets_preserving_ratio,
)
from revlab.corpus import Label, Op
from revlab.errors import UnaugmentableError, ValidationError
from tests.conftest import make_revision


def test_lexicon_tsv_round_trip(tmp_path, lexicon):
    path = tmp_path / "lex.tsv"
    lexicon.to_tsv(path)
    assert SynonymLexicon.from_tsv(path) == lexicon


def test_lexicon_self_only_entry_rejected():
    with pytest.raises(ValidationError, match="maps only to itself"):
        SynonymLexicon.from_pairs({"cat": ["cat", "CAT"]})


def test_lexicon_case_normalized(lexicon):
    assert lexicon.lookup("CAT") == ("feline", "kitty")
    assert lexicon.lookup("unknown") is None


def test_replace_exactly_ceil_rate_times_replaceable(lexicon):
    # replaceable tokens: the, cat, the, dog -> 4; ceil(0.25 * 4) = 1
    rev = make_revision(text_a="the cat sat", text_b="the dog sat")
    assert len(replaceable_positions(rev, lexicon)) == 4
    out = synonym_replace(rev, lexicon, rate=0.25, rng=np.random.default_rng(0))
    diff = sum(
        x != y
        for x, y in zip((rev.text_a + " " + rev.text_b).split(),
                        (out.text_a + " " + out.text_b).split())
    )
    assert diff == 1
    assert out.label == rev.label and out.op == rev.op
    assert out.augmented_from == rev.revision_id


def test_unaugmentable_without_lexicon_entries():
    rev = make_revision(text_a="zzz qqq", text_b="yyy www")
    empty = SynonymLexicon.from_pairs({"other": ["word"]})
    with pytest.raises(UnaugmentableError, match="unaugmentable example"):
        synonym_replace(rev, empty, rng=np.random.default_rng(0))


def test_fixed_seed_reproduces_output(lexicon):
    rev = make_revision()
    a = synonym_replace(rev, lexicon, rate=0.5, rng=np.random.default_rng(7))
    b = synonym_replace(rev, lexicon, rate=0.5, rng=np.random.default_rng(7))
    assert a == b


def test_already_augmented_input_rejected(lexicon):
    rev = make_revision(augmented_from="r0")
    with pytest.raises(ValidationError, match="already augmented"):
        synonym_replace(rev, lexicon, rng=np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**16), rate=st.floats(0.05, 1.0))
def test_output_never_identical_to_source(seed, rate):
    lexicon = SynonymLexicon.from_pairs({
        "cat": ["feline"], "dog": ["hound"], "good": ["fine"],
        "point": ["claim"], "the": ["that"],
    })
    rev = make_revision(text_a="the cat sat", text_b="good point dog")
    out = synonym_replace(rev, lexicon, rate=rate, rng=np.random.default_rng(seed))
    assert (out.text_a, out.text_b) != (rev.text_a, rev.text_b)


def _originals(n_desirable, n_undesirable):
    revs = []
    for i in range(n_desirable):
        revs.append(make_revision(rev_id=f"d{i}", text_a="the cat sat",
                                  text_b="good dog point", label=Label.DESIRABLE))
    for i in range(n_undesirable):
        revs.append(make_revision(rev_id=f"u{i}", text_a="the dog sat",
                                  text_b="the cat point", label=Label.UNDESIRABLE))
    return revs


def test_targets_equal_originals_is_identity(lexicon):
    revs = _originals(3, 4)
    targets = AugmentTargets(total=7, desirable=3, undesirable=4)
    assert augment_to_target(revs, targets, lexicon, rng=np.random.default_rng(0)) == revs


def test_exact_class_counts_and_round_robin(lexicon):
    revs = _originals(3, 2)
    targets = AugmentTargets(total=15, desirable=10, undesirable=5)
    out = augment_to_target(revs, targets, lexicon, rng=np.random.default_rng(1))
    n_des = sum(1 for r in out if r.label == Label.DESIRABLE)
    assert (len(out), n_des) == (15, 10)
    assert out[:5] == revs
    by_source = {}
    for r in out[5:]:
        assert r.augmented_from is not None
        by_source[r.augmented_from] = by_source.get(r.augmented_from, 0) + 1
    des_counts = [by_source.get(f"d{i}", 0) for i in range(3)]
    und_counts = [by_source.get(f"u{i}", 0) for i in range(2)]
    assert max(des_counts) - min(des_counts) <= 1
    assert max(und_counts) - min(und_counts) <= 1


def test_provenance_matches_label_and_op(lexicon):
    revs = _originals(2, 2)
    targets = AugmentTargets(total=10, desirable=5, undesirable=5)
    out = augment_to_target(revs, targets, lexicon, rng=np.random.default_rng(2))
    sources = {r.revision_id: r for r in revs}
    for r in out:
        if r.augmented_from is None:
            continue
        src = sources[r.augmented_from]
        assert r.label == src.label and r.op == src.op and r.essay_id == src.essay_id


def test_only_lexicon_sanctioned_substitutions(lexicon):
    revs = _originals(2, 2)
    targets = AugmentTargets(total=12, desirable=6, undesirable=6)
    out = augment_to_target(revs, targets, lexicon, rate=0.5, rng=np.random.default_rng(3))
    sources = {r.revision_id: r for r in revs}
    for r in out:
        if r.augmented_from is None:
            continue
        src = sources[r.augmented_from]
        for old_text, new_text in ((src.text_a, r.text_a), (src.text_b, r.text_b)):
            old_toks, new_toks = old_text.split(), new_text.split()
            assert len(old_toks) == len(new_toks)
            for old, new in zip(old_toks, new_toks):
                if old != new:
                    assert new in lexicon.lookup(old)


def test_target_below_original_count_rejected(lexicon):
    revs = _originals(3, 3)
    with pytest.raises(ValidationError, match="below original count"):
        augment_to_target(revs, AugmentTargets(total=5, desirable=2, undesirable=3),
                          lexicon, rng=np.random.default_rng(0))


def test_class_with_no_augmentable_examples_rejected(lexicon):
    revs = [make_revision(rev_id="d0", text_a="zzz", text_b="qqq", label=Label.DESIRABLE),
            make_revision(rev_id="u0", label=Label.UNDESIRABLE)]
    targets = AugmentTargets(total=4, desirable=3, undesirable=1)
    with pytest.raises(UnaugmentableError, match="zero augmentable"):
        augment_to_target(revs, targets, lexicon, rng=np.random.default_rng(0))


def test_inconsistent_targets_rejected():
    with pytest.raises(ValidationError, match="inconsistent"):
        AugmentTargets(total=10, desirable=4, undesirable=5)


def test_targets_preserving_ratio():
    revs = _originals(2, 6)
    targets = targets_preserving_ratio(revs, 16)
    assert targets.total == 16
    assert targets.desirable == 4 and targets.undesirable == 12
