import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from revlab.corpus import (
    Corpus,
    CorpusMeta,
    EssayPair,
    FoldAssignment,
    ImprovementRule,
    Label,
    Op,
    Revision,
    make_folds,
)
from revlab.errors import DegenerateDataError, EvaluationError, ValidationError
from revlab.evaluation import (
    CorrelationResult,
    CvResult,
    EvalReport,
    ExtrinsicRow,
    IntrinsicRow,
    cross_validate,
    emit_report,
    extrinsic_eval,
    f1_unweighted,
    pearson,
    render_text_report,
)
from revlab.regimes import TrainConfig
from tests.conftest import make_revision

D, U = Label.DESIRABLE, Label.UNDESIRABLE


def oracle_macro_f1(preds, golds):
    """Independent confusion-matrix computation, one class at a time."""
    f1s = []
    for positive in (D, U):
        tp = sum(1 for p, g in zip(preds, golds) if p == positive and g == positive)
        fp = sum(1 for p, g in zip(preds, golds) if p == positive and g != positive)
        fn = sum(1 for p, g in zip(preds, golds) if p != positive and g == positive)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / 2


def test_perfect_predictions_score_one():
    golds = [D, U, D, U, D]
    assert f1_unweighted(golds, golds) == 1.0


def test_all_desirable_on_balanced_ten():
    golds = [D] * 5 + [U] * 5
    preds = [D] * 10
    # desirable: P=0.5, R=1 -> F1 2/3; undesirable: 0 -> macro 1/3
    assert f1_unweighted(preds, golds) == pytest.approx(1.0 / 3.0)


def test_random_instances_match_confusion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 200))
        preds = [D if x else U for x in rng.integers(0, 2, size=n)]
        golds = [D if x else U for x in rng.integers(0, 2, size=n)]
        assert abs(f1_unweighted(preds, golds) - oracle_macro_f1(preds, golds)) < 1e-10


def test_absent_class_counts_zero_with_warning():
    with pytest.warns(UserWarning, match="absent"):
        score = f1_unweighted([D, D], [D, D])
    assert score == 0.5  # desirable F1 = 1, undesirable absent -> 0


def test_length_mismatch_rejected():
    with pytest.raises(ValidationError, match="length mismatch"):
        f1_unweighted([D], [D, U])


# -- pearson -------------------------------------------------------------------

def test_affine_relationship_is_one():
    x = [1.0, 2.0, 3.0, 4.0]
    res = pearson(x, [2 * v + 1 for v in x])
    assert res.r == 1.0
    assert res.p_value == 0.0
    neg = pearson(x, [-2 * v + 1 for v in x])
    assert neg.r == -1.0


def test_hand_formula_case():
    res = pearson([1, 2, 3], [2, 4, 7])
    # dx=(-1,0,1), dy=(-7/3,-1/3,8/3): r = 5 / sqrt(2 * 114/9)
    want = 5.0 / math.sqrt(2.0 * 114.0 / 9.0)
    assert res.r == pytest.approx(want, abs=1e-12)
    assert round(res.r, 4) == 0.9934


def test_p_value_matches_t_distribution():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(3, 40))
        x = rng.standard_normal(n)
        y = rng.standard_normal(n) + 0.4 * x
        res = pearson(x, y)
        r_sp, p_sp = stats.pearsonr(x, y)
        assert abs(res.r - r_sp) < 1e-10
        assert abs(res.p_value - p_sp) < 1e-10


def test_constant_input_degenerate():
    with pytest.raises(DegenerateDataError, match="zero variance"):
        pearson([1, 2, 3], [5, 5, 5])


def test_too_few_points_rejected():
    with pytest.raises(ValidationError, match="n >= 3"):
        pearson([1, 2], [2, 1])


@settings(max_examples=40, deadline=None)
@given(
    xs=st.lists(st.floats(-50, 50), min_size=3, max_size=20),
    scale=st.floats(0.1, 10),
    shift=st.floats(-5, 5),
)
def test_pearson_affine_invariance(xs, scale, shift):
    rng = np.random.default_rng(7)
    ys = [x * 0.5 + float(e) for x, e in zip(xs, rng.standard_normal(len(xs)))]
    try:
        base = pearson(xs, ys)
        scaled = pearson([scale * x + shift for x in xs], ys)
    except DegenerateDataError:
        return
    assert base.r == pytest.approx(scaled.r, abs=1e-9)


# -- cross-validation harness ----------------------------------------------------

def _corpus_with_revisions(n_essays=6, revs_per=2, seed=0):
    rng = np.random.default_rng(seed)
    essays, revisions = [], []
    for i in range(n_essays):
        essay_id = f"e{i}"
        essays.append(EssayPair(essay_id=essay_id, draft_a=(), draft_b=(),
                                improvement=float(i % 4)))
        for j in range(revs_per):
            label = D if rng.random() < 0.5 else U
            revisions.append(make_revision(
                rev_id=f"{essay_id}:r{j}", essay_id=essay_id,
                text_a=f"tok{i} alpha", text_b=f"tok{i} beta", label=label))
    meta = CorpusMeta(corpus_id="X", grade_level="g", feedback_source="f",
                      improvement_rule=ImprovementRule.GIVEN, improvement_range=(0, 4))
    return Corpus(meta=meta, essays=tuple(essays), revisions=tuple(revisions))


class MemorizingRegime:
    """Upper-bound harness check: predicts the gold label by revision id."""

    name = "memorize"

    def __init__(self, task):
        self.task = task
        self.train_sizes = []

    def eval_tasks(self):
        return (self.task,)

    def fit(self, train_revs, cfg, table, model_cfg):
        self.train_sizes.append(len(train_revs[self.task]))
        return {r.revision_id: r.label for revs in train_revs.values() for r in revs}

    def predict(self, model, revisions, task, table):
        return [(1.0 if r.label == D else 0.0, r.label) for r in revisions]


class MajorityRegime:
    name = "majority"

    def __init__(self, task):
        self.task = task

    def eval_tasks(self):
        return (self.task,)

    def fit(self, train_revs, cfg, table, model_cfg):
        revs = train_revs[self.task]
        n_des = sum(1 for r in revs if r.label == D)
        return D if n_des * 2 >= len(revs) else U

    def predict(self, model, revisions, task, table):
        return [(0.9, model) for _ in revisions]


def test_memorizing_regime_scores_one():
    corpus = _corpus_with_revisions()
    folds = {"X": make_folds(corpus, k=3, seed=0)}
    cfg = TrainConfig(seed=0, epochs=1, task_order=("X",))
    result = cross_validate(MemorizingRegime("X"), {"X": corpus}, folds, cfg, table=None)
    assert result.mean_f1["X"] == 1.0
    assert set(result.predictions["X"]) == {r.revision_id for r in corpus.revisions}


def test_majority_stub_below_half_on_balanced_data():
    corpus = _corpus_with_revisions(n_essays=10, revs_per=4, seed=3)
    folds = {"X": make_folds(corpus, k=5, seed=0)}
    cfg = TrainConfig(seed=0, epochs=1, task_order=("X",))
    with pytest.warns(UserWarning):
        result = cross_validate(MajorityRegime("X"), {"X": corpus}, folds, cfg, table=None)
    assert result.mean_f1["X"] < 0.5


def test_augmenter_applied_to_training_folds_only():
    corpus = _corpus_with_revisions(n_essays=6, revs_per=2)
    folds = {"X": make_folds(corpus, k=3, seed=1)}
    cfg = TrainConfig(seed=0, epochs=1, task_order=("X",))
    regime = MemorizingRegime("X")
    seen_tests = []

    def augmenter(task, train, fold):
        return train + [make_revision(rev_id=f"aug{fold}", essay_id=train[0].essay_id,
                                      augmented_from=train[0].revision_id)]

    result = cross_validate(regime, {"X": corpus}, folds, cfg, table=None,
                            augmenter=augmenter)
    # train grew by exactly one per fold; test predictions only cover originals
    fa = folds["X"]
    expected = [
        sum(1 for r in corpus.revisions if fa.fold_of(r.essay_id) != f) + 1
        for f in range(fa.k)
    ]
    assert regime.train_sizes == expected
    assert set(result.predictions["X"]) == {r.revision_id for r in corpus.revisions}


def test_mismatched_fold_assignment_rejected():
    corpus = _corpus_with_revisions()
    bad = FoldAssignment(k=3, assignment={"e0": 0, "e1": 1, "stranger": 2})
    cfg = TrainConfig(seed=0, epochs=1, task_order=("X",))
    with pytest.raises(EvaluationError, match="does not partition"):
        cross_validate(MemorizingRegime("X"), {"X": corpus}, {"X": bad}, cfg, table=None)


def test_disagreeing_k_rejected():
    corpus = _corpus_with_revisions()
    cfg = TrainConfig(seed=0, epochs=1, task_order=("X",))
    folds = {"X": make_folds(corpus, k=3, seed=0), "Y": make_folds(corpus, k=2, seed=0)}
    with pytest.raises(EvaluationError, match="disagree"):
        cross_validate(MemorizingRegime("X"), {"X": corpus, "Y": corpus}, folds, cfg, table=None)


# -- extrinsic -----------------------------------------------------------------

def _planted_corpus(counts, noise=None, rule=ImprovementRule.GIVEN, seed=0):
    rng = np.random.default_rng(seed)
    essays, revisions = [], []
    for i, c in enumerate(counts):
        essay_id = f"e{i}"
        improvement = float(c) + (float(rng.normal(0, noise)) if noise else 0.0)
        essays.append(EssayPair(essay_id=essay_id, draft_a=(), draft_b=(),
                                improvement=improvement))
        for j in range(c):
            revisions.append(make_revision(rev_id=f"{essay_id}:d{j}", essay_id=essay_id,
                                           label=D))
        for j in range(2):
            revisions.append(make_revision(rev_id=f"{essay_id}:u{j}", essay_id=essay_id,
                                           label=U))
    meta = CorpusMeta(corpus_id="X", grade_level="g", feedback_source="f",
                      improvement_rule=rule, improvement_range=(-10, 10))
    return Corpus(meta=meta, essays=tuple(essays), revisions=tuple(revisions))


def test_gold_identity_correlation():
    corpus = _planted_corpus([0, 1, 2, 3, 4, 2, 1, 3])
    gold = {r.revision_id: r.label for r in corpus.revisions}
    out = extrinsic_eval(corpus, gold)
    assert out["desirable"].r == pytest.approx(1.0)
    assert out["undesirable"] is None  # constant count -> degenerate


def test_constant_improvement_reports_none():
    corpus = _planted_corpus([2, 2, 2, 2])
    gold = {r.revision_id: r.label for r in corpus.revisions}
    out = extrinsic_eval(corpus, gold)
    assert out["desirable"] is None


def test_noisy_planted_correlation_near_analytic():
    counts = [int(c) for c in np.random.default_rng(5).integers(0, 6, size=50)]
    corpus = _planted_corpus(counts, noise=0.5, seed=6)
    gold = {r.revision_id: r.label for r in corpus.revisions}
    out = extrinsic_eval(corpus, gold)
    sd_c = float(np.std(counts))
    analytic = sd_c / math.sqrt(sd_c ** 2 + 0.25)
    assert abs(out["desirable"].r - analytic) < 0.1


def test_missing_prediction_rejected():
    corpus = _planted_corpus([1, 2, 3])
    gold = {r.revision_id: r.label for r in corpus.revisions}
    gold.popitem()
    with pytest.raises(EvaluationError, match="no prediction"):
        extrinsic_eval(corpus, gold)


def test_gold_columns_model_independent():
    corpus = _planted_corpus([0, 1, 2, 3, 1, 2])
    gold = {r.revision_id: r.label for r in corpus.revisions}
    assert extrinsic_eval(corpus, gold) == extrinsic_eval(corpus, dict(gold))


# -- report emission -------------------------------------------------------------

def _report():
    return EvalReport(
        intrinsic=(
            IntrinsicRow(regime="stl", task="E", fold_f1=(0.5, 0.7), mean_f1=0.6),
            IntrinsicRow(regime="mtl", task="E", fold_f1=(0.6, 0.8), mean_f1=0.7),
            IntrinsicRow(regime="tl", task="E", source="C", fold_f1=(0.62,), mean_f1=0.62),
        ),
        extrinsic=(
            ExtrinsicRow(task="E", label_source="gold", cls="desirable",
                         result=CorrelationResult(r=0.45, p_value=0.049, n=50)),
            ExtrinsicRow(task="E", label_source="stl", cls="desirable",
                         result=CorrelationResult(r=0.30, p_value=0.051, n=50)),
            ExtrinsicRow(task="E", label_source="mtl", cls="desirable", result=None),
        ),
        config_hash="deadbeef",
        seed=3,
    )


def test_emit_deterministic(tmp_path):
    report = _report()
    emit_report(report, tmp_path / "a")
    emit_report(report, tmp_path / "b")
    for name in ("intrinsic.csv", "extrinsic.csv", "report.json", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_star_threshold_boundary(tmp_path):
    text = render_text_report(_report())
    assert "0.450*" in text   # p = 0.049
    assert "0.300*" not in text
    assert "0.300" in text    # p = 0.051, no star
    csv_text = None
    paths = emit_report(_report(), tmp_path)
    csv_text = paths["extrinsic"].read_text()
    line_gold = [l for l in csv_text.splitlines() if ",gold," in l][0]
    line_stl = [l for l in csv_text.splitlines() if ",stl," in l][0]
    assert line_gold.endswith("true")
    assert line_stl.endswith("false")


def test_tl_matrix_layout():
    text = render_text_report(_report())
    assert "Source\\Target" in text
    assert "(stl)" in text
    assert "0.620^" in text  # TL beat the 0.6 STL baseline


def test_na_rendering(tmp_path):
    paths = emit_report(_report(), tmp_path)
    assert "n/a" in paths["extrinsic"].read_text()
    assert "n/a" in paths["txt"].read_text()


def test_report_json_round_trip():
    report = _report()
    assert EvalReport.from_json(report.to_json()) == report


def test_mean_f1_invariant_enforced():
    with pytest.raises(ValidationError, match="arithmetic mean"):
        IntrinsicRow(regime="stl", task="E", fold_f1=(0.5, 0.7), mean_f1=0.65)
