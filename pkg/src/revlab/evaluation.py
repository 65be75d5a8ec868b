"""Intrinsic (k-fold macro F1) and extrinsic (Pearson vs improvement)
evaluation, plus CSV / aligned-text report emission.

"Unweighted F1" is the macro average over the two classes; per-fold macro
F1 scores are then arithmetically averaged over folds (not pooled).
Extrinsic correlations relate raw per-essay revision counts (gold or
predicted labels) to the essay improvement score; every essay enters,
including essays with zero revisions.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import betainc

from .corpus import Corpus, FoldAssignment, Label, Revision
from .errors import DegenerateDataError, EvaluationError, ValidationError
from .neural import EmbeddingTable, ModelConfig
from .regimes import TrainConfig

SIGNIFICANCE_LEVEL = 0.05


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts with Desirable as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_pairs(cls, preds: Sequence[Label], golds: Sequence[Label]) -> "ConfusionCounts":
        tp = fp = tn = fn = 0
        for p, g in zip(preds, golds):
            if p == Label.DESIRABLE:
                if g == Label.DESIRABLE:
                    tp += 1
                else:
                    fp += 1
            else:
                if g == Label.DESIRABLE:
                    fn += 1
                else:
                    tn += 1
        return cls(tp=tp, fp=fp, tn=tn, fn=fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _class_f1(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_unweighted(preds: Sequence[Label], golds: Sequence[Label]) -> float:
    """Macro F1 over {Desirable, Undesirable}.

    A class absent from both predictions and gold contributes F1 = 0 (with a
    warning), keeping scores comparable across folds.
    """
    if len(preds) != len(golds):
        raise ValidationError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise ValidationError("cannot score an empty prediction list")
    counts = ConfusionCounts.from_pairs(preds, golds)
    if counts.tp + counts.fp + counts.fn == 0 or counts.tn + counts.fn + counts.fp == 0:
        absent = "desirable" if counts.tp + counts.fp + counts.fn == 0 else "undesirable"
        warnings.warn(f"class {absent!r} absent from both predictions and gold; its F1 counts as 0")
    f1_desirable = _class_f1(counts.tp, counts.fp, counts.fn)
    f1_undesirable = _class_f1(counts.tn, counts.fn, counts.fp)
    return 0.5 * (f1_desirable + f1_undesirable)


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_value: float
    n: int

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE_LEVEL


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Product-moment correlation with a two-tailed t-test p-value.

    p comes from the exact t CDF with n-2 degrees of freedom, evaluated via
    the regularized incomplete beta function (n is small here, so a normal
    approximation would be off).
    """
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValidationError("pearson needs two equal-length 1-d samples")
    n = xs.size
    if n < 3:
        raise ValidationError(f"pearson needs n >= 3, got {n}")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateDataError("zero variance: correlation undefined")
    r = float(np.dot(dx, dy) / math.sqrt(sxx * syy))
    r = min(1.0, max(-1.0, r))
    df = n - 2
    if 1.0 - r * r <= 0.0:
        p = 0.0
    else:
        t2 = r * r * df / (1.0 - r * r)
        p = float(betainc(df / 2.0, 0.5, df / (df + t2)))
    return CorrelationResult(r=r, p_value=p, n=n)


# --------------------------------------------------------------------------
# Cross-validation
# --------------------------------------------------------------------------

@dataclass
class CvResult:
    regime: str
    fold_f1: dict[str, tuple[float, ...]]
    mean_f1: dict[str, float]
    predictions: dict[str, dict[str, Label]]  # task -> revision_id -> label


def cross_validate(
    regime,
    corpora: Mapping[str, Corpus],
    folds: Mapping[str, FoldAssignment],
    cfg: TrainConfig,
    table: EmbeddingTable,
    model_cfg: Optional[ModelConfig] = None,
    augmenter=None,
) -> CvResult:
    """Essay-level k-fold CV for one regime.

    For every fold f the regime trains on the other folds of every corpus
    (with ``augmenter(task, train_revisions, fold)`` applied to training data
    only) and is scored on the untouched originals of fold f.  Train/test
    essay sets are asserted disjoint and covering on every fold.
    """
    ks = {fa.k for fa in folds.values()}
    if len(ks) != 1:
        raise EvaluationError(f"fold assignments disagree on k: {sorted(ks)}")
    k = ks.pop()
    if k < 2:
        raise EvaluationError(f"need k >= 2 folds, got {k}")
    for task, corpus in corpora.items():
        if set(folds[task].assignment) != set(corpus.essay_ids()):
            raise EvaluationError(f"fold assignment for {task!r} does not partition its essays")

    eval_tasks = regime.eval_tasks()
    fold_f1: dict[str, list[float]] = {t: [] for t in eval_tasks}
    predictions: dict[str, dict[str, Label]] = {t: {} for t in eval_tasks}

    for f in range(k):
        train_revs: dict[str, list[Revision]] = {}
        test_revs: dict[str, list[Revision]] = {}
        for task, corpus in corpora.items():
            fa = folds[task]
            all_essays = set(corpus.essay_ids())
            test_essays = {e for e in all_essays if fa.fold_of(e) == f}
            train_essays = all_essays - test_essays
            if train_essays & test_essays or train_essays | test_essays != all_essays:
                raise EvaluationError(f"fold {f} of {task!r} is not a partition")
            train = [r for r in corpus.revisions if r.essay_id in train_essays]
            test = [r for r in corpus.revisions if r.essay_id in test_essays]
            if augmenter is not None:
                train = augmenter(task, train, f)
            train_revs[task] = train
            test_revs[task] = test

        model = regime.fit(train_revs, cfg, table, model_cfg)
        for task in eval_tasks:
            test = test_revs[task]
            if not test:
                warnings.warn(f"fold {f} of {task!r} holds no revisions; skipping its F1")
                continue
            golds = [r.label for r in test]
            if len(set(golds)) < 2:
                warnings.warn(f"fold {f} of {task!r} has a single gold class; scoring anyway")
            scored = regime.predict(model, test, task, table)
            pred_labels = [label for _, label in scored]
            fold_f1[task].append(f1_unweighted(pred_labels, golds))
            for rev, label in zip(test, pred_labels):
                predictions[task][rev.revision_id] = label

    mean_f1 = {t: float(np.mean(v)) if v else float("nan") for t, v in fold_f1.items()}
    return CvResult(
        regime=regime.name,
        fold_f1={t: tuple(v) for t, v in fold_f1.items()},
        mean_f1=mean_f1,
        predictions=predictions,
    )


def extrinsic_eval(
    corpus: Corpus, labels: Mapping[str, Label]
) -> dict[str, Optional[CorrelationResult]]:
    """Pearson of per-essay (desirable, undesirable) counts vs improvement.

    ``labels`` maps every revision id of the corpus to a label (gold labels
    reproduce the Gold columns; predicted labels the model columns).  Returns
    None for a class whose correlation is degenerate (zero variance).
    """
    missing = [r.revision_id for r in corpus.revisions if r.revision_id not in labels]
    if missing:
        raise EvaluationError(
            f"no prediction for {len(missing)} revisions (first: {missing[:3]})"
        )
    des_counts = []
    und_counts = []
    improvements = []
    by_essay: dict[str, list[Label]] = {e.essay_id: [] for e in corpus.essays}
    for rev in corpus.revisions:
        by_essay[rev.essay_id].append(labels[rev.revision_id])
    for essay in corpus.essays:
        revs = by_essay[essay.essay_id]
        des_counts.append(sum(1 for l in revs if l == Label.DESIRABLE))
        und_counts.append(sum(1 for l in revs if l == Label.UNDESIRABLE))
        improvements.append(essay.improvement)
    out: dict[str, Optional[CorrelationResult]] = {}
    for cls, counts in (("desirable", des_counts), ("undesirable", und_counts)):
        try:
            out[cls] = pearson(counts, improvements)
        except DegenerateDataError:
            out[cls] = None
    return out


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IntrinsicRow:
    regime: str
    task: str
    fold_f1: tuple[float, ...]
    mean_f1: float
    source: Optional[str] = None  # TL only

    def __post_init__(self):
        if self.fold_f1:
            expected = float(np.mean(self.fold_f1))
            if not math.isclose(self.mean_f1, expected, rel_tol=0, abs_tol=1e-12):
                raise ValidationError("mean_f1 must be the arithmetic mean of fold_f1")


@dataclass(frozen=True)
class ExtrinsicRow:
    task: str
    label_source: str  # "gold" or a regime name
    cls: str           # "desirable" | "undesirable"
    result: Optional[CorrelationResult]
    source: Optional[str] = None  # TL only


@dataclass
class EvalReport:
    intrinsic: tuple[IntrinsicRow, ...]
    extrinsic: tuple[ExtrinsicRow, ...]
    config_hash: str
    seed: int
    notes: tuple[str, ...] = ()

    def to_json(self) -> str:
        blob = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "notes": list(self.notes),
            "intrinsic": [
                {
                    "regime": row.regime,
                    "task": row.task,
                    "source": row.source,
                    "fold_f1": list(row.fold_f1),
                    "mean_f1": row.mean_f1,
                }
                for row in self.intrinsic
            ],
            "extrinsic": [
                {
                    "task": row.task,
                    "label_source": row.label_source,
                    "source": row.source,
                    "class": row.cls,
                    "result": None if row.result is None else {
                        "r": row.result.r, "p_value": row.result.p_value, "n": row.result.n,
                    },
                }
                for row in self.extrinsic
            ],
        }
        return json.dumps(blob, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        blob = json.loads(text)
        intrinsic = tuple(
            IntrinsicRow(
                regime=row["regime"], task=row["task"], source=row.get("source"),
                fold_f1=tuple(row["fold_f1"]), mean_f1=row["mean_f1"],
            )
            for row in blob["intrinsic"]
        )
        extrinsic = tuple(
            ExtrinsicRow(
                task=row["task"], label_source=row["label_source"], source=row.get("source"),
                cls=row["class"],
                result=None if row["result"] is None else CorrelationResult(
                    r=row["result"]["r"], p_value=row["result"]["p_value"], n=row["result"]["n"],
                ),
            )
            for row in blob["extrinsic"]
        )
        return cls(
            intrinsic=intrinsic, extrinsic=extrinsic,
            config_hash=blob["config_hash"], seed=blob["seed"],
            notes=tuple(blob.get("notes", ())),
        )


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(report: EvalReport, outdir: str | Path) -> dict[str, Path]:
    """Write intrinsic.csv, extrinsic.csv, report.json, and report.txt.

    Output is byte-deterministic for a given report value; correlations are
    starred at p < .05.
    """
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvaluationError(f"cannot create report directory {outdir}: {exc}") from None

    intrinsic_path = outdir / "intrinsic.csv"
    with open(intrinsic_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["regime", "corpus", "source", "seed", "fold", "f1"])
        for row in sorted(report.intrinsic, key=lambda r: (r.regime, r.task, r.source or "")):
            for f, value in enumerate(row.fold_f1):
                writer.writerow([row.regime, row.task, row.source or "", report.seed, f, _fmt(value)])
            writer.writerow([row.regime, row.task, row.source or "", report.seed, "mean", _fmt(row.mean_f1)])

    extrinsic_path = outdir / "extrinsic.csv"
    with open(extrinsic_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["corpus", "source", "seed", "population", "label_source", "class", "r", "p", "n", "significant"]
        )
        ordered = sorted(
            report.extrinsic, key=lambda r: (r.task, r.cls, r.label_source, r.source or "")
        )
        for row in ordered:
            if row.result is None:
                r_txt, p_txt, n_txt, sig = "n/a", "n/a", "n/a", "n/a"
            else:
                r_txt, p_txt, n_txt = _fmt(row.result.r), _fmt(row.result.p_value), str(row.result.n)
                sig = "true" if row.result.significant else "false"
            writer.writerow(
                [row.task, row.source or "", report.seed, "all_essays", row.label_source, row.cls,
                 r_txt, p_txt, n_txt, sig]
            )

    json_path = outdir / "report.json"
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")

    txt_path = outdir / "report.txt"
    txt_path.write_text(render_text_report(report), encoding="utf-8")
    return {
        "intrinsic": intrinsic_path,
        "extrinsic": extrinsic_path,
        "json": json_path,
        "txt": txt_path,
    }


def _fmt3(x: Optional[float]) -> str:
    return "n/a" if x is None else f"{x:.3f}"


def _corr_cell(result: Optional[CorrelationResult]) -> str:
    if result is None:
        return "n/a"
    star = "*" if result.significant else ""
    return f"{result.r:.3f}{star}"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(header[c]), *(len(r[c]) for r in rows)) if rows else len(header[c])
              for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def render_text_report(report: EvalReport) -> str:
    """Aligned-text tables: per-regime intrinsic scores, a source x target
    TL matrix when TL rows are present, and starred extrinsic correlations."""
    sections = [f"revlab evaluation report (seed {report.seed}, config {report.config_hash})"]

    flat = [row for row in report.intrinsic if row.source is None]
    if flat:
        regimes = sorted({row.regime for row in flat})
        tasks = sorted({row.task for row in flat})
        by_key = {(row.regime, row.task): row for row in flat}
        rows = []
        for task in tasks:
            cells = [task]
            for regime in regimes:
                row = by_key.get((regime, task))
                cells.append(_fmt3(row.mean_f1 if row else None))
            rows.append(cells)
        sections.append(
            "Intrinsic evaluation (macro F1, mean over folds)\n"
            + _table(["Corpus"] + [r.upper() for r in regimes], rows)
        )

    tl_rows = [row for row in report.intrinsic if row.source is not None]
    if tl_rows:
        targets = sorted({row.task for row in tl_rows})
        sources = sorted({row.source for row in tl_rows})
        stl_baseline = {
            row.task: row.mean_f1 for row in flat if row.regime == "stl"
        }
        by_key = {(row.source, row.task): row for row in tl_rows}
        rows = [["(stl)"] + [_fmt3(stl_baseline.get(t)) for t in targets]]
        for source in sources:
            cells = [source]
            for target in targets:
                row = by_key.get((source, target))
                if row is None:
                    cells.append("")
                    continue
                mark = ""
                baseline = stl_baseline.get(target)
                if baseline is not None and row.mean_f1 > baseline:
                    mark = "^"
                cells.append(_fmt3(row.mean_f1) + mark)
            rows.append(cells)
        sections.append(
            "TL intrinsic evaluation (rows: Source, columns: Target; ^ = improved over STL)\n"
            + _table(["Source\\Target"] + targets, rows)
        )

    if report.extrinsic:
        for cls in ("desirable", "undesirable"):
            cls_rows = [row for row in report.extrinsic if row.cls == cls]
            if not cls_rows:
                continue
            tasks = sorted({row.task for row in cls_rows})
            columns = []
            for row in cls_rows:
                key = (row.label_source, row.source)
                if key not in columns:
                    columns.append(key)
            columns.sort(key=lambda k: ("" if k[0] == "gold" else k[0], k[1] or ""))
            by_key = {(row.task, row.label_source, row.source): row for row in cls_rows}
            rows = []
            for task in tasks:
                cells = [task]
                for label_source, source in columns:
                    row = by_key.get((task, label_source, source))
                    cells.append(_corr_cell(row.result) if row else "")
                rows.append(cells)
            names = [
                ls.upper() if src is None else f"{ls.upper()}[{src}]"
                for ls, src in columns
            ]
            sections.append(
                f"Extrinsic evaluation, {cls} counts vs improvement (* p < .05)\n"
                + _table(["Corpus"] + names, rows)
            )

    if report.notes:
        sections.append("Notes\n" + "\n".join(f"- {note}" for note in report.notes))
    return "\n\n".join(sections) + "\n"
