"""Data model and JSONL IO for two-draft essay corpora.

A corpus file is JSONL: one record per line, typed by a ``"kind"`` field
(``meta``, ``essay``, ``sentence``, ``alignment``, ``revision``).  Loading
validates every invariant (unique ids, contiguous sentence positions,
improvement scores inside the declared range, ...) and returns an immutable
`Corpus` that is safe to share across parallel workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ValidationError


class Op(str, Enum):
    NO_CHANGE = "nochange"
    MODIFY = "modify"
    DELETE = "delete"
    ADD = "add"


class Label(str, Enum):
    DESIRABLE = "desirable"
    UNDESIRABLE = "undesirable"


class ImprovementRule(str, Enum):
    GIVEN = "given"
    HOLISTIC_DIFF = "holistic_diff"
    BINARY_SIGN = "binary_sign"


PURPOSE_REASONING = "reasoning"

# Improvement rule each well-known corpus id must use.
_KNOWN_CORPUS_RULES = {
    "E": ImprovementRule.GIVEN,
    "H1": ImprovementRule.HOLISTIC_DIFF,
    "H2": ImprovementRule.HOLISTIC_DIFF,
    "C": ImprovementRule.BINARY_SIGN,
}


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace tokenization, shared by alignment and encoding."""
    return text.lower().split()


@dataclass(frozen=True)
class SentenceRecord:
    essay_id: str
    draft_index: int  # 1-based: 1 = first draft of the pair, 2 = second
    position: int
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError(
                f"empty sentence text at {self.essay_id} draft {self.draft_index} "
                f"position {self.position}"
            )
        if self.draft_index < 1:
            raise ValidationError(f"draft_index must be >= 1, got {self.draft_index}")
        if self.position < 0:
            raise ValidationError(f"position must be >= 0, got {self.position}")


@dataclass(frozen=True)
class EssayPair:
    essay_id: str
    draft_a: tuple[SentenceRecord, ...]
    draft_b: tuple[SentenceRecord, ...]
    improvement: float
    holistic_score_a: Optional[float] = None
    holistic_score_b: Optional[float] = None

    def __post_init__(self):
        for name, draft in (("draft_a", self.draft_a), ("draft_b", self.draft_b)):
            for i, sent in enumerate(draft):
                if sent.position != i:
                    raise ValidationError(
                        f"essay {self.essay_id}: {name} positions not contiguous "
                        f"from 0 (got {sent.position} at index {i})"
                    )
                if sent.essay_id != self.essay_id:
                    raise ValidationError(
                        f"essay {self.essay_id}: sentence carries foreign essay id "
                        f"{sent.essay_id!r}"
                    )


@dataclass(frozen=True)
class AlignmentPair:
    alignment_id: str
    essay_id: str
    op: Op
    sent_a: Optional[SentenceRecord] = None
    sent_b: Optional[SentenceRecord] = None

    def __post_init__(self):
        if self.op == Op.DELETE and self.sent_b is not None:
            raise ValidationError(f"alignment {self.alignment_id}: delete with b-side sentence")
        if self.op == Op.ADD and self.sent_a is not None:
            raise ValidationError(f"alignment {self.alignment_id}: add with a-side sentence")
        if self.op in (Op.NO_CHANGE, Op.MODIFY) and (self.sent_a is None or self.sent_b is None):
            raise ValidationError(f"alignment {self.alignment_id}: {self.op.value} needs both sides")
        if self.op == Op.DELETE and self.sent_a is None:
            raise ValidationError(f"alignment {self.alignment_id}: delete needs an a-side sentence")
        if self.op == Op.ADD and self.sent_b is None:
            raise ValidationError(f"alignment {self.alignment_id}: add needs a b-side sentence")
        if self.op == Op.NO_CHANGE and self.sent_a.text.strip() != self.sent_b.text.strip():
            raise ValidationError(
                f"alignment {self.alignment_id}: nochange with differing texts"
            )


@dataclass(frozen=True)
class Revision:
    revision_id: str
    essay_id: str
    op: Op
    text_a: str
    text_b: str
    purpose: str
    label: Label
    augmented_from: Optional[str] = None

    def __post_init__(self):
        if self.op == Op.NO_CHANGE:
            raise ValidationError(f"revision {self.revision_id}: nochange is not a revision")
        if self.op == Op.DELETE and self.text_b.strip():
            raise ValidationError(f"revision {self.revision_id}: delete with target text")
        if self.op == Op.ADD and self.text_a.strip():
            raise ValidationError(f"revision {self.revision_id}: add with source text")
        if not self.text_a.strip() and not self.text_b.strip():
            raise ValidationError(f"revision {self.revision_id}: both texts empty")


@dataclass(frozen=True)
class CorpusMeta:
    corpus_id: str
    grade_level: str
    feedback_source: str
    improvement_rule: ImprovementRule
    improvement_range: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.improvement_range
        if not lo <= hi:
            raise ValidationError(f"corpus {self.corpus_id}: improvement range {lo}..{hi} inverted")
        expected = _KNOWN_CORPUS_RULES.get(self.corpus_id)
        if expected is not None and self.improvement_rule != expected:
            raise ValidationError(
                f"corpus {self.corpus_id} must use improvement rule "
                f"{expected.value!r}, got {self.improvement_rule.value!r}"
            )


@dataclass(frozen=True)
class Corpus:
    meta: CorpusMeta
    essays: tuple[EssayPair, ...]
    alignments: tuple[AlignmentPair, ...] = ()
    revisions: tuple[Revision, ...] = ()

    def __post_init__(self):
        self._validate()

    def _validate(self):
        essay_ids = [e.essay_id for e in self.essays]
        if len(set(essay_ids)) != len(essay_ids):
            dupes = sorted({x for x in essay_ids if essay_ids.count(x) > 1})
            raise ValidationError(f"corpus {self.meta.corpus_id}: duplicate essay ids {dupes}")
        known = set(essay_ids)
        lo, hi = self.meta.improvement_range
        for essay in self.essays:
            if not lo <= essay.improvement <= hi:
                raise ValidationError(
                    f"essay {essay.essay_id}: improvement {essay.improvement} outside "
                    f"declared range [{lo}, {hi}]"
                )
        seen_sent = set()
        for essay in self.essays:
            for sent in essay.draft_a + essay.draft_b:
                key = (sent.essay_id, sent.draft_index, sent.position)
                if key in seen_sent:
                    raise ValidationError(f"duplicate sentence key {key}")
                seen_sent.add(key)
        align_ids = set()
        for pair in self.alignments:
            if pair.essay_id not in known:
                raise ValidationError(f"alignment {pair.alignment_id}: unknown essay {pair.essay_id}")
            if pair.alignment_id in align_ids:
                raise ValidationError(f"duplicate alignment id {pair.alignment_id}")
            align_ids.add(pair.alignment_id)
        rev_ids = set()
        for rev in self.revisions:
            if rev.essay_id not in known:
                raise ValidationError(f"revision {rev.revision_id}: unknown essay {rev.essay_id}")
            if rev.revision_id in rev_ids:
                raise ValidationError(f"duplicate revision id {rev.revision_id}")
            rev_ids.add(rev.revision_id)
            if rev.augmented_from is not None:
                raise ValidationError(
                    f"revision {rev.revision_id}: augmented revision in a raw corpus"
                )

    def counts(self) -> tuple[int, int, int]:
        """(n_essays, n_sentences, n_revisions)."""
        n_sent = sum(len(e.draft_a) + len(e.draft_b) for e in self.essays)
        return (len(self.essays), n_sent, len(self.revisions))

    def essay_ids(self) -> tuple[str, ...]:
        return tuple(e.essay_id for e in self.essays)

    def with_alignments(self, alignments: Sequence[AlignmentPair]) -> "Corpus":
        return replace(self, alignments=tuple(alignments))


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: Mapping[str, int]  # essay_id -> fold in [0, k)

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError(f"k must be >= 2, got {self.k}")
        for essay_id, fold in self.assignment.items():
            if not 0 <= fold < self.k:
                raise ValidationError(f"essay {essay_id}: fold {fold} outside [0, {self.k})")

    def fold_of(self, essay_id: str) -> int:
        return self.assignment[essay_id]

    def essays_in(self, fold: int) -> tuple[str, ...]:
        return tuple(e for e, f in self.assignment.items() if f == fold)


def improvement_score(pair: EssayPair, rule: ImprovementRule) -> float:
    """Per-essay improvement under the corpus rule.

    given:          pass the provided score through.
    holistic_diff:  second holistic score minus the first.
    binary_sign:    +1 if the second holistic score is strictly higher, else -1
                    (equal scores count as not improved).
    """
    if rule == ImprovementRule.GIVEN:
        return pair.improvement
    if pair.holistic_score_a is None or pair.holistic_score_b is None:
        raise ValidationError(
            f"essay {pair.essay_id}: rule {rule.value!r} needs both holistic scores"
        )
    if rule == ImprovementRule.HOLISTIC_DIFF:
        return pair.holistic_score_b - pair.holistic_score_a
    return 1.0 if pair.holistic_score_b > pair.holistic_score_a else -1.0


def extract_revisions(
    alignments: Sequence[AlignmentPair],
    annotations: Mapping[str, tuple[str, Label]],
) -> list[Revision]:
    """Turn changed alignment pairs into reasoning revisions.

    ``annotations`` maps alignment_id -> (purpose, label); every changed pair
    must have a row, and rows for unknown pairs are rejected.  Only revisions
    whose purpose is ``reasoning`` are returned; NoChange pairs yield nothing.
    """
    known = {p.alignment_id for p in alignments}
    unknown = sorted(set(annotations) - known)
    if unknown:
        raise ValidationError(f"annotations reference unknown alignments: {unknown}")
    out = []
    for pair in alignments:
        if pair.op == Op.NO_CHANGE:
            continue
        if pair.alignment_id not in annotations:
            raise ValidationError(
                f"changed alignment {pair.alignment_id} has no annotation row"
            )
        purpose, label = annotations[pair.alignment_id]
        if purpose.strip().lower() != PURPOSE_REASONING:
            continue
        out.append(
            Revision(
                revision_id=pair.alignment_id,
                essay_id=pair.essay_id,
                op=pair.op,
                text_a=pair.sent_a.text if pair.sent_a else "",
                text_b=pair.sent_b.text if pair.sent_b else "",
                purpose=PURPOSE_REASONING,
                label=label,
            )
        )
    return out


def load_annotations(path: str | Path) -> dict[str, tuple[str, Label]]:
    """Read the alignment_id / purpose / label TSV."""
    out: dict[str, tuple[str, Label]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValidationError(f"{path}: line {lineno}: expected 3 TSV columns")
            alignment_id, purpose, label = parts
            if alignment_id in out:
                raise ValidationError(f"{path}: line {lineno}: duplicate id {alignment_id}")
            out[alignment_id] = (purpose, _parse_enum(Label, label, f"line {lineno}"))
    return out


def make_folds(corpus: Corpus, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Seeded essay-level k-fold partition with fold sizes differing by <= 1.

    Folding is at essay level so a revision and its siblings (and any later
    augmentations) can never straddle a train/test boundary.
    """
    essay_ids = list(corpus.essay_ids())
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if len(essay_ids) < k:
        raise ValidationError(f"corpus has {len(essay_ids)} essays, fewer than k={k}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(essay_ids))
    assignment = {essay_ids[int(idx)]: i % k for i, idx in enumerate(order)}
    return FoldAssignment(k=k, assignment=assignment)


def save_folds(folds: FoldAssignment, path: str | Path) -> None:
    blob = {"k": folds.k, "assignment": dict(sorted(folds.assignment.items()))}
    Path(path).write_text(json.dumps(blob, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_folds(path: str | Path) -> FoldAssignment:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    return FoldAssignment(k=int(blob["k"]), assignment={k: int(v) for k, v in blob["assignment"].items()})


# --------------------------------------------------------------------------
# JSONL IO
# --------------------------------------------------------------------------

def _parse_enum(enum_cls, raw, where):
    try:
        return enum_cls(str(raw).strip().lower())
    except ValueError:
        valid = [m.value for m in enum_cls]
        raise ValidationError(f"{where}: {raw!r} is not one of {valid}") from None


def _req(record: dict, key: str, where: str):
    if key not in record:
        raise ValidationError(f"{where}: missing field {key!r}")
    return record[key]


def load_corpus(path: str | Path, meta: Optional[CorpusMeta] = None) -> Corpus:
    """Load and validate a JSONL corpus file.

    ``meta`` may be passed explicitly; otherwise the file must contain a
    ``meta`` record.  Improvement scores are taken from the essay record under
    the ``given`` rule and recomputed from holistic scores otherwise (a stored
    value, if any, must agree).
    """
    path = Path(path)
    file_meta: Optional[CorpusMeta] = None
    essays_raw: dict[str, dict] = {}
    sentences: dict[tuple[str, int], list] = {}
    alignments_raw: list[tuple[dict, str]] = []
    revisions: list[Revision] = []
    essay_order: list[str] = []

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            where = f"{path.name}: line {lineno}"
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{where}: malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ValidationError(f"{where}: record is not an object")
            kind = _req(record, "kind", where)
            if kind == "meta":
                if file_meta is not None:
                    raise ValidationError(f"{where}: duplicate meta record")
                file_meta = CorpusMeta(
                    corpus_id=str(_req(record, "corpus_id", where)),
                    grade_level=str(record.get("grade_level", "")),
                    feedback_source=str(record.get("feedback_source", "")),
                    improvement_rule=_parse_enum(
                        ImprovementRule, _req(record, "improvement_rule", where), where
                    ),
                    improvement_range=tuple(
                        float(x) for x in _req(record, "improvement_range", where)
                    ),
                )
            elif kind == "essay":
                essay_id = str(_req(record, "essay_id", where))
                if essay_id in essays_raw:
                    raise ValidationError(f"{where}: duplicate essay id {essay_id}")
                essays_raw[essay_id] = record
                essay_order.append(essay_id)
            elif kind == "sentence":
                essay_id = str(_req(record, "essay_id", where))
                try:
                    sent = SentenceRecord(
                        essay_id=essay_id,
                        draft_index=int(_req(record, "draft_index", where)),
                        position=int(_req(record, "position", where)),
                        text=str(_req(record, "text", where)),
                    )
                except ValidationError as exc:
                    raise ValidationError(f"{where}: {exc}") from None
                if sent.draft_index not in (1, 2):
                    raise ValidationError(f"{where}: draft_index must be 1 or 2 in a pair corpus")
                sentences.setdefault((essay_id, sent.draft_index), []).append(sent)
            elif kind == "alignment":
                alignments_raw.append((record, where))
            elif kind == "revision":
                try:
                    rev = Revision(
                        revision_id=str(_req(record, "revision_id", where)),
                        essay_id=str(_req(record, "essay_id", where)),
                        op=_parse_enum(Op, _req(record, "op", where), where),
                        text_a=str(record.get("text_a", "")),
                        text_b=str(record.get("text_b", "")),
                        purpose=str(_req(record, "purpose", where)).strip().lower(),
                        label=_parse_enum(Label, _req(record, "label", where), where),
                        augmented_from=record.get("augmented_from"),
                    )
                except ValidationError as exc:
                    raise ValidationError(f"{where}: {exc}") from None
                revisions.append(rev)
            else:
                raise ValidationError(f"{where}: unknown record kind {kind!r}")

    if meta is not None and file_meta is not None and meta != file_meta:
        raise ValidationError(f"{path.name}: meta record disagrees with the provided meta")
    meta = meta or file_meta
    if meta is None:
        raise ValidationError(f"{path.name}: no meta record and no meta argument")

    essays = []
    for essay_id in essay_order:
        record = essays_raw[essay_id]
        where = f"{path.name}: essay {essay_id}"
        draft_a = tuple(sorted(sentences.get((essay_id, 1), []), key=lambda s: s.position))
        draft_b = tuple(sorted(sentences.get((essay_id, 2), []), key=lambda s: s.position))
        score_a = record.get("holistic_score_a")
        score_b = record.get("holistic_score_b")
        score_a = float(score_a) if score_a is not None else None
        score_b = float(score_b) if score_b is not None else None
        if meta.improvement_rule == ImprovementRule.GIVEN:
            if record.get("improvement") is None:
                raise ValidationError(f"{where}: rule 'given' needs an improvement value")
            improvement = float(record["improvement"])
        else:
            probe = EssayPair(
                essay_id=essay_id, draft_a=(), draft_b=(), improvement=0.0,
                holistic_score_a=score_a, holistic_score_b=score_b,
            )
            try:
                improvement = improvement_score(probe, meta.improvement_rule)
            except ValidationError as exc:
                raise ValidationError(f"{where}: {exc}") from None
            stored = record.get("improvement")
            if stored is not None:
                if abs(float(stored) - improvement) > 1e-9:
                    raise ValidationError(
                        f"{where}: stored improvement {stored} disagrees with "
                        f"recomputed {improvement}"
                    )
                # keep the stored value so save(load(x)) is byte-stable
                improvement = float(stored)
        try:
            essays.append(
                EssayPair(
                    essay_id=essay_id, draft_a=draft_a, draft_b=draft_b,
                    improvement=improvement,
                    holistic_score_a=score_a, holistic_score_b=score_b,
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None

    sent_index = {
        (s.essay_id, s.draft_index, s.position): s
        for e in essays for s in e.draft_a + e.draft_b
    }
    alignments = []
    for record, where in alignments_raw:
        essay_id = str(_req(record, "essay_id", where))
        op = _parse_enum(Op, _req(record, "op", where), where)
        def _side(field_name, draft_index):
            pos = record.get(field_name)
            if pos is None:
                return None
            sent = sent_index.get((essay_id, draft_index, int(pos)))
            if sent is None:
                raise ValidationError(
                    f"{where}: no sentence at draft {draft_index} position {pos}"
                )
            return sent
        try:
            alignments.append(
                AlignmentPair(
                    alignment_id=str(_req(record, "alignment_id", where)),
                    essay_id=essay_id,
                    op=op,
                    sent_a=_side("position_a", 1),
                    sent_b=_side("position_b", 2),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None

    try:
        return Corpus(
            meta=meta, essays=tuple(essays),
            alignments=tuple(alignments), revisions=tuple(revisions),
        )
    except ValidationError as exc:
        raise ValidationError(f"{path.name}: {exc}") from None


def _meta_record(meta: CorpusMeta) -> dict:
    return {
        "kind": "meta",
        "corpus_id": meta.corpus_id,
        "grade_level": meta.grade_level,
        "feedback_source": meta.feedback_source,
        "improvement_rule": meta.improvement_rule.value,
        "improvement_range": [meta.improvement_range[0], meta.improvement_range[1]],
    }


def revision_record(rev: Revision) -> dict:
    record = {
        "kind": "revision",
        "revision_id": rev.revision_id,
        "essay_id": rev.essay_id,
        "op": rev.op.value,
        "text_a": rev.text_a,
        "text_b": rev.text_b,
        "purpose": rev.purpose,
        "label": rev.label.value,
    }
    if rev.augmented_from is not None:
        record["augmented_from"] = rev.augmented_from
    return record


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus in canonical JSONL form (stable bytes for a given value)."""
    lines = [_dump(_meta_record(corpus.meta))]
    for essay in corpus.essays:
        record = {"kind": "essay", "essay_id": essay.essay_id, "improvement": essay.improvement}
        if essay.holistic_score_a is not None:
            record["holistic_score_a"] = essay.holistic_score_a
        if essay.holistic_score_b is not None:
            record["holistic_score_b"] = essay.holistic_score_b
        lines.append(_dump(record))
        for sent in essay.draft_a + essay.draft_b:
            lines.append(_dump({
                "kind": "sentence", "essay_id": sent.essay_id,
                "draft_index": sent.draft_index, "position": sent.position,
                "text": sent.text,
            }))
    for pair in corpus.alignments:
        record = {
            "kind": "alignment", "alignment_id": pair.alignment_id,
            "essay_id": pair.essay_id, "op": pair.op.value,
        }
        if pair.sent_a is not None:
            record["position_a"] = pair.sent_a.position
        if pair.sent_b is not None:
            record["position_b"] = pair.sent_b.position
        lines.append(_dump(record))
    for rev in corpus.revisions:
        lines.append(_dump(revision_record(rev)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_revisions_jsonl(path: str | Path) -> list[Revision]:
    """Read revision records from a JSONL file, ignoring other record kinds.

    Unlike `load_corpus` this accepts augmented revisions, so augmented
    training sets can round-trip through files.
    """
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            where = f"{Path(path).name}: line {lineno}"
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{where}: malformed JSON ({exc.msg})") from None
            if record.get("kind") != "revision":
                continue
            rev = Revision(
                revision_id=str(_req(record, "revision_id", where)),
                essay_id=str(_req(record, "essay_id", where)),
                op=_parse_enum(Op, _req(record, "op", where), where),
                text_a=str(record.get("text_a", "")),
                text_b=str(record.get("text_b", "")),
                purpose=str(_req(record, "purpose", where)).strip().lower(),
                label=_parse_enum(Label, _req(record, "label", where), where),
                augmented_from=record.get("augmented_from"),
            )
            if rev.revision_id in seen:
                raise ValidationError(f"{where}: duplicate revision id {rev.revision_id}")
            seen.add(rev.revision_id)
            out.append(rev)
    return out


def save_revisions_jsonl(revisions: Iterable[Revision], path: str | Path) -> None:
    lines = [_dump(revision_record(rev)) for rev in revisions]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
