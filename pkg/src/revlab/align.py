"""Automatic draft-to-draft sentence alignment.

Replaces a manual alignment step: a monotone (order-preserving) alignment is
found by dynamic programming over pairwise sentence similarity, then matched
pairs are classified as NoChange / Modify or split into Delete + Add when
their similarity falls below the threshold.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from math import sqrt
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .corpus import AlignmentPair, Op, SentenceRecord, tokenize
from .errors import ValidationError

SimilarityFn = Callable[[str, str], float]

# Cap for parallel-but-unequal token multisets ("a b" vs "a a b b"), whose
# tf-cosine is exactly 1: only equal multisets may score 1.0.
_NEAR_ONE = 1.0 - 1e-9


def sentence_similarity(a: str, b: str) -> float:
    """Cosine of term-frequency vectors, in [0, 1].

    Symmetric; exactly 1.0 iff the trimmed token multisets are equal (two
    empty strings count as equal).
    """
    ta, tb = Counter(tokenize(a)), Counter(tokenize(b))
    if ta == tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    dot = sum(cnt * tb[tok] for tok, cnt in ta.items())
    norm = sqrt(sum(c * c for c in ta.values())) * sqrt(sum(c * c for c in tb.values()))
    return min(max(dot / norm, 0.0), _NEAR_ONE)


def embedding_similarity(vectors: Mapping[str, np.ndarray]) -> SimilarityFn:
    """Backend over precomputed per-sentence vectors, keyed by trimmed text.

    Vector cosine is mapped to [0, 1] via (1 + cos) / 2.
    """

    def sim(a: str, b: str) -> float:
        if a.strip() == b.strip():
            return 1.0
        try:
            va, vb = np.asarray(vectors[a.strip()]), np.asarray(vectors[b.strip()])
        except KeyError as exc:
            raise ValidationError(f"no precomputed vector for sentence {exc.args[0]!r}") from None
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na == 0.0 or nb == 0.0:
            return 0.0
        cos = float(np.dot(va, vb) / (na * nb))
        return min(max((1.0 + cos) / 2.0, 0.0), _NEAR_ONE)

    return sim


@dataclass(frozen=True)
class SimilarityMatrix:
    rows: int
    cols: int
    scores: np.ndarray  # (rows, cols), entries in [0, 1]

    def __post_init__(self):
        if self.scores.shape != (self.rows, self.cols):
            raise ValidationError(
                f"similarity matrix shape {self.scores.shape} != ({self.rows}, {self.cols})"
            )
        if self.scores.size and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ValidationError("similarity scores outside [0, 1]")


def similarity_matrix(
    draft_a: Sequence[SentenceRecord],
    draft_b: Sequence[SentenceRecord],
    backend: SimilarityFn = sentence_similarity,
) -> SimilarityMatrix:
    scores = np.empty((len(draft_a), len(draft_b)), dtype=float)
    for i, sa in enumerate(draft_a):
        for j, sb in enumerate(draft_b):
            scores[i, j] = backend(sa.text, sb.text)
    return SimilarityMatrix(rows=len(draft_a), cols=len(draft_b), scores=scores)


def _dp_path(scores: np.ndarray) -> list[int]:
    """Moves (0 = match, 1 = delete from a, 2 = add to b) from (0,0) to (n,m).

    Maximizes the total similarity of matched pairs; ties break toward Match
    over Delete over Add, making the result deterministic.
    """
    n, m = scores.shape
    best = np.zeros((n + 1, m + 1))
    move = np.zeros((n + 1, m + 1), dtype=np.int8)
    move[0, 1:] = 2
    move[1:, 0] = 1
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cand_match = best[i - 1, j - 1] + scores[i - 1, j - 1]
            cand_del = best[i - 1, j]
            cand_add = best[i, j - 1]
            if cand_match >= cand_del and cand_match >= cand_add:
                best[i, j], move[i, j] = cand_match, 0
            elif cand_del >= cand_add:
                best[i, j], move[i, j] = cand_del, 1
            else:
                best[i, j], move[i, j] = cand_add, 2
    path = []
    i, j = n, m
    while i > 0 or j > 0:
        mv = int(move[i, j])
        path.append(mv)
        if mv == 0:
            i, j = i - 1, j - 1
        elif mv == 1:
            i -= 1
        else:
            j -= 1
    path.reverse()
    return path


def matched_pairs(scores: np.ndarray) -> list[tuple[int, int]]:
    """(i, j) index pairs matched by the optimal monotone alignment."""
    out = []
    i = j = 0
    for mv in _dp_path(scores):
        if mv == 0:
            out.append((i, j))
            i, j = i + 1, j + 1
        elif mv == 1:
            i += 1
        else:
            j += 1
    return out


def align_drafts(
    draft_a: Sequence[SentenceRecord],
    draft_b: Sequence[SentenceRecord],
    threshold: float = 0.5,
    backend: SimilarityFn = sentence_similarity,
    essay_id: Optional[str] = None,
) -> list[AlignmentPair]:
    """Align two drafts into NoChange / Modify / Delete / Add pairs.

    Matched pairs with similarity 1.0 and equal trimmed text become NoChange,
    matches at or above the threshold become Modify, and matches below it are
    split into Delete + Add.  Every input sentence lands in exactly one pair,
    emitted in reading order along the alignment path.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    if essay_id is None:
        if draft_a:
            essay_id = draft_a[0].essay_id
        elif draft_b:
            essay_id = draft_b[0].essay_id
        else:
            return []
    sim = similarity_matrix(draft_a, draft_b, backend)

    events: list[tuple[Op, Optional[SentenceRecord], Optional[SentenceRecord]]] = []
    i = j = 0
    for mv in _dp_path(sim.scores):
        if mv == 0:
            score = sim.scores[i, j]
            if score == 1.0 and draft_a[i].text.strip() == draft_b[j].text.strip():
                events.append((Op.NO_CHANGE, draft_a[i], draft_b[j]))
            elif score >= threshold:
                events.append((Op.MODIFY, draft_a[i], draft_b[j]))
            else:
                events.append((Op.DELETE, draft_a[i], None))
                events.append((Op.ADD, None, draft_b[j]))
            i, j = i + 1, j + 1
        elif mv == 1:
            events.append((Op.DELETE, draft_a[i], None))
            i += 1
        else:
            events.append((Op.ADD, None, draft_b[j]))
            j += 1

    return [
        AlignmentPair(
            alignment_id=f"{essay_id}:a{k}",
            essay_id=essay_id,
            op=op,
            sent_a=sa,
            sent_b=sb,
        )
        for k, (op, sa, sb) in enumerate(events)
    ]
