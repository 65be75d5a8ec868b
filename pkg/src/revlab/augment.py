"""Synonym-replacement data augmentation to exact per-class target counts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import Label, Revision
from .errors import UnaugmentableError, ValidationError


@dataclass(frozen=True)
class SynonymLexicon:
    """Case-normalized token -> synonyms map; no token maps only to itself."""

    entries: dict[str, tuple[str, ...]]

    @classmethod
    def from_pairs(cls, pairs: dict[str, Sequence[str]]) -> "SynonymLexicon":
        entries = {}
        for token, synonyms in pairs.items():
            key = token.strip().lower()
            syns = tuple(
                dict.fromkeys(s.strip().lower() for s in synonyms if s.strip().lower() != key)
            )
            if not key:
                raise ValidationError("lexicon contains an empty token")
            if not syns:
                raise ValidationError(f"lexicon token {key!r} maps only to itself")
            entries[key] = syns
        return cls(entries=entries)

    @classmethod
    def from_tsv(cls, path: str | Path) -> "SynonymLexicon":
        """token TAB comma-separated synonyms, one entry per line."""
        pairs = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValidationError(f"{path}: line {lineno}: expected 2 TSV columns")
                pairs[parts[0]] = [s for s in parts[1].split(",") if s.strip()]
        return cls.from_pairs(pairs)

    def to_tsv(self, path: str | Path) -> None:
        lines = [f"{tok}\t{','.join(syns)}" for tok, syns in sorted(self.entries.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def lookup(self, token: str) -> Optional[tuple[str, ...]]:
        return self.entries.get(token.strip().lower())


@dataclass(frozen=True)
class AugmentTargets:
    total: int
    desirable: int
    undesirable: int

    def __post_init__(self):
        if self.desirable < 0 or self.undesirable < 0:
            raise ValidationError("augmentation targets must be non-negative")
        if self.desirable + self.undesirable != self.total:
            raise ValidationError(
                f"targets inconsistent: {self.desirable} + {self.undesirable} != {self.total}"
            )


def replaceable_positions(rev: Revision, lexicon: SynonymLexicon) -> list[tuple[str, int]]:
    """Positions ('a'|'b', token index) whose token has a lexicon entry."""
    out = []
    for side, text in (("a", rev.text_a), ("b", rev.text_b)):
        for idx, token in enumerate(text.split()):
            if lexicon.lookup(token) is not None:
                out.append((side, idx))
    return out


def synonym_replace(
    rev: Revision,
    lexicon: SynonymLexicon,
    rate: float = 0.15,
    rng: Optional[np.random.Generator] = None,
    new_id: Optional[str] = None,
) -> Revision:
    """One augmented copy of ``rev`` with ceil(rate * replaceable) tokens swapped.

    Replacement tokens are drawn uniformly from the lexicon entry of the token
    they replace, so the output text always differs from the source.  Label,
    operation, and essay are preserved; provenance goes in ``augmented_from``.
    """
    if rev.augmented_from is not None:
        raise ValidationError(f"revision {rev.revision_id} is already augmented")
    if not 0.0 < rate <= 1.0:
        raise ValidationError(f"rate must be in (0, 1], got {rate}")
    rng = rng if rng is not None else np.random.default_rng()
    positions = replaceable_positions(rev, lexicon)
    if not positions:
        raise UnaugmentableError(
            f"unaugmentable example {rev.revision_id}: no replaceable tokens"
        )
    n_replace = math.ceil(rate * len(positions))
    chosen_idx = sorted(rng.choice(len(positions), size=n_replace, replace=False).tolist())
    tokens = {"a": rev.text_a.split(), "b": rev.text_b.split()}
    for k in chosen_idx:
        side, idx = positions[k]
        synonyms = lexicon.lookup(tokens[side][idx])
        tokens[side][idx] = synonyms[int(rng.integers(len(synonyms)))]
    return Revision(
        revision_id=new_id if new_id is not None else f"{rev.revision_id}.aug",
        essay_id=rev.essay_id,
        op=rev.op,
        text_a=" ".join(tokens["a"]),
        text_b=" ".join(tokens["b"]),
        purpose=rev.purpose,
        label=rev.label,
        augmented_from=rev.revision_id,
    )


def augment_to_target(
    revisions: Sequence[Revision],
    targets: AugmentTargets,
    lexicon: SynonymLexicon,
    rate: float = 0.15,
    rng: Optional[np.random.Generator] = None,
) -> list[Revision]:
    """Grow a revision set to exact per-class counts by synonym replacement.

    All originals are kept; each class is topped up by cycling round-robin
    over its augmentable originals, so per-original augmentation multiplicity
    differs by at most 1.
    """
    rng = rng if rng is not None else np.random.default_rng()
    for rev in revisions:
        if rev.augmented_from is not None:
            raise ValidationError(
                f"augment_to_target expects originals only, got augmented {rev.revision_id}"
            )
    out = list(revisions)
    for label, target in (
        (Label.DESIRABLE, targets.desirable),
        (Label.UNDESIRABLE, targets.undesirable),
    ):
        originals = [r for r in revisions if r.label == label]
        need = target - len(originals)
        if need < 0:
            raise ValidationError(
                f"target {target} for {label.value} below original count {len(originals)}"
            )
        if need == 0:
            continue
        augmentable = [r for r in originals if replaceable_positions(r, lexicon)]
        if not augmentable:
            raise UnaugmentableError(
                f"class {label.value} has zero augmentable examples"
            )
        for i in range(need):
            src = augmentable[i % len(augmentable)]
            copy_no = i // len(augmentable)
            out.append(
                synonym_replace(
                    src, lexicon, rate=rate, rng=rng,
                    new_id=f"{src.revision_id}.aug{copy_no}",
                )
            )
    return out


def targets_preserving_ratio(revisions: Sequence[Revision], total: int) -> AugmentTargets:
    """Targets for ``total`` examples keeping the original class ratio."""
    n_des = sum(1 for r in revisions if r.label == Label.DESIRABLE)
    n_und = len(revisions) - n_des
    if total < len(revisions):
        raise ValidationError(f"total {total} below original count {len(revisions)}")
    if n_des == 0 or n_und == 0:
        raise ValidationError("both classes must be present to scale targets")
    desirable = max(n_des, round(total * n_des / len(revisions)))
    desirable = min(desirable, total - n_und)
    return AugmentTargets(total=total, desirable=desirable, undesirable=total - desirable)
