"""Synthetic corpus suite with a controllable cross-task shared signal.

Each revision's label is planted via keyword insertion: with probability
``shared_signal_strength`` a keyword from a class pool shared by all tasks,
with probability ``task_specific_strength`` a keyword from the task's own
disjoint pool, otherwise no keyword (the label is a coin flip).  The label
is then flipped with probability ``label_noise``.  Per-essay improvement is
``slope * (#Desirable) + N(0, sigma)`` mapped into the task's improvement
rule, so desirable-count correlations are planted by construction.

Generation is pure and seeded: the same config always yields byte-identical
corpora, lexicon, and embedding file.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import SynonymLexicon
from .corpus import (
    AlignmentPair,
    Corpus,
    CorpusMeta,
    EssayPair,
    ImprovementRule,
    Label,
    Op,
    PURPOSE_REASONING,
    Revision,
    SentenceRecord,
    save_corpus,
)
from .errors import ValidationError
from .neural import EmbeddingTable, save_embedding_table

_OP_CHOICES = (Op.MODIFY, Op.ADD, Op.DELETE)
_OP_PROBS = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    n_essays: int
    revisions_per_essay: tuple[int, int] = (1, 4)
    improvement_rule: ImprovementRule = ImprovementRule.GIVEN
    improvement_range: tuple[float, float] = (0.0, 10.0)
    holistic_range: Optional[tuple[float, float]] = None
    total_revisions: Optional[int] = None  # exact count, spread over essays
    improvement_slope: float = 1.0
    improvement_mapping: str = "affine"  # "affine" rescales raw scores into the
    # range; "clip" passes them through, clamped at the ends
    grade_level: str = "synthetic"
    feedback_source: str = "synthetic"

    def __post_init__(self):
        if self.n_essays < 1:
            raise ValidationError(f"task {self.task_id}: n_essays must be >= 1")
        lo, hi = self.revisions_per_essay
        if not 0 <= lo <= hi:
            raise ValidationError(f"task {self.task_id}: bad revisions_per_essay range")
        if self.improvement_rule != ImprovementRule.GIVEN and self.holistic_range is None:
            raise ValidationError(
                f"task {self.task_id}: rule {self.improvement_rule.value} needs holistic_range"
            )
        if self.improvement_rule == ImprovementRule.HOLISTIC_DIFF:
            span = self.holistic_range[1] - self.holistic_range[0]
            if self.improvement_range[1] > span or self.improvement_range[0] < -span:
                raise ValidationError(
                    f"task {self.task_id}: improvement range exceeds the rubric span {span}"
                )
        if self.improvement_mapping not in ("affine", "clip"):
            raise ValidationError(f"task {self.task_id}: unknown mapping {self.improvement_mapping!r}")
        if self.total_revisions is not None and self.total_revisions < self.n_essays * lo:
            raise ValidationError(f"task {self.task_id}: total_revisions below the per-essay minimum")


@dataclass(frozen=True)
class SuiteConfig:
    tasks: tuple[TaskSpec, ...]
    seed: int = 7
    vocab_size: int = 300
    shared_signal_strength: float = 0.6
    task_specific_strength: float = 0.2
    label_noise: float = 0.1
    improvement_noise_sigma: float = 0.5
    shared_keywords_per_class: int = 8
    task_keywords_per_class: int = 4
    synonyms_per_token: int = 3
    sentence_len: tuple[int, int] = (5, 15)

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if not ids or len(set(ids)) != len(ids):
            raise ValidationError("tasks must be non-empty with unique ids")
        for p, name in (
            (self.shared_signal_strength, "shared_signal_strength"),
            (self.task_specific_strength, "task_specific_strength"),
        ):
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        if self.shared_signal_strength + self.task_specific_strength > 1.0:
            raise ValidationError("shared + task-specific strengths exceed 1")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValidationError(f"label_noise must be in [0, 0.5), got {self.label_noise}")
        if self.improvement_noise_sigma < 0.0:
            raise ValidationError("improvement_noise_sigma must be >= 0")
        if self.synonyms_per_token < 1:
            raise ValidationError("synonyms_per_token must be >= 1")
        needed = 2 * self.shared_keywords_per_class + 2 * len(self.tasks) * self.task_keywords_per_class
        if self.vocab_size < needed + 20:
            raise ValidationError(
                f"vocab_size {self.vocab_size} too small for {needed} keywords plus filler"
            )


@dataclass(frozen=True)
class _Pools:
    shared: dict[Label, np.ndarray]
    task: dict[str, dict[Label, np.ndarray]]
    filler: np.ndarray


def _token(i: int) -> str:
    return f"w{i:04d}"


def vocabulary(cfg: SuiteConfig) -> list[str]:
    return [_token(i) for i in range(cfg.vocab_size)]


def _allocate_pools(cfg: SuiteConfig) -> _Pools:
    cursor = 0

    def take(n: int) -> np.ndarray:
        nonlocal cursor
        block = np.array([_token(i) for i in range(cursor, cursor + n)])
        cursor += n
        return block

    shared = {Label.DESIRABLE: take(cfg.shared_keywords_per_class),
              Label.UNDESIRABLE: take(cfg.shared_keywords_per_class)}
    task = {}
    for spec in cfg.tasks:
        task[spec.task_id] = {
            Label.DESIRABLE: take(cfg.task_keywords_per_class),
            Label.UNDESIRABLE: take(cfg.task_keywords_per_class),
        }
    filler = np.array([_token(i) for i in range(cursor, cfg.vocab_size)])
    return _Pools(shared=shared, task=task, filler=filler)


def keyword_pools(cfg: SuiteConfig) -> dict[str, dict[Label, tuple[str, ...]]]:
    """Keyword tokens by scope: 'shared' plus one entry per task id."""
    pools = _allocate_pools(cfg)
    out = {"shared": {label: tuple(toks) for label, toks in pools.shared.items()}}
    for task_id, per_label in pools.task.items():
        out[task_id] = {label: tuple(toks) for label, toks in per_label.items()}
    return out


def _sentence(rng: np.random.Generator, pools: _Pools, cfg: SuiteConfig) -> list[str]:
    lo, hi = cfg.sentence_len
    length = int(rng.integers(lo, hi + 1))
    return rng.choice(pools.filler, size=length).tolist()


def _insert(tokens: list[str], token: str, rng: np.random.Generator) -> list[str]:
    pos = int(rng.integers(len(tokens) + 1))
    return tokens[:pos] + [token] + tokens[pos:]


def _rev_counts(spec: TaskSpec, rng: np.random.Generator) -> list[int]:
    if spec.total_revisions is not None:
        base, rem = divmod(spec.total_revisions, spec.n_essays)
        return [base + 1 if i < rem else base for i in range(spec.n_essays)]
    lo, hi = spec.revisions_per_essay
    return [int(rng.integers(lo, hi + 1)) for _ in range(spec.n_essays)]


def _generate_task(cfg: SuiteConfig, spec: TaskSpec, pools: _Pools) -> Corpus:
    rng = np.random.default_rng([cfg.seed, zlib.crc32(spec.task_id.encode("utf-8"))])
    task_pools = pools.task[spec.task_id]
    payloads = []
    for e_idx, n_revs in enumerate(_rev_counts(spec, rng)):
        essay_id = f"{spec.task_id}-e{e_idx:03d}"
        slots = [("keep", None)] * int(rng.integers(2, 6))
        for _ in range(n_revs):
            op = rng.choice(len(_OP_CHOICES), p=_OP_PROBS)
            slots.append(("rev", _OP_CHOICES[int(op)]))
        slots = [slots[int(i)] for i in rng.permutation(len(slots))]

        a_texts, b_texts, pairs, revisions = [], [], [], []
        rev_no = 0
        for slot_kind, op in slots:
            if slot_kind == "keep":
                text = " ".join(_sentence(rng, pools, cfg))
                pairs.append((Op.NO_CHANGE, len(a_texts), len(b_texts)))
                a_texts.append(text)
                b_texts.append(text)
                continue
            # plant the label signal in the changed side
            roll = rng.random()
            label_true = Label.DESIRABLE if rng.random() < 0.5 else Label.UNDESIRABLE
            keyword = None
            if roll < cfg.shared_signal_strength:
                pool = pools.shared[label_true]
                keyword = str(pool[int(rng.integers(len(pool)))])
            elif roll < cfg.shared_signal_strength + cfg.task_specific_strength:
                pool = task_pools[label_true]
                keyword = str(pool[int(rng.integers(len(pool)))])
            label = label_true
            if rng.random() < cfg.label_noise:
                label = Label.UNDESIRABLE if label == Label.DESIRABLE else Label.DESIRABLE

            if op == Op.MODIFY:
                a_tok = _sentence(rng, pools, cfg)
                b_tok = list(a_tok)
                n_perturb = max(1, len(b_tok) // 5)
                for pos in rng.choice(len(b_tok), size=n_perturb, replace=False):
                    b_tok[int(pos)] = str(pools.filler[int(rng.integers(len(pools.filler)))])
                if keyword is not None:
                    b_tok = _insert(b_tok, keyword, rng)
                text_a, text_b = " ".join(a_tok), " ".join(b_tok)
                pairs.append((Op.MODIFY, len(a_texts), len(b_texts)))
                a_texts.append(text_a)
                b_texts.append(text_b)
            elif op == Op.ADD:
                b_tok = _sentence(rng, pools, cfg)
                if keyword is not None:
                    b_tok = _insert(b_tok, keyword, rng)
                text_a, text_b = "", " ".join(b_tok)
                pairs.append((Op.ADD, None, len(b_texts)))
                b_texts.append(text_b)
            else:
                a_tok = _sentence(rng, pools, cfg)
                if keyword is not None:
                    a_tok = _insert(a_tok, keyword, rng)
                text_a, text_b = " ".join(a_tok), ""
                pairs.append((Op.DELETE, len(a_texts), None))
                a_texts.append(text_a)
            revisions.append(
                dict(
                    revision_id=f"{essay_id}:r{rev_no}",
                    op=op, text_a=text_a, text_b=text_b, label=label,
                )
            )
            rev_no += 1

        cnt_desirable = sum(1 for r in revisions if r["label"] == Label.DESIRABLE)
        raw = spec.improvement_slope * cnt_desirable + rng.normal(0.0, cfg.improvement_noise_sigma)
        payloads.append(
            dict(essay_id=essay_id, a_texts=a_texts, b_texts=b_texts,
                 pairs=pairs, revisions=revisions, raw=raw)
        )

    improvements, scores = _map_improvements(spec, [p["raw"] for p in payloads], rng)

    essays, alignments, revisions = [], [], []
    for payload, improvement, score_pair in zip(payloads, improvements, scores):
        essay_id = payload["essay_id"]
        draft_a = tuple(
            SentenceRecord(essay_id=essay_id, draft_index=1, position=i, text=t)
            for i, t in enumerate(payload["a_texts"])
        )
        draft_b = tuple(
            SentenceRecord(essay_id=essay_id, draft_index=2, position=i, text=t)
            for i, t in enumerate(payload["b_texts"])
        )
        score_a, score_b = score_pair
        essays.append(
            EssayPair(
                essay_id=essay_id, draft_a=draft_a, draft_b=draft_b,
                improvement=improvement,
                holistic_score_a=score_a, holistic_score_b=score_b,
            )
        )
        for k, (op, ia, ib) in enumerate(payload["pairs"]):
            alignments.append(
                AlignmentPair(
                    alignment_id=f"{essay_id}:a{k}", essay_id=essay_id, op=op,
                    sent_a=draft_a[ia] if ia is not None else None,
                    sent_b=draft_b[ib] if ib is not None else None,
                )
            )
        for r in payload["revisions"]:
            revisions.append(
                Revision(
                    revision_id=r["revision_id"], essay_id=essay_id, op=r["op"],
                    text_a=r["text_a"], text_b=r["text_b"],
                    purpose=PURPOSE_REASONING, label=r["label"],
                )
            )

    meta = CorpusMeta(
        corpus_id=spec.task_id,
        grade_level=spec.grade_level,
        feedback_source=spec.feedback_source,
        improvement_rule=spec.improvement_rule,
        improvement_range=spec.improvement_range,
    )
    return Corpus(meta=meta, essays=tuple(essays),
                  alignments=tuple(alignments), revisions=tuple(revisions))


def _map_improvements(
    spec: TaskSpec, raws: Sequence[float], rng: np.random.Generator
) -> tuple[list[float], list[tuple[Optional[float], Optional[float]]]]:
    """Map raw planted scores into the task's improvement rule.

    "affine" rescales [min, max] onto the improvement range (correlations
    with the desirable count are preserved exactly); "clip" clamps.  Holistic
    scores consistent with the improvement are synthesized where the rule
    derives improvement from them.
    """
    lo, hi = spec.improvement_range
    raws = np.asarray(raws, dtype=float)

    if spec.improvement_rule == ImprovementRule.BINARY_SIGN:
        center = float(np.median(raws))
        improvements = [1.0 if raw > center else -1.0 for raw in raws]
        s_lo, s_hi = spec.holistic_range
        span = s_hi - s_lo
        scores = []
        for imp in improvements:
            delta = float(rng.uniform(0.1 * span, 0.25 * span))
            score_a = float(rng.uniform(s_lo + 0.25 * span, s_hi - 0.25 * span))
            score_b = score_a + delta if imp > 0 else score_a - delta
            scores.append((score_a, score_b))
        return improvements, scores

    if spec.improvement_mapping == "affine":
        r_lo, r_hi = float(raws.min()), float(raws.max())
        if r_hi > r_lo:
            mapped = lo + (hi - lo) * (raws - r_lo) / (r_hi - r_lo)
            improvements = np.clip(mapped, lo, hi).tolist()  # shave 1-ulp overshoot
        else:
            improvements = [0.5 * (lo + hi)] * len(raws)
    else:
        improvements = np.clip(raws, lo, hi).tolist()

    if spec.improvement_rule == ImprovementRule.GIVEN:
        return improvements, [(None, None)] * len(improvements)

    s_lo, s_hi = spec.holistic_range
    scores = []
    for imp in improvements:
        a_lo = max(s_lo, s_lo - imp)
        a_hi = min(s_hi, s_hi - imp)
        score_a = float(rng.uniform(a_lo, a_hi))
        scores.append((score_a, score_a + imp))
    return improvements, scores


def generate_suite(cfg: SuiteConfig) -> dict[str, Corpus]:
    """All task corpora for a suite config; deterministic per seed."""
    pools = _allocate_pools(cfg)
    return {spec.task_id: _generate_task(cfg, spec, pools) for spec in cfg.tasks}


def bayes_reference(cfg: SuiteConfig) -> dict[str, float]:
    """Population-limit macro F1 of the generator's Bayes rule, per task.

    A keyword-bearing revision is classified by its keyword pool and is
    correct unless the label was flipped; keyword-free revisions are coin
    flips.  Classes are symmetric and balanced, so macro F1 equals accuracy:
    (s + t) * (1 - noise) + (1 - s - t) / 2.
    """
    signal = cfg.shared_signal_strength + cfg.task_specific_strength
    bound = signal * (1.0 - cfg.label_noise) + (1.0 - signal) * 0.5
    return {spec.task_id: bound for spec in cfg.tasks}


def make_lexicon(cfg: SuiteConfig) -> SynonymLexicon:
    """Synonyms ``wNNNNx0..x{k-1}`` per vocabulary token.

    A synonym token appears nowhere else in the suite, so substituting it
    preserves the keyword class of its base token by construction.
    """
    pairs = {
        tok: [f"{tok}x{j}" for j in range(cfg.synonyms_per_token)]
        for tok in vocabulary(cfg)
    }
    return SynonymLexicon.from_pairs(pairs)


def embedding_tokens(cfg: SuiteConfig) -> list[str]:
    toks = vocabulary(cfg)
    toks += [f"{tok}x{j}" for tok in vocabulary(cfg) for j in range(cfg.synonyms_per_token)]
    return sorted(toks)


def build_embedding_table(cfg: SuiteConfig, dimension: int = 50) -> EmbeddingTable:
    """Random unit vectors for the whole suite vocabulary (plus synonyms)."""
    rng = np.random.default_rng([cfg.seed, 0x45])
    vectors = {}
    for tok in embedding_tokens(cfg):
        vec = rng.standard_normal(dimension)
        vectors[tok] = vec / np.linalg.norm(vec)
    return EmbeddingTable.build(dimension, vectors)


def paper_shaped_config(seed: int = 7, **overrides) -> SuiteConfig:
    """Preset mirroring the published corpus shapes: essay counts (143, 47,
    63, 60), per-corpus improvement rules and ranges, and pre-augmentation
    revision totals (389, 387, 329, 207)."""
    tasks = (
        TaskSpec(
            task_id="E", n_essays=143, total_revisions=389,
            improvement_rule=ImprovementRule.GIVEN, improvement_range=(0.0, 3.0),
            holistic_range=(1.0, 4.0), grade_level="5th-6th", feedback_source="awe",
        ),
        TaskSpec(
            task_id="H1", n_essays=47, total_revisions=387,
            improvement_rule=ImprovementRule.HOLISTIC_DIFF, improvement_range=(-2.0, 3.0),
            holistic_range=(0.0, 5.0), grade_level="12th", feedback_source="peer",
        ),
        TaskSpec(
            task_id="H2", n_essays=63, total_revisions=329,
            improvement_rule=ImprovementRule.HOLISTIC_DIFF, improvement_range=(-14.0, 12.0),
            holistic_range=(17.0, 44.0), grade_level="12th", feedback_source="peer",
        ),
        TaskSpec(
            task_id="C", n_essays=60, total_revisions=207,
            improvement_rule=ImprovementRule.BINARY_SIGN, improvement_range=(-1.0, 1.0),
            holistic_range=(15.0, 33.0), grade_level="college", feedback_source="awe",
        ),
    )
    params = dict(tasks=tasks, seed=seed, vocab_size=300,
                  shared_signal_strength=0.6, task_specific_strength=0.2,
                  label_noise=0.1, improvement_noise_sigma=0.5)
    params.update(overrides)
    return SuiteConfig(**params)


def tiny_config(seed: int = 7, **overrides) -> SuiteConfig:
    """Small four-task preset for smoke tests and CLI examples."""
    tasks = (
        TaskSpec(task_id="C", n_essays=12, revisions_per_essay=(1, 3),
                 improvement_rule=ImprovementRule.BINARY_SIGN,
                 improvement_range=(-1.0, 1.0), holistic_range=(0.0, 10.0)),
        TaskSpec(task_id="H1", n_essays=12, revisions_per_essay=(1, 3),
                 improvement_rule=ImprovementRule.HOLISTIC_DIFF,
                 improvement_range=(-2.0, 3.0), holistic_range=(0.0, 5.0)),
        TaskSpec(task_id="H2", n_essays=12, revisions_per_essay=(1, 3),
                 improvement_rule=ImprovementRule.HOLISTIC_DIFF,
                 improvement_range=(-2.0, 3.0), holistic_range=(0.0, 5.0)),
        TaskSpec(task_id="E", n_essays=12, revisions_per_essay=(1, 3),
                 improvement_rule=ImprovementRule.GIVEN,
                 improvement_range=(0.0, 3.0)),
    )
    params = dict(tasks=tasks, seed=seed, vocab_size=120,
                  shared_signal_strength=0.7, task_specific_strength=0.1,
                  label_noise=0.05, improvement_noise_sigma=0.25,
                  shared_keywords_per_class=4, task_keywords_per_class=2,
                  sentence_len=(4, 8))
    params.update(overrides)
    return SuiteConfig(**params)


PRESETS = {
    "paper-shaped": paper_shaped_config,
    "tiny": tiny_config,
}


def suite_config_to_dict(cfg: SuiteConfig) -> dict:
    blob = asdict(cfg)
    for task in blob["tasks"]:
        task["improvement_rule"] = task["improvement_rule"].value
    return blob


def suite_config_from_dict(blob: dict) -> SuiteConfig:
    tasks = []
    for task in blob["tasks"]:
        kwargs = dict(task)
        kwargs["improvement_rule"] = ImprovementRule(kwargs["improvement_rule"])
        for key in ("revisions_per_essay", "improvement_range", "holistic_range"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        tasks.append(TaskSpec(**kwargs))
    kwargs = dict(blob)
    kwargs["tasks"] = tuple(tasks)
    if kwargs.get("sentence_len") is not None:
        kwargs["sentence_len"] = tuple(kwargs["sentence_len"])
    return SuiteConfig(**kwargs)


def emit_suite(cfg: SuiteConfig, outdir: str | Path, embedding_dim: int = 50) -> dict[str, Path]:
    """Write per-task corpus JSONL files, the synonym lexicon TSV, the random
    embedding file, and the resolved suite config."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    for task_id, corpus in generate_suite(cfg).items():
        path = outdir / f"{task_id}.jsonl"
        save_corpus(corpus, path)
        paths[task_id] = path
    lex_path = outdir / "lexicon.tsv"
    make_lexicon(cfg).to_tsv(lex_path)
    paths["lexicon"] = lex_path
    emb_path = outdir / "embeddings.txt"
    save_embedding_table(build_embedding_table(cfg, embedding_dim), emb_path)
    paths["embeddings"] = emb_path
    cfg_path = outdir / "suite.json"
    cfg_path.write_text(json.dumps(suite_config_to_dict(cfg), sort_keys=True, indent=1) + "\n",
                        encoding="utf-8")
    paths["config"] = cfg_path
    return paths
