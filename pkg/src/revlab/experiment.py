"""End-to-end experiment orchestration for the ``run`` subcommand.

A declarative spec (TOML file and/or CLI flags) drives: suite generation or
corpus loading -> alignment (when drafts arrive unaligned) -> essay-level
folds -> per-fold training-set augmentation -> training under the requested
regimes -> intrinsic + extrinsic evaluation -> deterministic report files.

Jobs (seed x regime x task/pair) are independent and run in a process pool
sized by ``--threads`` / ``REVLAB_THREADS`` (default: physical cores).  Every
artifact in the output directory is reproducible from ``manifest.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import psutil
except ImportError:  # pragma: no cover
    psutil = None

from . import align as align_mod
from . import synth as synth_mod
from .augment import SynonymLexicon, augment_to_target, targets_preserving_ratio
from .corpus import Corpus, FoldAssignment, load_corpus, make_folds
from .errors import EvaluationError, RevlabError, TrainingError, ValidationError
from .evaluation import (
    CvResult,
    EvalReport,
    ExtrinsicRow,
    IntrinsicRow,
    cross_validate,
    emit_report,
    extrinsic_eval,
)
from .neural import EmbeddingTable, ModelConfig, load_embedding_table
from .regimes import MtlRegime, StlRegime, TlRegime, TrainConfig, UnionRegime

PACKAGE_VERSION = "0.1.0"
KNOWN_REGIMES = ("stl", "union", "mtl", "tl")

REPORT_NOTES = (
    "extrinsic correlations use raw per-essay revision counts (not proportions)",
    "all essays enter the correlation, including essays with zero revisions",
    "augmentation targets are per-fold training-set sizes; test folds stay original",
    "automatic sentence alignment is unvalidated against human alignments",
)


@dataclass(frozen=True)
class ExperimentSpec:
    regimes: tuple[str, ...] = ("stl", "union", "mtl", "tl")
    seeds: tuple[int, ...] = (1,)
    out_dir: str = "out"
    threads: Optional[int] = None

    # data: either a synth preset or explicit corpus files
    preset: Optional[str] = "tiny"
    suite_seed: int = 7
    corpora: Optional[dict[str, str]] = None
    lexicon: Optional[str] = None
    embeddings: Optional[str] = None
    embedding_dim: int = 50
    synth_overrides: dict = field(default_factory=dict)

    # training
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    task_order: Optional[tuple[str, ...]] = None  # default: suite order

    # model
    hidden_dim: int = 64
    max_len: int = 64

    # evaluation
    k_folds: int = 10
    alignment_threshold: float = 0.5

    # augmentation (0 disables)
    augment_rate: float = 0.15
    mtl_total_per_task: int = 512
    tl_total_per_task: int = 768
    tl_pairs: Optional[tuple[tuple[str, str], ...]] = None

    def __post_init__(self):
        unknown = [r for r in self.regimes if r not in KNOWN_REGIMES]
        if unknown:
            raise ValidationError(f"unknown regimes {unknown}; expected subset of {KNOWN_REGIMES}")
        if not self.seeds:
            raise ValidationError("seed list must be non-empty")
        if any(s < 0 for s in self.seeds):
            raise ValidationError("seeds must be non-negative")
        if self.preset is None and not self.corpora:
            raise ValidationError("spec needs either a synth preset or corpus paths")
        if self.preset is not None and self.preset not in synth_mod.PRESETS:
            raise ValidationError(
                f"unknown preset {self.preset!r}; have {sorted(synth_mod.PRESETS)}"
            )
        if self.k_folds < 2:
            raise ValidationError(f"k_folds must be >= 2, got {self.k_folds}")

    def to_dict(self) -> dict:
        blob = dataclasses.asdict(self)
        blob["regimes"] = list(self.regimes)
        blob["seeds"] = list(self.seeds)
        if self.task_order is not None:
            blob["task_order"] = list(self.task_order)
        if self.tl_pairs is not None:
            blob["tl_pairs"] = [list(p) for p in self.tl_pairs]
        return blob

    @classmethod
    def from_dict(cls, blob: dict) -> "ExperimentSpec":
        kwargs = dict(blob)
        for key in ("regimes", "seeds", "task_order"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("tl_pairs") is not None:
            kwargs["tl_pairs"] = tuple(tuple(p) for p in kwargs["tl_pairs"])
        known = {f.name for f in dataclasses.fields(cls)}
        stray = sorted(set(kwargs) - known)
        if stray:
            raise ValidationError(f"unknown experiment spec keys: {stray}")
        return cls(**kwargs)


def config_hash(spec: ExperimentSpec) -> str:
    canonical = json.dumps(spec.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def resolve_workers(requested: Optional[int]) -> int:
    """--threads flag, capped by REVLAB_THREADS; default = physical cores."""
    if requested is None:
        if psutil is not None:
            requested = psutil.cpu_count(logical=False) or 1
        else:
            requested = os.cpu_count() or 1
    cap = os.environ.get("REVLAB_THREADS")
    if cap:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            raise ValidationError(f"REVLAB_THREADS must be an integer, got {cap!r}") from None
    return max(1, requested)


class _Stage:
    """Prefixes failures with the pipeline stage name, preserving the type."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, RevlabError):
            raise type(exc)(f"stage {self.name}: {exc}") from exc
        return False


@dataclass
class _DataContext:
    corpora: dict[str, Corpus]
    folds: dict[str, FoldAssignment]
    table: EmbeddingTable
    lexicon: Optional[SynonymLexicon]
    tasks: tuple[str, ...]


_CONTEXT_CACHE: dict[str, _DataContext] = {}


def _load_context(spec: ExperimentSpec) -> _DataContext:
    key = config_hash(spec)
    if key in _CONTEXT_CACHE:
        return _CONTEXT_CACHE[key]

    with _Stage("synth" if spec.preset else "load"):
        if spec.preset is not None:
            suite_cfg = synth_mod.PRESETS[spec.preset](seed=spec.suite_seed, **spec.synth_overrides)
            corpora = synth_mod.generate_suite(suite_cfg)
            lexicon = synth_mod.make_lexicon(suite_cfg)
            table = (
                load_embedding_table(spec.embeddings)
                if spec.embeddings
                else synth_mod.build_embedding_table(suite_cfg, spec.embedding_dim)
            )
        else:
            corpora = {task: load_corpus(path) for task, path in spec.corpora.items()}
            lexicon = SynonymLexicon.from_tsv(spec.lexicon) if spec.lexicon else None
            if not spec.embeddings:
                raise ValidationError("file-based corpora need an --embeddings file")
            table = load_embedding_table(spec.embeddings)

    with _Stage("align"):
        aligned = {}
        for task, corpus in corpora.items():
            if corpus.alignments or not any(e.draft_a or e.draft_b for e in corpus.essays):
                aligned[task] = corpus
                continue
            pairs = []
            for essay in corpus.essays:
                pairs.extend(
                    align_mod.align_drafts(
                        essay.draft_a, essay.draft_b,
                        threshold=spec.alignment_threshold, essay_id=essay.essay_id,
                    )
                )
            aligned[task] = corpus.with_alignments(pairs)
        corpora = aligned

    with _Stage("folds"):
        folds = {
            task: make_folds(corpus, k=spec.k_folds, seed=spec.suite_seed)
            for task, corpus in corpora.items()
        }

    tasks = tuple(corpora)
    ctx = _DataContext(corpora=corpora, folds=folds, table=table, lexicon=lexicon, tasks=tasks)
    _CONTEXT_CACHE[key] = ctx
    return ctx


def _train_config(spec: ExperimentSpec, seed: int, tasks: tuple[str, ...]) -> TrainConfig:
    order = spec.task_order if spec.task_order is not None else tasks
    return TrainConfig(
        learning_rate=spec.learning_rate, batch_size=spec.batch_size,
        epochs=spec.epochs, seed=seed, task_order=tuple(order),
    )


def _make_augmenter(spec: ExperimentSpec, ctx: _DataContext, seed: int, regime_tag: str,
                    total_per_task: int):
    if not total_per_task:
        return None
    if ctx.lexicon is None:
        raise ValidationError("augmentation requested but no lexicon available")

    def augmenter(task, train_revs, fold):
        total = max(total_per_task, len(train_revs))
        targets = targets_preserving_ratio(train_revs, total)
        rng = np.random.default_rng(
            [seed, zlib.crc32(regime_tag.encode()), zlib.crc32(task.encode()), fold + 1]
        )
        return augment_to_target(train_revs, targets, ctx.lexicon, rate=spec.augment_rate, rng=rng)

    return augmenter


def _augment_full(spec: ExperimentSpec, ctx: _DataContext, seed: int, task: str,
                  total_per_task: int):
    """Augment a whole corpus (the TL source phase, which is never tested)."""
    revs = list(ctx.corpora[task].revisions)
    augmenter = _make_augmenter(spec, ctx, seed, f"full-{task}", total_per_task)
    if augmenter is None:
        return revs
    return augmenter(task, revs, -1)  # fold -1 marks the no-fold (full corpus) case


def _execute_job(spec_blob: dict, seed: int, kind: str, arg) -> dict:
    """One (seed, regime[, task/pair]) training + evaluation unit.

    Runs in a worker process; the data context is rebuilt deterministically
    from the spec and cached per process.
    """
    spec = ExperimentSpec.from_dict(spec_blob)
    ctx = _load_context(spec)
    model_cfg = ModelConfig(hidden_dim=spec.hidden_dim, max_len=spec.max_len)
    cfg = _train_config(spec, seed, ctx.tasks)
    mtl_augmenter = _make_augmenter(spec, ctx, seed, kind, spec.mtl_total_per_task)

    with _Stage(f"train[{kind}]"):
        if kind == "stl":
            task = arg
            regime = StlRegime(task)
            result = cross_validate(
                regime, {task: ctx.corpora[task]}, {task: ctx.folds[task]},
                cfg, ctx.table, model_cfg, augmenter=mtl_augmenter,
            )
            source = None
        elif kind == "union":
            regime = UnionRegime(ctx.tasks)
            result = cross_validate(
                regime, ctx.corpora, ctx.folds, cfg, ctx.table, model_cfg,
                augmenter=mtl_augmenter,
            )
            source = None
        elif kind == "mtl":
            regime = MtlRegime(ctx.tasks)
            result = cross_validate(
                regime, ctx.corpora, ctx.folds, cfg, ctx.table, model_cfg,
                augmenter=mtl_augmenter,
            )
            source = None
        elif kind == "tl":
            source, target = arg
            if source == target:
                warnings.warn(f"degenerate transfer: source == target == {source!r}")
            source_revs = _augment_full(spec, ctx, seed, source, spec.tl_total_per_task)
            regime = TlRegime(source, source_revs, target)
            tl_augmenter = _make_augmenter(spec, ctx, seed, f"tl-{source}-{target}",
                                           spec.tl_total_per_task)
            result = cross_validate(
                regime, {target: ctx.corpora[target]}, {target: ctx.folds[target]},
                cfg, ctx.table, model_cfg, augmenter=tl_augmenter,
            )
        else:
            raise ValidationError(f"unknown job kind {kind!r}")

    with _Stage(f"evaluate[{kind}]"):
        intrinsic = []
        extrinsic = []
        for task in result.fold_f1:
            intrinsic.append(
                dict(regime=result.regime, task=task, source=source,
                     fold_f1=list(result.fold_f1[task]), mean_f1=result.mean_f1[task])
            )
            correlations = extrinsic_eval(
                ctx.corpora[task],
                {rid: label for rid, label in result.predictions[task].items()},
            )
            for cls, corr in correlations.items():
                extrinsic.append(
                    dict(task=task, label_source=result.regime, source=source, cls=cls,
                         result=None if corr is None else
                         dict(r=corr.r, p_value=corr.p_value, n=corr.n))
                )
    return dict(seed=seed, kind=kind, arg=arg, intrinsic=intrinsic, extrinsic=extrinsic)


def _jobs_for(spec: ExperimentSpec, ctx: _DataContext) -> list[tuple[int, str, object]]:
    jobs = []
    tl_pairs = spec.tl_pairs
    if tl_pairs is None:
        tl_pairs = tuple(
            (s, t) for s in ctx.tasks for t in ctx.tasks if s != t
        )
    for seed in spec.seeds:
        for regime in spec.regimes:
            if regime == "stl":
                jobs.extend((seed, "stl", task) for task in ctx.tasks)
            elif regime == "tl":
                jobs.extend((seed, "tl", pair) for pair in tl_pairs)
            else:
                jobs.append((seed, regime, None))
    return jobs


def _gold_rows(ctx: _DataContext) -> list[ExtrinsicRow]:
    rows = []
    for task in ctx.tasks:
        corpus = ctx.corpora[task]
        gold = {rev.revision_id: rev.label for rev in corpus.revisions}
        for cls, corr in extrinsic_eval(corpus, gold).items():
            rows.append(ExtrinsicRow(task=task, label_source="gold", cls=cls, result=corr))
    return rows


def _to_rows(raw: dict) -> tuple[list[IntrinsicRow], list[ExtrinsicRow]]:
    from .evaluation import CorrelationResult

    intrinsic = [
        IntrinsicRow(regime=r["regime"], task=r["task"], source=r["source"],
                     fold_f1=tuple(r["fold_f1"]), mean_f1=r["mean_f1"])
        for r in raw["intrinsic"]
    ]
    extrinsic = [
        ExtrinsicRow(task=r["task"], label_source=r["label_source"], source=r["source"],
                     cls=r["cls"],
                     result=None if r["result"] is None else CorrelationResult(**r["result"]))
        for r in raw["extrinsic"]
    ]
    return intrinsic, extrinsic


def run_experiment(spec: ExperimentSpec) -> Path:
    """Execute the full pipeline; returns the report directory."""
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = _load_context(spec)
    spec_blob = spec.to_dict()
    chash = config_hash(spec)
    jobs = _jobs_for(spec, ctx)
    workers = resolve_workers(spec.threads)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_execute_job, spec_blob, *job) for job in jobs]
            raw_results = [f.result() for f in futures]
    else:
        raw_results = [_execute_job(spec_blob, *job) for job in jobs]

    gold = _gold_rows(ctx)
    report_paths = []
    for seed in spec.seeds:
        intrinsic: list[IntrinsicRow] = []
        extrinsic: list[ExtrinsicRow] = list(gold)
        for raw in raw_results:
            if raw["seed"] != seed:
                continue
            rows_i, rows_e = _to_rows(raw)
            intrinsic.extend(rows_i)
            extrinsic.extend(rows_e)
        report = EvalReport(
            intrinsic=tuple(sorted(intrinsic, key=lambda r: (r.regime, r.task, r.source or ""))),
            extrinsic=tuple(sorted(extrinsic, key=lambda r: (r.task, r.cls, r.label_source, r.source or ""))),
            config_hash=chash,
            seed=seed,
            notes=REPORT_NOTES,
        )
        seed_dir = out_dir / f"seed_{seed}"
        emit_report(report, seed_dir)
        report_paths.append(seed_dir)

    _write_summary(out_dir, spec, raw_results)
    manifest = {
        "config_hash": chash,
        "package_version": PACKAGE_VERSION,
        "spec": spec_blob,
        "seeds": list(spec.seeds),
        "jobs": len(jobs),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return out_dir


def _write_summary(out_dir: Path, spec: ExperimentSpec, raw_results: list[dict]) -> None:
    """Mean F1 over seeds per (regime, corpus, source)."""
    import csv

    acc: dict[tuple[str, str, str], list[float]] = {}
    for raw in raw_results:
        for row in raw["intrinsic"]:
            key = (row["regime"], row["task"], row["source"] or "")
            acc.setdefault(key, []).append(row["mean_f1"])
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["regime", "corpus", "source", "n_seeds", "mean_f1"])
        for (regime, task, source), values in sorted(acc.items()):
            writer.writerow([regime, task, source, len(values), repr(float(np.mean(values)))])
