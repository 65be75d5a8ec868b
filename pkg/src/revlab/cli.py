"""Single entry point: ``revlab <subcommand>``.

Subcommands: synth, align, augment, train, evaluate, run, report.
Exit codes: 0 ok, 2 validation error, 3 training error, 4 evaluation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import align as align_mod
from . import synth as synth_mod
from .augment import AugmentTargets, SynonymLexicon, augment_to_target
from .corpus import (
    load_corpus,
    load_folds,
    load_revisions_jsonl,
    save_corpus,
    save_folds,
    save_revisions_jsonl,
)
from .errors import EvaluationError, TrainingError, ValidationError
from .evaluation import (
    EvalReport,
    ExtrinsicRow,
    IntrinsicRow,
    emit_report,
    extrinsic_eval,
    f1_unweighted,
)
from .experiment import ExperimentSpec, config_hash, run_experiment
from .neural import ModelConfig, load_checkpoint, load_embedding_table, save_checkpoint
from .regimes import (
    MtlModel,
    TrainConfig,
    model_from_checkpoint,
    model_to_checkpoint,
    predict,
    train_mtl,
    train_stl,
    train_tl,
    train_union,
)


def _parse_seeds(text: str) -> tuple[int, ...]:
    """'1..10' (inclusive range), '1,2,3', or a single integer."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_targets(text: str) -> AugmentTargets:
    """'D=2376,U=2744' -> AugmentTargets."""
    values = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        values[key.strip().upper()] = int(val)
    if set(values) != {"D", "U"}:
        raise ValidationError(f"targets must look like D=<n>,U=<n>, got {text!r}")
    return AugmentTargets(
        total=values["D"] + values["U"], desirable=values["D"], undesirable=values["U"]
    )


def _parse_data(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        task, _, path = pair.partition("=")
        if not path:
            raise ValidationError(f"--data expects task=path, got {pair!r}")
        out[task] = path
    return out


# --------------------------------------------------------------------------
# Subcommand handlers
# --------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    overrides = {}
    for name in ("vocab_size", "shared_signal_strength", "task_specific_strength",
                 "label_noise", "improvement_noise_sigma"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    cfg = synth_mod.PRESETS[args.preset](seed=args.seed, **overrides)
    paths = synth_mod.emit_suite(cfg, args.out, embedding_dim=args.dim)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


def _cmd_align(args) -> int:
    corpus = load_corpus(args.corpus)
    pairs = []
    for essay in corpus.essays:
        pairs.extend(
            align_mod.align_drafts(
                essay.draft_a, essay.draft_b,
                threshold=args.threshold, essay_id=essay.essay_id,
            )
        )
    save_corpus(corpus.with_alignments(pairs), args.out)
    print(f"aligned {len(corpus.essays)} essays -> {args.out} ({len(pairs)} pairs)")
    return 0


def _cmd_augment(args) -> int:
    revisions = load_revisions_jsonl(args.input)
    lexicon = SynonymLexicon.from_tsv(args.lexicon)
    targets = _parse_targets(args.targets)
    rng = np.random.default_rng(args.seed)
    out = augment_to_target(revisions, targets, lexicon, rate=args.rate, rng=rng)
    save_revisions_jsonl(out, args.out)
    print(f"augmented {len(revisions)} -> {len(out)} revisions ({args.out})")
    return 0


def _cmd_train(args) -> int:
    table = load_embedding_table(args.embeddings)
    model_cfg = ModelConfig(hidden_dim=args.hidden_dim, max_len=args.max_len)
    data_paths = _parse_data(args.data)
    datasets = {task: load_revisions_jsonl(path) for task, path in data_paths.items()}
    order = tuple(args.task_order.split(",")) if args.task_order else tuple(datasets)
    cfg = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size,
        epochs=args.epochs, seed=args.seed, task_order=order,
    )
    if args.regime == "stl":
        if len(datasets) != 1:
            raise ValidationError("stl expects exactly one --data task=path")
        ((task, revs),) = datasets.items()
        model = train_stl(task, revs, cfg, table, model_cfg)
    elif args.regime == "union":
        model = train_union(datasets, cfg, table, model_cfg)
    elif args.regime == "mtl":
        model = train_mtl(datasets, cfg, table, model_cfg)
    elif args.regime == "tl":
        if not args.source or not args.target:
            raise ValidationError("tl needs --source and --target task ids")
        if args.source not in datasets or args.target not in datasets:
            raise ValidationError("--source/--target must name tasks given via --data")
        model = train_tl(
            args.source, datasets[args.source], args.target, datasets[args.target],
            cfg, table, model_cfg,
        )
    else:  # pragma: no cover - argparse restricts choices
        raise ValidationError(f"unknown regime {args.regime!r}")
    arrays, metadata = model_to_checkpoint(model)
    metadata["train_config"] = {
        "learning_rate": cfg.learning_rate, "batch_size": cfg.batch_size,
        "epochs": cfg.epochs, "seed": cfg.seed, "task_order": list(cfg.task_order),
    }
    metadata["embeddings"] = str(args.embeddings)
    metadata["final_epoch_loss"] = model.epoch_losses[-1]
    save_checkpoint(args.out, arrays, metadata)
    print(f"trained {args.regime} model -> {args.out} "
          f"(final epoch loss {model.epoch_losses[-1]:.4f})")
    return 0


def _cmd_evaluate(args) -> int:
    arrays, metadata = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(arrays, metadata)
    table = load_embedding_table(args.embeddings)
    corpus = load_corpus(args.corpus)
    task = args.task or corpus.meta.corpus_id
    revisions = list(corpus.revisions)
    if not revisions:
        raise EvaluationError("corpus has no revisions to evaluate")
    scored = predict(model, revisions, table, task=task if isinstance(model, MtlModel) else None)
    pred_labels = {rev.revision_id: label for rev, (_, label) in zip(revisions, scored)}
    golds = [rev.label for rev in revisions]
    preds = [pred_labels[rev.revision_id] for rev in revisions]

    regime = metadata.get("kind", "model")
    if args.folds:
        folds = load_folds(args.folds)
        per_fold = []
        for f in range(folds.k):
            fold_revs = [r for r in revisions if folds.fold_of(r.essay_id) == f]
            if not fold_revs:
                continue
            per_fold.append(
                f1_unweighted([pred_labels[r.revision_id] for r in fold_revs],
                              [r.label for r in fold_revs])
            )
        fold_f1 = tuple(per_fold)
    else:
        fold_f1 = (f1_unweighted(preds, golds),)
    intrinsic = IntrinsicRow(
        regime=regime, task=task, fold_f1=fold_f1, mean_f1=float(np.mean(fold_f1))
    )

    extrinsic = []
    gold_map = {rev.revision_id: rev.label for rev in revisions}
    for cls, corr in extrinsic_eval(corpus, gold_map).items():
        extrinsic.append(ExtrinsicRow(task=task, label_source="gold", cls=cls, result=corr))
    for cls, corr in extrinsic_eval(corpus, pred_labels).items():
        extrinsic.append(ExtrinsicRow(task=task, label_source=regime, cls=cls, result=corr))

    report = EvalReport(
        intrinsic=(intrinsic,), extrinsic=tuple(extrinsic),
        config_hash="adhoc",
        seed=int(metadata.get("train_config", {}).get("seed", 0)),
    )
    paths = emit_report(report, args.out)
    print(f"mean F1 {intrinsic.mean_f1:.4f} over {len(fold_f1)} fold(s); report -> {paths['txt']}")
    return 0


_TOML_SECTIONS = {
    "experiment": ("regimes", "seeds", "out_dir", "threads"),
    "data": ("preset", "suite_seed", "corpora", "lexicon", "embeddings",
             "embedding_dim", "synth_overrides"),
    "train": ("learning_rate", "batch_size", "epochs", "task_order"),
    "model": ("hidden_dim", "max_len"),
    "eval": ("k_folds", "alignment_threshold"),
    "augment": ("augment_rate", "mtl_total_per_task", "tl_total_per_task", "tl_pairs"),
}


def _spec_kwargs_from_toml(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        try:
            blob = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: invalid TOML ({exc})") from None
    kwargs = {}
    for section, keys in _TOML_SECTIONS.items():
        body = blob.get(section, {})
        stray = sorted(set(body) - set(keys))
        if stray:
            raise ValidationError(f"{path}: unknown keys {stray} in [{section}]")
        kwargs.update(body)
    return kwargs


def _cmd_run(args) -> int:
    kwargs = _spec_kwargs_from_toml(args.config) if args.config else {}
    if args.preset:
        kwargs["preset"] = args.preset
    if args.regime:
        kwargs["regimes"] = (
            list(ExperimentSpec().regimes) if args.regime == "all"
            else [r.strip() for r in args.regime.split(",")]
        )
    if args.seeds:
        kwargs["seeds"] = list(_parse_seeds(args.seeds))
    if args.out:
        kwargs["out_dir"] = args.out
    if args.threads is not None:
        kwargs["threads"] = args.threads
    if args.k_folds is not None:
        kwargs["k_folds"] = args.k_folds
    if args.epochs is not None:
        kwargs["epochs"] = args.epochs
    if args.suite_seed is not None:
        kwargs["suite_seed"] = args.suite_seed
    spec = ExperimentSpec.from_dict(kwargs)
    out = run_experiment(spec)
    print(f"experiment {config_hash(spec)} complete; reports in {out}")
    return 0


def _cmd_report(args) -> int:
    report = EvalReport.from_json(Path(args.input).read_text(encoding="utf-8"))
    paths = emit_report(report, args.out)
    print(f"re-rendered report -> {paths['txt']}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus suite")
    p.add_argument("--preset", choices=sorted(synth_mod.PRESETS), default="paper-shaped")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=50, help="embedding dimension")
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--shared", dest="shared_signal_strength", type=float)
    p.add_argument("--task-specific", dest="task_specific_strength", type=float)
    p.add_argument("--noise", dest="label_noise", type=float)
    p.add_argument("--sigma", dest="improvement_noise_sigma", type=float)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("align", help="align drafts of a corpus file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("augment", help="augment revisions to target class counts")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--targets", required=True, help="D=<n>,U=<n>")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    p.add_argument("--regime", choices=("stl", "union", "mtl", "tl"), required=True)
    p.add_argument("--data", nargs="+", required=True, help="task=revisions.jsonl ...")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", help="tl source task id")
    p.add_argument("--target", help="tl target task id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--task-order", help="comma-separated, e.g. C,H1,H2,E")
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--max-len", type=int, default=64)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--folds", help="folds JSON (per-fold F1 instead of a single score)")
    p.add_argument("--task", help="task id for MTL heads (default: corpus id)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="run a full experiment from a spec")
    p.add_argument("--config", help="TOML experiment spec")
    p.add_argument("--preset", choices=sorted(synth_mod.PRESETS))
    p.add_argument("--regime", help="'all' or comma-separated subset of stl,union,mtl,tl")
    p.add_argument("--seeds", help="'1..10' or '1,2,3'")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.add_argument("--k-folds", dest="k_folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--suite-seed", dest="suite_seed", type=int)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="re-render report files from report.json")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
