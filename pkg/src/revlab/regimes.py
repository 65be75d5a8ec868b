"""The four training regimes over the BiLSTM classifier.

STL trains one self-contained model per task.  Union trains a single
STL-architecture model on all task data, consumed batch-by-batch on the
round-robin schedule.  MTL shares one BiLSTM across tasks with a dense +
sigmoid head per task, cycling one batch per task in a fixed order.  TL
trains on a source task, then fine-tunes every weight on the target task
with fresh optimizer state.

All regimes are deterministic given (seed, data order): within-task batch
order is reshuffled every epoch from a stream keyed by (seed, epoch, task),
so degenerate setups (Union or MTL over a single task) reproduce STL
checkpoints bit for bit.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from math import ceil
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .corpus import Label, Revision
from .errors import ValidationError
from .neural import (
    AdamState,
    BiLstmParams,
    EmbeddingTable,
    HeadParams,
    ModelConfig,
    adam_init,
    backward,
    bce_mean,
    encode_batch,
    forward_batch,
    init_bilstm,
    init_head,
    optimizer_step,
)

# hook(task_id, batch_index, model) called after each optimizer update
BatchHook = Callable[[str, int, object], None]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    task_order: tuple[str, ...] = ("C", "H1", "H2", "E")

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.task_order:
            raise ValidationError("task_order must be non-empty")
        if len(set(self.task_order)) != len(self.task_order):
            raise ValidationError(f"task_order has duplicates: {self.task_order}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class StlModel:
    task: str
    bilstm: BiLstmParams
    head: HeadParams
    model_cfg: ModelConfig
    epoch_losses: tuple[float, ...] = ()

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.bilstm.arrays()
        out.update(self.head.arrays("head"))
        return out


@dataclass
class MtlModel:
    tasks: tuple[str, ...]
    bilstm: BiLstmParams
    heads: dict[str, HeadParams]
    model_cfg: ModelConfig
    epoch_losses: tuple[float, ...] = ()

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.bilstm.arrays()
        for task in self.tasks:
            out.update(self.heads[task].arrays(f"head.{task}"))
        return out


def round_robin_schedule(
    batches_per_task: int, order: Sequence[str]
) -> list[tuple[str, int]]:
    """One batch per task per cycle: (order[0], 0), (order[1], 0), ...

    Within a task, batch indices run 0, 1, 2, ... across cycles; total length
    is len(order) * batches_per_task.
    """
    if not order:
        raise ValidationError("task order must be non-empty")
    if batches_per_task < 1:
        raise ValidationError(f"batches_per_task must be >= 1, got {batches_per_task}")
    return [(task, i) for i in range(batches_per_task) for task in order]


@dataclass
class _Encoded:
    task: str
    revisions: tuple[Revision, ...]
    X: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray  # 1.0 = Desirable


def _label_value(label: Label) -> float:
    return 1.0 if label == Label.DESIRABLE else 0.0


def _prepare(
    task: str, revisions: Sequence[Revision], table: EmbeddingTable, model_cfg: ModelConfig
) -> _Encoded:
    if not revisions:
        raise ValidationError(f"no training examples for task {task!r}")
    labels = np.array([_label_value(r.label) for r in revisions])
    if len(set(labels.tolist())) < 2:
        raise ValidationError(f"single-class data for task {task!r}")
    X, lengths = encode_batch(revisions, table, model_cfg.max_len)
    return _Encoded(task=task, revisions=tuple(revisions), X=X, lengths=lengths, labels=labels)


def _shuffled_order(seed: int, epoch: int, task: str, n: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch, zlib.crc32(task.encode("utf-8"))])
    return rng.permutation(n)


def _batch_indices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[k * batch_size:(k + 1) * batch_size] for k in range(ceil(len(order) / batch_size))]


def _init_model(input_dim: int, hidden_dim: int, seed: int, n_heads: int):
    """BiLSTM then heads, drawn from one stream so head count is the only
    difference between regimes sharing a seed."""
    rng = np.random.default_rng(seed)
    bilstm = init_bilstm(input_dim, hidden_dim, rng)
    heads = [init_head(hidden_dim, rng) for _ in range(n_heads)]
    return bilstm, heads


def _fit_batch(
    bilstm: BiLstmParams,
    head: HeadParams,
    ds: _Encoded,
    idx: np.ndarray,
    opt_shared: AdamState,
    opt_head: AdamState,
) -> float:
    probs, trace = forward_batch(ds.X[idx], ds.lengths[idx], bilstm, head, want_trace=True)
    labels = ds.labels[idx]
    grads = backward(trace, labels)
    optimizer_step(bilstm.arrays(), grads, opt_shared)
    optimizer_step(head.arrays("head"), {k: grads[k] for k in ("head.w", "head.b")}, opt_head)
    return bce_mean(probs, labels)


def train_stl(
    task: str,
    revisions: Sequence[Revision],
    cfg: TrainConfig,
    table: EmbeddingTable,
    model_cfg: Optional[ModelConfig] = None,
    hook: Optional[BatchHook] = None,
) -> StlModel:
    """A self-contained BiLSTM + dense/sigmoid classifier for one task."""
    model_cfg = model_cfg or ModelConfig()
    ds = _prepare(task, revisions, table, model_cfg)
    bilstm, (head,) = _init_model(table.dimension, model_cfg.hidden_dim, cfg.seed, 1)
    opt_shared = adam_init(bilstm.arrays(), cfg.learning_rate)
    opt_head = adam_init(head.arrays("head"), cfg.learning_rate)
    model = StlModel(task=task, bilstm=bilstm, head=head, model_cfg=model_cfg)
    losses = []
    for epoch in range(cfg.epochs):
        order = _shuffled_order(cfg.seed, epoch, task, len(ds.revisions))
        epoch_losses = []
        for bi, idx in enumerate(_batch_indices(order, cfg.batch_size)):
            epoch_losses.append(_fit_batch(bilstm, head, ds, idx, opt_shared, opt_head))
            if hook is not None:
                hook(task, bi, model)
        losses.append(float(np.mean(epoch_losses)))
    model.epoch_losses = tuple(losses)
    return model


def _resolve_order(task_datasets: Mapping[str, Sequence[Revision]], cfg: TrainConfig, require_all: bool) -> tuple[str, ...]:
    present = set(task_datasets)
    known = set(cfg.task_order)
    stray = sorted(present - known)
    if stray:
        raise ValidationError(f"tasks {stray} not in task_order {list(cfg.task_order)}")
    if require_all:
        missing = sorted(known - present)
        if missing:
            raise ValidationError(f"missing task data for {missing}")
    return tuple(t for t in cfg.task_order if t in present)


def _check_equal_sizes(datasets: Mapping[str, _Encoded]) -> int:
    sizes = {task: len(ds.revisions) for task, ds in datasets.items()}
    if len(set(sizes.values())) != 1:
        raise ValidationError(
            f"unequal task sizes {sizes}; augment each task to a fixed size first"
        )
    return next(iter(sizes.values()))


def train_union(
    task_datasets: Mapping[str, Sequence[Revision]],
    cfg: TrainConfig,
    table: EmbeddingTable,
    model_cfg: Optional[ModelConfig] = None,
    hook: Optional[BatchHook] = None,
) -> StlModel:
    """One STL-architecture model over the union of all task data.

    Batches are consumed task by task on the MTL round-robin schedule, but
    every update flows through the single shared parameter set.
    """
    model_cfg = model_cfg or ModelConfig()
    if not task_datasets:
        raise ValidationError("union training needs at least one task")
    order = _resolve_order(task_datasets, cfg, require_all=False)
    encoded = {t: _prepare(t, task_datasets[t], table, model_cfg) for t in order}
    if len(order) > 1:
        _check_equal_sizes(encoded)
    n_per_task = len(encoded[order[0]].revisions)
    union_labels = np.concatenate([encoded[t].labels for t in order])
    if len(set(union_labels.tolist())) < 2:
        raise ValidationError("single-class data for the union of tasks")

    bilstm, (head,) = _init_model(table.dimension, model_cfg.hidden_dim, cfg.seed, 1)
    opt_shared = adam_init(bilstm.arrays(), cfg.learning_rate)
    opt_head = adam_init(head.arrays("head"), cfg.learning_rate)
    task_name = order[0] if len(order) == 1 else "+".join(order)
    model = StlModel(task=task_name, bilstm=bilstm, head=head, model_cfg=model_cfg)
    batches_per_task = ceil(n_per_task / cfg.batch_size)
    losses = []
    for epoch in range(cfg.epochs):
        orders = {
            t: _batch_indices(
                _shuffled_order(cfg.seed, epoch, t, len(encoded[t].revisions)), cfg.batch_size
            )
            for t in order
        }
        epoch_losses = []
        for task, bi in round_robin_schedule(batches_per_task, order):
            epoch_losses.append(
                _fit_batch(bilstm, head, encoded[task], orders[task][bi], opt_shared, opt_head)
            )
            if hook is not None:
                hook(task, bi, model)
        losses.append(float(np.mean(epoch_losses)))
    model.epoch_losses = tuple(losses)
    return model


def train_mtl(
    task_datasets: Mapping[str, Sequence[Revision]],
    cfg: TrainConfig,
    table: EmbeddingTable,
    model_cfg: Optional[ModelConfig] = None,
    hook: Optional[BatchHook] = None,
) -> MtlModel:
    """Shared BiLSTM with one dense/sigmoid head per task, trained round-robin.

    A batch for task t updates the shared BiLSTM and head(t) only.  Per-task
    dataset sizes must already be equal (augment to a fixed size first).
    """
    model_cfg = model_cfg or ModelConfig()
    order = _resolve_order(task_datasets, cfg, require_all=True)
    encoded = {t: _prepare(t, task_datasets[t], table, model_cfg) for t in order}
    n_per_task = _check_equal_sizes(encoded)

    bilstm, head_list = _init_model(table.dimension, model_cfg.hidden_dim, cfg.seed, len(order))
    heads = dict(zip(order, head_list))
    opt_shared = adam_init(bilstm.arrays(), cfg.learning_rate)
    opt_heads = {t: adam_init(heads[t].arrays("head"), cfg.learning_rate) for t in order}
    model = MtlModel(tasks=order, bilstm=bilstm, heads=heads, model_cfg=model_cfg)
    batches_per_task = ceil(n_per_task / cfg.batch_size)
    losses = []
    for epoch in range(cfg.epochs):
        orders = {
            t: _batch_indices(_shuffled_order(cfg.seed, epoch, t, n_per_task), cfg.batch_size)
            for t in order
        }
        epoch_losses = []
        for task, bi in round_robin_schedule(batches_per_task, order):
            epoch_losses.append(
                _fit_batch(bilstm, heads[task], encoded[task], orders[task][bi], opt_shared, opt_heads[task])
            )
            if hook is not None:
                hook(task, bi, model)
        losses.append(float(np.mean(epoch_losses)))
    model.epoch_losses = tuple(losses)
    return model


def train_tl(
    source_task: str,
    source_revisions: Sequence[Revision],
    target_task: str,
    target_revisions: Sequence[Revision],
    cfg: TrainConfig,
    table: EmbeddingTable,
    model_cfg: Optional[ModelConfig] = None,
) -> StlModel:
    """Train on the source task, then fine-tune everything on the target.

    Phase 2 starts from the phase-1 weights with fresh optimizer state (stale
    moments would encode source-data scale).  ``epoch_losses`` concatenates
    both phases (cfg.epochs entries each).
    """
    model_cfg = model_cfg or ModelConfig()
    source_model = train_stl(source_task, source_revisions, cfg, table, model_cfg)
    ds = _prepare(target_task, target_revisions, table, model_cfg)
    bilstm, head = source_model.bilstm, source_model.head
    opt_shared = adam_init(bilstm.arrays(), cfg.learning_rate)
    opt_head = adam_init(head.arrays("head"), cfg.learning_rate)
    model = StlModel(task=target_task, bilstm=bilstm, head=head, model_cfg=model_cfg)
    losses = list(source_model.epoch_losses)
    for epoch in range(cfg.epochs):
        order = _shuffled_order(cfg.seed, epoch, target_task, len(ds.revisions))
        epoch_losses = []
        for idx in _batch_indices(order, cfg.batch_size):
            epoch_losses.append(_fit_batch(bilstm, head, ds, idx, opt_shared, opt_head))
        losses.append(float(np.mean(epoch_losses)))
    model.epoch_losses = tuple(losses)
    return model


def predict(
    model: StlModel | MtlModel,
    revisions: Sequence[Revision],
    table: EmbeddingTable,
    task: Optional[str] = None,
    chunk_size: int = 256,
) -> list[tuple[float, Label]]:
    """(probability, label) per revision; Desirable iff probability > 0.5.

    An exact 0.5 predicts Undesirable.  MTL models require the task id to
    pick the head.
    """
    if isinstance(model, MtlModel):
        if task is None or task not in model.heads:
            raise ValidationError(f"unknown task {task!r} for MTL prediction (have {list(model.tasks)})")
        head = model.heads[task]
    else:
        head = model.head
    out = []
    for start in range(0, len(revisions), chunk_size):
        chunk = revisions[start:start + chunk_size]
        X, lengths = encode_batch(chunk, table, model.model_cfg.max_len)
        probs, _ = forward_batch(X, lengths, model.bilstm, head)
        for p in probs:
            label = Label.DESIRABLE if p > 0.5 else Label.UNDESIRABLE
            out.append((float(p), label))
    return out


def model_to_checkpoint(model: StlModel | MtlModel) -> tuple[dict[str, np.ndarray], dict]:
    """(arrays, metadata) pair for `neural.save_checkpoint`."""
    metadata = {
        "hidden_dim": model.model_cfg.hidden_dim,
        "max_len": model.model_cfg.max_len,
        "input_dim": model.bilstm.input_dim,
    }
    if isinstance(model, MtlModel):
        metadata["kind"] = "mtl"
        metadata["tasks"] = list(model.tasks)
    else:
        metadata["kind"] = "stl"
        metadata["task"] = model.task
    return model.arrays(), metadata


def model_from_checkpoint(arrays: Mapping[str, np.ndarray], metadata: dict) -> StlModel | MtlModel:
    from .neural import LstmCellParams

    model_cfg = ModelConfig(hidden_dim=int(metadata["hidden_dim"]), max_len=int(metadata["max_len"]))
    bilstm = BiLstmParams(
        input_dim=int(metadata["input_dim"]),
        hidden_dim=model_cfg.hidden_dim,
        fwd=LstmCellParams(w=arrays["bilstm.fwd.w"], b=arrays["bilstm.fwd.b"]),
        bwd=LstmCellParams(w=arrays["bilstm.bwd.w"], b=arrays["bilstm.bwd.b"]),
    )
    if metadata.get("kind") == "mtl":
        tasks = tuple(metadata["tasks"])
        heads = {
            t: HeadParams(w=arrays[f"head.{t}.w"], b=arrays[f"head.{t}.b"]) for t in tasks
        }
        return MtlModel(tasks=tasks, bilstm=bilstm, heads=heads, model_cfg=model_cfg)
    if metadata.get("kind") != "stl":
        raise ValidationError(f"unknown checkpoint kind {metadata.get('kind')!r}")
    head = HeadParams(w=arrays["head.w"], b=arrays["head.b"])
    return StlModel(task=str(metadata["task"]), bilstm=bilstm, head=head, model_cfg=model_cfg)


# --------------------------------------------------------------------------
# Regime adapters consumed by the cross-validation harness
# --------------------------------------------------------------------------

class StlRegime:
    name = "stl"

    def __init__(self, task: str):
        self.task = task

    def eval_tasks(self) -> tuple[str, ...]:
        return (self.task,)

    def fit(self, train_revs, cfg, table, model_cfg):
        return train_stl(self.task, train_revs[self.task], cfg, table, model_cfg)

    def predict(self, model, revisions, task, table):
        return predict(model, revisions, table)


class UnionRegime:
    name = "union"

    def __init__(self, tasks: Sequence[str]):
        self.tasks = tuple(tasks)

    def eval_tasks(self) -> tuple[str, ...]:
        return self.tasks

    def fit(self, train_revs, cfg, table, model_cfg):
        return train_union({t: train_revs[t] for t in self.tasks}, cfg, table, model_cfg)

    def predict(self, model, revisions, task, table):
        return predict(model, revisions, table)


class MtlRegime:
    name = "mtl"

    def __init__(self, tasks: Sequence[str]):
        self.tasks = tuple(tasks)

    def eval_tasks(self) -> tuple[str, ...]:
        return self.tasks

    def fit(self, train_revs, cfg, table, model_cfg):
        return train_mtl({t: train_revs[t] for t in self.tasks}, cfg, table, model_cfg)

    def predict(self, model, revisions, task, table):
        return predict(model, revisions, table, task=task)


class TlRegime:
    """Source data is fixed at construction (the source corpus is never
    evaluated, so the whole of it is available for the pretraining phase)."""

    name = "tl"

    def __init__(self, source_task: str, source_revisions: Sequence[Revision], target_task: str):
        self.source_task = source_task
        self.source_revisions = tuple(source_revisions)
        self.target_task = target_task

    def eval_tasks(self) -> tuple[str, ...]:
        return (self.target_task,)

    def fit(self, train_revs, cfg, table, model_cfg):
        return train_tl(
            self.source_task, self.source_revisions,
            self.target_task, train_revs[self.target_task],
            cfg, table, model_cfg,
        )

    def predict(self, model, revisions, task, table):
        return predict(model, revisions, table)
