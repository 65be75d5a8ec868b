"""From-scratch differentiable core: embedding consumption, BiLSTM, sigmoid
head, binary cross-entropy, backpropagation through time, and Adam.

Everything is plain float64 numpy.  The pretrained contextual encoder is
consumed as a static per-token embedding file; sequences are encoded as
``tokens(text_a) ++ [<sep>] ++ tokens(text_b)``, padded with zero rows that
are masked out of both the forward pass and the gradients.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit as _sigmoid

from .corpus import Revision, tokenize
from .errors import TrainingError, ValidationError

UNK_TOKEN = "<unk>"
SEP_TOKEN = "<sep>"
PROB_EPS = 1e-7  # probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before log


# --------------------------------------------------------------------------
# Embeddings and encoding
# --------------------------------------------------------------------------

def _reserved_vector(token: str, dim: int) -> np.ndarray:
    """Unit-norm pseudo-random vector, stable across processes and loads."""
    seed = zlib.crc32(f"revlab-reserved:{token}".encode("utf-8"))
    vec = np.random.default_rng(seed).standard_normal(dim)
    return vec / np.linalg.norm(vec)


@dataclass
class EmbeddingTable:
    dimension: int
    vectors: dict[str, np.ndarray]

    @classmethod
    def build(cls, dimension: int, vectors: Mapping[str, np.ndarray]) -> "EmbeddingTable":
        table = cls(dimension=dimension, vectors={k: np.asarray(v, dtype=float) for k, v in vectors.items()})
        for tok in (UNK_TOKEN, SEP_TOKEN):
            if tok not in table.vectors:
                table.vectors[tok] = _reserved_vector(tok, dimension)
        for tok, vec in table.vectors.items():
            if vec.shape != (dimension,):
                raise ValidationError(f"embedding for {tok!r} has shape {vec.shape}, want ({dimension},)")
        return table

    def lookup(self, token: str) -> np.ndarray:
        vec = self.vectors.get(token)
        if vec is None:
            vec = self.vectors[UNK_TOKEN]
        return vec

    @property
    def sep(self) -> np.ndarray:
        return self.vectors[SEP_TOKEN]

    def __len__(self) -> int:
        return len(self.vectors)


def load_embedding_table(path: str | Path) -> EmbeddingTable:
    """Read a ``token v1 v2 ... vd`` text file.

    ``<unk>`` and ``<sep>`` are synthesized (unit-norm, fixed seed) when the
    file does not provide them.
    """
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    dimension = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dimension is None:
                dimension = len(values)
                if dimension == 0:
                    raise ValidationError(f"{path.name}: line {lineno}: no vector values")
            if len(values) != dimension:
                raise ValidationError(
                    f"{path.name}: line {lineno}: expected {dimension} values, got {len(values)}"
                )
            if token in vectors:
                raise ValidationError(f"{path.name}: line {lineno}: duplicate token {token!r}")
            vectors[token] = np.array([float(v) for v in values])
    if dimension is None:
        raise ValidationError(f"{path.name}: empty embedding file")
    return EmbeddingTable.build(dimension, vectors)


def save_embedding_table(table: EmbeddingTable, path: str | Path) -> None:
    lines = []
    for token in sorted(table.vectors):
        vec = table.vectors[token]
        lines.append(token + " " + " ".join(repr(float(v)) for v in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class EncodedPair:
    matrix: np.ndarray  # (max_len, dimension); rows >= valid_length are zero
    valid_length: int


def encode_pair(rev: Revision, table: EmbeddingTable, max_len: int = 64) -> EncodedPair:
    """tokens(text_a) ++ [<sep>] ++ tokens(text_b), truncated then padded.

    Truncation drops the tail of text_b first, then (only if text_a alone
    overflows) the tail of text_a; the separator is always kept.
    """
    if max_len < 3:
        raise ValidationError(f"max_len must be >= 3, got {max_len}")
    tokens_a = tokenize(rev.text_a)
    tokens_b = tokenize(rev.text_b)
    if not tokens_a and not tokens_b:
        raise ValidationError(f"revision {rev.revision_id}: both texts empty")
    budget = max_len - 1
    a_keep = min(len(tokens_a), budget)
    b_keep = min(len(tokens_b), budget - a_keep)
    matrix = np.zeros((max_len, table.dimension))
    row = 0
    for token in tokens_a[:a_keep]:
        matrix[row] = table.lookup(token)
        row += 1
    matrix[row] = table.sep
    row += 1
    for token in tokens_b[:b_keep]:
        matrix[row] = table.lookup(token)
        row += 1
    return EncodedPair(matrix=matrix, valid_length=row)


def encode_batch(
    revisions: Sequence[Revision], table: EmbeddingTable, max_len: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Stack encodings into (N, max_len, d) with a (N,) valid-length vector."""
    n = len(revisions)
    X = np.zeros((n, max_len, table.dimension))
    lengths = np.zeros(n, dtype=int)
    for i, rev in enumerate(revisions):
        enc = encode_pair(rev, table, max_len)
        X[i] = enc.matrix
        lengths[i] = enc.valid_length
    return X, lengths


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

@dataclass
class ModelConfig:
    hidden_dim: int = 64
    max_len: int = 64


@dataclass
class LstmCellParams:
    """One direction's cell: gate weights stacked as rows [input; forget;
    output; candidate], each block (h, d+h); biases stacked the same way."""

    w: np.ndarray  # (4h, d + h)
    b: np.ndarray  # (4h,)

    @property
    def hidden_dim(self) -> int:
        return self.b.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.w.shape[1] - self.hidden_dim

    def _gate(self, k: int) -> np.ndarray:
        h = self.hidden_dim
        return self.w[k * h:(k + 1) * h]

    @property
    def w_input(self) -> np.ndarray:
        return self._gate(0)

    @property
    def w_forget(self) -> np.ndarray:
        return self._gate(1)

    @property
    def w_output(self) -> np.ndarray:
        return self._gate(2)

    @property
    def w_candidate(self) -> np.ndarray:
        return self._gate(3)


@dataclass
class BiLstmParams:
    input_dim: int
    hidden_dim: int
    fwd: LstmCellParams
    bwd: LstmCellParams

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "bilstm.fwd.w": self.fwd.w,
            "bilstm.fwd.b": self.fwd.b,
            "bilstm.bwd.w": self.bwd.w,
            "bilstm.bwd.b": self.bwd.b,
        }


@dataclass
class HeadParams:
    w: np.ndarray  # (2h,)
    b: np.ndarray  # scalar, shape ()

    def arrays(self, name: str = "head") -> dict[str, np.ndarray]:
        return {f"{name}.w": self.w, f"{name}.b": self.b}


def init_cell(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> LstmCellParams:
    scale = 1.0 / math.sqrt(input_dim + hidden_dim)
    w = rng.uniform(-scale, scale, size=(4 * hidden_dim, input_dim + hidden_dim))
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim:2 * hidden_dim] = 1.0  # open forget gates at init
    return LstmCellParams(w=w, b=b)


def init_bilstm(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> BiLstmParams:
    return BiLstmParams(
        input_dim=input_dim,
        hidden_dim=hidden_dim,
        fwd=init_cell(input_dim, hidden_dim, rng),
        bwd=init_cell(input_dim, hidden_dim, rng),
    )


def init_head(hidden_dim: int, rng: np.random.Generator) -> HeadParams:
    scale = 1.0 / math.sqrt(2 * hidden_dim)
    return HeadParams(w=rng.uniform(-scale, scale, size=2 * hidden_dim), b=np.zeros(()))


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------

@dataclass
class _StepTrace:
    x: np.ndarray        # (N, d)
    h_prev: np.ndarray   # (N, h)
    c_prev: np.ndarray   # (N, h)
    gate_i: np.ndarray
    gate_f: np.ndarray
    gate_o: np.ndarray
    gate_g: np.ndarray
    tanh_c: np.ndarray
    mask: np.ndarray     # (N, 1)


@dataclass
class BatchTrace:
    bilstm: BiLstmParams
    head: HeadParams
    fwd_steps: list
    bwd_steps: list
    features: np.ndarray  # (N, 2h) concatenated final states
    probs: np.ndarray     # (N,)


def _direction_forward(
    X: np.ndarray, masks: np.ndarray, cell: LstmCellParams, reverse: bool
) -> tuple[np.ndarray, list]:
    """Run one direction over all timesteps; pad steps carry state through.

    Returns the final hidden state, i.e. the state after the last processed
    step: position T-1 for the forward direction, position 0 for the reverse.
    """
    n, T, d = X.shape
    h = cell.hidden_dim
    w_x = cell.w[:, :d]
    w_h = cell.w[:, d:]
    h_state = np.zeros((n, h))
    c_state = np.zeros((n, h))
    steps = []
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        x_t = X[:, t]
        z = x_t @ w_x.T + h_state @ w_h.T + cell.b
        gate_i = _sigmoid(z[:, :h])
        gate_f = _sigmoid(z[:, h:2 * h])
        gate_o = _sigmoid(z[:, 2 * h:3 * h])
        gate_g = np.tanh(z[:, 3 * h:])
        c_new = gate_f * c_state + gate_i * gate_g
        tanh_c = np.tanh(c_new)
        h_new = gate_o * tanh_c
        m = masks[:, t]
        steps.append(_StepTrace(x_t, h_state, c_state, gate_i, gate_f, gate_o, gate_g, tanh_c, m))
        h_state = m * h_new + (1.0 - m) * h_state
        c_state = m * c_new + (1.0 - m) * c_state
    return h_state, steps


def forward_batch(
    X: np.ndarray,
    lengths: np.ndarray,
    bilstm: BiLstmParams,
    head: HeadParams,
    want_trace: bool = False,
) -> tuple[np.ndarray, Optional[BatchTrace]]:
    """Probabilities for a batch; optionally keep the trace for backward."""
    n, T, d = X.shape
    if d != bilstm.input_dim:
        raise ValidationError(f"input dim {d} != model dim {bilstm.input_dim}")
    if np.any(lengths < 1) or np.any(lengths > T):
        raise ValidationError("valid lengths must lie in [1, max_len]")
    masks = (np.arange(T)[None, :, None] < lengths[:, None, None]).astype(float)
    h_fwd, fwd_steps = _direction_forward(X, masks, bilstm.fwd, reverse=False)
    h_bwd, bwd_steps = _direction_forward(X, masks, bilstm.bwd, reverse=True)
    features = np.concatenate([h_fwd, h_bwd], axis=1)
    probs = _sigmoid(features @ head.w + head.b)
    if not want_trace:
        return probs, None
    return probs, BatchTrace(bilstm, head, fwd_steps, bwd_steps, features, probs)


def bilstm_forward(x: EncodedPair, params: BiLstmParams) -> np.ndarray:
    """Concatenated (forward final, backward final) hidden states, length 2h."""
    X = x.matrix[None, :, :]
    lengths = np.array([x.valid_length])
    masks = (np.arange(X.shape[1])[None, :, None] < lengths[:, None, None]).astype(float)
    h_fwd, _ = _direction_forward(X, masks, params.fwd, reverse=False)
    h_bwd, _ = _direction_forward(X, masks, params.bwd, reverse=True)
    return np.concatenate([h_fwd[0], h_bwd[0]])


def head_forward(features: np.ndarray, params: HeadParams) -> float:
    """sigmoid(w . v + b)."""
    return float(_sigmoid(features @ params.w + params.b))


def bce_loss(prob: float, label: float) -> float:
    """Binary cross-entropy with the probability clamped away from {0, 1}."""
    p = min(max(prob, PROB_EPS), 1.0 - PROB_EPS)
    return -(label * math.log(p) + (1.0 - label) * math.log(1.0 - p))


def bce_mean(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))))


# --------------------------------------------------------------------------
# Backward
# --------------------------------------------------------------------------

def _direction_backward(
    steps: list, d_final: np.ndarray, cell: LstmCellParams
) -> tuple[np.ndarray, np.ndarray]:
    """BPTT through one direction; returns (dW, db).

    Walks the recorded steps in reverse processing order.  A masked (pad)
    step forwarded the previous state unchanged, so its gradient is routed
    straight through, never into the gate math.
    """
    d = steps[0].x.shape[1]
    h = cell.hidden_dim
    w_h = cell.w[:, d:]
    dW = np.zeros_like(cell.w)
    db = np.zeros_like(cell.b)
    dh = d_final.copy()
    dc = np.zeros_like(d_final)
    for step in reversed(steps):
        m = step.mask
        dh_new = m * dh
        dh_skip = (1.0 - m) * dh
        dc_skip = (1.0 - m) * dc
        d_out = dh_new * step.tanh_c
        dc_new = m * dc + dh_new * step.gate_o * (1.0 - step.tanh_c ** 2)
        d_forget = dc_new * step.c_prev
        d_input = dc_new * step.gate_g
        d_cand = dc_new * step.gate_i
        dc_prev = dc_new * step.gate_f
        dz = np.concatenate(
            [
                d_input * step.gate_i * (1.0 - step.gate_i),
                d_forget * step.gate_f * (1.0 - step.gate_f),
                d_out * step.gate_o * (1.0 - step.gate_o),
                d_cand * (1.0 - step.gate_g ** 2),
            ],
            axis=1,
        )
        dW[:, :d] += dz.T @ step.x
        dW[:, d:] += dz.T @ step.h_prev
        db += dz.sum(axis=0)
        dh = dh_skip + dz @ w_h
        dc = dc_skip + dc_prev
    return dW, db


def backward(trace: BatchTrace, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the mean batch BCE w.r.t. every parameter.

    Keys match `BiLstmParams.arrays()` / `HeadParams.arrays()`.
    """
    n = labels.shape[0]
    h = trace.bilstm.hidden_dim
    p = trace.probs
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    p_c = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    dloss_dp = (-labels / p_c + (1.0 - labels) / (1.0 - p_c)) / n
    dz = dloss_dp * inside * p * (1.0 - p)  # equals (p - labels)/n when unclamped
    grad_head_w = dz @ trace.features
    grad_head_b = np.asarray(dz.sum())
    d_features = np.outer(dz, trace.head.w)
    dW_f, db_f = _direction_backward(trace.fwd_steps, d_features[:, :h], trace.bilstm.fwd)
    dW_b, db_b = _direction_backward(trace.bwd_steps, d_features[:, h:], trace.bilstm.bwd)
    return {
        "bilstm.fwd.w": dW_f,
        "bilstm.fwd.b": db_f,
        "bilstm.bwd.w": dW_b,
        "bilstm.bwd.b": db_b,
        "head.w": grad_head_w,
        "head.b": grad_head_b,
    }


def loss_and_grads(
    X: np.ndarray,
    lengths: np.ndarray,
    labels: np.ndarray,
    bilstm: BiLstmParams,
    head: HeadParams,
) -> tuple[float, dict[str, np.ndarray]]:
    probs, trace = forward_batch(X, lengths, bilstm, head, want_trace=True)
    return bce_mean(probs, labels), backward(trace, labels)


# --------------------------------------------------------------------------
# Optimizer (adaptive moment estimation)
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: Mapping[str, np.ndarray], learning_rate: float = 1e-3) -> AdamState:
    state = AdamState(learning_rate=learning_rate)
    for name, arr in params.items():
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> AdamState:
    """One in-place adaptive-moment update over all parameter arrays."""
    if state.learning_rate <= 0:
        raise ValidationError(f"learning rate must be positive, got {state.learning_rate}")
    for name in params:
        grad = grads[name]
        if not np.all(np.isfinite(grad)):
            raise TrainingError(
                f"non-finite gradient for {name!r} at step {state.step + 1} "
                f"(|g|max={np.max(np.abs(grad[np.isfinite(grad)]), initial=0.0):.3e})"
            )
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], metadata: dict) -> None:
    """Versioned JSON blob of all parameter arrays plus run metadata."""
    blob = {
        "format_version": 1,
        "metadata": metadata,
        "arrays": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr).ravel().tolist()}
            for name, arr in arrays.items()
        },
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    if blob.get("format_version") != 1:
        raise ValidationError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    arrays = {
        name: np.array(spec["data"], dtype=float).reshape(spec["shape"])
        for name, spec in blob["arrays"].items()
    }
    return arrays, blob["metadata"]


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def gradient_check(
    bilstm: BiLstmParams,
    head: HeadParams,
    X: np.ndarray,
    lengths: np.ndarray,
    labels: np.ndarray,
    delta: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |a - n| / (|a| + |n|); entries where both sides are
    below 1e-7 are treated as matching (finite-difference noise floor).
    """
    params = dict(bilstm.arrays())
    params.update(head.arrays())

    def loss() -> float:
        probs, _ = forward_batch(X, lengths, bilstm, head)
        return bce_mean(probs, labels)

    _, analytic = loss_and_grads(X, lengths, labels, bilstm, head)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        ana = analytic[name].reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + delta
            up = loss()
            flat[idx] = keep - delta
            down = loss()
            flat[idx] = keep
            numeric = (up - down) / (2.0 * delta)
            a = float(ana[idx])
            if abs(a) < 1e-7 and abs(numeric) < 1e-7:
                continue
            worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric)))
    return worst
