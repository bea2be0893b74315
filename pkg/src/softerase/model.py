"""Single-head self-attention text classifier with a hand-written backward pass.

Architecture (no positions, no layer norm)::

    Q, K, V = X Wq, X Wk, X Wv
    A       = softmax_rows(Q K^T / sqrt(d) + bias_col)
    H       = A V
    pooled  = mean_rows(H)
    logits  = pooled Wo + b

Attributions differentiate the logit of a class, never its probability.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    DataError,
    NumericError,
    ParameterError,
    ShapeError,
    TrainingError,
)
from .numerics import RngStream, as_matrix, softmax

FORMAT_VERSION = 1
_PARAM_NAMES = ("embedding", "w_q", "w_k", "w_v", "w_o", "b_o")


@dataclass(frozen=True)
class TokenSequence:
    id: str
    tokens: tuple[int, ...]
    label: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "label", int(self.label))

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self, vocab_size: int, num_classes: int, max_len: int) -> None:
        if not 1 <= len(self.tokens) <= max_len:
            raise DataError(
                f"record {self.id!r}: length {len(self.tokens)} outside [1, {max_len}]"
            )
        bad = [t for t in self.tokens if not 0 <= t < vocab_size]
        if bad:
            raise DataError(
                f"record {self.id!r}: token index {bad[0]} outside vocabulary of size {vocab_size}"
            )
        if not 0 <= self.label < num_classes:
            raise DataError(
                f"record {self.id!r}: label {self.label} outside [0, {num_classes})"
            )


@dataclass(frozen=True)
class ModelParams:
    embedding: np.ndarray  # V x d
    w_q: np.ndarray  # d x d
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # d x C
    b_o: np.ndarray  # C
    max_len: int = 64

    def __post_init__(self):
        for name in _PARAM_NAMES:
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"parameter {name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        v, d = self.embedding.shape
        c = self.b_o.shape[0]
        expected = {
            "w_q": (d, d),
            "w_k": (d, d),
            "w_v": (d, d),
            "w_o": (d, c),
            "b_o": (c,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(
                    f"parameter {name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if self.max_len < 1:
            raise ParameterError("max_len must be positive")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def num_classes(self) -> int:
        return self.b_o.shape[0]

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in _PARAM_NAMES:
            h.update(getattr(self, name).tobytes())
        h.update(str(self.max_len).encode())
        return h.hexdigest()

    def replace(self, **arrays) -> "ModelParams":
        values = {name: getattr(self, name) for name in _PARAM_NAMES}
        values.update(arrays)
        return ModelParams(max_len=self.max_len, **values)


def init_params(
    vocab_size: int, dim: int, num_classes: int, max_len: int, rng: RngStream
) -> ModelParams:
    """Uniform [-0.1, 0.1] weights drawn from ``rng``; zero output bias."""
    arrays = {}
    shapes = {
        "embedding": (vocab_size, dim),
        "w_q": (dim, dim),
        "w_k": (dim, dim),
        "w_v": (dim, dim),
        "w_o": (dim, num_classes),
    }
    for i, (name, shape) in enumerate(shapes.items()):
        n = int(np.prod(shape))
        arrays[name] = (rng.split(i).uniform(n) * 0.2 - 0.1).reshape(shape)
    return ModelParams(b_o=np.zeros(num_classes), max_len=max_len, **arrays)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attention: np.ndarray
    hidden: np.ndarray
    pooled: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    params_fingerprint: str
    attn_bias: np.ndarray | None = field(default=None)

    @property
    def predicted(self) -> int:
        # np.argmax returns the lowest index on exact ties
        return int(np.argmax(self.probs))

    @property
    def length(self) -> int:
        return self.x.shape[0]


def embed(seq: TokenSequence, params: ModelParams) -> np.ndarray:
    seq.validate(params.vocab_size, params.num_classes, params.max_len)
    return params.embedding[list(seq.tokens)].copy()


def _check_input(x: np.ndarray, params: ModelParams) -> None:
    if x.ndim < 2 or x.shape[-1] != params.dim:
        raise ShapeError(f"input of shape {x.shape} does not match embedding dim {params.dim}")
    if not 1 <= x.shape[-2] <= params.max_len:
        raise ShapeError(f"sequence length {x.shape[-2]} outside [1, {params.max_len}]")


def _forward_arrays(x: np.ndarray, params: ModelParams, attn_bias=None):
    """Forward over arrays of shape (..., T, d); returns intermediates."""
    scale = 1.0 / math.sqrt(params.dim)
    q = x @ params.w_q
    k = x @ params.w_k
    v = x @ params.w_v
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if attn_bias is not None:
        scores = scores + attn_bias[..., None, :]
    attention = softmax(scores, axis=-1)
    hidden = attention @ v
    pooled = hidden.mean(axis=-2)
    logits = pooled @ params.w_o + params.b_o
    probs = softmax(logits, axis=-1)
    return q, k, v, attention, hidden, pooled, logits, probs


def forward(x, params: ModelParams, attn_bias=None) -> ForwardTrace:
    """Full forward pass on one T x d input.

    ``attn_bias`` (length T) is added to every row of the attention logits,
    column-wise; it is how soft attention masking enters the model.
    """
    x = as_matrix(x, name="input embeddings")
    _check_input(x, params)
    if attn_bias is not None:
        attn_bias = np.asarray(attn_bias, dtype=np.float64)
        if attn_bias.shape != (x.shape[0],):
            raise ShapeError("attention bias must have one entry per token")
    q, k, v, a, h, pooled, logits, probs = _forward_arrays(x, params, attn_bias)
    return ForwardTrace(
        x=x,
        q=q,
        k=k,
        v=v,
        attention=a,
        hidden=h,
        pooled=pooled,
        logits=logits,
        probs=probs,
        params_fingerprint=params.fingerprint,
        attn_bias=attn_bias,
    )


def predict_prob(x, params: ModelParams, cls: int) -> float:
    if not 0 <= cls < params.num_classes:
        raise ParameterError(f"class {cls} outside [0, {params.num_classes})")
    return float(forward(x, params).probs[cls])


def predict_probs_batch(xs: np.ndarray, params: ModelParams) -> np.ndarray:
    """Class probabilities for a stack of inputs of shape (B, T, d)."""
    xs = np.asarray(xs, dtype=np.float64)
    _check_input(xs, params)
    return _forward_arrays(xs, params)[-1]


def logit(x, params: ModelParams, cls: int) -> float:
    return float(forward(x, params).logits[cls])


def _backward(trace: ForwardTrace, params: ModelParams, dlogits: np.ndarray) -> dict:
    """Reverse-mode pass for an upstream gradient on the logits."""
    t, d = trace.x.shape
    scale = 1.0 / math.sqrt(d)
    a = trace.attention
    dpooled = params.w_o @ dlogits
    dh = np.broadcast_to(dpooled / t, (t, d))
    da = dh @ trace.v.T
    dv = a.T @ dh
    # row-wise softmax Jacobian
    ds = a * (da - np.sum(da * a, axis=1, keepdims=True))
    dq = ds @ trace.k * scale
    dk = ds.T @ trace.q * scale
    x = trace.x
    return {
        "x": dq @ params.w_q.T + dk @ params.w_k.T + dv @ params.w_v.T,
        "attention": da,
        "w_q": x.T @ dq,
        "w_k": x.T @ dk,
        "w_v": x.T @ dv,
        "w_o": np.outer(trace.pooled, dlogits),
        "b_o": dlogits.copy(),
    }


def backward_input_grad(
    trace: ForwardTrace, params: ModelParams, cls: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the class logit w.r.t. the input embeddings and the attention matrix."""
    if trace.params_fingerprint != params.fingerprint:
        raise ConsistencyError("trace was produced with different parameters")
    if not 0 <= cls < params.num_classes:
        raise ParameterError(f"class {cls} outside [0, {params.num_classes})")
    onehot = np.zeros(params.num_classes)
    onehot[cls] = 1.0
    grads = _backward(trace, params, onehot)
    return grads["x"], grads["attention"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.5
    batch_size: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be at least 1")
        if not self.learning_rate > 0:
            raise ParameterError("learning rate must be positive")
        if self.batch_size < 1:
            raise ParameterError("batch size must be at least 1")


@dataclass
class TrainResult:
    params: ModelParams
    loss_history: list[float]  # index 0 is the loss before the first update


def cross_entropy(corpus: Sequence[TokenSequence], params: ModelParams) -> float:
    total = 0.0
    for seq in corpus:
        p = forward(embed(seq, params), params).probs[seq.label]
        total -= math.log(max(p, 1e-300))
    return total / len(corpus)


def accuracy(corpus: Sequence[TokenSequence], params: ModelParams) -> float:
    hits = sum(forward(embed(s, params), params).predicted == s.label for s in corpus)
    return hits / len(corpus)


def train_model(
    corpus: Sequence[TokenSequence],
    config: TrainConfig,
    rng: RngStream,
    *,
    vocab_size: int,
    num_classes: int,
    dim: int = 16,
    max_len: int = 64,
) -> TrainResult:
    """Minibatch gradient descent on mean cross-entropy; fully deterministic in ``rng``."""
    if not corpus:
        raise ParameterError("training corpus is empty")
    for seq in corpus:
        seq.validate(vocab_size, num_classes, max_len)
    params = init_params(vocab_size, dim, num_classes, max_len, rng.split(0))
    arrays = {name: getattr(params, name).copy() for name in _PARAM_NAMES}
    history = [cross_entropy(corpus, params)]
    n = len(corpus)
    for epoch in range(1, config.epochs + 1):
        order = rng.split(1, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [corpus[i] for i in order[start : start + config.batch_size]]
            grads = {name: np.zeros_like(arr) for name, arr in arrays.items()}
            for seq in batch:
                try:
                    trace = forward(embed(seq, params), params)
                except NumericError as exc:
                    raise TrainingError(f"forward pass failed: {exc}", epoch) from exc
                dlogits = trace.probs.copy()
                dlogits[seq.label] -= 1.0
                g = _backward(trace, params, dlogits)
                for name in ("w_q", "w_k", "w_v", "w_o", "b_o"):
                    grads[name] += g[name]
                np.add.at(grads["embedding"], list(seq.tokens), g["x"])
            step = config.learning_rate / len(batch)
            for name in arrays:
                arrays[name] -= step * grads[name]
            if not all(np.all(np.isfinite(arr)) for arr in arrays.values()):
                raise TrainingError("parameters became non-finite", epoch)
            params = ModelParams(max_len=max_len, **arrays)
        loss = cross_entropy(corpus, params)
        if not math.isfinite(loss):
            raise TrainingError("training loss is non-finite", epoch)
        history.append(loss)
    return TrainResult(params=params, loss_history=history)


def train(
    corpus: Sequence[TokenSequence],
    config: TrainConfig,
    rng: RngStream,
    **kwargs,
) -> ModelParams:
    return train_model(corpus, config, rng, **kwargs).params


def save_params(params: ModelParams, path: str | Path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "vocab_size": params.vocab_size,
        "dim": params.dim,
        "num_classes": params.num_classes,
        "max_len": params.max_len,
        "arrays": {
            name: {
                "shape": list(getattr(params, name).shape),
                "data": getattr(params, name).ravel().tolist(),
            }
            for name in _PARAM_NAMES
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read parameter file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"parameter file {path} must hold a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"unsupported parameter file version {doc.get('format_version')!r}"
        )
    try:
        arrays = {
            name: np.array(doc["arrays"][name]["data"], dtype=np.float64).reshape(
                doc["arrays"][name]["shape"]
            )
            for name in _PARAM_NAMES
        }
        return ModelParams(max_len=int(doc["max_len"]), **arrays)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed parameter file {path}: {exc}") from exc
