"""Softmax linear classifier trained with a mixed CE / generalized-CE objective.

Rows of a training set carry one of three flags. Labeled rows (source or
labeled target) contribute cross entropy ``-log p_y``; pseudo-labeled target
rows contribute the generalized cross entropy ``(1 - p_y**q) / q``, which
scales each row's gradient by ``p_y**q`` and so damps rows the model already
disagrees with.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError, TrainingError, TruncationError

SOURCE_LABELED = 0
TARGET_LABELED = 1
TARGET_PSEUDO = 2
_FLAGS = (SOURCE_LABELED, TARGET_LABELED, TARGET_PSEUDO)

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"FSDC"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHII")


@dataclass
class TrainConfig:
    gce_q: float = 0.7
    learning_rate: float = 0.5
    epochs: int = 20
    batch_size: int = 64
    weight_decay: float = 1e-4
    target_oversample: int = 10
    seed: int = 0
    # "ce" trains pseudo-labeled rows with plain cross entropy (ablation)
    pseudo_loss: str = "gce"

    def __post_init__(self):
        if self.pseudo_loss not in ("gce", "ce"):
            raise ConfigError(f"pseudo_loss must be 'gce' or 'ce', got {self.pseudo_loss!r}")
        if not 0.0 < self.gce_q <= 1.0:
            raise ConfigError(f"gce_q must lie in (0, 1], got {self.gce_q}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.target_oversample < 1:
            raise ConfigError(f"target_oversample must be positive, got {self.target_oversample}")


@dataclass
class LinearClassifier:
    weights: np.ndarray  # (class_count, input_dim)
    bias: np.ndarray  # (class_count,)

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, class_count: int, input_dim: int) -> "LinearClassifier":
        return cls(np.zeros((class_count, input_dim)), np.zeros(class_count))

    @classmethod
    def random(cls, class_count: int, input_dim: int, rng: np.random.Generator) -> "LinearClassifier":
        a = 1.0 / np.sqrt(input_dim)
        return cls(rng.uniform(-a, a, size=(class_count, input_dim)), np.zeros(class_count))

    def copy(self) -> "LinearClassifier":
        return LinearClassifier(self.weights.copy(), self.bias.copy())

    def __eq__(self, other):
        if not isinstance(other, LinearClassifier):
            return NotImplemented
        return (
            self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
        )


@dataclass(frozen=True)
class TrainingSet:
    """Feature rows with labels and per-row loss flags."""

    features: np.ndarray
    labels: np.ndarray
    flags: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        f = np.asarray(self.flags, dtype=np.int8)
        if x.ndim != 2 or y.shape != (x.shape[0],) or f.shape != (x.shape[0],):
            raise DimensionError(
                f"features {x.shape}, labels {y.shape} and flags {f.shape} disagree"
            )
        if not np.isin(f, _FLAGS).all():
            raise ContractError("flags must be SOURCE_LABELED, TARGET_LABELED or TARGET_PSEUDO")
        if (y < 0).any():
            raise ContractError("every training row needs a label (pseudo or given)")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "flags", f)

    def __len__(self):
        return self.features.shape[0]

    @classmethod
    def concat(cls, parts: list["TrainingSet"]) -> "TrainingSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ContractError("training data is empty")
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.flags for p in parts]),
        )

    @classmethod
    def block(cls, features, labels, flag: int) -> "TrainingSet":
        labels = np.asarray(labels)
        return cls(features, labels, np.full(labels.shape[0], flag, dtype=np.int8))


# ---------------------------------------------------------------------------
# losses


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("softmax input contains non-finite values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_label(probs: np.ndarray, label: int) -> None:
    if not 0 <= label < probs.shape[-1]:
        raise ContractError(f"label {label} outside [0, {probs.shape[-1]})")


def ce_loss(probs, label: int) -> float:
    p = np.asarray(probs, dtype=np.float64)
    _check_label(p, label)
    return float(-np.log(max(p[label], PROB_FLOOR)))


def gce_loss(probs, label: int, q: float) -> float:
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"q must lie in (0, 1], got {q}")
    p = np.asarray(probs, dtype=np.float64)
    _check_label(p, label)
    return float((1.0 - max(p[label], PROB_FLOOR) ** q) / q)


def mixed_loss_grad(classifier: LinearClassifier, batch: TrainingSet, config: TrainConfig):
    """Mean mixed loss over ``batch`` plus ``weight_decay/2 * ||W||^2``.

    Returns ``(loss, grad_weights, grad_bias)``. Losses are evaluated through
    log-softmax, so they stay finite without the probability floor and the
    gradients are exact.
    """
    n = len(batch)
    if n == 0:
        raise ContractError("empty batch")
    if batch.features.shape[1] != classifier.input_dim:
        raise DimensionError(
            f"batch dim {batch.features.shape[1]} != classifier input_dim {classifier.input_dim}"
        )
    return _loss_grad(
        classifier, batch.features, batch.labels, _gce_rows(batch.flags, config),
        config.gce_q, config.weight_decay,
    )


def _gce_rows(flags: np.ndarray, config: TrainConfig) -> np.ndarray:
    if config.pseudo_loss == "ce":
        return np.zeros(flags.shape, dtype=bool)
    return flags == TARGET_PSEUDO


def _loss_grad(clf, x, y, pseudo, q, wd):
    n = x.shape[0]
    logp = log_softmax(x @ clf.weights.T + clf.bias, axis=1)
    rows = np.arange(n)
    logp_y = logp[rows, y]
    p_y_q = np.exp(q * logp_y)
    per_row = np.where(pseudo, (1.0 - p_y_q) / q, -logp_y)
    # d/dz of CE is (p - e_y); of GCE it is p_y**q * (p - e_y)
    scale = np.where(pseudo, p_y_q, 1.0)
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz *= scale[:, None] / n

    loss = per_row.mean() + 0.5 * wd * np.sum(clf.weights**2)
    grad_w = dz.T @ x + wd * clf.weights
    grad_b = dz.sum(axis=0)
    return float(loss), grad_w, grad_b


# ---------------------------------------------------------------------------
# training


def stream_rng(seed: int, key: str) -> np.random.Generator:
    """Counter-based generator private to ``key`` under ``seed``.

    Each classifier draws from its own stream, so results do not depend on
    the order in which classifiers are trained.
    """
    digest = hashlib.blake2b(key.encode(), digest_size=16).digest()
    words = list(struct.unpack("<4I", digest))
    ss = np.random.SeedSequence([int(seed) % 2**64, *words])
    return np.random.Generator(np.random.Philox(ss))


def sampling_pool(flags: np.ndarray, oversample: int) -> np.ndarray:
    """Row indices visited once per epoch; labeled target rows appear ``oversample`` times."""
    flags = np.asarray(flags)
    idx = np.arange(flags.shape[0])
    tl = flags == TARGET_LABELED
    if not tl.any() or oversample == 1:
        return idx
    reps = np.where(tl, oversample, 1)
    return np.repeat(idx, reps)


def train_classifier(
    data: TrainingSet,
    config: TrainConfig,
    init: LinearClassifier | None = None,
    *,
    class_count: int | None = None,
    stream: str = "clf",
    zero_init: bool = False,
) -> LinearClassifier:
    """Plain minibatch SGD on the mixed objective.

    With ``init`` the classifier continues from a copy of those parameters;
    otherwise it is initialised from the private stream (or zeros). The
    returned parameters are rounded to float32 so a checkpoint holds exactly
    the model that produced the in-memory predictions.
    """
    if len(data) == 0:
        raise ContractError("training data is empty")
    rng = stream_rng(config.seed, stream)
    dim = data.features.shape[1]
    if init is not None:
        if init.input_dim != dim:
            raise DimensionError(f"init input_dim {init.input_dim} != data dim {dim}")
        clf = init.copy()
    else:
        if class_count is None:
            raise ContractError("class_count is required without init")
        clf = LinearClassifier.zeros(class_count, dim) if zero_init else LinearClassifier.random(class_count, dim, rng)
    if int(data.labels.max()) >= clf.class_count:
        raise ContractError(f"label {int(data.labels.max())} >= class_count {clf.class_count}")

    pool = sampling_pool(data.flags, config.target_oversample)
    lr, bs = config.learning_rate, config.batch_size
    pseudo = _gce_rows(data.flags, config)
    for epoch in range(config.epochs):
        order = rng.permutation(pool)
        total = 0.0
        for start in range(0, order.size, bs):
            idx = order[start : start + bs]
            loss, gw, gb = _loss_grad(
                clf, data.features[idx], data.labels[idx], pseudo[idx], config.gce_q, config.weight_decay
            )
            total += loss * idx.size
            clf.weights -= lr * gw
            clf.bias -= lr * gb
        if not np.isfinite(total) or not (np.isfinite(clf.weights).all() and np.isfinite(clf.bias).all()):
            raise TrainingError(f"training diverged in epoch {epoch} (loss {total / pool.size})")
    clf.weights[...] = clf.weights.astype(np.float32)
    clf.bias[...] = clf.bias.astype(np.float32)
    return clf


def predict_proba(classifier: LinearClassifier, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != classifier.input_dim:
        raise DimensionError(f"features have dim {x.shape[1]}, classifier expects {classifier.input_dim}")
    return softmax(x @ classifier.weights.T + classifier.bias)


def accuracy(classifier: LinearClassifier, features, labels) -> float:
    pred = predict_proba(classifier, features).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------------------
# checkpoint: magic "FSDC", u16 version, u32 class_count, u32 input_dim,
# f32 weights row-major, f32 bias. Parameters are stored as float32.


def encode_matrix_checkpoint(magic: bytes, matrix: np.ndarray, vector: np.ndarray) -> bytes:
    c, d = matrix.shape
    return b"".join(
        [
            _CKPT_HEADER.pack(magic, CHECKPOINT_VERSION, c, d),
            np.ascontiguousarray(matrix, dtype="<f4").tobytes(),
            np.ascontiguousarray(vector, dtype="<f4").tobytes(),
        ]
    )


def decode_matrix_checkpoint(magic: bytes, buf: bytes):
    if len(buf) < _CKPT_HEADER.size:
        raise TruncationError(f"checkpoint header needs {_CKPT_HEADER.size} bytes, got {len(buf)}")
    got, version, c, d = _CKPT_HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    expected = _CKPT_HEADER.size + 4 * (c * d + c)
    if len(buf) < expected:
        raise TruncationError(f"checkpoint declares {expected} bytes, file has {len(buf)}")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes in checkpoint")
    off = _CKPT_HEADER.size
    mat = np.frombuffer(buf, dtype="<f4", count=c * d, offset=off).reshape(c, d)
    vec = np.frombuffer(buf, dtype="<f4", count=c, offset=off + 4 * c * d)
    return mat.astype(np.float64), vec.astype(np.float64)


def save_classifier(classifier: LinearClassifier, path) -> None:
    Path(path).write_bytes(encode_matrix_checkpoint(CHECKPOINT_MAGIC, classifier.weights, classifier.bias))


def load_classifier(path) -> LinearClassifier:
    w, b = decode_matrix_checkpoint(CHECKPOINT_MAGIC, Path(path).read_bytes())
    return LinearClassifier(w, b)
