"""Nearest-centroid classifier over per-class feature means.

Scores are ``-||x - c_k||^2 / temperature`` turned into probabilities with a
softmax; classes without any supporting sample are left out of the softmax
and get probability zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .linear_model import decode_matrix_checkpoint, encode_matrix_checkpoint, softmax

PROTOTYPE_MAGIC = b"FSDP"


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    centroids: np.ndarray  # (class_count, feature_dim); zero rows for empty classes
    counts: np.ndarray  # (class_count,)
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    @property
    def class_count(self) -> int:
        return self.centroids.shape[0]


def build_prototypes(features, labels, class_count: int, temperature: float = 1.0) -> PrototypeSet:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DimensionError(f"features {x.shape} and labels {y.shape} disagree")
    if ((y < 0) | (y >= class_count)).any():
        raise ContractError(f"labels must lie in [0, {class_count})")
    if y.size == 0:
        raise ContractError("cannot build prototypes from zero labeled samples")
    counts = np.bincount(y, minlength=class_count)
    sums = np.zeros((class_count, x.shape[1]))
    np.add.at(sums, y, x)
    centroids = sums / np.maximum(counts, 1)[:, None]
    return PrototypeSet(centroids=centroids, counts=counts, temperature=temperature)


def prototype_predict(protos: PrototypeSet, x) -> np.ndarray:
    """Class probabilities for one query vector, or for each row of a matrix."""
    q = np.asarray(x, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != protos.centroids.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != prototype dim {protos.centroids.shape[1]}")
    live = ~protos.empty
    if not live.any():
        raise ContractError("every class is empty")
    diff = q[:, None, :] - protos.centroids[None, live, :]
    scores = -np.einsum("nkd,nkd->nk", diff, diff) / protos.temperature
    out = np.zeros((q.shape[0], protos.class_count))
    out[:, live] = softmax(scores)
    return out[0] if single else out


def save_prototypes(protos: PrototypeSet, path) -> None:
    """Classifier-checkpoint layout under magic FSDP: centroids, then counts in the bias slot."""
    Path(path).write_bytes(encode_matrix_checkpoint(PROTOTYPE_MAGIC, protos.centroids, protos.counts))


def load_prototypes(path, temperature: float = 1.0) -> PrototypeSet:
    centroids, counts = decode_matrix_checkpoint(PROTOTYPE_MAGIC, Path(path).read_bytes())
    return PrototypeSet(centroids=centroids, counts=counts.astype(np.int64), temperature=temperature)
