"""Bilinear pooling of two backbones' feature vectors.

The fused vector is the row-major flattened outer product ``x y^T``. When
``d1 * d2`` exceeds ``max_dim`` it is first compressed with a seeded
count-sketch projection (one signed nonzero per input coordinate). Signed
square root and L2 normalisation are then applied, each behind a toggle.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .errors import AlignmentError, ConfigError, NumericError
from .feature_store import FeatureTable


@dataclass(frozen=True)
class FusionConfig:
    signed_sqrt: bool = True
    l2_normalize: bool = True
    max_dim: int = 16384
    projection_seed: int = 0

    def __post_init__(self):
        if self.max_dim < 1:
            raise ConfigError(f"max_dim must be >= 1, got {self.max_dim}")


@dataclass(frozen=True)
class InputSpec:
    """Backbones feeding one classifier of the fusion bank: one id or an unordered pair."""

    backbones: tuple

    @property
    def is_pair(self) -> bool:
        return len(self.backbones) == 2

    @property
    def name(self) -> str:
        return "+".join(self.backbones)


@lru_cache(maxsize=32)
def _projection(in_dim: int, out_dim: int, seed: int) -> sp.csr_matrix:
    rng = np.random.default_rng([seed % 2**64, in_dim, out_dim])
    buckets = rng.integers(0, out_dim, size=in_dim)
    signs = rng.choice(np.array([-1.0, 1.0]), size=in_dim)
    return sp.csr_matrix((signs, (np.arange(in_dim), buckets)), shape=(in_dim, out_dim))


def _finish(z: np.ndarray, d_in: int, config: FusionConfig) -> np.ndarray:
    # z: (n, d_in) raw outer products
    if d_in > config.max_dim:
        z = np.asarray(z @ _projection(d_in, config.max_dim, config.projection_seed))
    if config.signed_sqrt:
        z = np.sign(z) * np.sqrt(np.abs(z))
    if config.l2_normalize:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        z = np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)
    return z


def bilinear_fuse(x, y, config: FusionConfig = FusionConfig()) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 1 or y.size < 1:
        raise ConfigError("cannot fuse empty vectors")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise NumericError("bilinear_fuse input contains non-finite values")
    z = np.outer(x, y).reshape(1, -1)
    return _finish(z, z.shape[1], config)[0]


def fuse_matrices(a: np.ndarray, b: np.ndarray, config: FusionConfig = FusionConfig()) -> np.ndarray:
    """Row-wise :func:`bilinear_fuse` of two aligned float matrices (float64 out)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise AlignmentError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NumericError("fusion input contains non-finite values")
    z = np.einsum("ni,nj->nij", a, b).reshape(a.shape[0], -1)
    return _finish(z, z.shape[1], config)


def fuse_tables(a: FeatureTable, b: FeatureTable, config: FusionConfig = FusionConfig()) -> FeatureTable:
    if a.sample_count != b.sample_count:
        raise AlignmentError(
            f"{a.backbone_id} has {a.sample_count} rows, {b.backbone_id} has {b.sample_count}"
        )
    if not np.array_equal(a.labels, b.labels):
        raise AlignmentError(f"labels of {a.backbone_id} and {b.backbone_id} disagree")
    return FeatureTable(
        backbone_id=f"{a.backbone_id}+{b.backbone_id}",
        domain_id=a.domain_id,
        features=fuse_matrices(a.features, b.features, config).astype(np.float32),
        labels=a.labels,
        class_count=a.class_count,
    )


def enumerate_pairs(backbones) -> list[InputSpec]:
    """All singletons, then all unordered pairs in index order: ``B + B(B-1)/2`` specs."""
    backbones = list(backbones)
    if not backbones:
        raise ConfigError("need at least one backbone")
    if len(set(backbones)) != len(backbones):
        raise ConfigError(f"duplicate backbone ids in {backbones}")
    singles = [InputSpec((b,)) for b in backbones]
    pairs = [InputSpec((backbones[i], backbones[j])) for i, j in combinations(range(len(backbones)), 2)]
    return singles + pairs
