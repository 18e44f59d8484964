"""Ensemble averaging and pseudo-label extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, DimensionError

ROW_SUM_TOL = 1e-6


def _check_prob_matrix(p: np.ndarray, what: str = "probability matrix") -> None:
    if p.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any():
        raise DataError(f"{what} has negative or non-finite entries")
    bad = np.abs(p.sum(axis=1) - 1.0) > ROW_SUM_TOL
    if bad.any():
        raise DataError(f"{what} row {int(np.flatnonzero(bad)[0])} does not sum to 1")


def ensemble_average(prob_matrices) -> np.ndarray:
    mats = [np.asarray(m, dtype=np.float64) for m in prob_matrices]
    if not mats:
        raise ContractError("ensemble_average needs at least one matrix")
    shape = mats[0].shape
    for i, m in enumerate(mats):
        if m.shape != shape:
            raise DimensionError(f"member {i} has shape {m.shape}, expected {shape}")
        _check_prob_matrix(m, f"member {i}")
    return np.mean(np.stack(mats), axis=0)


@dataclass(frozen=True, eq=False)
class PseudoLabelSet:
    avg_probs: np.ndarray
    hard_labels: np.ndarray
    confidences: np.ndarray
    round_index: int = 0
    # rows below the confidence threshold; trainers skip them
    excluded: np.ndarray | None = None

    def __post_init__(self):
        if self.excluded is None:
            object.__setattr__(self, "excluded", np.zeros(len(self.hard_labels), dtype=bool))
        for name in ("avg_probs", "hard_labels", "confidences", "excluded"):
            getattr(self, name).setflags(write=False)

    def __len__(self):
        return self.hard_labels.shape[0]

    @property
    def included(self) -> np.ndarray:
        return ~self.excluded

    def to_snapshot(self) -> dict:
        return {
            "round_index": int(self.round_index),
            "hard_labels": [int(v) for v in self.hard_labels],
            "confidences": [float(v) for v in self.confidences],
            "excluded": [int(i) for i in np.flatnonzero(self.excluded)],
        }


def to_pseudo_labels(avg_probs, threshold: float = 0.0, round_index: int = 0) -> PseudoLabelSet:
    p = np.array(avg_probs, dtype=np.float64)
    _check_prob_matrix(p)
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold must lie in [0, 1], got {threshold}")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    hard = p.argmax(axis=1)
    conf = p.max(axis=1)
    return PseudoLabelSet(
        avg_probs=p,
        hard_labels=hard,
        confidences=conf,
        round_index=round_index,
        excluded=conf < threshold,
    )


def pseudo_label_shift(a: PseudoLabelSet, b: PseudoLabelSet) -> float:
    """Fraction of samples whose hard label changed."""
    if len(a) != len(b):
        raise DimensionError(f"pseudo label sets cover {len(a)} and {len(b)} samples")
    return float(np.mean(a.hard_labels != b.hard_labels))


def save_pseudo_snapshot(pseudo: PseudoLabelSet, path) -> None:
    Path(path).write_text(json.dumps(pseudo.to_snapshot()) + "\n")


def load_pseudo_snapshot(path, avg_probs) -> PseudoLabelSet:
    """Rebuild a set from a JSON snapshot plus the averaged probabilities it came from."""
    obj = json.loads(Path(path).read_text())
    hard = np.asarray(obj["hard_labels"], dtype=np.int64)
    p = np.asarray(avg_probs, dtype=np.float64)
    if p.shape[0] != hard.shape[0]:
        raise DimensionError(f"snapshot has {hard.shape[0]} labels, probabilities have {p.shape[0]} rows")
    excluded = np.zeros(hard.shape[0], dtype=bool)
    excluded[np.asarray(obj.get("excluded", []), dtype=np.int64)] = True
    return PseudoLabelSet(
        avg_probs=p,
        hard_labels=hard,
        confidences=np.asarray(obj["confidences"], dtype=np.float64),
        round_index=int(obj["round_index"]),
        excluded=excluded,
    )
