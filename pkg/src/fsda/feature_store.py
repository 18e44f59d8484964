"""On-disk feature tables, experiment manifests and the loaded dataset view.

Feature file layout (little-endian)::

    magic        4 bytes  b"FSDA"
    version      u16      1
    flags        u16      bit 0 set when a label block follows the payload
    class_count  u32
    sample_count u64
    feature_dim  u32
    payload      sample_count * feature_dim f32, row-major
    labels       sample_count i32 (only when flag bit 0 is set)

A table whose labels are all -1 is written without the label block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractError, DataError, DimensionError, FormatError, TruncationError

MAGIC = b"FSDA"
VERSION = 1
FLAG_LABELS = 0x1
UNLABELED = -1

_HEADER = struct.Struct("<4sHHIQI")

ROLES = ("source", "target_unlabeled", "target_labeled")


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """One backbone's features for one domain.

    ``features`` is stored as read-only float32 and ``labels`` as read-only
    int32, with -1 marking unlabeled rows.
    """

    backbone_id: str
    domain_id: str
    features: np.ndarray
    labels: np.ndarray | None = None
    class_count: int = 2

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {feats.shape}")
        n, d = feats.shape
        if n < 1 or d < 1:
            raise DataError(f"empty feature matrix {feats.shape}")
        if self.class_count < 2:
            raise DataError(f"class_count must be >= 2, got {self.class_count}")
        if self.labels is None:
            labels = np.full(n, UNLABELED, dtype=np.int32)
        else:
            raw = np.asarray(self.labels)
            if raw.shape != (n,):
                raise DataError(f"labels shape {raw.shape} does not match {n} samples")
            if raw.size and not np.issubdtype(raw.dtype, np.integer):
                if not np.array_equal(raw, np.round(raw)):
                    raise DataError("labels must be integers")
            labels = np.ascontiguousarray(raw, dtype=np.int32)
        _check_labels(labels, self.class_count)
        _check_finite(feats)
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def sample_count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def has_labels(self) -> bool:
        return bool(self.labeled_mask.any())

    def __eq__(self, other):
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return (
            self.backbone_id == other.backbone_id
            and self.domain_id == other.domain_id
            and self.class_count == other.class_count
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )

    __hash__ = None

    def replace(self, **changes) -> "FeatureTable":
        kw = dict(
            backbone_id=self.backbone_id,
            domain_id=self.domain_id,
            features=self.features,
            labels=self.labels,
            class_count=self.class_count,
        )
        kw.update(changes)
        return FeatureTable(**kw)


def _check_labels(labels: np.ndarray, class_count: int) -> None:
    bad = (labels < UNLABELED) | (labels >= class_count)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(
            f"label {int(labels[row])} at row {row} outside [-1, {class_count})"
        )


def _check_finite(feats: np.ndarray) -> None:
    finite = np.isfinite(feats)
    if not finite.all():
        row = int(np.flatnonzero(~finite.all(axis=1))[0])
        raise DataError(f"non-finite feature value in row {row}")


def encode_feature_table(table: FeatureTable) -> bytes:
    flags = FLAG_LABELS if table.has_labels else 0
    parts = [
        _HEADER.pack(
            MAGIC, VERSION, flags, table.class_count, table.sample_count, table.feature_dim
        ),
        table.features.astype("<f4", copy=False).tobytes(),
    ]
    if flags & FLAG_LABELS:
        parts.append(table.labels.astype("<i4", copy=False).tobytes())
    return b"".join(parts)


def decode_feature_table(buf: bytes, backbone_id: str = "", domain_id: str = "") -> FeatureTable:
    if len(buf) < _HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise FormatError("bad magic")
        raise TruncationError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    magic, version, flags, class_count, n, d = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported FSDA version {version}")
    if flags & ~FLAG_LABELS:
        raise FormatError(f"unknown flag bits 0x{flags:04x}")
    has_labels = bool(flags & FLAG_LABELS)
    expected = _HEADER.size + 4 * n * d + (4 * n if has_labels else 0)
    if len(buf) < expected:
        raise TruncationError(
            f"header declares {n}x{d} payload ({expected} bytes) but file has {len(buf)}"
        )
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after declared payload")
    off = _HEADER.size
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    labels = None
    if has_labels:
        labels = np.frombuffer(buf, dtype="<i4", count=n, offset=off + 4 * n * d)
    return FeatureTable(
        backbone_id=backbone_id,
        domain_id=domain_id,
        features=feats.astype(np.float32),
        labels=None if labels is None else labels.astype(np.int32),
        class_count=class_count,
    )


def save_feature_table(table: FeatureTable, path) -> None:
    Path(path).write_bytes(encode_feature_table(table))


def load_feature_table(path, backbone_id: str | None = None, domain_id: str | None = None) -> FeatureTable:
    """Read an FSDA file.

    The format carries no identifiers, so ``backbone_id`` and ``domain_id``
    default to the file stem and its parent directory name.
    """
    path = Path(path)
    if backbone_id is None:
        backbone_id = path.stem
    if domain_id is None:
        domain_id = path.parent.name
    return decode_feature_table(path.read_bytes(), backbone_id, domain_id)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x64, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (x64 / norms).astype(np.float32)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class DomainEntry:
    domain_id: str
    role: str
    files: dict  # backbone_id -> path (relative to manifest root or absolute)


@dataclass(frozen=True)
class DatasetManifest:
    domains: tuple
    backbones: tuple
    class_count: int
    root: Path = field(default=Path("."))
    # FSDA file holding true labels for the target_unlabeled rows, used only
    # for reporting metrics; never read by training.
    target_truth: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "backbones", tuple(self.backbones))
        object.__setattr__(self, "root", Path(self.root))
        validate_manifest(self)

    def by_role(self, role: str) -> list:
        return [d for d in self.domains if d.role == role]

    @property
    def sources(self) -> list:
        return self.by_role("source")

    @property
    def target(self) -> DomainEntry:
        return self.by_role("target_unlabeled")[0]

    @property
    def target_labeled(self) -> DomainEntry | None:
        got = self.by_role("target_labeled")
        return got[0] if got else None

    def path_for(self, domain: DomainEntry, backbone_id: str) -> Path:
        p = Path(domain.files[backbone_id])
        return p if p.is_absolute() else self.root / p

    def truth_path(self) -> Path | None:
        if self.target_truth is None:
            return None
        p = Path(self.target_truth)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        out = {
            "class_count": self.class_count,
            "backbones": list(self.backbones),
            "domains": [
                {"id": d.domain_id, "role": d.role, "files": dict(d.files)} for d in self.domains
            ],
        }
        if self.target_truth is not None:
            out["target_truth"] = self.target_truth
        return out


def validate_manifest(m: DatasetManifest) -> None:
    if m.class_count < 2:
        raise DataError(f"class_count must be >= 2, got {m.class_count}")
    if not m.backbones:
        raise DataError("manifest lists no backbones")
    if len(set(m.backbones)) != len(m.backbones):
        raise DataError(f"duplicate backbone ids in {list(m.backbones)}")
    ids = [d.domain_id for d in m.domains]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate domain ids in {ids}")
    for d in m.domains:
        if d.role not in ROLES:
            raise DataError(f"domain {d.domain_id!r} has unknown role {d.role!r}")
        missing = [b for b in m.backbones if b not in d.files]
        if missing:
            raise DataError(f"domain {d.domain_id!r} has no file for backbones {missing}")
    counts = {r: sum(d.role == r for d in m.domains) for r in ROLES}
    if counts["source"] < 1:
        raise DataError("manifest needs at least one source domain")
    if counts["target_unlabeled"] != 1:
        raise DataError(
            f"manifest needs exactly one target_unlabeled domain, got {counts['target_unlabeled']}"
        )
    if counts["target_labeled"] > 1:
        raise DataError("manifest allows at most one target_labeled domain")


def manifest_from_dict(obj: dict, root=".") -> DatasetManifest:
    try:
        domains = [
            DomainEntry(str(d["id"]), str(d["role"]), {str(k): str(v) for k, v in d["files"].items()})
            for d in obj["domains"]
        ]
        return DatasetManifest(
            domains=domains,
            backbones=[str(b) for b in obj["backbones"]],
            class_count=int(obj["class_count"]),
            root=Path(root),
            target_truth=obj.get("target_truth"),
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise DataError(f"malformed manifest: {exc!r}") from exc


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    return manifest_from_dict(obj, root=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# loaded view


class Dataset:
    """All tables of a manifest, loaded and checked for consistency.

    Tables are immutable, so one instance can be shared by any number of
    concurrent readers.
    """

    def __init__(self, manifest: DatasetManifest, l2_normalize: bool = True):
        self.manifest = manifest
        self.l2_normalize = l2_normalize
        self._tables: dict[tuple[str, str], FeatureTable] = {}
        for dom in manifest.domains:
            ref = None
            for b in manifest.backbones:
                t = load_feature_table(manifest.path_for(dom, b), backbone_id=b, domain_id=dom.domain_id)
                if t.class_count != manifest.class_count:
                    raise DataError(
                        f"{dom.domain_id}/{b}: class_count {t.class_count} != manifest {manifest.class_count}"
                    )
                if l2_normalize:
                    t = t.replace(features=l2_normalize_rows(t.features))
                if ref is None:
                    ref = t
                elif t.sample_count != ref.sample_count or not np.array_equal(t.labels, ref.labels):
                    raise DataError(
                        f"domain {dom.domain_id!r}: backbone {b!r} disagrees with "
                        f"{ref.backbone_id!r} on sample count or labels"
                    )
                self._tables[(dom.domain_id, b)] = t
        if manifest.target_labeled is not None:
            tl = self.table(manifest.target_labeled.domain_id, manifest.backbones[0])
            if not tl.labeled_mask.all():
                raise DataError("target_labeled domain contains unlabeled rows")
        self.truth = None
        tp = manifest.truth_path()
        if tp is not None:
            truth = load_feature_table(tp)
            if truth.sample_count != self.target_table(manifest.backbones[0]).sample_count:
                raise DataError("target_truth sample count does not match target domain")
            self.truth = np.array(truth.labels)

    @property
    def backbones(self) -> tuple:
        return self.manifest.backbones

    @property
    def class_count(self) -> int:
        return self.manifest.class_count

    def table(self, domain_id: str, backbone_id: str) -> FeatureTable:
        try:
            return self._tables[(domain_id, backbone_id)]
        except KeyError:
            raise ContractError(f"no table for domain {domain_id!r}, backbone {backbone_id!r}") from None

    def target_table(self, backbone_id: str) -> FeatureTable:
        return self.table(self.manifest.target.domain_id, backbone_id)

    def target_labeled_table(self, backbone_id: str) -> FeatureTable | None:
        tl = self.manifest.target_labeled
        return None if tl is None else self.table(tl.domain_id, backbone_id)


def _as_dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        return data
    if isinstance(data, DatasetManifest):
        return Dataset(data)
    raise TypeError(f"expected Dataset or DatasetManifest, got {type(data).__name__}")


def concat_tables(tables: Iterable[FeatureTable], backbone_id: str, domain_id: str) -> FeatureTable:
    tables = list(tables)
    if not tables:
        raise ContractError("nothing to concatenate")
    dims = {t.feature_dim for t in tables}
    if len(dims) != 1:
        raise DimensionError(
            f"feature_dim differs across domains for backbone {backbone_id!r}: "
            + ", ".join(f"{t.domain_id}={t.feature_dim}" for t in tables)
        )
    return FeatureTable(
        backbone_id=backbone_id,
        domain_id=domain_id,
        features=np.concatenate([t.features for t in tables]),
        labels=np.concatenate([t.labels for t in tables]),
        class_count=tables[0].class_count,
    )


def merge_sources(data, backbone_id: str) -> FeatureTable:
    """Stack every source domain's table for one backbone, in manifest order."""
    ds = _as_dataset(data)
    if backbone_id not in ds.backbones:
        raise ContractError(f"backbone {backbone_id!r} not in manifest {list(ds.backbones)}")
    srcs = ds.manifest.sources
    if len(srcs) == 1:
        return ds.table(srcs[0].domain_id, backbone_id)
    return concat_tables(
        (ds.table(d.domain_id, backbone_id) for d in srcs),
        backbone_id=backbone_id,
        domain_id="+".join(d.domain_id for d in srcs),
    )


def source_provenance(data) -> np.ndarray:
    """(domain_index, row) for every row of :func:`merge_sources` output."""
    ds = _as_dataset(data)
    b0 = ds.backbones[0]
    parts = []
    for i, d in enumerate(ds.manifest.sources):
        n = ds.table(d.domain_id, b0).sample_count
        parts.append(np.stack([np.full(n, i), np.arange(n)], axis=1))
    return np.concatenate(parts)
