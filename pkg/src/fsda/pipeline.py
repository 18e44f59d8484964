"""Round orchestration for both adaptation tracks.

Multi-source: source-only pretraining, then ``rounds`` alternations of an EEA
round (per-backbone classifiers fine-tuned on source CE + pseudo-label GCE)
and an FFA round (a bank of classifiers trained from scratch on every single
backbone and every bilinear-fused backbone pair). The final prediction is the
average of the last FFA bank.

Semi-supervised: pretraining with oversampled labeled target rows, then
``rounds`` EEA rounds, then one prototype classifier per backbone; the final
prediction averages the last EEA classifiers and the prototype classifiers.

Every classifier draws randomness from its own stream keyed by stage and
name, so training in parallel (``jobs > 1``) gives bitwise the same results
as training sequentially.
"""

from __future__ import annotations

import json
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, TruncationError
from .feature_store import Dataset, DatasetManifest, merge_sources
from .fusion import FusionConfig, InputSpec, enumerate_pairs, fuse_matrices
from .linear_model import (
    SOURCE_LABELED,
    TARGET_LABELED,
    TARGET_PSEUDO,
    LinearClassifier,
    TrainConfig,
    TrainingSet,
    predict_proba,
    save_classifier,
    train_classifier,
)
from .metrics import evaluate_probs
from .prototype import PrototypeSet, build_prototypes, prototype_predict, save_prototypes
from .pseudo import PseudoLabelSet, ensemble_average, pseudo_label_shift, save_pseudo_snapshot, to_pseudo_labels

MODES = ("multi_source", "semi_supervised")
REFERENCE_ROUNDS = {"multi_source": 4, "semi_supervised": 3}


@dataclass
class PipelineConfig:
    mode: str = "multi_source"
    rounds: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pseudo_threshold: float = 0.0
    prototype_temperature: float = 1.0
    l2_normalize: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if not 0.0 <= self.pseudo_threshold <= 1.0:
            raise ConfigError(f"pseudo_threshold must lie in [0, 1], got {self.pseudo_threshold}")
        if not self.prototype_temperature > 0:
            raise ConfigError("prototype_temperature must be positive")

    @classmethod
    def reference(cls, mode: str, **kw) -> "PipelineConfig":
        """Round counts used in the original challenge systems (4 multi-source, 3 semi)."""
        if mode not in REFERENCE_ROUNDS:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        return cls(mode=mode, rounds=REFERENCE_ROUNDS[mode], **kw)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(
            self,
            train=replace(self.train, seed=seed),
            fusion=replace(self.fusion, projection_seed=seed),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        try:
            train = _strict(TrainConfig, obj.pop("train", {}))
            fusion = _strict(FusionConfig, obj.pop("fusion", {}))
            return _strict(cls, obj, train=train, fusion=fusion)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _strict(kind, obj: dict, **extra):
    if not isinstance(obj, dict):
        raise ConfigError(f"{kind.__name__} section must be an object")
    known = {f.name for f in fields(kind)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {unknown}")
    return kind(**obj, **extra)


def load_config(path) -> PipelineConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return PipelineConfig.from_dict(obj)


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class RoundReport:
    round_index: int
    stage: str
    classifier_metrics: dict  # name -> {"mean_acc_all", "mean_acc_classes"}; empty without truth
    ensemble_metrics: dict | None
    pseudo_label_shift: float | None
    duration_s: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        out = asdict(self)
        if not timing:
            del out["duration_s"]
        return out


# ---------------------------------------------------------------------------
# prepared data


@dataclass(frozen=True)
class View:
    """One classifier input (a backbone or a fused pair) over every row group."""

    src: np.ndarray
    tgt: np.ndarray
    tl: np.ndarray | None


class AdaptationData:
    """Float64 views of a dataset plus a cache of fused pair views."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.backbones = tuple(dataset.backbones)
        self.class_count = dataset.class_count
        b0 = self.backbones[0]
        self.src_labels = np.asarray(merge_sources(dataset, b0).labels, dtype=np.int64)
        tl = dataset.target_labeled_table(b0)
        self.tl_labels = None if tl is None else np.asarray(tl.labels, dtype=np.int64)
        self.tgt_given = np.asarray(dataset.target_table(b0).labels, dtype=np.int64)
        self.given_mask = self.tgt_given >= 0
        self.truth = dataset.truth
        self._views = {}
        for b in self.backbones:
            tlt = dataset.target_labeled_table(b)
            self._views[(b,)] = View(
                src=merge_sources(dataset, b).features.astype(np.float64),
                tgt=dataset.target_table(b).features.astype(np.float64),
                tl=None if tlt is None else tlt.features.astype(np.float64),
            )
        self._fused = {}
        self._lock = threading.Lock()

    @property
    def target_count(self) -> int:
        return self.tgt_given.shape[0]

    @property
    def has_labeled_target(self) -> bool:
        return self.tl_labels is not None or bool(self.given_mask.any())

    def view(self, spec, fusion: FusionConfig | None = None) -> View:
        key = spec.backbones if isinstance(spec, InputSpec) else tuple(spec)
        if len(key) == 1:
            return self._views[key]
        fusion = fusion or FusionConfig()
        ck = (key, fusion)
        with self._lock:
            if ck not in self._fused:
                a, b = self._views[(key[0],)], self._views[(key[1],)]
                self._fused[ck] = View(
                    src=fuse_matrices(a.src, b.src, fusion),
                    tgt=fuse_matrices(a.tgt, b.tgt, fusion),
                    tl=None if a.tl is None else fuse_matrices(a.tl, b.tl, fusion),
                )
            return self._fused[ck]

    def training_set(self, view: View, pseudo: PseudoLabelSet | None) -> TrainingSet:
        """Source rows (CE), labeled target rows (CE, oversampled) and pseudo rows (GCE).

        Target rows that carry a given label always train on that label and are
        never pseudo-labeled.
        """
        parts = [TrainingSet.block(view.src, self.src_labels, SOURCE_LABELED)]
        if view.tl is not None:
            parts.append(TrainingSet.block(view.tl, self.tl_labels, TARGET_LABELED))
        if self.given_mask.any():
            g = self.given_mask
            parts.append(TrainingSet.block(view.tgt[g], self.tgt_given[g], TARGET_LABELED))
        if pseudo is not None:
            if len(pseudo) != self.target_count:
                raise ContractError(f"pseudo labels cover {len(pseudo)} rows, target has {self.target_count}")
            use = pseudo.included & ~self.given_mask
            parts.append(TrainingSet.block(view.tgt[use], pseudo.hard_labels[use], TARGET_PSEUDO))
        return TrainingSet.concat(parts)


def prepare(data, config: PipelineConfig | None = None) -> AdaptationData:
    if isinstance(data, AdaptationData):
        return data
    if isinstance(data, DatasetManifest):
        l2 = True if config is None else config.l2_normalize
        data = Dataset(data, l2_normalize=l2)
    if isinstance(data, Dataset):
        return AdaptationData(data)
    raise TypeError(f"cannot prepare {type(data).__name__}")


def _pmap(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _metrics(prep: AdaptationData, probs: np.ndarray) -> dict | None:
    if prep.truth is None:
        return None
    r = evaluate_probs(probs, prep.truth)
    return {"mean_acc_all": r.mean_acc_all, "mean_acc_classes": r.mean_acc_classes}


def _finish_stage(prep, stage, named_probs: dict, config, prev: PseudoLabelSet | None, t0):
    avg = ensemble_average(list(named_probs.values()))
    round_index = 0 if prev is None else prev.round_index + 1
    pseudo = to_pseudo_labels(avg, config.pseudo_threshold, round_index)
    report = RoundReport(
        round_index=round_index,
        stage=stage,
        classifier_metrics={} if prep.truth is None else {k: _metrics(prep, p) for k, p in named_probs.items()},
        ensemble_metrics=_metrics(prep, avg),
        pseudo_label_shift=None if prev is None else pseudo_label_shift(prev, pseudo),
        duration_s=time.perf_counter() - t0,
    )
    return pseudo, report


# ---------------------------------------------------------------------------
# stages


def pretrain_source_only(data, config: PipelineConfig, jobs: int = 1):
    """Train one classifier per backbone before any adaptation.

    Returns ``(classifiers, pseudo, report)`` with ``classifiers`` keyed by
    backbone id in manifest order.
    """
    prep = prepare(data, config)
    if config.mode == "semi_supervised" and not prep.has_labeled_target:
        raise ContractError("semi_supervised mode needs labeled target rows")
    t0 = time.perf_counter()

    def fit(b):
        ts = prep.training_set(prep.view((b,)), None)
        return train_classifier(ts, config.train, class_count=prep.class_count, stream=f"pretrain/{b}")

    clfs = dict(zip(prep.backbones, _pmap(fit, prep.backbones, jobs)))
    probs = {b: predict_proba(c, prep.view((b,)).tgt) for b, c in clfs.items()}
    pseudo, report = _finish_stage(prep, "pretrain", probs, config, None, t0)
    return clfs, pseudo, report


def eea_round(classifiers: dict, data, pseudo: PseudoLabelSet, config: PipelineConfig, jobs: int = 1):
    """Continue training each backbone's classifier with the current pseudo labels."""
    prep = prepare(data, config)
    t0 = time.perf_counter()
    r = pseudo.round_index + 1

    def fit(b):
        ts = prep.training_set(prep.view((b,)), pseudo)
        return train_classifier(ts, config.train, init=classifiers[b], stream=f"eea{r}/{b}")

    clfs = dict(zip(prep.backbones, _pmap(fit, prep.backbones, jobs)))
    probs = {b: predict_proba(c, prep.view((b,)).tgt) for b, c in clfs.items()}
    new, report = _finish_stage(prep, "eea", probs, config, pseudo, t0)
    return clfs, new, report


def ffa_round(data, pseudo: PseudoLabelSet, config: PipelineConfig, jobs: int = 1):
    """Train a fresh classifier for every single and fused-pair input.

    Returns ``(bank, pseudo, report)``; ``bank`` is a list of
    ``(InputSpec, LinearClassifier)`` in :func:`enumerate_pairs` order.
    """
    prep = prepare(data, config)
    t0 = time.perf_counter()
    r = pseudo.round_index + 1
    specs = enumerate_pairs(prep.backbones)
    views = {s: prep.view(s, config.fusion) for s in specs}

    def fit(spec):
        ts = prep.training_set(views[spec], pseudo)
        return train_classifier(ts, config.train, class_count=prep.class_count, stream=f"ffa{r}/{spec.name}")

    bank = list(zip(specs, _pmap(fit, specs, jobs)))
    probs = {s.name: predict_proba(c, views[s].tgt) for s, c in bank}
    new, report = _finish_stage(prep, "ffa", probs, config, pseudo, t0)
    return bank, new, report


def build_backbone_prototypes(prep: AdaptationData, pseudo: PseudoLabelSet, temperature: float) -> dict:
    """Per-backbone prototypes from given target labels plus included pseudo labels."""
    use = pseudo.included & ~prep.given_mask
    labels = [prep.tgt_given[prep.given_mask], pseudo.hard_labels[use]]
    if prep.tl_labels is not None:
        labels.insert(0, prep.tl_labels)
    labels = np.concatenate(labels)
    out = {}
    for b in prep.backbones:
        v = prep.view((b,))
        feats = [v.tgt[prep.given_mask], v.tgt[use]]
        if v.tl is not None:
            feats.insert(0, v.tl)
        out[b] = build_prototypes(np.concatenate(feats), labels, prep.class_count, temperature)
    return out


# ---------------------------------------------------------------------------
# full runs


@dataclass
class RunResult:
    final_probs: np.ndarray
    reports: list
    pseudo_history: list
    final_members: list  # names of the models averaged into final_probs
    classifiers: dict  # last EEA classifiers by backbone
    bank: list | None = None  # last FFA bank (multi-source)
    prototypes: dict | None = None  # semi-supervised
    checkpoints: list = field(default_factory=list)  # (stage dir name, {name: model})


def run_multi_source(data, config: PipelineConfig, jobs: int = 1) -> RunResult:
    if config.mode != "multi_source":
        raise ContractError("run_multi_source needs mode='multi_source'")
    prep = prepare(data, config)
    clfs, pseudo, rep = pretrain_source_only(prep, config, jobs)
    reports, history = [rep], [pseudo]
    ckpts = [("r00_pretrain", dict(clfs))]
    bank = None
    for _ in range(config.rounds):
        clfs, pseudo, rep = eea_round(clfs, prep, pseudo, config, jobs)
        reports.append(rep)
        history.append(pseudo)
        ckpts.append((f"r{pseudo.round_index:02d}_eea", dict(clfs)))
        bank, pseudo, rep = ffa_round(prep, pseudo, config, jobs)
        reports.append(rep)
        history.append(pseudo)
        ckpts.append((f"r{pseudo.round_index:02d}_ffa", {s.name: c for s, c in bank}))
    final_round = pseudo.round_index
    probs = [predict_proba(c, prep.view(s, config.fusion).tgt) for s, c in bank]
    return RunResult(
        final_probs=ensemble_average(probs),
        reports=reports,
        pseudo_history=history,
        final_members=[f"ffa{final_round}/{s.name}" for s, _ in bank],
        classifiers=clfs,
        bank=bank,
        checkpoints=ckpts,
    )


def run_semi_supervised(data, config: PipelineConfig, jobs: int = 1) -> RunResult:
    if config.mode != "semi_supervised":
        raise ContractError("run_semi_supervised needs mode='semi_supervised'")
    prep = prepare(data, config)
    if prep.tl_labels is None:
        raise ContractError("semi_supervised mode needs a target_labeled domain")
    clfs, pseudo, rep = pretrain_source_only(prep, config, jobs)
    reports, history = [rep], [pseudo]
    ckpts = [("r00_pretrain", dict(clfs))]
    for _ in range(config.rounds):
        clfs, pseudo, rep = eea_round(clfs, prep, pseudo, config, jobs)
        reports.append(rep)
        history.append(pseudo)
        ckpts.append((f"r{pseudo.round_index:02d}_eea", dict(clfs)))
    protos = build_backbone_prototypes(prep, pseudo, config.prototype_temperature)
    ckpts.append(("pc", dict(protos)))
    r = pseudo.round_index
    members, probs = [], []
    for b in prep.backbones:
        members.append(f"eea{r}/{b}")
        probs.append(predict_proba(clfs[b], prep.view((b,)).tgt))
    for b in prep.backbones:
        members.append(f"pc/{b}")
        probs.append(prototype_predict(protos[b], prep.view((b,)).tgt))
    return RunResult(
        final_probs=ensemble_average(probs),
        reports=reports,
        pseudo_history=history,
        final_members=members,
        classifiers=clfs,
        prototypes=protos,
        checkpoints=ckpts,
    )


def run_pipeline(data, config: PipelineConfig, jobs: int = 1) -> RunResult:
    if config.mode == "multi_source":
        return run_multi_source(data, config, jobs)
    return run_semi_supervised(data, config, jobs)


# ---------------------------------------------------------------------------
# prediction file: magic "FSDR", u16 version, u16 flags (0), u32 class_count,
# u64 sample_count, then sample_count x class_count f32 row-major

PRED_MAGIC = b"FSDR"
PRED_VERSION = 1
_PRED_HEADER = struct.Struct("<4sHHIQ")


def encode_predictions(probs: np.ndarray) -> bytes:
    p = np.asarray(probs)
    if p.ndim != 2:
        raise ContractError(f"prediction matrix must be 2-D, got {p.shape}")
    n, c = p.shape
    return _PRED_HEADER.pack(PRED_MAGIC, PRED_VERSION, 0, c, n) + np.ascontiguousarray(p, dtype="<f4").tobytes()


def decode_predictions(buf: bytes) -> np.ndarray:
    if len(buf) < _PRED_HEADER.size:
        raise TruncationError(f"prediction header needs {_PRED_HEADER.size} bytes, got {len(buf)}")
    magic, version, flags, c, n = _PRED_HEADER.unpack_from(buf)
    if magic != PRED_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PRED_MAGIC!r}")
    if version != PRED_VERSION or flags != 0:
        raise FormatError(f"unsupported prediction file version {version} / flags {flags}")
    expected = _PRED_HEADER.size + 4 * n * c
    if len(buf) < expected:
        raise TruncationError(f"prediction file declares {expected} bytes, has {len(buf)}")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes in prediction file")
    return np.frombuffer(buf, dtype="<f4", count=n * c, offset=_PRED_HEADER.size).reshape(n, c).astype(np.float32)


def save_predictions(probs, path) -> None:
    Path(path).write_bytes(encode_predictions(probs))


def load_predictions(path) -> np.ndarray:
    return decode_predictions(Path(path).read_bytes())


def write_run_dir(result: RunResult, config: PipelineConfig, out_dir, truth=None) -> Path:
    """Write the run layout. Timings are left out so reruns are byte-identical.

    ::

        config.json
        pseudo/round_XX.json
        checkpoints/<stage>/<name>.fsdc|.fsdp
        predictions.fsdr
        metrics.json
    """
    out = Path(out_dir)
    (out / "pseudo").mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    for ps in result.pseudo_history:
        save_pseudo_snapshot(ps, out / "pseudo" / f"round_{ps.round_index:02d}.json")
    for stage, models in result.checkpoints:
        d = out / "checkpoints" / stage
        d.mkdir(parents=True, exist_ok=True)
        for name, model in models.items():
            if isinstance(model, PrototypeSet):
                save_prototypes(model, d / f"{name}.fsdp")
            else:
                save_classifier(model, d / f"{name}.fsdc")
    save_predictions(result.final_probs, out / "predictions.fsdr")
    metrics = {
        "mode": config.mode,
        "rounds": config.rounds,
        "final_members": result.final_members,
        "reports": [r.to_dict() for r in result.reports],
    }
    if truth is not None:
        metrics["final"] = evaluate_probs(result.final_probs, truth).to_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return out
