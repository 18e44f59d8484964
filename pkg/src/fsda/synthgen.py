"""Deterministic synthetic multi-source benchmark.

Samples live in a latent space. Each domain rotates (in every plane of a
random orthonormal basis), translates and adds noise to the latent samples;
each simulated backbone is a fixed random invertible linear map followed by
``tanh`` plus a little backbone-private noise, so backbones see the same
samples but make different mistakes.

Two latent structures are available. ``clusters`` draws one Gaussian cluster
per class. ``bilinear`` draws isotropic latents and labels each sample by the
sign of the product of the first coordinate of backbone 0's view and the
first coordinate of backbone 1's view, a boundary no linear model on either
view (or their concatenation) can represent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .feature_store import DatasetManifest, DomainEntry, FeatureTable, save_feature_table, save_manifest
from .pseudo import PseudoLabelSet, save_pseudo_snapshot

PRESETS = ("easy", "shifted", "noisy-pseudo", "bilinear")


@dataclass(frozen=True)
class DomainShift:
    rotation: float = 0.0  # radians
    translation: float = 0.0
    noise: float = 0.0

    def __post_init__(self):
        if self.noise < 0 or self.translation < 0:
            raise ConfigError("noise and translation must be non-negative")


@dataclass(frozen=True)
class SynthConfig:
    class_count: int = 5
    feature_dim: int = 16
    samples_per_class_per_domain: int = 40
    source_domain_count: int = 3
    # shift of the target domain; each source gets a random shift of
    # ``source_shift_fraction`` times these magnitudes
    domain_shift: DomainShift = field(default_factory=DomainShift)
    source_shift_fraction: float = 0.25
    backbone_count: int = 3
    labeled_target_per_class: int = 0
    structure: str = "clusters"
    cluster_std: float = 0.35
    view_noise: float = 0.05
    # symmetric noise rate for the round-0 pseudo-label snapshot written next
    # to the data; 0 writes no snapshot
    pseudo_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("class_count", "feature_dim", "samples_per_class_per_domain",
                     "source_domain_count", "backbone_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.labeled_target_per_class < 0:
            raise ConfigError("labeled_target_per_class must be >= 0")
        if self.structure not in ("clusters", "bilinear"):
            raise ConfigError(f"unknown structure {self.structure!r}")
        if self.structure == "bilinear" and (self.class_count != 2 or self.backbone_count < 2):
            raise ConfigError("bilinear structure needs class_count=2 and backbone_count>=2")
        if self.cluster_std < 0 or self.view_noise < 0:
            raise ConfigError("cluster_std and view_noise must be non-negative")
        if not 0.0 <= self.pseudo_noise <= 1.0:
            raise ConfigError("pseudo_noise must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def preset(name: str, seed: int = 0, **overrides) -> SynthConfig:
    if name == "easy":
        cfg = SynthConfig(domain_shift=DomainShift(0.0, 0.0, 0.0))
    elif name == "shifted":
        cfg = SynthConfig(
            domain_shift=DomainShift(rotation=1.0, translation=0.8, noise=0.3),
            cluster_std=0.5,
        )
    elif name == "noisy-pseudo":
        cfg = SynthConfig(
            class_count=10,
            feature_dim=48,
            samples_per_class_per_domain=20,
            source_domain_count=1,
            domain_shift=DomainShift(rotation=1.4, translation=1.5, noise=0.3),
            backbone_count=1,
            pseudo_noise=0.4,
        )
    elif name == "bilinear":
        cfg = SynthConfig(
            class_count=2,
            feature_dim=8,
            samples_per_class_per_domain=150,
            source_domain_count=2,
            domain_shift=DomainShift(rotation=0.2, translation=0.0, noise=0.05),
            structure="bilinear",
            view_noise=0.02,
        )
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return replace(cfg, seed=seed, **overrides)


def _rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate by ``angle`` in each of the dim//2 planes of a random orthonormal basis."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    if dim < 2 or angle == 0.0:
        return np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    block = np.eye(dim)
    for i in range(0, dim - 1, 2):
        block[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return q @ block @ q.T


def _unit(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass
class _Domain:
    domain_id: str
    role: str
    labels: np.ndarray
    views: list  # per backbone, (n, feature_dim)
    hidden_labels: bool = False


class _World:
    """Fixed class centers and backbone maps shared by every domain."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.feature_dim
        self.centers = rng.standard_normal((cfg.class_count, d))
        self.maps = []
        self.offsets = []
        for _ in range(cfg.backbone_count):
            q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            scales = rng.uniform(0.6, 1.4, size=d)
            self.maps.append(q * scales)  # invertible: orthogonal times positive diagonal
            self.offsets.append(
                np.zeros(d) if cfg.structure == "bilinear" else 0.2 * rng.standard_normal(d)
            )
        if cfg.structure == "bilinear":
            # make the two planted coordinates depend on disjoint latent directions
            basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
            self.maps[0][0] = basis[:, 0] * 1.2
            self.maps[1][0] = basis[:, 1] * 1.2

    def views(self, latent: np.ndarray, rng: np.random.Generator) -> list:
        gain = 0.5 if self.cfg.structure == "clusters" else 0.8
        out = []
        for a, c in zip(self.maps, self.offsets):
            v = np.tanh(gain * latent @ a.T + c)
            if self.cfg.view_noise > 0:
                v = v + self.cfg.view_noise * rng.standard_normal(v.shape)
            out.append(v)
        return out

    def transform(self, shift: DomainShift, rng: np.random.Generator):
        d = self.cfg.feature_dim
        return _rotation(d, shift.rotation, rng), shift.translation * _unit(d, rng), shift.noise

    def sample_domain(self, transform, n_per_class: int, rng: np.random.Generator):
        cfg = self.cfg
        d = cfg.feature_dim
        rot, trans, noise = transform

        def draw_latent(base):
            return base @ rot.T + trans + noise * rng.standard_normal(base.shape)

        if cfg.structure == "clusters":
            labels = np.repeat(np.arange(cfg.class_count), n_per_class)
            base = self.centers[labels] + cfg.cluster_std * rng.standard_normal((labels.size, d))
            views = self.views(draw_latent(base), rng)
            perm = rng.permutation(labels.size)
            return labels[perm], [v[perm] for v in views]
        # bilinear: oversample, label from the realised views, keep n per class
        labs, parts = [], []
        have = np.zeros(2, dtype=int)
        while (have < n_per_class).any():
            views = self.views(draw_latent(rng.standard_normal((4 * n_per_class, d))), rng)
            lab = (views[0][:, 0] * views[1][:, 0] > 0).astype(np.int64)
            for k in (0, 1):
                idx = np.flatnonzero(lab == k)[: n_per_class - have[k]]
                have[k] += idx.size
                labs.append(lab[idx])
                parts.append([v[idx] for v in views])
        labels = np.concatenate(labs)
        views = [np.vstack([p[i] for p in parts]) for i in range(len(self.maps))]
        perm = rng.permutation(labels.size)
        return labels[perm], [v[perm] for v in views]


def _random_shift(scale: DomainShift, frac: float, rng: np.random.Generator) -> DomainShift:
    return DomainShift(
        rotation=frac * scale.rotation * rng.uniform(-1.0, 1.0),
        translation=frac * scale.translation * rng.uniform(0.0, 1.0),
        noise=frac * scale.noise,
    )


def symmetric_noise(labels, rate: float, class_count: int, rng: np.random.Generator) -> np.ndarray:
    """Replace a ``rate`` fraction of labels (exactly, rounded) by a different class drawn uniformly."""
    labels = np.array(labels, dtype=np.int64)
    n_flip = int(round(rate * labels.size))
    idx = rng.choice(labels.size, size=n_flip, replace=False)
    offs = rng.integers(1, class_count, size=n_flip)
    labels[idx] = (labels[idx] + offs) % class_count
    return labels


def generate_domains(cfg: SynthConfig) -> tuple[list, np.ndarray]:
    """In-memory generation: (domains, true target labels)."""
    rng = np.random.default_rng(cfg.seed)
    world = _World(cfg, rng)
    n = cfg.samples_per_class_per_domain
    domains = []
    for s in range(cfg.source_domain_count):
        shift = _random_shift(cfg.domain_shift, cfg.source_shift_fraction, rng)
        labels, views = world.sample_domain(world.transform(shift, rng), n, rng)
        domains.append(_Domain(f"source{s}", "source", labels, views))
    # labeled and unlabeled target rows share one transform
    tgt = world.transform(cfg.domain_shift, rng)
    truth, views = world.sample_domain(tgt, n, rng)
    domains.append(_Domain("target", "target_unlabeled", truth, views, hidden_labels=True))
    if cfg.labeled_target_per_class > 0:
        labels, views = world.sample_domain(tgt, cfg.labeled_target_per_class, rng)
        domains.append(_Domain("target_labeled", "target_labeled", labels, views))
    return domains, truth


def generate(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write FSDA files and ``manifest.json`` under ``out_dir``; returns the manifest.

    Also writes ``truth/target.fsda`` (true target labels, for evaluation only),
    ``synth_config.json`` and, when ``pseudo_noise > 0``,
    ``noisy_pseudo.json``: a round-0 pseudo-label snapshot with exactly that
    fraction of target labels flipped to another class.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    domains, truth = generate_domains(cfg)
    backbones = [f"bb{i}" for i in range(cfg.backbone_count)]
    entries = []
    for dom in domains:
        ddir = out / dom.domain_id
        ddir.mkdir(exist_ok=True)
        files = {}
        for b, view in zip(backbones, dom.views):
            t = FeatureTable(
                backbone_id=b,
                domain_id=dom.domain_id,
                features=view,
                labels=None if dom.hidden_labels else dom.labels,
                class_count=cfg.class_count,
            )
            save_feature_table(t, ddir / f"{b}.fsda")
            files[b] = f"{dom.domain_id}/{b}.fsda"
        entries.append(DomainEntry(dom.domain_id, dom.role, files))
    (out / "truth").mkdir(exist_ok=True)
    target = domains[cfg.source_domain_count]
    save_feature_table(
        FeatureTable(backbones[0], "target", target.views[0], truth, cfg.class_count),
        out / "truth" / "target.fsda",
    )
    manifest = DatasetManifest(
        domains=entries,
        backbones=backbones,
        class_count=cfg.class_count,
        root=out,
        target_truth="truth/target.fsda",
    )
    save_manifest(manifest, out / "manifest.json")
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if cfg.pseudo_noise > 0:
        noisy = symmetric_noise(truth, cfg.pseudo_noise, cfg.class_count, np.random.default_rng([cfg.seed, 7]))
        onehot = np.eye(cfg.class_count)[noisy]
        save_pseudo_snapshot(
            PseudoLabelSet(onehot, noisy, np.ones(noisy.size), round_index=0),
            out / "noisy_pseudo.json",
        )
    return manifest
