"""Single-seed trials behind the robustness and fusion comparisons.

Each trial generates its own synthetic benchmark under ``workdir`` and
returns target accuracies, so scripts and tests can average over seeds.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .feature_store import Dataset, merge_sources
from .fusion import fuse_matrices
from .linear_model import SOURCE_LABELED, TARGET_PSEUDO, TrainConfig, TrainingSet, accuracy, train_classifier
from .synthgen import generate, preset

# GCE needs enough steps to fit the clean majority before its gradient on
# confidently-wrong rows vanishes; the default 20 epochs underfit here
ROBUSTNESS_TRAIN = TrainConfig(epochs=200, learning_rate=1.0, weight_decay=0.0)


def gce_vs_ce_trial(seed: int, workdir, config: TrainConfig = ROBUSTNESS_TRAIN) -> dict:
    """Train on source rows plus noisy target pseudo labels with each loss.

    The pseudo labels come from the preset's ``noisy_pseudo.json`` snapshot
    (40% symmetric noise). Returns ``{"gce": acc, "ce": acc}`` on the target.
    """
    out = Path(workdir)
    ds = Dataset(generate(preset("noisy-pseudo", seed=seed), out))
    noisy = np.asarray(json.loads((out / "noisy_pseudo.json").read_text())["hard_labels"])
    b = ds.manifest.backbones[0]
    src = merge_sources(ds, b)
    tgt = ds.target_table(b).features
    data = TrainingSet.concat([
        TrainingSet.block(src.features, src.labels, SOURCE_LABELED),
        TrainingSet.block(tgt, noisy, TARGET_PSEUDO),
    ])
    res = {}
    for loss in ("gce", "ce"):
        cfg = replace(config, seed=seed, pseudo_loss=loss)
        clf = train_classifier(data, cfg, class_count=ds.class_count, stream="robustness")
        res[loss] = accuracy(clf, tgt, ds.truth)
    return res


def concat_vs_fused_trial(seed: int, workdir, config: TrainConfig = TrainConfig()) -> dict:
    """Source-trained linear heads on two backbone views of the bilinear preset.

    Returns target accuracy for the concatenated views and for their
    bilinear fusion.
    """
    ds = Dataset(generate(preset("bilinear", seed=seed), workdir))
    b0, b1 = ds.manifest.backbones[:2]
    s0, s1 = merge_sources(ds, b0), merge_sources(ds, b1)
    t0, t1 = ds.target_table(b0).features, ds.target_table(b1).features
    cfg = replace(config, seed=seed)
    res = {}
    for name, make in (("concat", lambda a, b: np.hstack([a, b])), ("fused", fuse_matrices)):
        ts = TrainingSet.block(make(s0.features, s1.features), s0.labels, SOURCE_LABELED)
        clf = train_classifier(ts, cfg, class_count=2, stream=name)
        res[name] = accuracy(clf, make(t0, t1), ds.truth)
    return res
