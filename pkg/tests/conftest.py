import dataclasses
import time

import numpy as np
import pytest

from fsda.feature_store import Dataset
from fsda.linear_model import TrainConfig
from fsda.metrics import evaluate_probs
from fsda.pipeline import (
    PipelineConfig,
    eea_round,
    prepare,
    pretrain_source_only,
    pseudo_label_shift,
    run_multi_source,
    run_semi_supervised,
)
from fsda.synthgen import generate, preset

SEEDS = range(10)

# acceptance lines collected by tests/test_acceptance.py, printed at session end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_prep(tmp_path_factory, name, **kw):
    d = tmp_path_factory.mktemp(name)
    return prepare(Dataset(generate(preset(name.split("_")[0], **kw), d)))


def _acc(probs, truth):
    return evaluate_probs(probs, truth).mean_acc_all


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """Ten-seed measurements shared by the pipeline and acceptance tests.

    Multi-source runs use the "shifted" preset without labeled target rows,
    the semi-supervised runs add one labeled target sample per class, and the
    fusion comparison uses the "bilinear" preset.
    """
    keys = ["src", "src_single", "eea1", "eea1_single_mean", "shift01", "shift13",
            "ms1", "ms2", "eea3", "eea3pc", "bil_best_single_eea", "bil_best_single_ffa", "bil_ffa"]
    res = {k: [] for k in keys}
    t0 = time.perf_counter()
    for seed in SEEDS:
        prep = make_prep(tmp_path_factory, "shifted", seed=seed)
        cfg = PipelineConfig(rounds=2, train=TrainConfig(seed=seed))
        clfs, ps0, r0 = pretrain_source_only(prep, cfg)
        res["src"].append(r0.ensemble_metrics["mean_acc_all"])
        res["src_single"].append([m["mean_acc_all"] for m in r0.classifier_metrics.values()])
        c1, ps1, r1 = eea_round(clfs, prep, ps0, cfg)
        res["eea1"].append(r1.ensemble_metrics["mean_acc_all"])
        res["eea1_single_mean"].append(np.mean([m["mean_acc_all"] for m in r1.classifier_metrics.values()]))
        c2, ps2, _ = eea_round(c1, prep, ps1, cfg)
        _, ps3, _ = eea_round(c2, prep, ps2, cfg)
        res["shift01"].append(pseudo_label_shift(ps0, ps1))
        res["shift13"].append(pseudo_label_shift(ps1, ps3))
        res["ms1"].append(_acc(run_multi_source(prep, dataclasses.replace(cfg, rounds=1)).final_probs, prep.truth))
        res["ms2"].append(_acc(run_multi_source(prep, cfg).final_probs, prep.truth))

        semi = make_prep(tmp_path_factory, "shifted_semi", seed=seed, labeled_target_per_class=1)
        scfg = PipelineConfig(mode="semi_supervised", rounds=3, train=TrainConfig(seed=seed))
        r = run_semi_supervised(semi, scfg)
        res["eea3"].append(r.reports[-1].ensemble_metrics["mean_acc_all"])
        res["eea3pc"].append(_acc(r.final_probs, semi.truth))

        bil = make_prep(tmp_path_factory, "bilinear", seed=seed)
        r = run_multi_source(bil, PipelineConfig(rounds=1, train=TrainConfig(seed=seed)))
        eea_rep, ffa_rep = r.reports[1], r.reports[2]
        res["bil_best_single_eea"].append(max(m["mean_acc_all"] for m in eea_rep.classifier_metrics.values()))
        res["bil_best_single_ffa"].append(
            max(m["mean_acc_all"] for k, m in ffa_rep.classifier_metrics.items() if "+" not in k)
        )
        res["bil_ffa"].append(_acc(r.final_probs, bil.truth))
    out = {k: np.asarray(v, dtype=float) for k, v in res.items()}
    out["src_single"] = np.asarray(res["src_single"])  # (seeds, backbones)
    out["elapsed_s"] = time.perf_counter() - t0
    return out
