"""Ten-seed accuracy table for every stage of both tracks on the synthetic benchmark.

Multi-source rows use the "shifted" preset, semi-supervised rows add one
labeled target sample per class, and the fusion rows use "bilinear".
"""

import argparse
import json
import tempfile
from pathlib import Path

import numpy as np

from fsda.feature_store import Dataset
from fsda.linear_model import TrainConfig
from fsda.metrics import evaluate_probs
from fsda.pipeline import PipelineConfig, prepare, run_multi_source, run_semi_supervised
from fsda.synthgen import generate, preset


def track(prep, cfg):
    run = run_multi_source if cfg.mode == "multi_source" else run_semi_supervised
    r = run(prep, cfg)
    rows = {f"{rep.stage}{rep.round_index}": rep.ensemble_metrics["mean_acc_all"] for rep in r.reports}
    rows["final"] = evaluate_probs(r.final_probs, prep.truth).mean_acc_all
    best = {}
    for rep in r.reports:
        singles = [m["mean_acc_all"] for k, m in rep.classifier_metrics.items() if "+" not in k]
        best[f"{rep.stage}{rep.round_index}"] = max(singles)
    return rows, best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=2, help="alternations for the multi-source track")
    ap.add_argument("--semi-rounds", type=int, default=3)
    ap.add_argument("--json", help="also write the table here")
    args = ap.parse_args()

    setups = {
        "multi_source/shifted": ("shifted", {}, "multi_source", args.rounds),
        "semi_supervised/shifted": ("shifted", {"labeled_target_per_class": 1}, "semi_supervised", args.semi_rounds),
        "multi_source/bilinear": ("bilinear", {}, "multi_source", 1),
    }
    table = {}
    with tempfile.TemporaryDirectory() as tmp:
        for name, (pname, kw, mode, rounds) in setups.items():
            ens, single = {}, {}
            for s in range(args.seeds):
                ds = Dataset(generate(preset(pname, seed=s, **kw), Path(tmp) / f"{pname}_{mode}_{s}"))
                cfg = PipelineConfig(mode=mode, rounds=rounds, train=TrainConfig(seed=s)).with_seed(s)
                rows, best = track(prepare(ds), cfg)
                for k, v in rows.items():
                    ens.setdefault(k, []).append(v)
                for k, v in best.items():
                    single.setdefault(k, []).append(v)
            table[name] = {k: float(np.mean(v)) for k, v in ens.items()}
            print(f"\n{name}  ({args.seeds} seeds, mean_acc_all)")
            print(f"  {'stage':<10} {'ensemble':>9} {'best single':>12}")
            for k, v in ens.items():
                bs = f"{np.mean(single[k]):.4f}" if k in single else ""
                print(f"  {k:<10} {np.mean(v):9.4f} {bs:>12}")
    if args.json:
        Path(args.json).write_text(json.dumps(table, indent=2) + "\n")


if __name__ == "__main__":
    main()
