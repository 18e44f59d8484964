"""Command-line entry point.

Stage subcommands (``pretrain``, ``eea``, ``ffa``, ``proto``) communicate
through a state directory::

    classifiers/<backbone>.fsdc   per-backbone classifiers (pretrain, eea)
    bank/<input>.fsdc             fusion bank (ffa)
    prototypes/<backbone>.fsdp    prototype sets (proto)
    pseudo.json                   pseudo-label snapshot
    predictions.fsdr              averaged target probabilities
    report.json                   round report

``pipeline`` runs a whole track in one process and writes a run directory.
Exit codes: 0 success, 1 invalid input or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContractError, DataError, FormatError, FsdaError
from .feature_store import Dataset, decode_feature_table, load_feature_table, load_manifest
from .linear_model import _CKPT_HEADER, load_classifier, predict_proba, save_classifier
from .metrics import evaluate, format_summary, write_report
from .pipeline import (
    PipelineConfig,
    build_backbone_prototypes,
    decode_predictions,
    eea_round,
    ffa_round,
    load_config,
    load_predictions,
    prepare,
    pretrain_source_only,
    run_pipeline,
    save_predictions,
    write_run_dir,
)
from .prototype import PrototypeSet, load_prototypes, prototype_predict, save_prototypes
from .pseudo import ensemble_average, load_pseudo_snapshot, save_pseudo_snapshot
from .synthgen import PRESETS, generate, preset


def _jobs_default() -> int:
    try:
        return max(1, int(os.environ.get("FSDA_JOBS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsda", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fsda {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic benchmark")
    g.add_argument("--preset", choices=PRESETS, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--backbones", type=int, help="number of simulated backbones")
    g.add_argument("--labeled-per-class", type=int, help="labeled target samples per class")

    def run_args(sp, state: bool):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--config", help="JSON config; defaults apply when omitted")
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--jobs", type=int, default=_jobs_default())
        if state:
            sp.add_argument("--state", required=True, help="output directory of the previous stage")

    run_args(sub.add_parser("pretrain", help="train source-only classifiers"), state=False)
    run_args(sub.add_parser("eea", help="one end-to-end adaptation round"), state=True)
    run_args(sub.add_parser("ffa", help="one feature-fusion adaptation round"), state=True)
    run_args(sub.add_parser("proto", help="prototype classifiers from current pseudo labels"), state=True)

    pl = sub.add_parser("pipeline", help="run a full adaptation track")
    run_args(pl, state=False)
    pl.add_argument("--mode", choices=("multi_source", "semi_supervised"))
    pl.add_argument("--rounds", type=int)
    pl.add_argument("--preset", choices=("paper",), help="reference schedule: 4 rounds multi-source, 3 semi-supervised")

    ev = sub.add_parser("eval", help="score a prediction file against true labels")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--report", help="write the full metrics report (JSON) here")

    ins = sub.add_parser("inspect", help="print headers of FSDA/FSDC/FSDP/FSDR files")
    ins.add_argument("files", nargs="+")
    return p


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "mode", None):
        cfg = replace(cfg, mode=args.mode)
    if getattr(args, "preset", None) == "paper":
        cfg = PipelineConfig.reference(cfg.mode, train=cfg.train, fusion=cfg.fusion,
                                   pseudo_threshold=cfg.pseudo_threshold,
                                   prototype_temperature=cfg.prototype_temperature,
                                   l2_normalize=cfg.l2_normalize)
    if getattr(args, "rounds", None) is not None:
        cfg = replace(cfg, rounds=args.rounds)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _data(args, cfg):
    return prepare(Dataset(load_manifest(args.manifest), l2_normalize=cfg.l2_normalize))


def _write_stage(out: Path, pseudo, report) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_pseudo_snapshot(pseudo, out / "pseudo.json")
    save_predictions(pseudo.avg_probs, out / "predictions.fsdr")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def _read_pseudo(state: Path):
    probs = load_predictions(state / "predictions.fsdr").astype(np.float64)
    return load_pseudo_snapshot(state / "pseudo.json", probs / probs.sum(axis=1, keepdims=True))


def _read_classifiers(state: Path, backbones) -> dict:
    d = state / "classifiers"
    missing = [b for b in backbones if not (d / f"{b}.fsdc").exists()]
    if missing:
        raise ContractError(f"state {state} has no classifier checkpoints for {missing}")
    return {b: load_classifier(d / f"{b}.fsdc") for b in backbones}


def _save_models(d: Path, models: dict) -> None:
    d.mkdir(parents=True, exist_ok=True)
    for name, m in models.items():
        if isinstance(m, PrototypeSet):
            save_prototypes(m, d / f"{name}.fsdp")
        else:
            save_classifier(m, d / f"{name}.fsdc")


def cmd_gen(args) -> int:
    kw = {}
    if args.backbones is not None:
        kw["backbone_count"] = args.backbones
    if args.labeled_per_class is not None:
        kw["labeled_target_per_class"] = args.labeled_per_class
    m = generate(preset(args.preset, seed=args.seed, **kw), args.out)
    print(f"wrote {len(m.domains)} domains x {len(m.backbones)} backbones to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    prep = _data(args, cfg)
    clfs, pseudo, report = pretrain_source_only(prep, cfg, args.jobs)
    out = Path(args.out)
    _save_models(out / "classifiers", clfs)
    _write_stage(out, pseudo, report)
    return 0


def cmd_eea(args) -> int:
    cfg = _config(args)
    prep = _data(args, cfg)
    state = Path(args.state)
    clfs, pseudo, report = eea_round(_read_classifiers(state, prep.backbones), prep, _read_pseudo(state), cfg, args.jobs)
    out = Path(args.out)
    _save_models(out / "classifiers", clfs)
    _write_stage(out, pseudo, report)
    return 0


def cmd_ffa(args) -> int:
    cfg = _config(args)
    prep = _data(args, cfg)
    bank, pseudo, report = ffa_round(prep, _read_pseudo(Path(args.state)), cfg, args.jobs)
    out = Path(args.out)
    _save_models(out / "bank", {s.name: c for s, c in bank})
    _write_stage(out, pseudo, report)
    return 0


def cmd_proto(args) -> int:
    """Prototype predictions; averaged with the state's classifiers when it has them."""
    cfg = _config(args)
    prep = _data(args, cfg)
    state = Path(args.state)
    pseudo = _read_pseudo(state)
    protos = build_backbone_prototypes(prep, pseudo, cfg.prototype_temperature)
    out = Path(args.out)
    _save_models(out / "prototypes", protos)
    probs = [prototype_predict(protos[b], prep.view((b,)).tgt) for b in prep.backbones]
    save_predictions(ensemble_average(probs), out / "predictions.fsdr")
    if (state / "classifiers").is_dir():
        clfs = _read_classifiers(state, prep.backbones)
        probs += [predict_proba(clfs[b], prep.view((b,)).tgt) for b in prep.backbones]
        save_predictions(ensemble_average(probs), out / "combined.fsdr")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    prep = _data(args, cfg)
    result = run_pipeline(prep, cfg, args.jobs)
    write_run_dir(result, cfg, args.out, truth=prep.truth)
    for r in result.reports:
        acc = "" if r.ensemble_metrics is None else f" mean_acc_all {r.ensemble_metrics['mean_acc_all']:.4f}"
        print(f"round {r.round_index} {r.stage}{acc} ({r.duration_s:.2f}s)", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    probs = load_predictions(args.pred)
    truth = load_feature_table(args.truth)
    if not truth.labeled_mask.all():
        raise DataError(f"{args.truth} has unlabeled rows; every row needs a true label")
    if probs.shape[0] != truth.sample_count:
        raise DataError(f"{probs.shape[0]} predictions for {truth.sample_count} true labels")
    if probs.shape[1] != truth.class_count:
        raise DataError(f"prediction class_count {probs.shape[1]} != truth {truth.class_count}")
    result = evaluate(probs.argmax(axis=1), truth.labels, truth.class_count)
    print(format_summary(result))
    if args.report:
        write_report(result, args.report)
    return 0


def describe_file(path) -> dict:
    buf = Path(path).read_bytes()
    magic = buf[:4]
    info = {"file": str(path), "magic": magic.decode("ascii", "replace"), "bytes": len(buf)}
    if magic == b"FSDA":
        t = decode_feature_table(buf)
        info.update(version=1, labels_present=t.has_labels, class_count=t.class_count,
                    sample_count=t.sample_count, feature_dim=t.feature_dim)
    elif magic in (b"FSDC", b"FSDP"):
        # full decode validates lengths
        (load_classifier if magic == b"FSDC" else load_prototypes)(path)
        _, version, c, d = _CKPT_HEADER.unpack_from(buf)
        info.update(version=version, class_count=c, input_dim=d)
    elif magic == b"FSDR":
        p = decode_predictions(buf)
        info.update(version=1, sample_count=p.shape[0], class_count=p.shape[1])
    else:
        raise FormatError(f"{path}: unknown magic {magic!r}")
    return info


def cmd_inspect(args) -> int:
    for f in args.files:
        print(json.dumps(describe_file(f)))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "eea": cmd_eea,
    "ffa": cmd_ffa,
    "proto": cmd_proto,
    "pipeline": cmd_pipeline,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (FsdaError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
