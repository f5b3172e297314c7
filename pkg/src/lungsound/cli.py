"""``lungsound`` command line: preprocess, train, evaluate, ablate, explain, report, synth.

Workdir layout::

    config.yaml                 resolved run config (written by preprocess)
    clips/<clip_id>.f32 (+.json) standardized waveforms
    features/features.{json,bin} feature store; features/handcrafted.csv
    split.json                  clip_id -> train/val/test
    preprocess_summary.json
    runs/<variant>/checkpoint.{json,bin}, epochs.jsonl, train_summary.json,
                   eval_<partition>.json
    ablation.json
    xai/<clip_id>/<method>.{json,bin}
    report/report.md + *.svg

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Errors are also printed to stderr as one JSON object.
"""

import argparse
import fcntl
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import figures
from .audio_io import WavDecodeError, load_clip, quality_check, read_wav, save_clip, standardize
from .augmentation import make_rng
from .config import ConfigError, RunConfig, from_dict, load_config
from .evaluation import MetricsError, evaluate
from .features import FEATURE_NAMES, extract, read_feature_store, write_feature_store, write_handcrafted_csv
from .model import CLASSES, VARIANTS, ModelConfig, ModelError, load_checkpoint, predict_proba, save_checkpoint
from .synth import write_tone_dataset
from .training import (
    PARTITIONS,
    DatasetManifest,
    ManifestError,
    NonFiniteLossError,
    Partition,
    SplitAssignment,
    split_dataset,
    train,
)
from .xai import AttributionError, AttributionMap, grad_cam, integrated_gradients, multi_baseline_ig, shap_hand

log = logging.getLogger("lungsound")

LOG_ENV = "LUNGSOUND_LOG_LEVEL"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
XAI_METHODS = ("grad_cam", "integrated_gradients", "shap", "pixel_shap")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_json(path, what):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found at {path}")
    return json.loads(path.read_text())


@contextmanager
def workdir_lock(workdir):
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    fh = open(workdir / ".lock", "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        fh.close()
        raise DataError(f"workdir {workdir} is locked by another lungsound process")
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.workdir:
        d["paths"]["workdir"] = args.workdir
    if getattr(args, "manifest", None):
        d["paths"]["manifest"] = args.manifest
    if args.strict_deterministic:
        d["training"]["strict_deterministic"] = True
    if getattr(args, "epochs", None):
        d["training"]["max_epochs"] = args.epochs
    if getattr(args, "variant", None):
        d["model"]["variant"] = args.variant
    return from_dict(d)


# ---------------------------------------------------------------- preprocess


def class_summary(manifest):
    """Per-class counts and percentage shares."""
    counts = manifest.class_counts()
    total = sum(counts.values())
    return {
        "total": total,
        "classes": [
            {"class": k, "count": counts[k], "percent": round(100.0 * counts[k] / total, 2) if total else 0.0}
            for k in CLASSES
        ],
    }


def cmd_preprocess(cfg):
    workdir = Path(cfg.paths.workdir)
    manifest = DatasetManifest.read_csv(cfg.paths.manifest)
    if len(manifest) == 0:
        raise DataError(f"manifest {cfg.paths.manifest} lists no clips")
    thresholds = cfg.preprocessing.thresholds()
    (workdir / "clips").mkdir(parents=True, exist_ok=True)
    accepted, rejected, failed, records = [], [], [], []
    for e in manifest.entries:
        try:
            clip = standardize(read_wav(e.path))
        except (OSError, WavDecodeError, ValueError) as exc:
            failed.append({"clip_id": e.clip_id, "error": str(exc)})
            log.warning("clip %s unreadable: %s", e.clip_id, exc)
            continue
        qc = quality_check(clip, thresholds)
        if qc.verdict != "accept":
            rejected.append({"clip_id": e.clip_id, "label": e.label, "reason": qc.reason})
            continue
        save_clip(clip, workdir / "clips" / f"{e.clip_id}.f32", source=Path(e.path).name, qc_verdict=qc.verdict)
        mel, hand = extract(clip)
        records.append({"clip_id": e.clip_id, "label": e.label, "patient_id": e.patient_id, "mel": mel, "hand": hand})
        accepted.append(e)
    if not accepted:
        raise DataError("no clip survived decoding and quality control")
    write_feature_store(workdir / "features", records)
    write_handcrafted_csv(workdir / "features" / "handcrafted.csv",
                          [r["clip_id"] for r in records], [r["hand"] for r in records])
    kept = DatasetManifest(accepted)
    split = split_dataset(kept, cfg.preprocessing.split_ratios, cfg.seed, cfg.preprocessing.patient_level)
    _dump(workdir / "split.json", split.to_dict())
    summary = {
        "manifest": class_summary(manifest),
        "accepted": class_summary(kept),
        "rejected": rejected,
        "unreadable": failed,
        "split": split.sizes(),
        "patient_level": split.patient_level,
    }
    _dump(workdir / "preprocess_summary.json", summary)
    cfg.dump(workdir / "config.yaml")
    log.info("preprocessed %d clips (%d rejected, %d unreadable)", len(accepted), len(rejected), len(failed))
    return summary


# ------------------------------------------------------------------ training


def load_partitions(workdir, with_clips=("train",)):
    workdir = Path(workdir)
    if not (workdir / "features" / "features.json").exists():
        raise DataError(f"no feature store in {workdir}; run `lungsound preprocess` first")
    records, mel, hand = read_feature_store(workdir / "features")
    split = SplitAssignment.from_dict(_load_json(workdir / "split.json", "split assignment"))
    parts = {}
    for name in PARTITIONS:
        idx = [i for i, r in enumerate(records) if split.assignment.get(r["clip_id"]) == name]
        ids = [records[i]["clip_id"] for i in idx]
        clips = [load_clip(workdir / "clips" / f"{c}.f32") for c in ids] if name in with_clips else None
        parts[name] = Partition(
            name, ids, np.array([CLASSES.index(records[i]["label"]) for i in idx], dtype=int),
            mel[idx], hand[idx], clips,
        )
    return parts


def run_dir(cfg, variant=None):
    return Path(cfg.paths.workdir) / "runs" / (variant or cfg.model.variant)


def train_variant(cfg, parts, variant=None, seed=None):
    variant = variant or cfg.model.variant
    seed = cfg.seed if seed is None else seed
    mcfg = ModelConfig(**{**cfg.model.to_dict(), "variant": variant})
    tcfg = type(cfg.training)(**{**cfg.training.to_dict(), "seed": seed})
    policy = type(cfg.augmentation)(**{**cfg.augmentation.to_dict(), "seed": seed})
    out = run_dir(cfg, variant)
    out.mkdir(parents=True, exist_ok=True)
    result = train(parts["train"], parts["val"], mcfg, tcfg, policy, log_path=out / "epochs.jsonl")
    meta = {
        "seed": seed,
        "best_epoch": result.best_epoch,
        "best_val_macro_f1": result.best_val_macro_f1,
        "train_config": tcfg.to_dict(),
        "augmentation": policy.to_dict(),
        "rng_streams": {"init": seed, "shuffle": [seed, 0], "augment": [seed, 1], "dropout": [seed, 2]},
    }
    save_checkpoint(out / "checkpoint", result.params, mcfg, meta)
    summary = {
        **meta,
        "epochs_run": len(result.logs),
        "stopped_early": result.stopped_early,
        "lr_reductions": result.lr_reductions,
        "max_post_clip_grad_norm": max(p for _, p in result.grad_norms),
        "augment_counts": result.augment_counts,
    }
    _dump(out / "train_summary.json", summary)
    return result, summary


def cmd_train(cfg):
    parts = load_partitions(cfg.paths.workdir)
    _, summary = train_variant(cfg, parts)
    return summary


def _eval_to_files(out, report, partition):
    _dump(out / f"eval_{partition}.json", report)
    aucs = {k: v["auc"] for k, v in report["per_class"].items()}
    (out / f"confusion_{partition}.svg").write_text(figures.confusion_svg(report["confusion"], report["classes"]))
    (out / f"roc_{partition}.svg").write_text(figures.roc_svg(report["roc"], aucs))


def evaluate_checkpoint(stem, part):
    params, mcfg, _ = load_checkpoint(stem)
    return evaluate(params, mcfg, part.mel, part.hand, part.labels, part.clip_ids)


def cmd_evaluate(cfg, partition="test", checkpoint=None):
    parts = load_partitions(cfg.paths.workdir, with_clips=())
    stem = Path(checkpoint) if checkpoint else run_dir(cfg) / "checkpoint"
    if not stem.with_suffix(".json").exists():
        raise DataError(f"checkpoint {stem}.json not found; run `lungsound train` first")
    if len(parts[partition]) == 0:
        raise DataError(f"partition {partition} is empty")
    report = evaluate_checkpoint(stem, parts[partition])
    _eval_to_files(stem.parent, report, partition)
    return report


def cmd_ablate(cfg):
    parts = load_partitions(cfg.paths.workdir)
    rows = []
    for variant in VARIANTS:
        reps = []
        for r in range(cfg.replicates):
            train_variant(cfg, parts, variant, cfg.seed + r)
            report = evaluate_checkpoint(run_dir(cfg, variant) / "checkpoint", parts["test"])
            _eval_to_files(run_dir(cfg, variant), report, "test")
            reps.append((report["accuracy"], report["macro"]["f1"], report["macro"]["auc"]))
        acc, f1, auc = (float(np.mean([x for x in col if x is not None])) if any(x is not None for x in col) else None
                        for col in zip(*reps))
        rows.append({"variant": variant, "accuracy": acc, "macro_f1": f1, "macro_roc_auc": auc,
                     "replicates": cfg.replicates})
    table = {"columns": ["variant", "accuracy", "macro_f1", "macro_roc_auc"], "rows": rows}
    _dump(Path(cfg.paths.workdir) / "ablation.json", table)
    return table


# ------------------------------------------------------------------- explain


def cmd_explain(cfg, clip_ids, methods, target=None):
    workdir = Path(cfg.paths.workdir)
    unknown = [m for m in methods if m not in XAI_METHODS]
    if unknown:
        raise UsageError(f"unknown attribution method(s) {unknown}; choose from {XAI_METHODS}")
    parts = load_partitions(workdir, with_clips=())
    stem = run_dir(cfg) / "checkpoint"
    if not stem.with_suffix(".json").exists():
        raise DataError(f"checkpoint {stem}.json not found; run `lungsound train` first")
    params, mcfg, _ = load_checkpoint(stem)
    lookup = {}
    for p in parts.values():
        for i, cid in enumerate(p.clip_ids):
            lookup[cid] = (p.mel[i], p.hand[i])
    missing = [c for c in clip_ids if c not in lookup]
    if missing:
        raise DataError(f"clip ids not in the feature store: {missing}")
    train_hand = parts["train"].hand
    pick = make_rng(cfg.seed, 3).choice(len(train_hand), min(cfg.xai.shap_background, len(train_hand)), replace=False)
    background = train_hand[np.sort(pick)].astype(np.float64)
    written = {}
    for cid in clip_ids:
        mel, hand = lookup[cid]
        out = workdir / "xai" / cid
        pr = predict_proba(params, mcfg, mel[None] if mcfg.uses_deep else None, hand[None] if mcfg.uses_hand else None)[0]
        c = int(pr.argmax()) if target is None else CLASSES.index(target)
        maps = {}
        if "grad_cam" in methods:
            maps["grad_cam"] = grad_cam(params, mcfg, mel, hand, c)
        if "integrated_gradients" in methods:
            maps["integrated_gradients"] = integrated_gradients(params, mcfg, mel, hand, c, steps=cfg.xai.ig_steps)
        if "shap" in methods:
            maps["shap"] = shap_hand(params, mcfg, mel, hand, c, background, cfg.xai.shap_permutations, cfg.seed)
        if "pixel_shap" in methods:
            maps["pixel_shap"] = multi_baseline_ig(params, mcfg, mel, hand, c, cfg.xai.n_baselines,
                                                   cfg.xai.baseline_noise_std, cfg.xai.ig_steps, cfg.seed)
        for name, m in maps.items():
            m.metadata.update({"clip_id": cid, "class_name": CLASSES[c], "probabilities": [float(v) for v in pr]})
            m.save(out / name)
        (out / "overlay.svg").write_text(_attribution_svg(mel, maps, cid, CLASSES[c]))
        written[cid] = sorted(maps)
    _dump(workdir / "xai" / "index.json", {"checkpoint": str(stem.relative_to(workdir)), "clips": written})
    return written


def _attribution_svg(mel, maps, cid, cls):
    gc = maps.get("grad_cam")
    ig = maps.get("integrated_gradients")
    sh = maps.get("shap")
    return figures.attribution_figure(
        mel,
        None if gc is None else gc.values,
        None if ig is None else ig.values,
        None if sh is None else sh.values,
        list(FEATURE_NAMES),
        f"{cid}: target {cls}",
    )


# -------------------------------------------------------------------- report


def _fmt(v, nd=4):
    return "n/a" if v is None else f"{v:.{nd}f}"


def cmd_report(cfg):
    """Markdown report plus SVGs, built only from JSON artifacts already in the workdir."""
    workdir = Path(cfg.paths.workdir)
    out = workdir / "report"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Run report", ""]
    missing = []

    summary_path = workdir / "preprocess_summary.json"
    if summary_path.exists():
        s = json.loads(summary_path.read_text())
        lines += ["## Dataset", "", "| Class | Count | Percent |", "|---|---|---|"]
        for row in s["accepted"]["classes"]:
            lines.append(f"| {row['class']} | {row['count']} | {row['percent']:.2f} |")
        lines += [f"| Total | {s['accepted']['total']} | 100.00 |", "",
                  f"Split sizes: {s['split']}; rejected {len(s['rejected'])}, unreadable {len(s['unreadable'])}.", ""]
    else:
        missing.append(str(summary_path.relative_to(workdir)))

    runs = sorted(p for p in (workdir / "runs").glob("*") if p.is_dir()) if (workdir / "runs").exists() else []
    for rd in runs:
        name = rd.name
        lines += [f"## Run: {name}", ""]
        epochs = rd / "epochs.jsonl"
        if epochs.exists():
            logs = [json.loads(l) for l in epochs.read_text().splitlines() if l.strip()]
            if logs:
                (out / f"learning_curves_{name}.svg").write_text(figures.learning_curves_svg(logs, f"Learning curves: {name}"))
                lines += [f"![learning curves](learning_curves_{name}.svg)", ""]
        else:
            missing.append(str(epochs.relative_to(workdir)))
        ev = rd / "eval_test.json"
        if not ev.exists():
            missing.append(str(ev.relative_to(workdir)))
            continue
        r = json.loads(ev.read_text())
        m = r["macro"]
        lines += ["| Accuracy | Precision (macro) | Recall (macro) | F1 (macro) | ROC-AUC (macro) |",
                  "|---|---|---|---|---|",
                  f"| {_fmt(r['accuracy'])} | {_fmt(m['precision'])} | {_fmt(m['recall'])} | {_fmt(m['f1'])} | {_fmt(m['auc'])} |",
                  "", "| Class | Precision | Recall | F1 | Support | AUC |", "|---|---|---|---|---|---|"]
        for k in r["classes"]:
            c = r["per_class"][k]
            lines.append(f"| {k} | {_fmt(c['precision'])} | {_fmt(c['recall'])} | {_fmt(c['f1'])} | {c['support']} | {_fmt(c['auc'])} |")
        aucs = {k: v["auc"] for k, v in r["per_class"].items()}
        (out / f"confusion_{name}.svg").write_text(figures.confusion_svg(r["confusion"], r["classes"]))
        (out / f"roc_{name}.svg").write_text(figures.roc_svg(r["roc"], aucs))
        lines += ["", f"![confusion](confusion_{name}.svg) ![roc](roc_{name}.svg)", ""]

    abl = workdir / "ablation.json"
    if abl.exists():
        t = json.loads(abl.read_text())
        lines += ["## Ablation", "", "| Variant | Accuracy | Macro-F1 | Macro ROC-AUC |", "|---|---|---|---|"]
        for row in t["rows"]:
            lines.append(f"| {row['variant']} | {_fmt(row['accuracy'])} | {_fmt(row['macro_f1'])} | {_fmt(row['macro_roc_auc'])} |")
        lines.append("")

    index = workdir / "xai" / "index.json"
    if index.exists():
        idx = json.loads(index.read_text())
        records = {}
        if (workdir / "features" / "features.json").exists():
            recs, mel, _ = read_feature_store(workdir / "features")
            records = {r["clip_id"]: mel[i] for i, r in enumerate(recs)}
        lines += ["## Explanations", ""]
        for cid, methods in sorted(idx["clips"].items()):
            maps = {}
            for mname in methods:
                stem = workdir / "xai" / cid / mname
                if stem.with_suffix(".json").exists() and stem.with_suffix(".bin").exists():
                    maps[mname] = AttributionMap.load(stem)
                else:
                    missing.append(str(stem.relative_to(workdir)) + ".json")
            if cid not in records:
                missing.append(f"features for {cid}")
                continue
            any_map = next(iter(maps.values()), None)
            cls = any_map.metadata.get("class_name", "") if any_map else ""
            (out / f"xai_{cid}.svg").write_text(_attribution_svg(records[cid], maps, cid, cls))
            lines += [f"![{cid}](xai_{cid}.svg)", ""]

    if missing:
        lines += ["## Missing artifacts", ""] + [f"- {m}" for m in sorted(set(missing))] + [""]
    (out / "report.md").write_text("\n".join(lines))
    return {"report": str((out / "report.md").relative_to(workdir)), "missing": sorted(set(missing))}


# ---------------------------------------------------------------------- main


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config YAML")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--workdir", help="working directory")
    common.add_argument("--strict-deterministic", action="store_true", help="single-threaded numerics")

    p = _Parser(prog="lungsound", description="Respiratory-sound classification toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", parents=[common], help="standardize, QC, featurize and split a manifest")
    s.add_argument("--manifest", help="CSV: clip_id,path,label,patient_id")

    s = sub.add_parser("train", parents=[common], help="train one variant")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--epochs", type=int, help="override max epochs")

    s = sub.add_parser("evaluate", parents=[common], help="metrics, confusion and ROC for a partition")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--partition", default="test", choices=PARTITIONS)
    s.add_argument("--checkpoint", help="checkpoint stem (default runs/<variant>/checkpoint)")

    s = sub.add_parser("ablate", parents=[common], help="train and compare all five variants")
    s.add_argument("--epochs", type=int, help="override max epochs")

    s = sub.add_parser("explain", parents=[common], help="attributions for selected clips")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--clip-ids", required=True, help="comma-separated clip ids")
    s.add_argument("--methods", default="grad_cam,integrated_gradients,shap", help=f"subset of {','.join(XAI_METHODS)}")
    s.add_argument("--target", choices=CLASSES, help="class to explain (default: predicted)")

    sub.add_parser("report", parents=[common], help="markdown report from saved artifacts")

    s = sub.add_parser("synth", help="write the synthetic tone dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    return p


def _run(args):
    if args.command == "synth":
        m = write_tone_dataset(args.out, args.per_class, args.seed)
        return {"manifest": str(Path(args.out) / "manifest.csv"), "clips": len(m)}
    cfg = resolve_config(args)
    with workdir_lock(cfg.paths.workdir):
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            r = cmd_evaluate(cfg, args.partition, args.checkpoint)
            return {"accuracy": r["accuracy"], "macro": r["macro"]}
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "explain":
            ids = [c for c in args.clip_ids.split(",") if c]
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            return cmd_explain(cfg, ids, methods, args.target)
        if args.command == "report":
            return cmd_report(cfg)
    raise UsageError(f"unknown command {args.command}")


def _error(code, exc):
    json.dump({"error": type(exc).__name__, "message": str(exc), "exit_code": code}, sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
        result = _run(args)
    except (UsageError, ConfigError) as exc:
        return _error(EXIT_USAGE, exc)
    except (NonFiniteLossError, FloatingPointError, AttributionError) as exc:
        return _error(EXIT_NUMERIC, exc)
    except (DataError, ManifestError, WavDecodeError, MetricsError, ModelError, OSError) as exc:
        return _error(EXIT_DATA, exc)
    json.dump(result, sys.stdout, indent=1, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
