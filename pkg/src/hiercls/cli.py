"""Command line entry point.

One executable, five subcommands:

* ``taxonomy-check``: parse and describe a taxonomy file.
* ``data-gen``:       write a synthetic dataset directory.
* ``train``:          cross-validated training, reports, and figures.
* ``eval``:           evaluate saved checkpoints on a dataset.
* ``cam``:            heatmap a dataset through a tiny CNN checkpoint.

Every experiment is one JSON config file; the only flags are
``--config``, ``--out``, ``--seed`` (overrides the config's seed), and
``--quiet``. Relative paths inside a config resolve against the config
file's directory, so experiment folders stay relocatable.

Exit codes: 0 success; 2 invalid input or config; 3 missing or corrupt
file; 4 internal invariant violation. Each run writes a
``runmanifest.json`` into the output directory (atomically, last) that
records the config hash, seed, tool version, inputs, outputs, and wall
time. Reruns with identical inputs rewrite identical artifacts; only
the manifest's wall time differs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Mapping, Sequence

from hiercls import __version__
from hiercls.aggregation import slide_metrics, slide_mode, write_slide_votes_csv
from hiercls.attribution import cam_batch_report
from hiercls.data import GenConfig, gen_features, gen_images, load_dataset, save_dataset
from hiercls.errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    HierclsError,
    TaxonomyError,
)
from hiercls.inference import write_predictions_csv
from hiercls.metrics import compute_report, stage_accuracies
from hiercls.plots import save_confusion_png, save_curves_png, save_per_class_f1_png
from hiercls.report import (
    comparison_text,
    eval_report_text,
    experiment_json,
    experiment_to_doc,
)
from hiercls.taxonomy import Taxonomy, load_default_taxonomy, load_taxonomy_file
from hiercls.trainer import (
    MODES,
    TrainConfig,
    design_matrix,
    evaluate_patches,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
    write_curve_csv,
)


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _load_config(path_str: str) -> tuple[dict, bytes, Path]:
    path = Path(path_str)
    data = path.read_bytes()
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc, data, path.parent


def _check_keys(doc: Mapping, allowed: set[str], required: set[str], what: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{what}: unknown keys {unknown}; allowed: {sorted(allowed)}")
    missing = sorted(required - set(doc))
    if missing:
        raise ConfigError(f"{what}: missing required keys {missing}")


def _resolve(base: Path, p) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _load_taxonomy(doc: Mapping, base: Path) -> Taxonomy:
    if "taxonomy" in doc and doc["taxonomy"] is not None:
        return load_taxonomy_file(_resolve(base, doc["taxonomy"]))
    return load_default_taxonomy()


def _check_merge_map(merge_map, tax: Taxonomy):
    if merge_map is None:
        return None
    out = {}
    for src, dst in merge_map.items():
        if src not in tax.leaf_order or dst not in tax.leaf_order:
            raise ConfigError(f"merge_map entries must be leaf ids, got {src!r} -> {dst!r}")
        out[str(src)] = str(dst)
    return out


def _write_manifest(out: Path, command: str, config_bytes: bytes | None,
                    seed: int | None, inputs: Sequence, started: float) -> None:
    outputs = sorted(
        str(p.relative_to(out))
        for p in out.rglob("*")
        if p.is_file() and p.name != "runmanifest.json"
    )
    doc = {
        "command": command,
        "config_hash": None
        if config_bytes is None
        else hashlib.sha256(config_bytes).hexdigest(),
        "inputs": sorted(str(i) for i in inputs),
        "outputs": outputs,
        "seed": seed,
        "tool_version": __version__,
        "wall_time_s": time.monotonic() - started,
    }
    tmp = out / "runmanifest.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out / "runmanifest.json")


# ------------------------------------------------------------- commands


def cmd_taxonomy_check(args) -> int:
    if args.path is None:
        tax = load_default_taxonomy()
        print("bundled default taxonomy")
    else:
        tax = load_taxonomy_file(args.path)
        print(args.path)
    lay = tax.logit_layout()

    def walk(node_id: str, depth: int) -> None:
        node = tax.node(node_id)
        mark = "" if node.children else "  (leaf)"
        print("  " * depth + node_id + mark)
        for child in node.children:
            walk(child, depth + 1)

    walk(tax.root, 0)
    print(
        f"{len(tax.node_order)} nodes, {len(tax.leaf_order)} leaves, "
        f"max level {tax.max_level()}"
    )
    print(f"{len(lay.segments)} groups, {lay.total_logits} logits")
    for seg in lay.segments:
        span = f"[{seg.offset}..{seg.offset + seg.length})"
        print(f"  {seg.group} (level {seg.level}): {list(seg.children)} -> logits {span}")
    return 0


_GEN_KEYS = {
    "kind", "seed", "slides_per_leaf", "patches_per_slide", "d", "image_hw",
    "class_separation", "reactive_ambiguity", "slide_effect", "noise",
    "min_hue_gap", "taxonomy",
}


def cmd_data_gen(args) -> int:
    started = time.monotonic()
    doc, raw, base = _load_config(args.config)
    _check_keys(doc, _GEN_KEYS, set(), "data-gen config")
    kind = doc.get("kind", "images")
    if kind not in ("features", "images"):
        raise ConfigError(f"kind must be 'features' or 'images', got {kind!r}")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 7))
    kwargs = dict(
        seed=seed,
        slides_per_leaf=int(doc.get("slides_per_leaf", 12)),
        patches_per_slide=tuple(doc.get("patches_per_slide", (20, 20))),
        class_separation=float(doc.get("class_separation", 3.0)),
        reactive_ambiguity=float(doc.get("reactive_ambiguity", 0.5)),
        slide_effect=float(doc.get("slide_effect", 1.0)),
        noise=float(doc.get("noise", 8.0)),
        min_hue_gap=float(doc.get("min_hue_gap", 0.1)),
    )
    if kind == "images":
        kwargs["image_hw"] = tuple(doc.get("image_hw", (32, 32)))
    else:
        kwargs["d"] = int(doc.get("d", 32))
    cfg = GenConfig(**kwargs)
    tax = _load_taxonomy(doc, base)
    ds = gen_images(tax, cfg) if kind == "images" else gen_features(tax, cfg)
    out = Path(args.out)
    save_dataset(ds, out)
    _write_manifest(out, "data-gen", raw, seed, [args.config], started)
    _say(args, f"wrote {ds.n_samples()} patches across {len(ds.slides)} slides to {out}")
    return 0


_TRAIN_KEYS = {"dataset", "taxonomy", "modes", "k", "merge_map", "train"}


def cmd_train(args) -> int:
    started = time.monotonic()
    doc, raw, base = _load_config(args.config)
    _check_keys(doc, _TRAIN_KEYS, {"dataset"}, "train config")
    ds = load_dataset(_resolve(base, doc["dataset"]))
    tax = ds.taxonomy if doc.get("taxonomy") is None else _load_taxonomy(doc, base)
    modes = list(doc.get("modes", ["flat", "hier_multilabel"]))
    if not modes or len(set(modes)) != len(modes):
        raise ConfigError(f"modes must be a non-empty list without duplicates, got {modes}")
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected a subset of {MODES}")
    k = int(doc.get("k", 5))
    merge_map = _check_merge_map(doc.get("merge_map"), tax)
    train_doc = dict(doc.get("train", {}))
    if args.seed is not None:
        train_doc["seed"] = args.seed
    tcfg = TrainConfig.from_dict(train_doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for mode in modes:
        progress = None if args.quiet else lambda msg: print(f"  {msg}")
        _say(args, f"mode {mode}: {k}-fold cross-validation")
        res = run_experiment(ds, tax, tcfg, k, mode, merge_map=merge_map, progress=progress)
        results[mode] = res
        mode_dir = out / mode
        mode_dir.mkdir(parents=True, exist_ok=True)
        (mode_dir / "summary.json").write_text(experiment_json(res) + "\n")
        (mode_dir / "summary.txt").write_text(comparison_text({mode: res}, tax))
        for fold in res.folds:
            fold_dir = mode_dir / f"fold{fold.fold}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            (fold_dir / "patch_report.json").write_text(fold.patch_report.to_json() + "\n")
            (fold_dir / "patch_report.txt").write_text(fold.patch_report.to_text())
            (fold_dir / "slide_report.json").write_text(fold.slide_report.to_json() + "\n")
            (fold_dir / "slide_report.txt").write_text(fold.slide_report.to_text())
            (fold_dir / "stages.json").write_text(
                json.dumps(
                    {"patch": fold.patch_stages, "slide": fold.slide_stages}, indent=2
                )
                + "\n"
            )
            for member, ckpt in fold.checkpoints.items():
                save_checkpoint(fold_dir / f"checkpoint_{member}.ckpt", ckpt)
            for member, rows in fold.curves.items():
                write_curve_csv(fold_dir / f"curve_{member}.csv", rows)
            save_confusion_png(
                fold.patch_report,
                fold_dir / "confusion_patch.png",
                f"{mode} fold {fold.fold}: patch confusion",
            )
            save_curves_png(
                fold.curves, fold_dir / "curves.png", f"{mode} fold {fold.fold}: loss"
            )
    (out / "comparison.txt").write_text(comparison_text(results, tax))
    (out / "comparison.json").write_text(
        json.dumps({m: experiment_to_doc(r)["summary"] for m, r in results.items()},
                   indent=2)
        + "\n"
    )
    per_mode_f1 = {}
    for mode, res in results.items():
        sums: dict[str, list[float]] = {}
        for fold in res.folds:
            for cls, prf in fold.patch_report.per_class.items():
                sums.setdefault(cls, []).append(prf.f1)
        per_mode_f1[mode] = {cls: sum(v) / len(v) for cls, v in sums.items()}
    save_per_class_f1_png(
        per_mode_f1, out / "per_class_f1.png", "per-class F1 (patch, fold mean)"
    )
    _write_manifest(out, "train", raw, tcfg.seed,
                    [args.config, str(_resolve(base, doc["dataset"]))], started)
    if not args.quiet:
        print(comparison_text(results, tax))
    return 0


_EVAL_KEYS = {"dataset", "taxonomy", "mode", "checkpoints", "slides", "merge_map"}


def cmd_eval(args) -> int:
    started = time.monotonic()
    doc, raw, base = _load_config(args.config)
    _check_keys(doc, _EVAL_KEYS, {"dataset", "mode", "checkpoints"}, "eval config")
    ds = load_dataset(_resolve(base, doc["dataset"]))
    tax = ds.taxonomy if doc.get("taxonomy") is None else _load_taxonomy(doc, base)
    if tax.fingerprint() != ds.taxonomy.fingerprint():
        raise ConfigError("taxonomy override does not match the dataset's taxonomy")
    mode = doc["mode"]
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    ckpt_doc = doc["checkpoints"]
    if not isinstance(ckpt_doc, dict) or not ckpt_doc:
        raise ConfigError("checkpoints must be a non-empty object of member -> path")
    members = {name: load_checkpoint(_resolve(base, p)) for name, p in ckpt_doc.items()}
    merge_map = _check_merge_map(doc.get("merge_map"), tax)
    slide_ids = doc.get("slides")
    if slide_ids is None:
        slide_ids = [s.slide_id for s in ds.slides]
    x, leaves, slide_of = design_matrix(ds, slide_ids)
    preds, scores = evaluate_patches(tax, mode, members, x)
    pred_paths = [p.path for p in preds]
    patch_report = compute_report(pred_paths, leaves, tax, scores=scores, merge_map=merge_map)
    votes = slide_mode(slide_of, [p.path.leaf for p in preds],
                       [p.confidence for p in preds], tax)
    truth_map = {s.slide_id: s.leaf for s in ds.slides}
    slide_report = slide_metrics(votes, truth_map, tax, merge_map=merge_map)
    patch_stages = stage_accuracies(pred_paths, leaves, tax)
    slide_stages = stage_accuracies(
        [v.winner for v in votes], [truth_map[v.slide_id] for v in votes], tax
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "patch_report.json").write_text(patch_report.to_json() + "\n")
    (out / "patch_report.txt").write_text(patch_report.to_text())
    (out / "slide_report.json").write_text(slide_report.to_json() + "\n")
    (out / "slide_report.txt").write_text(slide_report.to_text())
    (out / "stages.json").write_text(
        json.dumps({"patch": patch_stages, "slide": slide_stages}, indent=2) + "\n"
    )
    (out / "report.txt").write_text(
        eval_report_text(patch_report, slide_report, patch_stages, slide_stages)
    )
    sample_ids = []
    counters: dict[str, int] = {}
    for sid in slide_of:
        counters[sid] = counters.get(sid, 0)
        sample_ids.append(f"{sid}/{counters[sid]}")
        counters[sid] += 1
    write_predictions_csv(out / "predictions.csv", sample_ids, slide_of, preds, tax)
    write_slide_votes_csv(out / "slide_votes.csv", votes)
    save_confusion_png(patch_report, out / "confusion_patch.png", "patch confusion")
    save_confusion_png(slide_report, out / "confusion_slide.png", "slide confusion")
    save_per_class_f1_png(
        {mode: {c: v.f1 for c, v in patch_report.per_class.items()}},
        out / "per_class_f1.png",
        "per-class F1 (patch)",
    )
    _write_manifest(out, "eval", raw, args.seed,
                    [args.config, str(_resolve(base, doc["dataset"]))], started)
    _say(
        args,
        f"patch: acc {patch_report.accuracy:.4f} hF {patch_report.h_f1:.4f}  |  "
        f"slide: acc {slide_report.accuracy:.4f} hF {slide_report.h_f1:.4f}",
    )
    return 0


_CAM_KEYS = {"dataset", "taxonomy", "checkpoint", "slides"}


def cmd_cam(args) -> int:
    started = time.monotonic()
    doc, raw, base = _load_config(args.config)
    _check_keys(doc, _CAM_KEYS, {"dataset", "checkpoint"}, "cam config")
    ds = load_dataset(_resolve(base, doc["dataset"]))
    tax = ds.taxonomy if doc.get("taxonomy") is None else _load_taxonomy(doc, base)
    ckpt = load_checkpoint(_resolve(base, doc["checkpoint"]))
    out = Path(args.out)
    report = cam_batch_report(ckpt, ds, tax, out, slide_ids=doc.get("slides"))
    _write_manifest(out, "cam", raw, args.seed,
                    [args.config, str(_resolve(base, doc["dataset"]))], started)
    def as_text(rate):
        return "n/a" if rate is None else f"{rate:.4f}"
    _say(args, f"hit rate (correct): {as_text(report.hit_rate_correct)}")
    _say(args, f"hit rate (incorrect): {as_text(report.hit_rate_incorrect)}")
    if report.n_zero_maps:
        _say(args, f"warning: {report.n_zero_maps} all-zero maps")
    return 0


# --------------------------------------------------------------- parser


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiercls",
        description="hierarchical multi-label classification toolkit",
    )
    parser.add_argument("--version", action="version", version=f"hiercls {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    tc = sub.add_parser("taxonomy-check", help="parse and describe a taxonomy file")
    tc.add_argument("path", nargs="?", default=None,
                    help="taxonomy file (JSON or indented); bundled default if omitted")
    tc.set_defaults(func=cmd_taxonomy_check)

    for name, func, help_text in (
        ("data-gen", cmd_data_gen, "generate a synthetic dataset"),
        ("train", cmd_train, "cross-validated training with reports"),
        ("eval", cmd_eval, "evaluate checkpoints on a dataset"),
        ("cam", cmd_cam, "write attribution heatmaps for a tiny CNN checkpoint"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed")
        p.add_argument("--quiet", action="store_true", help="errors only")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TaxonomyError as exc:
        print(f"error: invalid taxonomy: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except HierclsError as exc:
        print(f"error: invariant violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
