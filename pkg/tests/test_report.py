"""Text tables, JSON documents, and figure files built from results."""

import json

import numpy as np
import pytest

from hiercls.data import GenConfig, gen_features, grouped_kfold
from hiercls.metrics import compute_report
from hiercls.plots import save_confusion_png, save_curves_png, save_per_class_f1_png
from hiercls.report import (
    comparison_text,
    eval_report_text,
    experiment_json,
    experiment_to_doc,
    mode_summary_text,
    per_class_f1_text,
    stage_table_text,
)
from hiercls.taxonomy import load_default_taxonomy
from hiercls.trainer import EpochRow, TrainConfig, run_experiment


@pytest.fixture(scope="module")
def tax():
    return load_default_taxonomy()


@pytest.fixture(scope="module")
def results(tax):
    ds = gen_features(tax, GenConfig(
        seed=5, slides_per_leaf=2, patches_per_slide=(4, 4), d=6,
        class_separation=8.0, slide_effect=0.3,
    ))
    cfg = TrainConfig(model_kind="linear", lr=0.05, epochs=4, batch_size=16, seed=3)
    return {
        mode: run_experiment(ds, tax, cfg, 2, mode)
        for mode in ("flat", "hier_multilabel")
    }


def test_experiment_doc_shape(results):
    doc = experiment_to_doc(results["flat"])
    assert doc["mode"] == "flat"
    assert doc["k"] == 2
    assert "patch_accuracy" in doc["summary"]
    assert set(doc["summary"]["patch_accuracy"]) == {"mean", "std"}
    assert len(doc["folds"]) == 2
    fold = doc["folds"][0]
    assert set(fold) == {"fold", "val_slides", "patch", "slide", "patch_stages", "slide_stages"}
    assert "accuracy" in fold["patch"]
    assert "leaves" in fold["patch_stages"]


def test_experiment_json_round_trips(results):
    text = experiment_json(results["hier_multilabel"])
    doc = json.loads(text)
    assert doc == experiment_to_doc(results["hier_multilabel"])


def test_mode_summary_lists_all_modes(results, tax):
    text = mode_summary_text(results)
    assert "flat" in text and "hier_multilabel" in text
    assert "±" in text
    assert "patch acc" in text


def test_stage_table_has_group_rows(results, tax):
    text = stage_table_text(results, tax, "patch")
    for row in ("Blood", "Leukemia", "Acute", "Chronic", "leaves"):
        assert row in text
    with pytest.raises(ValueError):
        stage_table_text(results, tax, "pixel")


def test_per_class_table_lists_leaves(results, tax):
    text = per_class_f1_text(results)
    for leaf in tax.leaf_order:
        assert leaf in text


def test_comparison_text_bundles_everything(results, tax):
    text = comparison_text(results, tax)
    assert "mode summary" in text
    assert "stage accuracies, patch level" in text
    assert "stage accuracies, slide level" in text
    assert "per-class F1" in text


def test_single_mode_single_fold_cells_have_no_std(results, tax):
    one = {"flat": results["flat"]}
    text = mode_summary_text(one)
    assert "flat" in text


def test_eval_report_text_sections(tax):
    preds = ["ALL", "AML", "Normal"]
    truths = ["ALL", "APML", "Normal"]
    rep = compute_report(preds, truths, tax)
    stages = {"Blood": 1.0, "Leukemia": 0.5, "Acute": 0.5, "Chronic": None, "leaves": 2 / 3}
    text = eval_report_text(rep, rep, stages, stages)
    assert "== patch level ==" in text
    assert "== slide level ==" in text


# ------------------------------------------------------------------ plots


def _is_png(path):
    return path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_confusion_png_written_and_stable(results, tmp_path):
    rep = results["flat"].folds[0].patch_report
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    save_confusion_png(rep, a, "confusion")
    save_confusion_png(rep, b, "confusion")
    assert _is_png(a)
    assert a.read_bytes() == b.read_bytes()


def test_curves_png_written(results, tmp_path):
    curves = {
        "model": (
            EpochRow(epoch=0, train_loss=1.2, val_loss=1.1, val_acc=0.3),
            EpochRow(epoch=1, train_loss=0.9, val_loss=1.0, val_acc=0.4),
        ),
    }
    path = tmp_path / "curves.png"
    save_curves_png(curves, path, "loss")
    assert _is_png(path)


def test_per_class_f1_png_written(tmp_path):
    per_mode = {
        "flat": {"ALL": 0.8, "AML": 0.5, "Normal": 0.9},
        "hier_multilabel": {"ALL": 0.9, "AML": 0.6, "Normal": 0.9},
    }
    path = tmp_path / "f1.png"
    save_per_class_f1_png(per_mode, path, "per-class F1")
    assert _is_png(path)


def test_curves_png_accepts_val_free_rows(tmp_path):
    curves = {"Chronic": (EpochRow(epoch=0, train_loss=0.7, val_loss=None, val_acc=None),)}
    path = tmp_path / "c.png"
    save_curves_png(curves, path, "loss")
    assert _is_png(path)
