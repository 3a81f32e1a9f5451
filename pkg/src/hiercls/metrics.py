"""Flat and hierarchical evaluation.

Flat metrics treat leaves as ordinary classes. The hierarchical scores
credit partial correctness: each sample contributes its predicted and
true ancestor sets (root excluded), and precision/recall are micro-sums
of intersection sizes over the whole evaluation set.

An optional merge map relabels leaves at report level (for example AML
and APML into one row) without touching the taxonomy; hierarchical
scores always run on the unmerged labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from hiercls.errors import TaxonomyError
from hiercls.taxonomy import PathLabel, Taxonomy


@dataclass(frozen=True)
class ClassPRF:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class FlatMetrics:
    accuracy: float
    macro_f1: float        # mean F1 over classes present in the truths
    macro_f1_all: float    # mean F1 over every class, absent ones scoring 0
    per_class: dict[str, ClassPRF]


def merged_class_order(tax: Taxonomy, merge_map: Mapping[str, str] | None) -> tuple[str, ...]:
    """leaf_order with merged members collapsed at their first position."""
    if not merge_map:
        return tax.leaf_order
    out: list[str] = []
    for leaf in tax.leaf_order:
        label = merge_map.get(leaf, leaf)
        if label not in out:
            out.append(label)
    return tuple(out)


def _relabel(leaves: Sequence[str], merge_map: Mapping[str, str] | None) -> list[str]:
    if not merge_map:
        return list(leaves)
    return [merge_map.get(leaf, leaf) for leaf in leaves]


def _as_leaf(item, tax: Taxonomy) -> str:
    if isinstance(item, PathLabel):
        expected = tax.leaf_path(item.leaf)
        if item.path != expected.path:
            raise TaxonomyError(
                f"path {item.path} for leaf {item.leaf!r} does not belong to this taxonomy"
            )
        return item.leaf
    tax.leaf_path(item)  # validates existence and leafness
    return item


def confusion_matrix(
    preds: Sequence[str],
    truths: Sequence[str],
    tax: Taxonomy,
    merge_map: Mapping[str, str] | None = None,
) -> np.ndarray:
    """Counts with rows = truth, columns = prediction, in leaf_order."""
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(truths)} truths")
    if not truths:
        raise ValueError("need at least one sample")
    order = merged_class_order(tax, merge_map)
    if merge_map is None:
        for leaf in set(preds) | set(truths):
            tax.leaf_path(leaf)
    index = {c: i for i, c in enumerate(order)}
    m = np.zeros((len(order), len(order)), dtype=np.int64)
    for p, t in zip(_relabel(preds, merge_map), _relabel(truths, merge_map)):
        if p not in index or t not in index:
            raise TaxonomyError(f"unknown class label {p if p not in index else t!r}")
        m[index[t], index[p]] += 1
    return m


def flat_metrics(
    preds: Sequence[str],
    truths: Sequence[str],
    tax: Taxonomy,
    merge_map: Mapping[str, str] | None = None,
) -> FlatMetrics:
    """Accuracy plus per-class precision/recall/F1 with 0/0 -> 0."""
    m = confusion_matrix(preds, truths, tax, merge_map)
    order = merged_class_order(tax, merge_map)
    n = int(np.sum(m))
    accuracy = float(np.trace(m)) / n
    per_class: dict[str, ClassPRF] = {}
    for i, cls in enumerate(order):
        tp = float(m[i, i])
        fp = float(np.sum(m[:, i])) - tp
        fn = float(np.sum(m[i, :])) - tp
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class[cls] = ClassPRF(prec, rec, f1)
    row_sums = np.sum(m, axis=1)
    present = [order[i] for i in range(len(order)) if row_sums[i] > 0]
    macro = float(np.mean([per_class[c].f1 for c in present]))
    macro_all = float(np.mean([per_class[c].f1 for c in order]))
    return FlatMetrics(accuracy, macro, macro_all, per_class)


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_macro(
    scores: np.ndarray,
    truths: Sequence[str],
    tax: Taxonomy,
    class_order: Sequence[str] | None = None,
) -> tuple[float, tuple[str, ...]]:
    """Macro one-vs-rest AUROC via the Mann-Whitney rank statistic.

    Per class: AUC = (R_pos - n_pos(n_pos+1)/2) / (n_pos n_neg), with
    midranks so ties count half. Classes without both a positive and a
    negative are skipped and returned for reporting. Depends only on the
    ordering of each column, so any strictly increasing per-column
    transform leaves the result unchanged.
    """
    order = tuple(class_order) if class_order is not None else tax.leaf_order
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != len(order):
        raise ValueError(
            f"scores must be (n_samples, {len(order)}), got {scores.shape}"
        )
    if len(truths) != scores.shape[0]:
        raise ValueError("scores and truths must align")
    if len(set(truths)) < 2:
        raise ValueError("AUROC needs at least 2 distinct truth classes")
    per: list[float] = []
    skipped: list[str] = []
    for j, cls in enumerate(order):
        labels = np.array([t == cls for t in truths])
        n_pos = int(np.sum(labels))
        n_neg = labels.size - n_pos
        if n_pos == 0 or n_neg == 0:
            skipped.append(cls)
            continue
        ranks = _midranks(scores[:, j])
        u = float(np.sum(ranks[labels])) - n_pos * (n_pos + 1) / 2.0
        per.append(u / (n_pos * n_neg))
    return float(np.mean(per)), tuple(skipped)


def hierarchical_prf(
    preds: Sequence, truths: Sequence, tax: Taxonomy
) -> tuple[float, float, float]:
    """Micro-summed hierarchical precision, recall, and F1.

    Accepts leaf ids or PathLabels. Numerators and denominators are
    summed over samples in order (exact integer arithmetic), then
    divided once.
    """
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(truths)} truths")
    if not truths:
        raise ValueError("need at least one sample")
    inter = denom_p = denom_t = 0
    for p, t in zip(preds, truths):
        ps = tax.augmented_set(_as_leaf(p, tax))
        ts = tax.augmented_set(_as_leaf(t, tax))
        inter += len(ps & ts)
        denom_p += len(ps)
        denom_t += len(ts)
    hp = inter / denom_p if denom_p else 0.0
    hr = inter / denom_t if denom_t else 0.0
    hf = 2 * hp * hr / (hp + hr) if hp + hr > 0 else 0.0
    return hp, hr, hf


def stage_accuracies(
    preds: Sequence[str], truths: Sequence[str], tax: Taxonomy
) -> dict[str, float | None]:
    """Per-sibling-group accuracy restricted to samples whose truth
    passes through that group, plus exact leaf accuracy under "leaves".

    A prediction whose path never reaches an eligible group counts as
    wrong there. Groups with no eligible truths report None.
    """
    if len(preds) != len(truths):
        raise ValueError("length mismatch")
    lay = tax.logit_layout()
    pred_sets = [tax.augmented_set(_as_leaf(p, tax)) for p in preds]
    true_sets = [tax.augmented_set(_as_leaf(t, tax)) for t in truths]
    out: dict[str, float | None] = {}
    for seg in lay.segments:
        kids = set(seg.children)
        hits = total = 0
        for ps, ts in zip(pred_sets, true_sets):
            true_child = kids & ts
            if not true_child:
                continue  # truth does not pass through this group
            total += 1
            if kids & ps == true_child:
                hits += 1
        out[seg.group] = hits / total if total else None
    exact = sum(1 for p, t in zip(preds, truths) if _as_leaf(p, tax) == _as_leaf(t, tax))
    out["leaves"] = exact / len(truths)
    return out


@dataclass(frozen=True)
class MetricReport:
    n_samples: int
    accuracy: float
    macro_f1: float
    macro_f1_all: float
    per_class: dict[str, ClassPRF]
    auroc_macro: float | None
    auroc_skipped: tuple[str, ...]
    h_precision: float
    h_recall: float
    h_f1: float
    confusion: np.ndarray
    class_order: tuple[str, ...]

    def to_doc(self) -> dict:
        doc = {
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_f1_all": self.macro_f1_all,
            "macro_f1_note": "macro_f1 averages truth-present classes only",
            "per_class": {
                c: {"precision": v.precision, "recall": v.recall, "f1": v.f1}
                for c, v in self.per_class.items()
            },
            "auroc_macro": self.auroc_macro,
            "auroc_skipped": list(self.auroc_skipped),
            "h_precision": self.h_precision,
            "h_recall": self.h_recall,
            "h_f1": self.h_f1,
            "confusion": {
                "labels": list(self.class_order),
                "rows_are_truth": True,
                "counts": self.confusion.tolist(),
            },
        }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2)

    def to_text(self) -> str:
        lines = []
        fmt = "{:<16}{:>10}"
        lines.append(fmt.format("samples", self.n_samples))
        lines.append(fmt.format("accuracy", f"{self.accuracy:.4f}"))
        lines.append(fmt.format("macro-F1", f"{self.macro_f1:.4f}"))
        lines.append(fmt.format("macro-F1(all)", f"{self.macro_f1_all:.4f}"))
        if self.auroc_macro is not None:
            lines.append(fmt.format("AUROC", f"{self.auroc_macro:.4f}"))
            if self.auroc_skipped:
                lines.append(fmt.format("AUROC skipped", ", ".join(self.auroc_skipped)))
        lines.append(fmt.format("hP", f"{self.h_precision:.4f}"))
        lines.append(fmt.format("hR", f"{self.h_recall:.4f}"))
        lines.append(fmt.format("hF", f"{self.h_f1:.4f}"))
        lines.append("")
        width = max(len(c) for c in self.class_order)
        head = "{:<{w}}  {:>9}  {:>9}  {:>9}".format(
            "class", "precision", "recall", "f1", w=width
        )
        lines.append(head)
        for c in self.class_order:
            v = self.per_class[c]
            lines.append(
                "{:<{w}}  {:>9.4f}  {:>9.4f}  {:>9.4f}".format(
                    c, v.precision, v.recall, v.f1, w=width
                )
            )
        lines.append("")
        lines.append("confusion (rows = truth):")
        colw = max(width, 5)
        lines.append(" " * (width + 2) + "".join(f"{c:>{colw + 1}}" for c in self.class_order))
        for i, c in enumerate(self.class_order):
            row = "".join(f"{int(v):>{colw + 1}}" for v in self.confusion[i])
            lines.append(f"{c:<{width}}  " + row)
        return "\n".join(lines) + "\n"


def compute_report(
    preds: Sequence,
    truths: Sequence,
    tax: Taxonomy,
    scores: np.ndarray | None = None,
    merge_map: Mapping[str, str] | None = None,
) -> MetricReport:
    """Full evaluation bundle for one prediction set.

    scores, when given, are per-leaf probabilities aligned with
    leaf_order; under a merge map the member columns are summed.
    Hierarchical scores always use the unmerged leaves.
    """
    pred_leaves = [_as_leaf(p, tax) for p in preds]
    true_leaves = [_as_leaf(t, tax) for t in truths]
    fm = flat_metrics(pred_leaves, true_leaves, tax, merge_map)
    conf = confusion_matrix(pred_leaves, true_leaves, tax, merge_map)
    order = merged_class_order(tax, merge_map)
    auroc = None
    skipped: tuple[str, ...] = ()
    if scores is not None:
        s = np.asarray(scores, dtype=np.float64)
        if merge_map:
            cols = []
            for cls in order:
                members = [i for i, leaf in enumerate(tax.leaf_order)
                           if merge_map.get(leaf, leaf) == cls]
                cols.append(np.sum(s[:, members], axis=1))
            s = np.stack(cols, axis=1)
        auroc, skipped = auroc_macro(s, _relabel(true_leaves, merge_map), tax, order)
    hp, hr, hf = hierarchical_prf(pred_leaves, true_leaves, tax)
    return MetricReport(
        n_samples=len(true_leaves),
        accuracy=fm.accuracy,
        macro_f1=fm.macro_f1,
        macro_f1_all=fm.macro_f1_all,
        per_class=fm.per_class,
        auroc_macro=auroc,
        auroc_skipped=skipped,
        h_precision=hp,
        h_recall=hr,
        h_f1=hf,
        confusion=conf,
        class_order=order,
    )
