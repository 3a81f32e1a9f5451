"""Decoding: from raw scores to leaf predictions.

Four routes exist. decode_flat is a plain argmax over leaf scores.
decode_greedy descends the tree one sibling group at a time, the default
because it mirrors how a clinician narrows a diagnosis. decode_marginal
picks the leaf with the highest exact marginal. compose_base stitches
one predictor per sibling group into a greedy decoder, invoking members
lazily so off-path predictors are never called.

Ties always break toward the lower child index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from hiercls.errors import LayoutMismatchError
from hiercls.objective import softmax
from hiercls.taxonomy import PathLabel, Taxonomy

Predictor = Callable[[object], np.ndarray]


@dataclass(frozen=True, eq=False)
class Prediction:
    """A decoded leaf with whatever probability views the decoder had.

    leaf_probs: probability per leaf in leaf_order, or None when the
    decoder never scored every group (partial compose_base routing).
    group_probs: per-group conditional distributions keyed by group id,
    or None for flat decoding where no groups exist.
    """

    path: PathLabel
    confidence: float
    leaf_probs: np.ndarray | None
    group_probs: dict[str, np.ndarray] | None


def _as_groups(g, layout) -> list[np.ndarray]:
    if isinstance(g, np.ndarray) and g.ndim == 1 and g.shape == (layout.total_logits,):
        return [
            np.asarray(g[s.offset : s.offset + s.length], dtype=np.float64)
            for s in layout.segments
        ]
    if len(g) != len(layout.segments):
        raise LayoutMismatchError(
            f"expected {len(layout.segments)} score groups, got {len(g)}"
        )
    out = []
    for seg, scores in zip(layout.segments, g):
        arr = np.asarray(scores, dtype=np.float64)
        if arr.shape != (seg.length,):
            raise LayoutMismatchError(
                f"group {seg.group!r} expects {seg.length} scores, got shape {arr.shape}"
            )
        out.append(arr)
    return out


def decode_flat(scores: np.ndarray, tax: Taxonomy) -> Prediction:
    """Argmax over leaf softmax; ties break to the lowest leaf_order index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(tax.leaf_order)
    if scores.shape != (n,):
        raise LayoutMismatchError(f"expected {n} leaf scores, got shape {scores.shape}")
    probs = softmax(scores)
    i = int(np.argmax(probs))
    leaf = tax.leaf_order[i]
    return Prediction(
        path=tax.leaf_path(leaf),
        confidence=float(probs[i]),
        leaf_probs=probs,
        group_probs=None,
    )


def _group_probs(groups: Sequence[np.ndarray], tax: Taxonomy) -> dict[str, np.ndarray]:
    return {
        seg.group: softmax(g)
        for seg, g in zip(tax.logit_layout().segments, groups)
    }


def _marginals_from_groups(
    probs: dict[str, np.ndarray], tax: Taxonomy
) -> dict[str, float]:
    """Marginal probability per node, top-down; only nodes whose every
    ancestor group was scored get a value."""
    lay = tax.logit_layout()
    marg = {tax.root: 1.0}
    for seg in lay.segments:
        if seg.group not in probs or seg.group not in marg:
            continue
        p = probs[seg.group]
        for j, child in enumerate(seg.children):
            marg[child] = marg[seg.group] * float(p[j])
    return marg


def leaf_marginals(groups, tax: Taxonomy) -> np.ndarray:
    """Exact leaf distribution: product of on-path conditionals per leaf.

    Sums to 1 within 1e-9 because the per-group conditionals each sum to
    1 and every root-to-leaf path ends at a leaf.
    """
    groups = _as_groups(groups, tax.logit_layout())
    marg = _marginals_from_groups(_group_probs(groups, tax), tax)
    return np.array([marg[leaf] for leaf in tax.leaf_order])


def decode_greedy(groups, tax: Taxonomy) -> Prediction:
    """Top-down descent: argmax child per group until a leaf.

    Confidence is the product of the conditional probabilities actually
    chosen. group_probs carries every group, on-path or not, so reports
    can show the broader-class probabilities alongside the leaf call.
    """
    groups = _as_groups(groups, tax.logit_layout())
    probs = _group_probs(groups, tax)
    lay = tax.logit_layout()
    node = tax.root
    conf = 1.0
    while not tax.node(node).is_leaf:
        seg = lay.segment_for(node)
        p = probs[node]
        j = int(np.argmax(p))
        conf *= float(p[j])
        node = seg.children[j]
    marg = _marginals_from_groups(probs, tax)
    return Prediction(
        path=tax.leaf_path(node),
        confidence=conf,
        leaf_probs=np.array([marg[leaf] for leaf in tax.leaf_order]),
        group_probs=probs,
    )


def decode_marginal(groups, tax: Taxonomy) -> Prediction:
    """Pick the leaf with the largest exact marginal."""
    groups = _as_groups(groups, tax.logit_layout())
    probs = _group_probs(groups, tax)
    marg = _marginals_from_groups(probs, tax)
    leaf_probs = np.array([marg[leaf] for leaf in tax.leaf_order])
    i = int(np.argmax(leaf_probs))
    leaf = tax.leaf_order[i]
    return Prediction(
        path=tax.leaf_path(leaf),
        confidence=float(leaf_probs[i]),
        leaf_probs=leaf_probs,
        group_probs=probs,
    )


def compose_base(
    level1: Predictor,
    level2: Predictor,
    acute3: Predictor,
    chronic3: Predictor,
    sample,
    tax: Taxonomy,
) -> Prediction:
    """Merge four per-group predictors into one greedy decoder.

    Predictors map to sibling groups in group_order. Members are called
    only when routing reaches their group; an early leaf leaves the rest
    untouched. leaf_probs stays None unless every group was scored.
    """
    lay = tax.logit_layout()
    members = (level1, level2, acute3, chronic3)
    if len(lay.segments) != len(members):
        raise LayoutMismatchError(
            f"taxonomy has {len(lay.segments)} sibling groups; "
            f"compose_base wires exactly {len(members)}"
        )
    by_group = {seg.group: m for seg, m in zip(lay.segments, members)}
    probs: dict[str, np.ndarray] = {}
    node = tax.root
    conf = 1.0
    while not tax.node(node).is_leaf:
        seg = lay.segment_for(node)
        scores = np.asarray(by_group[node](sample), dtype=np.float64)
        if scores.shape != (seg.length,):
            raise LayoutMismatchError(
                f"predictor for group {node!r} returned shape {scores.shape}, "
                f"expected ({seg.length},)"
            )
        p = softmax(scores)
        probs[node] = p
        j = int(np.argmax(p))
        conf *= float(p[j])
        node = seg.children[j]
    leaf_probs = None
    if len(probs) == len(lay.segments):
        marg = _marginals_from_groups(probs, tax)
        leaf_probs = np.array([marg[leaf] for leaf in tax.leaf_order])
    return Prediction(
        path=tax.leaf_path(node),
        confidence=conf,
        leaf_probs=leaf_probs,
        group_probs=probs,
    )


def node_marginals(pred: Prediction, tax: Taxonomy) -> dict[str, float | None]:
    """Marginal probability per non-root node, None where unknown.

    Grouped decoders use products of conditionals; flat predictions sum
    descendant leaves to fill in the internal nodes.
    """
    out: dict[str, float | None] = {n: None for n in tax.node_order if n != tax.root}
    if pred.group_probs is not None:
        marg = _marginals_from_groups(pred.group_probs, tax)
        for node in out:
            if node in marg:
                out[node] = marg[node]
        return out
    if pred.leaf_probs is not None:
        totals: dict[str, float] = {}
        for node in reversed(tax.node_order):
            n = tax.node(node)
            if n.is_leaf:
                totals[node] = float(pred.leaf_probs[tax.leaf_order.index(node)])
            else:
                totals[node] = sum(totals[c] for c in n.children)
        for node in out:
            out[node] = totals[node]
    return out


def write_predictions_csv(path, sample_ids, slide_ids, preds, tax: Taxonomy) -> None:
    """One row per sample: id, slide, decoded leaf, confidence, then the
    marginal probability of every non-root node (blank when the decoder
    never scored that part of the tree)."""
    if not (len(sample_ids) == len(slide_ids) == len(preds)):
        raise ValueError("sample_ids, slide_ids, and preds must align")
    nodes = [n for n in tax.node_order if n != tax.root]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "slide_id", "decoded_leaf", "confidence"] + nodes)
        for sid, slide, pred in zip(sample_ids, slide_ids, preds):
            marg = node_marginals(pred, tax)
            row = [sid, slide, pred.path.leaf, repr(float(pred.confidence))]
            row += ["" if marg[n] is None else repr(float(marg[n])) for n in nodes]
            writer.writerow(row)


def read_predictions_csv(path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
