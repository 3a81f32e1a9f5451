"""Per-slide diagnosis by majority vote over patch predictions.

A slide's label is the mode of its patch-level leaf predictions. Ties
fall back first to the highest mean confidence among the tied leaves,
then to the lowest leaf_order index; which rule fired is recorded so
reports can show how often votes were actually contested.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from hiercls.metrics import MetricReport, compute_report
from hiercls.taxonomy import Taxonomy


@dataclass(frozen=True)
class SlideVote:
    slide_id: str
    patch_leaves: tuple[str, ...]
    patch_confidences: tuple[float, ...]
    winner: str
    support: float  # winner count / patch count
    tie_break_used: int  # 0 = plain majority, 1 = mean confidence, 2 = leaf order


def slide_mode(
    slide_ids: Sequence[str],
    leaves: Sequence[str],
    confidences: Sequence[float],
    tax: Taxonomy,
) -> list[SlideVote]:
    """One SlideVote per distinct slide, in first-appearance order."""
    if not (len(slide_ids) == len(leaves) == len(confidences)):
        raise ValueError("slide_ids, leaves, and confidences must align")
    if not slide_ids:
        raise ValueError("need at least one patch prediction")
    groups: dict[str, list[int]] = {}
    for i, sid in enumerate(slide_ids):
        if not sid:
            raise ValueError(f"patch {i} has an empty slide id")
        groups.setdefault(sid, []).append(i)
    votes = []
    for sid, idxs in groups.items():
        patch_leaves = tuple(leaves[i] for i in idxs)
        patch_confs = tuple(float(confidences[i]) for i in idxs)
        counts: dict[str, int] = {}
        for leaf in patch_leaves:
            counts[leaf] = counts.get(leaf, 0) + 1
        top = max(counts.values())
        tied = [leaf for leaf, c in counts.items() if c == top]
        tie_break = 0
        if len(tied) > 1:
            tie_break = 1
            means = {
                leaf: float(
                    np.mean([c for lf, c in zip(patch_leaves, patch_confs) if lf == leaf])
                )
                for leaf in tied
            }
            best = max(means.values())
            tied = [leaf for leaf in tied if means[leaf] == best]
            if len(tied) > 1:
                tie_break = 2
                tied.sort(key=tax.leaf_index)
        winner = tied[0]
        votes.append(
            SlideVote(
                slide_id=sid,
                patch_leaves=patch_leaves,
                patch_confidences=patch_confs,
                winner=winner,
                support=counts[winner] / len(patch_leaves),
                tie_break_used=tie_break,
            )
        )
    return votes


def slide_metrics(
    votes: Sequence[SlideVote],
    slide_truths: Mapping[str, str],
    tax: Taxonomy,
    merge_map: Mapping[str, str] | None = None,
) -> MetricReport:
    """Evaluate slide winners against slide truths, one sample per slide."""
    missing = [v.slide_id for v in votes if v.slide_id not in slide_truths]
    if missing:
        raise ValueError(f"slides without a ground-truth label: {missing}")
    preds = [v.winner for v in votes]
    truths = [slide_truths[v.slide_id] for v in votes]
    return compute_report(preds, truths, tax, merge_map=merge_map)


def write_slide_votes_csv(path, votes: Sequence[SlideVote]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["slide_id", "winner", "support", "n_patches", "tie_break_used"])
        for v in votes:
            writer.writerow(
                [v.slide_id, v.winner, repr(v.support), len(v.patch_leaves), v.tie_break_used]
            )


def read_slide_votes_csv(path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
