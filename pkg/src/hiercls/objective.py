"""Loss functions with analytic gradients over raw scores.

Every loss here returns both the value and its exact gradient so the
trainer never needs numeric differentiation. The hierarchical loss keeps
sibling groups independent: only groups on the target's path contribute,
and every off-path group receives a gradient that is bitwise zero, so no
signal can leak across levels of the tree.

All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from hiercls.errors import LayoutMismatchError
from hiercls.taxonomy import INACTIVE, LogitLayout

LOSS_KINDS = ("cross_entropy", "weighted_cross_entropy", "focal")


def _check_scores(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError(f"score vector must be 1-D with length >= 2, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("score vector contains non-finite entries")
    return s


def softmax(s: np.ndarray) -> np.ndarray:
    """Stable softmax via max-subtraction."""
    s = _check_scores(s)
    z = np.exp(s - np.max(s))
    return z / np.sum(z)


def log_softmax(s: np.ndarray) -> np.ndarray:
    s = _check_scores(s)
    shifted = s - np.max(s)
    return shifted - np.log(np.sum(np.exp(shifted)))


def softmax_rows(S: np.ndarray) -> np.ndarray:
    """Row-wise softmax for a 2-D score matrix."""
    S = np.asarray(S, dtype=np.float64)
    z = np.exp(S - np.max(S, axis=1, keepdims=True))
    return z / np.sum(z, axis=1, keepdims=True)


def log_softmax_rows(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    shifted = S - np.max(S, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _check_target(s: np.ndarray, target: int) -> int:
    target = int(target)
    if not 0 <= target < s.size:
        raise ValueError(f"target {target} out of range for {s.size} classes")
    return target


def cross_entropy(
    s: np.ndarray, target: int, weights: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Weighted cross-entropy: loss and gradient with respect to raw scores.

    Computed through log-softmax rather than log of a stored probability,
    so saturated scores cannot produce log(0).
    """
    s = _check_scores(s)
    target = _check_target(s, target)
    w_t = 1.0 if weights is None else float(np.asarray(weights, dtype=np.float64)[target])
    logp = log_softmax(s)
    loss = -w_t * logp[target]
    grad = np.exp(logp)
    grad[target] -= 1.0
    grad *= w_t
    return float(loss), grad


def focal_loss(
    s: np.ndarray,
    target: int,
    gamma: float = 2.0,
    weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Focal loss -alpha_t (1 - p_t)^gamma log p_t with its analytic gradient.

    gamma = 0 delegates to cross_entropy so the reduction is exact, not
    merely close. A saturated target (p_t = 1) returns the limit values
    (loss 0, gradient 0) instead of evaluating 0^negative.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if gamma == 0.0:
        return cross_entropy(s, target, weights)
    s = _check_scores(s)
    target = _check_target(s, target)
    alpha = 1.0 if weights is None else float(np.asarray(weights, dtype=np.float64)[target])
    logp = log_softmax(s)
    p = np.exp(logp)
    p_t = float(p[target])
    logp_t = float(logp[target])
    om = 1.0 - p_t
    if om <= 0.0:
        return 0.0, np.zeros_like(s)
    loss = -alpha * om**gamma * logp_t
    # d loss / d s_j = alpha (1-p_t)^(g-1) [g p_t log p_t - (1-p_t)] (1[j=t] - p_j)
    coeff = alpha * om ** (gamma - 1.0) * (gamma * p_t * logp_t - om)
    direction = -p
    direction[target] += 1.0
    return float(loss), coeff * direction


@dataclass(frozen=True)
class LossConfig:
    """Loss selection shared by flat and hierarchical training.

    class_weights maps node id to a positive weight (missing ids default
    to 1); acts as the alpha vector when loss_kind is "focal" and as the
    class weight under "weighted_cross_entropy". level_weights maps tree
    level to a positive multiplier on that level's group loss.
    """

    loss_kind: str = "cross_entropy"
    gamma: float = 2.0
    class_weights: Mapping[str, float] | None = None
    level_weights: Mapping[int, float] | None = None

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(
                f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}"
            )
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        for name, mapping in (("class_weights", self.class_weights),
                              ("level_weights", self.level_weights)):
            if mapping is not None:
                for key, value in mapping.items():
                    if value <= 0:
                        raise ValueError(f"{name}[{key!r}] must be > 0, got {value}")

    def group_weights(self, children: Sequence[str]) -> np.ndarray | None:
        if self.loss_kind == "cross_entropy" or self.class_weights is None:
            return None
        return np.array([self.class_weights.get(c, 1.0) for c in children])

    def level_weight(self, level: int) -> float:
        if self.level_weights is None:
            return 1.0
        return float(self.level_weights.get(level, 1.0))

    def base_loss(
        self, s: np.ndarray, target: int, children: Sequence[str]
    ) -> tuple[float, np.ndarray]:
        w = self.group_weights(children)
        if self.loss_kind == "focal":
            return focal_loss(s, target, gamma=self.gamma, weights=w)
        return cross_entropy(s, target, weights=w)

    def to_dict(self) -> dict:
        return {
            "loss_kind": self.loss_kind,
            "gamma": self.gamma,
            "class_weights": None if self.class_weights is None else dict(self.class_weights),
            "level_weights": None
            if self.level_weights is None
            else {str(k): float(v) for k, v in self.level_weights.items()},
        }

    @staticmethod
    def from_dict(doc: Mapping) -> "LossConfig":
        cw = doc.get("class_weights")
        lw = doc.get("level_weights")
        return LossConfig(
            loss_kind=doc.get("loss_kind", "cross_entropy"),
            gamma=float(doc.get("gamma", 2.0)),
            class_weights=None if cw is None else {str(k): float(v) for k, v in cw.items()},
            level_weights=None if lw is None else {int(k): float(v) for k, v in lw.items()},
        )


def split_flat(scores: np.ndarray, layout: LogitLayout) -> list[np.ndarray]:
    """Slice one flat score vector into per-group vectors."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (layout.total_logits,):
        raise LayoutMismatchError(
            f"expected {layout.total_logits} logits, got shape {scores.shape}"
        )
    return [scores[seg.offset : seg.offset + seg.length] for seg in layout.segments]


def hierarchical_loss(
    groups: Sequence[np.ndarray],
    target: np.ndarray,
    cfg: LossConfig,
    layout: LogitLayout,
) -> tuple[float, list[np.ndarray]]:
    """Level-isolated loss over grouped scores.

    Sums level_weight * base_loss over groups whose target is active;
    inactive groups contribute nothing and get exactly-zero gradients.
    """
    if len(groups) != len(layout.segments):
        raise LayoutMismatchError(
            f"expected {len(layout.segments)} groups, got {len(groups)}"
        )
    target = np.asarray(target)
    if target.shape != (len(layout.segments),):
        raise LayoutMismatchError(
            f"target must have one entry per group ({len(layout.segments)}), "
            f"got shape {target.shape}"
        )
    total = 0.0
    grads: list[np.ndarray] = []
    for i, seg in enumerate(layout.segments):
        s = np.asarray(groups[i], dtype=np.float64)
        if s.shape != (seg.length,):
            raise LayoutMismatchError(
                f"group {seg.group!r} expects {seg.length} scores, got shape {s.shape}"
            )
        t = int(target[i])
        if t == INACTIVE:
            grads.append(np.zeros(seg.length))
            continue
        lw = cfg.level_weight(seg.level)
        loss, grad = cfg.base_loss(s, t, seg.children)
        total += lw * loss
        grads.append(lw * grad)
    return total, grads


def batched_group_terms(
    S: np.ndarray, t: np.ndarray, cfg: LossConfig, children: Sequence[str]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss and score gradient for one sibling group.

    S: (M, C) scores; t: (M,) class indices. No reduction, no level
    weighting; callers sum and scale.
    """
    gamma = cfg.gamma
    focal = cfg.loss_kind == "focal" and gamma > 0.0
    wvec = cfg.group_weights(children)
    m = S.shape[0]
    w_t = np.ones(m) if wvec is None else wvec[t]
    logp = log_softmax_rows(S)
    p = np.exp(logp)
    ar = np.arange(m)
    if focal:
        p_t = p[ar, t]
        logp_t = logp[ar, t]
        om = 1.0 - p_t
        live = om > 0.0
        losses = np.zeros(m)
        coeff = np.zeros(m)
        with np.errstate(divide="ignore", invalid="ignore"):
            losses[live] = -w_t[live] * om[live] ** gamma * logp_t[live]
            coeff[live] = (
                w_t[live]
                * om[live] ** (gamma - 1.0)
                * (gamma * p_t[live] * logp_t[live] - om[live])
            )
        g = -p
        g[ar, t] += 1.0
        g *= coeff[:, None]
    else:
        losses = -w_t * logp[ar, t]
        g = p.copy()
        g[ar, t] -= 1.0
        g *= w_t[:, None]
    return losses, g


def batched_flat_loss(
    scores: np.ndarray, targets: np.ndarray, cfg: LossConfig, classes: Sequence[str]
) -> tuple[float, np.ndarray]:
    """Mean single-group loss over a batch: scores (N, C), targets (N,)."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != len(classes):
        raise LayoutMismatchError(
            f"expected scores of shape (N, {len(classes)}), got {scores.shape}"
        )
    if np.any(targets < 0) or np.any(targets >= len(classes)):
        raise ValueError("targets out of range")
    losses, g = batched_group_terms(scores, targets, cfg, classes)
    return float(np.sum(losses)) / n, g / n


def batched_hierarchical_loss(
    scores: np.ndarray,
    targets: np.ndarray,
    cfg: LossConfig,
    layout: LogitLayout,
) -> tuple[float, np.ndarray]:
    """Mean hierarchical loss over a batch of flat score rows.

    scores: (N, total_logits); targets: (N, n_groups) from encode_target.
    Returns the scalar mean loss and the (N, total_logits) gradient of
    that mean. Matches per-sample hierarchical_loss to 1e-12.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    n = scores.shape[0]
    if scores.shape != (n, layout.total_logits):
        raise LayoutMismatchError(
            f"expected scores of shape (N, {layout.total_logits}), got {scores.shape}"
        )
    if targets.shape != (n, len(layout.segments)):
        raise LayoutMismatchError(
            f"expected targets of shape (N, {len(layout.segments)}), got {targets.shape}"
        )
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite entries")
    total = 0.0
    grad = np.zeros_like(scores)
    for i, seg in enumerate(layout.segments):
        rows = np.flatnonzero(targets[:, i] != INACTIVE)
        if rows.size == 0:
            continue
        S = scores[rows, seg.offset : seg.offset + seg.length]
        t = targets[rows, i].astype(np.int64)
        if np.any(t < 0) or np.any(t >= seg.length):
            raise LayoutMismatchError(
                f"targets for group {seg.group!r} out of range [0, {seg.length})"
            )
        lw = cfg.level_weight(seg.level)
        losses, g = batched_group_terms(S, t, cfg, seg.children)
        total += lw * float(np.sum(losses))
        grad[rows, seg.offset : seg.offset + seg.length] = lw * g
    return total / n, grad / n


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between f's analytic gradient and central differences.

    Relative error per coordinate uses denominator max(1, |analytic|,
    |numeric|) so near-zero gradients are compared absolutely.
    """
    if h <= 0:
        raise ValueError(f"step must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        numeric = (f(xp)[0] - f(xm)[0]) / (2.0 * h)
        denom = max(1.0, abs(float(analytic[i])), abs(numeric))
        worst = max(worst, abs(float(analytic[i]) - numeric) / denom)
    return worst
