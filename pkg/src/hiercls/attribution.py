"""Grad-CAM for the tiny CNN.

The map explains one node's raw score: channel weights are the spatial
mean of the score's gradient at the last conv block's rectified
activations, the map is the rectified weighted sum of those channels,
normalized by its own max (all-zero when the score ignores the image),
then nearest-neighbor upsampled to input resolution so peak locations
stay exact under the scale change.

Only the tiny CNN is supported: the other model kinds have no spatial
feature maps to attribute over.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hiercls.data import Dataset
from hiercls.errors import CheckpointError, ConfigError, UnknownNodeError
from hiercls.inference import decode_flat, decode_greedy
from hiercls.models import build_model
from hiercls.netpbm import write_pgm
from hiercls.taxonomy import Taxonomy
from hiercls.trainer import Checkpoint, require_taxonomy


@dataclass(frozen=True)
class Heatmap:
    """values: normalized map at feature-map resolution (in [0, 1]);
    upsampled: 8-bit grayscale at input resolution; raw_max: the map's
    maximum before normalization (0 means the score ignored the image)."""

    values: np.ndarray
    upsampled: np.ndarray
    target_node: str
    raw_max: float


def _target_indices(ckpt: Checkpoint, tax: Taxonomy, target: str) -> list[int]:
    """Score positions whose sum is the model's score for ``target``.

    Flat models score a leaf with a single logit. A hierarchical model's
    prediction is a path, and its pre-softmax score for a node is the
    sum of the logits along the chain from the top down to that node;
    explaining only the final logit answers a narrower question (why
    this sibling and not its siblings) and for a sibling the optimizer
    treats as the group default that evidence is mostly absence-shaped.
    """
    mode = ckpt.metadata.get("mode")
    if mode == "flat":
        return [tax.leaf_index(target)]
    if mode == "hier_multilabel":
        layout = tax.logit_layout()
        indices = [layout.logit_index(n) for n in tax.augmented_set(target)]
        if not indices:
            raise UnknownNodeError(f"node {target!r} has no logit in this layout")
        return indices
    raise ConfigError(
        f"attribution needs a flat or hier_multilabel checkpoint, got mode {mode!r}"
    )


def _check_cnn(ckpt: Checkpoint, tax: Taxonomy) -> None:
    if ckpt.spec.kind != "tinycnn":
        raise ConfigError(f"attribution requires a tinycnn checkpoint, got {ckpt.spec.kind!r}")
    require_taxonomy(ckpt, tax)
    mode = ckpt.metadata.get("mode")
    expected = len(tax.leaf_order) if mode == "flat" else tax.logit_layout().total_logits
    if mode in ("flat", "hier_multilabel") and ckpt.spec.n_outputs != expected:
        raise CheckpointError(
            f"checkpoint has {ckpt.spec.n_outputs} outputs; mode {mode!r} needs {expected}"
        )


def _prep_image(ckpt: Checkpoint, image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    h, w = ckpt.spec.input_hw
    if img.shape != (h, w, 3):
        raise ValueError(f"expected an image of shape ({h}, {w}, 3), got {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def grad_cam(ckpt: Checkpoint, tax: Taxonomy, image: np.ndarray, target: str) -> Heatmap:
    """Heatmap of where the model's score for ``target`` comes from."""
    _check_cnn(ckpt, tax)
    indices = _target_indices(ckpt, tax, target)
    model = build_model(ckpt.spec)
    x = _prep_image(ckpt, image)[None]
    scores, cache = model.forward_cached(ckpt.params, x)
    g = np.zeros_like(scores)
    for idx in indices:
        g[0, idx] = 1.0
    _, d_act = model.backward(ckpt.params, cache, g, want_activation_grad=True)
    alphas = d_act[0].mean(axis=(0, 1))
    raw = np.maximum(np.tensordot(cache["a2"][0], alphas, axes=([2], [0])), 0.0)
    raw_max = float(raw.max())
    values = raw / raw_max if raw_max > 0.0 else raw
    h, w = ckpt.spec.input_hw
    fy, fx = h // raw.shape[0], w // raw.shape[1]
    up = np.repeat(np.repeat(values, fy, axis=0), fx, axis=1)
    upsampled = np.rint(up * 255.0).astype(np.uint8)
    return Heatmap(values=values, upsampled=upsampled, target_node=target, raw_max=raw_max)


@dataclass(frozen=True)
class CamRow:
    sample_id: str
    slide_id: str
    target: str
    correct: bool
    hit: bool | None  # None when the dataset carries no nucleus metadata
    max_value: float
    peak: tuple[int, int]
    file: str


@dataclass(frozen=True)
class CamReport:
    rows: tuple[CamRow, ...]
    hit_rate_correct: float | None
    hit_rate_incorrect: float | None
    n_zero_maps: int


def _rate(rows: list[CamRow]) -> float | None:
    scored = [r for r in rows if r.hit is not None]
    if not scored:
        return None
    return sum(1 for r in scored if r.hit) / len(scored)


def peak_pixel(values: np.ndarray, input_hw: tuple[int, int]) -> tuple[int, int]:
    """Argmax of the nearest-neighbor upsampled map, in input pixels.

    Computed at feature resolution before the uint8 quantization, so two
    cells that round to the same byte cannot steal the peak; ties break
    row-major like ``np.argmax``. The pixel returned is the first (top
    left) pixel of the brightest cell's block, which is what an argmax
    over the full-size map lands on.
    """
    by, bx = np.unravel_index(int(np.argmax(values)), values.shape)
    fy = input_hw[0] // values.shape[0]
    fx = input_hw[1] // values.shape[1]
    return int(by) * fy, int(bx) * fx


def cam_batch_report(
    ckpt: Checkpoint,
    ds: Dataset,
    tax: Taxonomy,
    out_dir,
    slide_ids: Sequence[str] | None = None,
) -> CamReport:
    """Heatmap every patch, explaining its own predicted class.

    Writes one PGM per image plus ``cam_report.csv`` into out_dir and
    returns the rows with hit rates split by prediction correctness. A
    hit means the argmax of the upsampled map falls inside the
    generator's white-cell disk; datasets without that metadata get
    blank hits.
    """
    _check_cnn(ckpt, tax)
    if ds.mode != "images":
        raise ConfigError("attribution needs an image dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wanted = None if slide_ids is None else set(slide_ids)
    mode = ckpt.metadata.get("mode")
    model = build_model(ckpt.spec)
    rows: list[CamRow] = []
    n_zero = 0
    for rec in ds.slides:
        if wanted is not None and rec.slide_id not in wanted:
            continue
        x = rec.samples.astype(np.float64) / 255.0
        scores = model.forward(ckpt.params, x)
        for i in range(rec.samples.shape[0]):
            if mode == "flat":
                pred = decode_flat(scores[i], tax)
            else:
                pred = decode_greedy(scores[i], tax)
            target = pred.path.leaf
            cam = grad_cam(ckpt, tax, rec.samples[i], target)
            if cam.raw_max == 0.0:
                n_zero += 1
            peak = peak_pixel(cam.values, ckpt.spec.input_hw)
            hit: bool | None = None
            if rec.wbc is not None:
                cy, cx, r = rec.wbc[i]
                hit = (peak[0] - cy) ** 2 + (peak[1] - cx) ** 2 <= r * r
            fname = f"cam_{rec.slide_id}_{i:03d}.pgm"
            write_pgm(out / fname, cam.upsampled)
            rows.append(
                CamRow(
                    sample_id=f"{rec.slide_id}/{i}",
                    slide_id=rec.slide_id,
                    target=target,
                    correct=target == rec.leaf,
                    hit=hit,
                    max_value=cam.raw_max,
                    peak=(int(peak[0]), int(peak[1])),
                    file=fname,
                )
            )
    with open(out / "cam_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id", "target", "correct", "hit", "max_value", "peak_y", "peak_x", "file"]
        )
        for r in rows:
            writer.writerow(
                [
                    r.sample_id,
                    r.target,
                    int(r.correct),
                    "" if r.hit is None else int(r.hit),
                    repr(r.max_value),
                    r.peak[0],
                    r.peak[1],
                    r.file,
                ]
            )
    correct = [r for r in rows if r.correct]
    incorrect = [r for r in rows if not r.correct]
    return CamReport(
        rows=tuple(rows),
        hit_rate_correct=_rate(correct),
        hit_rate_incorrect=_rate(incorrect),
        n_zero_maps=n_zero,
    )
