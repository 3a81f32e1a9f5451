"""Training loops, the AdamW optimizer, and the checkpoint format.

Three training modes share one loop:

* ``flat``:            one model over the leaves, plain softmax loss.
* ``hier_multilabel``: one model over the full logit layout, trained
  with the level-isolated hierarchical loss.
* ``hier_base``:       one small model per sibling group, each trained
  only on the samples whose true path passes through that group. A
  group that no training sample reaches is reported and skipped.

Everything is deterministic given the config seed: parameter init and
batch order derive from it, and checkpoints serialize to stable bytes
(save -> load -> save reproduces the file exactly).

Checkpoint file layout: the 8-byte magic ``HLCKPT01``, an 8-byte
little-endian metadata length, that many bytes of UTF-8 JSON metadata,
then the raw little-endian float64 parameter vector. The loader
recomputes the architecture's closed-form parameter count and refuses
files whose declared count or byte length disagree.

Learning rates: the defaults suit these small from-scratch models
(1e-3). Pipelines built on large pretrained backbones typically need a
far smaller rate, around 1e-6; set ``lr`` accordingly if you swap the
model for something deeper.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from hiercls.aggregation import slide_metrics, slide_mode
from hiercls.data import Dataset, grouped_kfold
from hiercls.errors import CheckpointError, ConfigError, DatasetError
from hiercls.inference import Prediction, decode_flat, decode_greedy
from hiercls.metrics import MetricReport, compute_report, stage_accuracies
from hiercls.models import MODEL_KINDS, ModelSpec, build_model, spec_param_count
from hiercls.objective import LossConfig, batched_flat_loss, batched_hierarchical_loss
from hiercls.rng import Rng
from hiercls.taxonomy import INACTIVE, Taxonomy

MODES = ("flat", "hier_multilabel", "hier_base")
CHECKPOINT_MAGIC = b"HLCKPT01"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Model selection plus optimization settings.

    The optimizer is AdamW with decoupled weight decay; ``epochs`` full
    passes, mean-reduced batches, no early stopping, no augmentation.
    """

    model_kind: str = "linear"
    hidden: int = 64
    channels: tuple[int, int] = (8, 16)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 80
    batch_size: int = 32
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(
                f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}"
            )
        if not self.lr > 0.0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {b}")
        if not self.eps > 0.0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        object.__setattr__(self, "channels", (int(self.channels[0]), int(self.channels[1])))

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "hidden": self.hidden,
            "channels": list(self.channels),
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "loss": self.loss.to_dict(),
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(doc: Mapping) -> "TrainConfig":
        known = {
            "model_kind", "hidden", "channels", "lr", "beta1", "beta2",
            "eps", "weight_decay", "epochs", "batch_size", "loss", "seed",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        kwargs = {k: v for k, v in doc.items() if k != "loss" and k != "channels"}
        if "channels" in doc:
            kwargs["channels"] = tuple(doc["channels"])
        if "loss" in doc and doc["loss"] is not None:
            kwargs["loss"] = LossConfig.from_dict(doc["loss"])
        try:
            return TrainConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad training config: {exc}") from exc


# ---------------------------------------------------------------- adamw


@dataclass
class AdamState:
    """Moment estimates; functional style, adamw_step returns a new one."""

    step: int
    m: np.ndarray
    v: np.ndarray

    @staticmethod
    def init(n: int) -> "AdamState":
        return AdamState(step=0, m=np.zeros(n), v=np.zeros(n))


def adamw_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState, cfg: TrainConfig
) -> tuple[np.ndarray, AdamState]:
    """One AdamW update with decoupled decay and bias-corrected moments.

    The decay multiplies parameters by (1 - lr * weight_decay) before the
    moment-driven step, so a zero gradient still shrinks the weights by
    exactly that factor.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    t = state.step + 1
    new = params * (1.0 - cfg.lr * cfg.weight_decay)
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads * grads
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new = new - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new, AdamState(step=t, m=m, v=v)


# ----------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    spec: ModelSpec
    taxonomy_fingerprint: str
    params: np.ndarray
    metadata: dict


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    params = np.ascontiguousarray(ckpt.params, dtype="<f8")
    if params.size != spec_param_count(ckpt.spec):
        raise CheckpointError(
            f"parameter vector has {params.size} entries but the architecture "
            f"requires {spec_param_count(ckpt.spec)}"
        )
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_spec": ckpt.spec.to_dict(),
        "taxonomy_fingerprint": ckpt.taxonomy_fingerprint,
        "n_params": int(params.size),
        "train": ckpt.metadata,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack("<Q", data[8:16])
    if 16 + mlen > len(data):
        raise CheckpointError(f"{path}: metadata block truncated")
    try:
        meta = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {meta.get('format_version')!r}"
        )
    spec = ModelSpec.from_dict(meta.get("model_spec", {}))
    expected = spec_param_count(spec)
    declared = int(meta.get("n_params", -1))
    if declared != expected:
        raise CheckpointError(
            f"{path}: metadata declares {declared} parameters but the "
            f"architecture requires {expected}"
        )
    body = data[16 + mlen :]
    expected_bytes = expected * 8
    if len(body) != expected_bytes:
        raise CheckpointError(
            f"{path}: expected {expected_bytes} parameter bytes, found {len(body)}"
        )
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return Checkpoint(
        spec=spec,
        taxonomy_fingerprint=str(meta.get("taxonomy_fingerprint", "")),
        params=params,
        metadata=meta.get("train", {}),
    )


def require_taxonomy(ckpt: Checkpoint, tax: Taxonomy) -> None:
    """Refuse to run a checkpoint against a taxonomy it was not trained on."""
    if ckpt.taxonomy_fingerprint != tax.fingerprint():
        raise CheckpointError(
            "checkpoint was trained against a different taxonomy "
            f"(fingerprint {ckpt.taxonomy_fingerprint[:12]}... != {tax.fingerprint()[:12]}...)"
        )


# -------------------------------------------------------------- curves


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_acc: float | None


def write_curve_csv(path, rows: Sequence[EpochRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for r in rows:
            writer.writerow(
                [
                    r.epoch,
                    repr(r.train_loss),
                    "" if r.val_loss is None else repr(r.val_loss),
                    "" if r.val_acc is None else repr(r.val_acc),
                ]
            )


def read_curve_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------- training


@dataclass
class MemberResult:
    name: str
    group: str | None
    checkpoint: Checkpoint
    curve: tuple[EpochRow, ...]


@dataclass
class TrainResult:
    mode: str
    members: dict[str, MemberResult]
    skipped: tuple[str, ...]


def _prep_matrix(x: np.ndarray, flatten: bool) -> np.ndarray:
    """Float64 design matrix; byte images map to [0, 1]."""
    arr = np.asarray(x)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if flatten and arr.ndim > 2:
        arr = arr.reshape(arr.shape[0], -1)
    return arr


def design_matrix(ds: Dataset, slide_ids: Sequence[str]):
    """Concatenated raw samples plus per-row leaf and slide id lists.

    Rows follow the dataset's slide order regardless of the order ids
    were passed in, which keeps downstream artifacts deterministic.
    """
    wanted = set(slide_ids)
    known = {s.slide_id for s in ds.slides}
    missing = sorted(wanted - known)
    if missing:
        raise ConfigError(f"unknown slide ids: {missing}")
    recs = [s for s in ds.slides if s.slide_id in wanted]
    x = np.concatenate([s.samples for s in recs])
    leaves: list[str] = []
    slide_of: list[str] = []
    for rec in recs:
        leaves.extend([rec.leaf] * rec.samples.shape[0])
        slide_of.extend([rec.slide_id] * rec.samples.shape[0])
    return x, leaves, slide_of


def _resolve_spec(cfg: TrainConfig, ds: Dataset, n_outputs: int) -> ModelSpec:
    if cfg.model_kind == "tinycnn":
        if ds.mode != "images":
            raise ConfigError("tinycnn requires an image dataset")
        return ModelSpec(
            kind="tinycnn", n_outputs=n_outputs, input_hw=ds.dims, channels=cfg.channels
        )
    if ds.mode == "features":
        d = int(ds.dims)
    else:
        h, w = ds.dims
        d = h * w * 3
    return ModelSpec(kind=cfg.model_kind, n_outputs=n_outputs, input_dim=d, hidden=cfg.hidden)


def _forward_chunks(model, params, x, chunk: int = 512) -> np.ndarray:
    outs = [model.forward(params, x[i : i + chunk]) for i in range(0, x.shape[0], chunk)]
    return np.concatenate(outs) if outs else np.zeros((0, model.spec.n_outputs))


def train(
    ds: Dataset,
    tax: Taxonomy,
    mode: str,
    cfg: TrainConfig,
    train_slides: Sequence[str] | None = None,
    val_slides: Sequence[str] | None = None,
    step_hook: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train one model (or the per-group set) on the given slides.

    train_slides defaults to every slide not held out for validation;
    val_slides may be empty, in which case the curve's validation
    columns stay blank. Validation accuracy means: decoded leaf equals
    the true leaf (flat and hier_multilabel), or the within-group class
    is correct (each hier_base member, on the samples reaching it).
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if ds.taxonomy.fingerprint() != tax.fingerprint():
        raise ConfigError("dataset was generated against a different taxonomy")
    layout = tax.logit_layout()
    all_ids = [s.slide_id for s in ds.slides]
    known = set(all_ids)
    val = tuple(val_slides) if val_slides is not None else ()
    bad = sorted(set(val) - known)
    if bad:
        raise ConfigError(f"unknown validation slide ids: {bad}")
    if train_slides is None:
        train_ids = tuple(sid for sid in all_ids if sid not in set(val))
    else:
        bad = sorted(set(train_slides) - known)
        if bad:
            raise ConfigError(f"unknown training slide ids: {bad}")
        overlap = sorted(set(train_slides) & set(val))
        if overlap:
            raise ConfigError(f"slides in both train and validation sets: {overlap}")
        train_ids = tuple(train_slides)
    if not train_ids:
        raise ConfigError("no training slides")

    flatten = cfg.model_kind != "tinycnn"
    x_tr_raw, tr_leaves, tr_slide_of = design_matrix(ds, train_ids)
    x_tr = _prep_matrix(x_tr_raw, flatten)
    if val:
        x_va_raw, va_leaves, _ = design_matrix(ds, val)
        x_va = _prep_matrix(x_va_raw, flatten)
    else:
        x_va, va_leaves = None, []
    enc = {leaf: tax.encode_target(leaf) for leaf in tax.leaf_order}

    if mode == "flat":
        jobs = [("model", None)]
    elif mode == "hier_multilabel":
        jobs = [("model", None)]
    else:
        jobs = [(seg.group, seg) for seg in layout.segments]

    members: dict[str, MemberResult] = {}
    skipped: list[str] = []
    for name, seg in jobs:
        if mode == "flat":
            n_out = len(tax.leaf_order)
            targets = np.array([tax.leaf_index(l) for l in tr_leaves], dtype=np.int64)
            keep = np.arange(len(tr_leaves))
            va_targets = np.array(
                [tax.leaf_index(l) for l in va_leaves], dtype=np.int64
            ) if val else None
            classes: Sequence[str] = tax.leaf_order

            def loss_fn(scores, t):
                return batched_flat_loss(scores, t, cfg.loss, classes)

        elif mode == "hier_multilabel":
            n_out = layout.total_logits
            targets = np.stack([enc[l] for l in tr_leaves])
            keep = np.arange(len(tr_leaves))
            va_targets = np.stack([enc[l] for l in va_leaves]) if val else None

            def loss_fn(scores, t):
                return batched_hierarchical_loss(scores, t, cfg.loss, layout)

        else:
            gi = layout.segments.index(seg)
            n_out = seg.length
            t_all = np.array([enc[l][gi] for l in tr_leaves], dtype=np.int64)
            keep = np.flatnonzero(t_all != INACTIVE)
            if keep.size == 0:
                skipped.append(f"group {name!r}: no training samples reach this group")
                continue
            targets = t_all[keep]
            if val:
                t_va_all = np.array([enc[l][gi] for l in va_leaves], dtype=np.int64)
                va_keep = np.flatnonzero(t_va_all != INACTIVE)
                va_targets = t_va_all[va_keep]
            classes = seg.children

            def loss_fn(scores, t, _cls=seg.children):
                return batched_flat_loss(scores, t, cfg.loss, _cls)

        spec = _resolve_spec(cfg, ds, n_out)
        model = build_model(spec)
        x_member = x_tr[keep]
        member_slides = sorted({tr_slide_of[i] for i in keep})
        n_train = x_member.shape[0]
        rng = Rng(cfg.seed).derive(f"member/{name}")
        params = model.init_params(rng.derive("init"))
        state = AdamState.init(model.param_count())
        rows: list[EpochRow] = []
        t_member = targets
        for epoch in range(1, cfg.epochs + 1):
            perm = np.asarray(rng.derive(f"epoch/{epoch}").permutation(n_train))
            running = 0.0
            for step, start in enumerate(range(0, n_train, cfg.batch_size)):
                idx = perm[start : start + cfg.batch_size]
                scores, cache = model.forward_cached(params, x_member[idx])
                loss, g_scores = loss_fn(scores, t_member[idx])
                grads = model.backward(params, cache, g_scores)
                if step_hook is not None:
                    step_hook(
                        {
                            "member": name,
                            "mode": mode,
                            "epoch": epoch,
                            "step": step,
                            "loss": loss,
                            "grad_scores": g_scores,
                            "targets": t_member[idx],
                        }
                    )
                params, state = adamw_step(params, grads, state, cfg)
                running += loss * idx.size
            train_loss = running / n_train
            val_loss = val_acc = None
            if val:
                if mode == "hier_base":
                    if va_keep.size:
                        vs = _forward_chunks(model, params, x_va[va_keep])
                        val_loss = loss_fn(vs, va_targets)[0]
                        val_acc = float(np.mean(np.argmax(vs, axis=1) == va_targets))
                else:
                    vs = _forward_chunks(model, params, x_va)
                    val_loss = loss_fn(vs, va_targets)[0]
                    if mode == "flat":
                        val_acc = float(np.mean(np.argmax(vs, axis=1) == va_targets))
                    else:
                        hits = sum(
                            1
                            for i, leaf in enumerate(va_leaves)
                            if decode_greedy(vs[i], tax).path.leaf == leaf
                        )
                        val_acc = hits / len(va_leaves)
            rows.append(EpochRow(epoch, train_loss, val_loss, val_acc))
        last = rows[-1]
        metadata = {
            "mode": mode,
            "member": name,
            "group": None if seg is None else seg.group,
            "config": cfg.to_dict(),
            "final_epoch": last.epoch,
            "final_train_loss": last.train_loss,
            "final_val_loss": last.val_loss,
            "final_val_acc": last.val_acc,
            "n_train_samples": int(n_train),
            "train_slides": member_slides,
            "val_slides": sorted(val),
        }
        ckpt = Checkpoint(
            spec=spec,
            taxonomy_fingerprint=tax.fingerprint(),
            params=params,
            metadata=metadata,
        )
        members[name] = MemberResult(name=name, group=metadata["group"], checkpoint=ckpt, curve=tuple(rows))
    return TrainResult(mode=mode, members=members, skipped=tuple(skipped))


# ------------------------------------------------------------ evaluation


def evaluate_patches(
    tax: Taxonomy, mode: str, members: Mapping[str, Checkpoint], x: np.ndarray
) -> tuple[list[Prediction], np.ndarray]:
    """Decode every row of x and return per-leaf probability rows.

    members holds one checkpoint under "model" for flat and
    hier_multilabel, or one per sibling group (keyed by the group's
    parent id) for hier_base. Fingerprints are verified first.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    for ckpt in members.values():
        require_taxonomy(ckpt, tax)
    layout = tax.logit_layout()
    if mode in ("flat", "hier_multilabel"):
        if set(members) != {"model"}:
            raise ConfigError(f"mode {mode!r} expects exactly one member named 'model'")
        ckpt = members["model"]
        expected = len(tax.leaf_order) if mode == "flat" else layout.total_logits
        if ckpt.spec.n_outputs != expected:
            raise CheckpointError(
                f"checkpoint has {ckpt.spec.n_outputs} outputs; mode {mode!r} needs {expected}"
            )
        model = build_model(ckpt.spec)
        xp = _prep_matrix(x, flatten=ckpt.spec.kind != "tinycnn")
        scores = _forward_chunks(model, ckpt.params, xp)
        if mode == "flat":
            preds = [decode_flat(row, tax) for row in scores]
        else:
            preds = [decode_greedy(row, tax) for row in scores]
    else:
        missing = [seg.group for seg in layout.segments if seg.group not in members]
        if missing:
            raise ConfigError(f"hier_base evaluation is missing members for groups {missing}")
        group_scores = []
        for seg in layout.segments:
            ckpt = members[seg.group]
            if ckpt.spec.n_outputs != seg.length:
                raise CheckpointError(
                    f"member for group {seg.group!r} has {ckpt.spec.n_outputs} outputs, "
                    f"expected {seg.length}"
                )
            model = build_model(ckpt.spec)
            xp = _prep_matrix(x, flatten=ckpt.spec.kind != "tinycnn")
            group_scores.append(_forward_chunks(model, ckpt.params, xp))
        preds = [
            decode_greedy([gs[i] for gs in group_scores], tax)
            for i in range(x.shape[0])
        ]
    matrix = np.stack([p.leaf_probs for p in preds])
    return preds, matrix


@dataclass
class FoldOutcome:
    fold: int
    val_slides: tuple[str, ...]
    patch_report: MetricReport
    slide_report: MetricReport
    patch_stages: dict[str, float | None]
    slide_stages: dict[str, float | None]
    curves: dict[str, tuple[EpochRow, ...]]
    checkpoints: dict[str, Checkpoint]


@dataclass
class ExperimentResult:
    mode: str
    k: int
    folds: list[FoldOutcome]

    def summary(self) -> dict[str, tuple[float, float]]:
        """Across-fold (mean, sample std) per headline metric."""
        series: dict[str, list[float]] = {}

        def put(key, value):
            if value is not None:
                series.setdefault(key, []).append(float(value))

        for f in self.folds:
            put("patch_accuracy", f.patch_report.accuracy)
            put("patch_macro_f1", f.patch_report.macro_f1)
            put("patch_auroc", f.patch_report.auroc_macro)
            put("patch_h_precision", f.patch_report.h_precision)
            put("patch_h_recall", f.patch_report.h_recall)
            put("patch_h_f1", f.patch_report.h_f1)
            put("slide_accuracy", f.slide_report.accuracy)
            put("slide_macro_f1", f.slide_report.macro_f1)
            put("slide_h_f1", f.slide_report.h_f1)
        out = {}
        for key, vals in series.items():
            arr = np.array(vals)
            std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
            out[key] = (float(np.mean(arr)), std)
        return out


def run_experiment(
    ds: Dataset,
    tax: Taxonomy,
    cfg: TrainConfig,
    k: int,
    mode: str,
    merge_map: Mapping[str, str] | None = None,
    progress: Callable[[str], None] | None = None,
) -> ExperimentResult:
    """Grouped k-fold cross-validation of one training mode.

    Each fold trains from scratch on the other folds' slides, then
    reports patch-level and slide-level metrics on the held-out slides,
    plus per-stage accuracies at both granularities.
    """
    plan = grouped_kfold(ds, k, cfg.seed)
    truth_map = {s.slide_id: s.leaf for s in ds.slides}
    folds: list[FoldOutcome] = []
    for fold in range(k):
        val = plan.val_ids(fold)
        if progress is not None:
            progress(f"fold {fold + 1}/{k} [{mode}]: training on {len(plan.train_ids(fold))} slides")
        result = train(ds, tax, mode, cfg, train_slides=plan.train_ids(fold), val_slides=val)
        if result.skipped:
            raise DatasetError(
                f"fold {fold}: cannot evaluate with untrained groups ({'; '.join(result.skipped)})"
            )
        members = {n: m.checkpoint for n, m in result.members.items()}
        x_va, va_leaves, va_slide_of = design_matrix(ds, val)
        preds, scores = evaluate_patches(tax, mode, members, x_va)
        pred_paths = [p.path for p in preds]
        patch_report = compute_report(pred_paths, va_leaves, tax, scores=scores, merge_map=merge_map)
        votes = slide_mode(
            va_slide_of,
            [p.path.leaf for p in preds],
            [p.confidence for p in preds],
            tax,
        )
        slide_report = slide_metrics(votes, truth_map, tax, merge_map=merge_map)
        patch_stages = stage_accuracies(pred_paths, va_leaves, tax)
        slide_stages = stage_accuracies(
            [v.winner for v in votes], [truth_map[v.slide_id] for v in votes], tax
        )
        folds.append(
            FoldOutcome(
                fold=fold,
                val_slides=tuple(val),
                patch_report=patch_report,
                slide_report=slide_report,
                patch_stages=patch_stages,
                slide_stages=slide_stages,
                curves={n: m.curve for n, m in result.members.items()},
                checkpoints=members,
            )
        )
    return ExperimentResult(mode=mode, k=k, folds=folds)
