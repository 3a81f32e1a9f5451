"""Synthetic datasets: hierarchical Gaussian features or blood-smear-like
images, grouped into slides, plus slide-grouped k-fold splitting and
directory I/O.

Everything is a pure function of (taxonomy, config): randomness comes
only from the package's own counter-mode generator, so the same seed
yields bit-identical datasets on any platform.

The confusable class: after the class means (or WBC appearance styles)
are drawn, Reactive is overwritten by the reactive_ambiguity blend
lambda * Normal + (1 - lambda) * ALL, placing it between the healthy
and the most leukemia-like appearance. Taxonomies without those three
nodes skip the blend and get the plain mixture.
"""

from __future__ import annotations

import colorsys
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hiercls.errors import DatasetError
from hiercls.netpbm import read_ppm, write_ppm
from hiercls.rng import Rng
from hiercls.taxonomy import Taxonomy, parse_taxonomy

# Slides with fewer than this many patches are flagged ineligible for
# cross-validation fold assignment (small scans carry too little signal
# for a majority vote to mean anything).
MIN_ELIGIBLE_PATCHES = 4

_RBC_COUNT = (5, 9)          # disks per image, inclusive range
_RBC_RADIUS_FRAC = (0.08, 0.14)
_RBC_COLOR = np.array([198.0, 118.0, 112.0])
_BACKGROUND = np.array([232.0, 229.0, 223.0])
_WBC_VALUE = 0.62            # HSV value of every WBC color
_WBC_RADIUS_FRAC = (0.11, 0.16)
_WBC_SPECKLE = (0.2, 0.7)    # interior speckle density range


@dataclass(frozen=True)
class GenConfig:
    """Generator knobs. Exactly one of d (feature mode) or image_hw
    (image mode) must be set."""

    seed: int
    slides_per_leaf: int
    patches_per_slide: tuple[int, int]  # inclusive range
    d: int | None = None
    image_hw: tuple[int, int] | None = None
    class_separation: float = 3.0
    reactive_ambiguity: float = 0.5  # lambda: 1 -> Normal-like, 0 -> ALL-like
    slide_effect: float = 1.0
    noise: float = 8.0        # image mode: pixel noise sigma, 8-bit units
    min_hue_gap: float = 0.1  # image mode: smallest hue distance between leaves

    def __post_init__(self):
        if self.slides_per_leaf < 1:
            raise ValueError(f"slides_per_leaf must be >= 1, got {self.slides_per_leaf}")
        lo, hi = self.patches_per_slide
        if not (1 <= lo <= hi):
            raise ValueError(f"patches_per_slide range invalid: {self.patches_per_slide}")
        if (self.d is None) == (self.image_hw is None):
            raise ValueError("set exactly one of d (features) or image_hw (images)")
        if self.d is not None and self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.class_separation <= 0:
            raise ValueError(f"class_separation must be > 0, got {self.class_separation}")
        if not 0.0 <= self.reactive_ambiguity <= 1.0:
            raise ValueError(
                f"reactive_ambiguity must be in [0, 1], got {self.reactive_ambiguity}"
            )
        if self.slide_effect < 0:
            raise ValueError(f"slide_effect must be >= 0, got {self.slide_effect}")


@dataclass(frozen=True, eq=False)
class SlideRecord:
    slide_id: str
    leaf: str
    samples: np.ndarray  # (n, d) float64 or (n, H, W, 3) uint8
    fold_eligible: bool = True
    wbc: tuple[tuple[int, int, int], ...] | None = None  # (cy, cx, radius) per sample

    def __eq__(self, other):
        if not isinstance(other, SlideRecord):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.leaf == other.leaf
            and self.fold_eligible == other.fold_eligible
            and self.samples.dtype == other.samples.dtype
            and np.array_equal(self.samples, other.samples)
            and self.wbc == other.wbc
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    taxonomy: Taxonomy
    mode: str  # "features" | "images"
    dims: int | tuple[int, int]
    slides: tuple[SlideRecord, ...]

    def __post_init__(self):
        seen = set()
        for s in self.slides:
            if s.slide_id in seen:
                raise DatasetError(f"duplicate slide id {s.slide_id!r}")
            seen.add(s.slide_id)
            self.taxonomy.leaf_path(s.leaf)  # label must be a taxonomy leaf
            if s.samples.shape[0] < 1:
                raise DatasetError(f"slide {s.slide_id!r} has no samples")

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.dims == other.dims
            and self.taxonomy == other.taxonomy
            and self.slides == other.slides
        )

    def n_samples(self) -> int:
        return sum(s.samples.shape[0] for s in self.slides)


@dataclass(frozen=True)
class SplitPlan:
    k: int
    assignment: dict[str, int]
    slide_order: tuple[str, ...]

    def val_ids(self, fold: int) -> tuple[str, ...]:
        return tuple(s for s in self.slide_order if self.assignment[s] == fold)

    def train_ids(self, fold: int) -> tuple[str, ...]:
        return tuple(s for s in self.slide_order if self.assignment[s] != fold)


def class_means(tax: Taxonomy, cfg: GenConfig) -> dict[str, np.ndarray]:
    """Per-node means of the feature mixture.

    Root sits at the origin; each node offsets its parent by a random
    unit direction scaled by class_separation / level, so deep siblings
    are closer together than top-level ones. Reactive is then replaced
    by the ambiguity blend.
    """
    if cfg.d is None:
        raise ValueError("class_means needs a feature-mode config (d set)")
    rng = Rng(cfg.seed).derive("means")
    means: dict[str, np.ndarray] = {tax.root: np.zeros(cfg.d)}
    for node_id in tax.node_order:
        node = tax.node(node_id)
        if node.parent is None:
            continue
        step = cfg.class_separation / node.level
        means[node_id] = means[node.parent] + step * rng.unit_vector(cfg.d)
    if {"Reactive", "Normal", "ALL"} <= set(tax.node_order):
        lam = cfg.reactive_ambiguity
        means["Reactive"] = lam * means["Normal"] + (1.0 - lam) * means["ALL"]
    return means


def _slide_plan(tax: Taxonomy, cfg: GenConfig):
    """(slide_id, leaf) pairs in generation order: leaves in leaf_order,
    slides_per_leaf slides each, globally numbered."""
    out = []
    idx = 0
    for leaf in tax.leaf_order:
        for _ in range(cfg.slides_per_leaf):
            out.append((f"s{idx:03d}", leaf))
            idx += 1
    return out


def gen_features(tax: Taxonomy, cfg: GenConfig) -> Dataset:
    """Hierarchical Gaussian mixture with per-slide offsets.

    Sample = leaf mean + slide offset (norm slide_effect, random
    direction per slide) + unit-covariance noise.
    """
    if cfg.d is None:
        raise ValueError("gen_features needs d set in the config")
    means = class_means(tax, cfg)
    root = Rng(cfg.seed)
    slides = []
    for sid, leaf in _slide_plan(tax, cfg):
        rng = root.derive(f"slide/{sid}")
        n = rng.randint_range(*cfg.patches_per_slide)
        offset = cfg.slide_effect * rng.unit_vector(cfg.d)
        noise = rng.normals(n * cfg.d).reshape(n, cfg.d)
        samples = means[leaf] + offset + noise
        slides.append(
            SlideRecord(
                slide_id=sid,
                leaf=leaf,
                samples=samples,
                fold_eligible=n >= MIN_ELIGIBLE_PATCHES,
            )
        )
    return Dataset(taxonomy=tax, mode="features", dims=cfg.d, slides=tuple(slides))


@dataclass(frozen=True)
class WbcStyle:
    """Appearance of one leaf's WBC disk."""

    hue: float
    color: np.ndarray      # RGB, 0..255 float
    radius_frac: float     # of min(H, W)
    speckle: float         # interior speckle density


def wbc_styles(tax: Taxonomy, cfg: GenConfig) -> dict[str, WbcStyle]:
    """Deterministic leaf -> appearance table.

    Hues are evenly spaced around the circle in leaf_order (gap 1/n, so
    min_hue_gap must not exceed that). Radius and speckle ramp with the
    leaf index as secondary cues. Reactive's style is the ambiguity
    blend of Normal and ALL, interpolated in RGB; its blended attributes
    are exempt from the hue-gap guarantee by construction.
    """
    n = len(tax.leaf_order)
    if cfg.min_hue_gap > 1.0 / n + 1e-12:
        raise ValueError(
            f"min_hue_gap {cfg.min_hue_gap} impossible for {n} leaves (max {1.0 / n:.4f})"
        )
    saturation = min(0.9, max(0.15, 0.2 + 0.08 * cfg.class_separation))
    styles: dict[str, WbcStyle] = {}
    r_lo, r_hi = _WBC_RADIUS_FRAC
    s_lo, s_hi = _WBC_SPECKLE
    for i, leaf in enumerate(tax.leaf_order):
        frac = i / max(1, n - 1)
        hue = i / n
        rgb = colorsys.hsv_to_rgb(hue, saturation, _WBC_VALUE)
        styles[leaf] = WbcStyle(
            hue=hue,
            color=np.array(rgb) * 255.0,
            radius_frac=r_lo + (r_hi - r_lo) * frac,
            speckle=s_lo + (s_hi - s_lo) * frac,
        )
    if {"Reactive", "Normal", "ALL"} <= set(tax.node_order):
        lam = cfg.reactive_ambiguity
        a, b = styles["Normal"], styles["ALL"]
        color = lam * a.color + (1.0 - lam) * b.color
        hsv = colorsys.rgb_to_hsv(*(color / 255.0))
        styles["Reactive"] = WbcStyle(
            hue=hsv[0],
            color=color,
            radius_frac=lam * a.radius_frac + (1.0 - lam) * b.radius_frac,
            speckle=lam * a.speckle + (1.0 - lam) * b.speckle,
        )
    return styles


def _disk_mask(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _render_patch(rng: Rng, style: WbcStyle, hw, tint, noise_sigma):
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.tile(_BACKGROUND, (h, w, 1))

    n_rbc = rng.randint_range(*_RBC_COUNT)
    for _ in range(n_rbc):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        r = rng.uniform(*_RBC_RADIUS_FRAC) * min(h, w)
        jitter = rng.normals(3) * 6.0
        mask = _disk_mask(yy, xx, cy, cx, r)
        img[mask] = _RBC_COLOR + jitter
        # pale center, the biconcave look
        img[_disk_mask(yy, xx, cy, cx, 0.45 * r)] = _RBC_COLOR + jitter + 28.0

    r = max(3, int(round(style.radius_frac * min(h, w))))
    cy = rng.randint_range(r, h - 1 - r)
    cx = rng.randint_range(r, w - 1 - r)
    mask = _disk_mask(yy, xx, cy, cx, r)
    img[mask] = style.color
    speckle_u = rng.uniforms(h * w).reshape(h, w)
    speckles = mask & (speckle_u < style.speckle)
    img[speckles] -= 45.0

    img += tint
    img += rng.normals(h * w * 3).reshape(h, w, 3) * noise_sigma
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), (cy, cx, r)


def gen_images(tax: Taxonomy, cfg: GenConfig) -> Dataset:
    """Blood-smear-like patches: light background, class-independent RBC
    disks, one class-dependent WBC disk drawn last, per-slide tint, and
    pixel noise. The WBC center and radius are recorded per sample as
    localization ground truth."""
    if cfg.image_hw is None:
        raise ValueError("gen_images needs image_hw set in the config")
    h, w = cfg.image_hw
    if h < 32 or w < 32:
        raise ValueError(f"images must be at least 32x32, got {h}x{w}")
    styles = wbc_styles(tax, cfg)
    root = Rng(cfg.seed)
    slides = []
    for sid, leaf in _slide_plan(tax, cfg):
        rng_s = root.derive(f"slide/{sid}")
        n = rng_s.randint_range(*cfg.patches_per_slide)
        tint = cfg.slide_effect * rng_s.unit_vector(3)
        imgs = np.empty((n, h, w, 3), dtype=np.uint8)
        meta = []
        for i in range(n):
            rng_p = root.derive(f"slide/{sid}/patch/{i}")
            imgs[i], center = _render_patch(rng_p, styles[leaf], (h, w), tint, cfg.noise)
            meta.append(center)
        slides.append(
            SlideRecord(
                slide_id=sid,
                leaf=leaf,
                samples=imgs,
                fold_eligible=n >= MIN_ELIGIBLE_PATCHES,
                wbc=tuple(meta),
            )
        )
    return Dataset(taxonomy=tax, mode="images", dims=(h, w), slides=tuple(slides))


def grouped_kfold(ds: Dataset, k: int, seed: int) -> SplitPlan:
    """Deal fold-eligible slides round-robin after a per-leaf shuffle.

    The running fold counter continues across leaves, so fold sizes
    differ by at most one overall AND within every leaf: stratification
    falls out of the dealing order.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    eligible = [s for s in ds.slides if s.fold_eligible]
    if k > len(eligible):
        raise ValueError(f"k={k} exceeds the {len(eligible)} fold-eligible slides")
    by_leaf: dict[str, list[str]] = {}
    for s in eligible:
        by_leaf.setdefault(s.leaf, []).append(s.slide_id)
    rng = Rng(seed).derive("kfold")
    assignment: dict[str, int] = {}
    counter = 0
    for leaf in ds.taxonomy.leaf_order:
        ids = by_leaf.get(leaf, [])
        rng.shuffle(ids)
        for sid in ids:
            assignment[sid] = counter % k
            counter += 1
    return SplitPlan(
        k=k,
        assignment=assignment,
        slide_order=tuple(s.slide_id for s in eligible),
    )


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "taxonomy.json").write_text(ds.taxonomy.serialize(), encoding="utf-8")
    meta = {
        "mode": ds.mode,
        "dims": list(ds.dims) if isinstance(ds.dims, tuple) else ds.dims,
        "taxonomy_file": "taxonomy.json",
        "n_slides": len(ds.slides),
    }
    (d / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with open(d / "labels.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["slide_id", "leaf", "fold_eligible"])
        for s in ds.slides:
            writer.writerow([s.slide_id, s.leaf, int(s.fold_eligible)])
    if ds.mode == "features":
        dim = ds.dims
        with open(d / "features.csv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["slide_id", "sample_index"] + [f"f{i}" for i in range(dim)])
            for s in ds.slides:
                for i, row in enumerate(s.samples):
                    writer.writerow([s.slide_id, i] + [repr(float(v)) for v in row])
    else:
        img_dir = d / "images"
        any_wbc = any(s.wbc for s in ds.slides)
        for s in ds.slides:
            sub = img_dir / s.slide_id
            sub.mkdir(parents=True, exist_ok=True)
            for i in range(s.samples.shape[0]):
                write_ppm(sub / f"{i:03d}.ppm", s.samples[i])
        if any_wbc:
            with open(d / "wbc.csv", "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["slide_id", "sample_index", "cy", "cx", "radius"])
                for s in ds.slides:
                    if s.wbc is None:
                        continue
                    for i, (cy, cx, r) in enumerate(s.wbc):
                        writer.writerow([s.slide_id, i, cy, cx, r])


def _require(path: Path) -> Path:
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path}")
    return path


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    meta = json.loads(_require(d / "dataset.json").read_text(encoding="utf-8"))
    tax = parse_taxonomy(
        _require(d / meta.get("taxonomy_file", "taxonomy.json")).read_text(encoding="utf-8")
    )
    mode = meta["mode"]
    dims = tuple(meta["dims"]) if isinstance(meta["dims"], list) else int(meta["dims"])
    labels: list[tuple[str, str, bool]] = []
    with open(_require(d / "labels.csv"), "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            labels.append(
                (row["slide_id"], row["leaf"], row["fold_eligible"] in ("1", "True", "true"))
            )
    slides = []
    if mode == "features":
        per_slide: dict[str, list[np.ndarray]] = {sid: [] for sid, _, _ in labels}
        with open(_require(d / "features.csv"), "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            dim = len(header) - 2
            if dim != dims:
                raise DatasetError(
                    f"features.csv has {dim} feature columns, dataset.json says {dims}"
                )
            for row in reader:
                sid = row[0]
                if sid not in per_slide:
                    raise DatasetError(f"features.csv references unknown slide {sid!r}")
                per_slide[sid].append(np.array([float(v) for v in row[2:]]))
        for sid, leaf, eligible in labels:
            if not per_slide[sid]:
                raise DatasetError(f"slide {sid!r} has no rows in features.csv")
            slides.append(
                SlideRecord(sid, leaf, np.stack(per_slide[sid]), fold_eligible=eligible)
            )
    elif mode == "images":
        wbc: dict[tuple[str, int], tuple[int, int, int]] = {}
        wbc_path = d / "wbc.csv"
        if wbc_path.exists():
            with open(wbc_path, "r", encoding="utf-8", newline="") as f:
                for row in csv.DictReader(f):
                    wbc[(row["slide_id"], int(row["sample_index"]))] = (
                        int(row["cy"]), int(row["cx"]), int(row["radius"])
                    )
        for sid, leaf, eligible in labels:
            sub = d / "images" / sid
            if not sub.is_dir():
                raise DatasetError(f"missing image directory for slide {sid!r}: {sub}")
            files = sorted(sub.glob("*.ppm"))
            if not files:
                raise DatasetError(f"slide {sid!r} has no .ppm files in {sub}")
            imgs = []
            for i, fp in enumerate(files):
                try:
                    imgs.append(read_ppm(fp))
                except DatasetError as e:
                    raise DatasetError(f"slide {sid!r} sample {i}: {e}") from None
            meta_rows = [wbc.get((sid, i)) for i in range(len(files))]
            slides.append(
                SlideRecord(
                    sid,
                    leaf,
                    np.stack(imgs),
                    fold_eligible=eligible,
                    wbc=None if all(m is None for m in meta_rows) else tuple(meta_rows),
                )
            )
    else:
        raise DatasetError(f"unknown dataset mode {mode!r}")
    return Dataset(taxonomy=tax, mode=mode, dims=dims, slides=tuple(slides))
