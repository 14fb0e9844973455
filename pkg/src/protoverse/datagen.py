"""Desk-scale labeled data: a parametric renderer of graded vertebra stacks
plus deterministic stratified splitting.

Every sample is a 2-plane image (grayscale sagittal view + centroid Gaussian)
of a vertical stack of vertebral bodies.  The center vertebra is rendered
with a height reduction drawn from its grade's band; context vertebrae are
always healthy.  The renderer records its own ground-truth geometry (center
vertebra bounding box and heights) so localization claims can be tested
against exact rectangles downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import storage

GRADES = ("G0", "G2", "G3")

# Height-reduction bands, as (low, high) with grade-specific bound rules:
# G0 includes low and excludes high, G2 includes both, G3 excludes low and
# includes high.  Configured ranges must stay inside these bands.
GRADE_REDUCTION_BANDS = {
    "G0": (0.0, 0.05),
    "G2": (0.25, 0.40),
    "G3": (0.40, 0.70),
}

DEFORMITY_STYLES = ("crush", "anterior_wedge", "biconcave")

BACKGROUND_INTENSITY = 0.08
BODY_INTENSITY = 0.72


class DatagenError(ValueError):
    """Invalid generation request (bad config, empty dataset, bad geometry)."""


@dataclass
class ImageSample:
    """One 2-plane labeled image with its provenance and geometry record."""

    image: np.ndarray
    centroid_channel: np.ndarray
    grade: str | None
    sample_id: str = ""
    source: str = "synthetic"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.centroid_channel.shape:
            raise ValueError("image and centroid channel must share dimensions")
        if self.grade is not None and self.grade not in GRADES:
            raise ValueError(f"grade must be one of {GRADES}, got {self.grade!r}")

    def planes(self) -> np.ndarray:
        return np.stack([self.image, self.centroid_channel])


@dataclass
class ManifestEntry:
    sample_id: str
    path: str
    grade: str
    metadata: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    """Ordered list of labeled samples plus split provenance; ``root`` is
    the directory image paths are relative to."""

    samples: list
    split: str = "train"
    seed: int = 0
    image_format: str = "pvimg"
    root: Path | None = None

    def __post_init__(self):
        ids = [e.sample_id for e in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample_id in manifest")

    @property
    def class_counts(self) -> dict:
        counts = {g: 0 for g in GRADES}
        for e in self.samples:
            counts[e.grade] += 1
        return counts

    def __len__(self) -> int:
        return len(self.samples)

    def by_grade(self, grade: str) -> list:
        return [e for e in self.samples if e.grade == grade]

    def save(self, path) -> None:
        storage.save_manifest(self, path)


@dataclass
class SyntheticConfig:
    """Generator knobs.  Default counts mirror a heavily imbalanced clinical
    training distribution; ``context`` is the number of healthy vertebrae
    rendered above and below the graded one."""

    counts: dict = field(default_factory=lambda: {"G0": 982, "G2": 58, "G3": 38})
    image_size: int = 112
    context: int = 1
    reduction_ranges: dict = field(default_factory=lambda: dict(GRADE_REDUCTION_BANDS))
    style_weights: dict = field(
        default_factory=lambda: {s: 1.0 for s in DEFORMITY_STYLES}
    )
    noise: float = 0.03
    centroid_sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        for g in GRADES:
            if g not in self.counts:
                self.counts[g] = 0
            if self.counts[g] < 0:
                raise DatagenError(f"count for {g} must be >= 0")
        for g, (low, high) in self.reduction_ranges.items():
            band_low, band_high = GRADE_REDUCTION_BANDS[g]
            if not (band_low <= low < high <= band_high):
                raise DatagenError(
                    f"{g} reduction range ({low}, {high}) must lie inside "
                    f"band ({band_low}, {band_high})"
                )
        if self.image_size < 16:
            raise DatagenError("image_size too small")
        if self.context < 1:
            raise DatagenError("need at least one context vertebra above and below")
        if self.noise < 0:
            raise DatagenError("noise amplitude must be >= 0")
        total_weight = sum(self.style_weights.get(s, 0.0) for s in DEFORMITY_STYLES)
        if total_weight <= 0:
            raise DatagenError("style weights must not all be zero")
        _stack_geometry(self)  # fail early if the stack cannot fit

    @property
    def sigma(self) -> float:
        return self.centroid_sigma if self.centroid_sigma is not None else self.image_size / 14.0


def _stack_geometry(config: SyntheticConfig):
    """Template pixel geometry: (body height, gap, body width)."""
    s = config.image_size
    h0 = max(6, round(0.20 * s))
    gap = max(2, round(0.08 * s))
    width = max(8, round(0.42 * s))
    stack = 2 * config.context + 1
    total = stack * h0 + (stack - 1) * gap
    if total > 0.92 * s:
        raise DatagenError(
            f"image size {s} cannot fit {stack} vertebrae ({total}px stack); "
            "increase image_size or reduce context"
        )
    return h0, gap, width


def validate_reduction(grade: str, reduction: float, ranges: dict) -> None:
    """Enforce the grade's configured band with its open/closed bound rules."""
    low, high = ranges[grade]
    if grade == "G0":
        ok = low <= reduction < high
    elif grade == "G2":
        ok = low <= reduction <= high
    else:
        ok = low < reduction <= high
    if not ok:
        raise DatagenError(f"reduction {reduction} outside {grade} range ({low}, {high})")


def make_centroid_channel(centroid, sigma: float, size) -> np.ndarray:
    """Gaussian bump exp(-|p - centroid|^2 / (2 sigma^2)) peaking at 1.0 at
    the centroid pixel."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = (size, size) if np.isscalar(size) else size
    cr, cc = centroid
    if not (0 <= cr < h and 0 <= cc < w):
        raise ValueError(f"centroid {centroid} outside image bounds {(h, w)}")
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    d2 = (rows - cr) ** 2 + (cols - cc) ** 2
    return np.exp(-d2 / (2.0 * sigma**2)).astype(np.float32)


def _height_profile(style: str, reduction: float, width: int) -> np.ndarray:
    """Per-column height fraction of the template for one vertebral body."""
    x = np.linspace(0.0, 1.0, width)
    if style == "crush":
        shape = np.ones(width)
    elif style == "anterior_wedge":
        shape = 1.0 - x  # anterior edge at column 0 takes the full reduction
    elif style == "biconcave":
        shape = np.sin(np.pi * x) ** 1.5  # both endplates bow toward the middle
    else:
        raise DatagenError(f"unknown deformity style {style!r}")
    return 1.0 - reduction * shape


def _column_coverage(size: int, cy: float, heights_px: np.ndarray) -> np.ndarray:
    """Antialiased fill: fraction of each pixel covered by the vertical band
    [cy - h/2, cy + h/2] per column."""
    rows = np.arange(size, dtype=np.float64)[:, None]
    top = cy - heights_px[None, :] / 2.0
    bot = cy + heights_px[None, :] / 2.0
    return np.clip(np.minimum(bot, rows + 1.0) - np.maximum(top, rows), 0.0, 1.0)


def render_vertebra_image(
    grade: str,
    reduction: float,
    style: str,
    seed,
    config: SyntheticConfig | None = None,
    sample_id: str = "",
) -> ImageSample:
    """Render one stack image.

    Geometry (positions, heights, bounding box) depends only on
    (grade, reduction, style, config); the seed drives noise and intensity
    jitter, so the geometry record is reproducible across seeds.
    """
    if grade not in GRADES:
        raise DatagenError(f"grade must be one of {GRADES}")
    if style not in DEFORMITY_STYLES:
        raise DatagenError(f"unknown deformity style {style!r}")
    config = config or SyntheticConfig(counts={g: 0 for g in GRADES})
    validate_reduction(grade, reduction, config.reduction_ranges)

    rng = np.random.default_rng(seed)
    s = config.image_size
    h0, gap, width = _stack_geometry(config)
    x0 = (s - width) // 2
    center = s // 2

    coverage_sum = np.zeros((s, s), dtype=np.float64)
    intensity_sum = np.zeros((s, s), dtype=np.float64)
    target_coverage = None
    stack = 2 * config.context + 1
    for i in range(stack):
        is_target = i == config.context
        r = reduction if is_target else 0.0
        sty = style if is_target else "crush"
        cy = center + (i - config.context) * (h0 + gap)
        heights = h0 * _height_profile(sty, r, width)
        cov = np.zeros((s, s), dtype=np.float64)
        cov[:, x0 : x0 + width] = _column_coverage(s, cy, heights)
        body = BODY_INTENSITY + rng.uniform(-0.06, 0.06)
        coverage_sum += cov
        intensity_sum += cov * body
        if is_target:
            target_coverage = cov

    coverage_sum = np.clip(coverage_sum, 0.0, 1.0)
    image = BACKGROUND_INTENSITY * (1.0 - coverage_sum) + intensity_sum

    rows = np.where(target_coverage.max(axis=1) > 0.5)[0]
    cols = np.where(target_coverage.max(axis=0) > 0.5)[0]
    bbox = [int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])]

    image = gaussian_filter(image, sigma=max(0.5, s / 120.0))
    texture = gaussian_filter(rng.standard_normal((s, s)), sigma=s / 16.0)
    texture_std = texture.std()
    if texture_std > 0:
        image *= 1.0 + 0.04 * texture / texture_std
    if config.noise > 0:
        image += rng.normal(0.0, config.noise, size=(s, s))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    centroid = (center, s // 2)
    centroid_channel = make_centroid_channel(centroid, config.sigma, s)

    geometry = {
        "bbox": bbox,
        "template_height_px": float(h0),
        "min_height_px": float(h0 * (1.0 - reduction)),
        "measured_height_px": float(bbox[2] - bbox[0] + 1),
        "centroid": [int(centroid[0]), int(centroid[1])],
    }
    metadata = {"reduction": float(reduction), "style": style, "geometry": geometry}
    return ImageSample(
        image=image,
        centroid_channel=centroid_channel,
        grade=grade,
        sample_id=sample_id,
        source="synthetic",
        metadata=metadata,
    )


def _sample_reduction(rng, grade: str, ranges: dict) -> float:
    low, high = ranges[grade]
    r = float(rng.uniform(low, high))
    if grade == "G3":
        while r <= low:  # G3 band is open at the low end
            r = float(rng.uniform(low, high))
    return r


def _sample_style(rng, style_weights: dict) -> str:
    weights = np.array([style_weights.get(s, 0.0) for s in DEFORMITY_STYLES], dtype=np.float64)
    weights /= weights.sum()
    return DEFORMITY_STYLES[int(rng.choice(len(DEFORMITY_STYLES), p=weights))]


def generate_synthetic_dataset(
    config: SyntheticConfig,
    out_dir,
    split: str = "train",
    image_format: str = "pvimg",
    manifest_name: str | None = None,
) -> DatasetManifest:
    """Render the configured class counts into ``out_dir`` and write a
    manifest.  Fully deterministic: each sample's randomness derives from
    (config.seed, grade index, sample index) alone."""
    if image_format not in storage.IMAGE_FORMATS:
        raise DatagenError(f"image format must be one of {storage.IMAGE_FORMATS}")
    total = sum(config.counts.get(g, 0) for g in GRADES)
    if total == 0:
        raise DatagenError("empty manifest: all class counts are zero")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for gi, grade in enumerate(GRADES):
        for i in range(config.counts.get(grade, 0)):
            rng = np.random.default_rng([config.seed, gi, i])
            reduction = _sample_reduction(rng, grade, config.reduction_ranges)
            style = _sample_style(rng, config.style_weights) if grade != "G0" else "crush"
            sample_id = f"{grade.lower()}_{i:05d}"
            sample = render_vertebra_image(
                grade, reduction, style, [config.seed, gi, i, 1], config, sample_id
            )
            rel = storage.write_sample_arrays(
                out_dir, sample_id, sample.image, sample.centroid_channel, image_format
            )
            entries.append(
                ManifestEntry(sample_id=sample_id, path=rel, grade=grade, metadata=sample.metadata)
            )

    manifest = DatasetManifest(
        samples=entries, split=split, seed=config.seed, image_format=image_format, root=out_dir
    )
    manifest.save(out_dir / (manifest_name or f"{split}_manifest.json"))
    return manifest


def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> ImageSample:
    if manifest.root is None:
        raise ValueError("manifest has no root directory; load it from disk first")
    image, centroid = storage.read_sample_arrays(manifest.root, entry.path, manifest.image_format)
    source = "synthetic" if "geometry" in entry.metadata else "reformatted"
    return ImageSample(
        image=image,
        centroid_channel=centroid,
        grade=entry.grade,
        sample_id=entry.sample_id,
        source=source,
        metadata=entry.metadata,
    )


def largest_remainder_allocation(n: int, fractions) -> list:
    """Split n items into integer quotas matching ``fractions``; leftover
    items go to the largest fractional remainders, ties to the lower index."""
    fractions = list(fractions)
    ideal = [n * f for f in fractions]
    base = [int(np.floor(q)) for q in ideal]
    leftover = n - sum(base)
    remainders = sorted(
        range(len(fractions)), key=lambda k: (-(ideal[k] - base[k]), k)
    )
    for k in remainders[:leftover]:
        base[k] += 1
    return base


def split_dataset(manifest: DatasetManifest, fractions, seed: int):
    """Stratified (train, val, test) split with largest-remainder rounding
    per grade; deterministic in ``seed``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("fractions must be (train, val, test)")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be nonnegative and sum to 1")

    splits = ([], [], [])
    for gi, grade in enumerate(GRADES):
        entries = sorted(manifest.by_grade(grade), key=lambda e: e.sample_id)
        if not entries:
            continue
        if len(entries) < len(fractions):
            raise ValueError(f"grade {grade} has fewer samples ({len(entries)}) than splits")
        rng = np.random.default_rng([seed, gi])
        order = rng.permutation(len(entries))
        shuffled = [entries[int(k)] for k in order]
        quotas = largest_remainder_allocation(len(entries), fractions)
        start = 0
        for k, q in enumerate(quotas):
            splits[k].extend(shuffled[start : start + q])
            start += q

    names = ("train", "val", "test")
    out = []
    for name, entries in zip(names, splits):
        entries = sorted(entries, key=lambda e: e.sample_id)
        out.append(
            DatasetManifest(
                samples=entries,
                split=name,
                seed=seed,
                image_format=manifest.image_format,
                root=manifest.root,
            )
        )
    return tuple(out)
