"""Synthetic collider-biased image datasets.

The generators draw grayscale glyphs (one stroke pattern per class, with
seed-driven translation and thickness jitter) and then couple a confounding
factor to the label at a configurable rate: a class-indexed pixel in the top
row, a background color, a foreground color, or a photometric corruption.
Evaluation sets either sample the factor independently of the label or hold
it at one constant value.

Everything is a pure function of (spec, seed): each example derives its own
substream from (seed, stream, index), so generation is order-independent,
reproducible, and parallelizable.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import serialize
from .errors import FormatError, UsageError

Array = np.ndarray

# Substream tags so the same seed never reuses random draws across purposes.
_STREAM_GLYPH = 0
_STREAM_BIAS = 1
_STREAM_AUGMENT = 2

GLYPH_PATTERN_COUNT = 10

CORRUPTION_NAMES = ("brightness", "contrast", "saturate", "pixelate")

COLOR_KINDS = ("background_color", "foreground_color")
BIAS_KINDS = ("one_pixel", "background_color", "foreground_color", "corruption")

# Background/foreground masks split on rendered stroke intensity.
GLYPH_MASK_THRESHOLD = 0.1


@dataclass
class GeneratorSpec:
    kind: str = "glyphs"  # "glyphs" | "idx_ingest"
    num_classes: int = 4
    image_size: tuple[int, int, int] = (16, 16, 1)
    samples_per_class: int = 500
    seed: int = 0
    images_path: Optional[str] = None  # idx_ingest only
    labels_path: Optional[str] = None

    def validate(self, path: str = "generator") -> None:
        if self.kind not in ("glyphs", "idx_ingest"):
            raise UsageError(f"{path}.kind: unknown generator kind {self.kind!r}")
        h, w, c = self.image_size
        if c not in (1, 3):
            raise UsageError(f"{path}.image_size: channels must be 1 or 3, got {c}")
        if self.num_classes < 2:
            raise UsageError(f"{path}.num_classes: need at least 2 classes")
        if self.num_classes > w:
            raise UsageError(f"{path}.num_classes: must not exceed image width {w}")
        if self.kind == "glyphs":
            if h < 8 or w < 8:
                raise UsageError(f"{path}.image_size: glyphs need at least 8x8, got {h}x{w}")
            if self.num_classes > GLYPH_PATTERN_COUNT:
                raise UsageError(
                    f"{path}.num_classes: only {GLYPH_PATTERN_COUNT} glyph patterns exist"
                )
            if self.samples_per_class < 1:
                raise UsageError(f"{path}.samples_per_class: must be positive")
        if self.kind == "idx_ingest" and (self.images_path is None or self.labels_path is None):
            raise UsageError(f"{path}: idx_ingest requires images_path and labels_path")


@dataclass
class BiasSpec:
    kind: str = "background_color"
    bias_ratio: float = 1.0
    palette: Optional[list[list[float]]] = None  # per-class RGB, color kinds
    corruptions: Optional[list[str]] = None  # per-class names, corruption kind
    color_noise_std: float = 0.005
    pixel_value: float = 1.0

    def validate(self, num_classes: int, path: str = "bias") -> None:
        if self.kind not in BIAS_KINDS:
            raise UsageError(f"{path}.kind: unknown bias kind {self.kind!r}")
        if not 0.0 <= self.bias_ratio <= 1.0:
            raise UsageError(f"{path}.bias_ratio: must be in [0, 1]")
        if self.color_noise_std < 0:
            raise UsageError(f"{path}.color_noise_std: must be non-negative")
        if self.kind == "one_pixel" and not 0.0 <= self.pixel_value <= 1.0:
            raise UsageError(f"{path}.pixel_value: must be in [0, 1]")
        if self.kind in COLOR_KINDS:
            palette = self.resolved_palette(num_classes)
            if len(palette) != num_classes:
                raise UsageError(f"{path}.palette: need exactly {num_classes} entries")
            for i, color in enumerate(palette):
                if len(color) != 3 or any(not 0.0 <= v <= 1.0 for v in color):
                    raise UsageError(f"{path}.palette[{i}]: entries are RGB triples in [0, 1]")
        if self.kind == "corruption":
            names = self.resolved_corruptions(num_classes)
            if len(names) != num_classes:
                raise UsageError(f"{path}.corruptions: need exactly {num_classes} entries")
            for name in names:
                if name not in CORRUPTION_NAMES:
                    raise UsageError(f"{path}.corruptions: unknown corruption {name!r}")

    def resolved_palette(self, num_classes: int) -> list[list[float]]:
        if self.palette is not None:
            return [list(map(float, c)) for c in self.palette]
        return default_palette(num_classes)

    def resolved_corruptions(self, num_classes: int) -> list[str]:
        if self.corruptions is not None:
            return list(self.corruptions)
        if num_classes > len(CORRUPTION_NAMES):
            raise UsageError(
                f"bias.corruptions: only {len(CORRUPTION_NAMES)} built-in corruptions; "
                f"list one per class explicitly"
            )
        return list(CORRUPTION_NAMES[:num_classes])


@dataclass
class EvalMode:
    mode: str  # "independent" | "conditioned"
    # Conditioned factor: an RGB triple for color kinds, or "clean" for
    # one-pixel/corruption kinds (bias withheld entirely).
    conditioned_value: Optional[object] = None

    def validate(self, bias_kind: str, path: str = "eval") -> None:
        if self.mode not in ("independent", "conditioned"):
            raise UsageError(f"{path}.mode: unknown mode {self.mode!r}")
        if self.mode == "independent":
            return
        if self.conditioned_value is None:
            raise UsageError(f"{path}.conditioned_value: required when mode is conditioned")
        if bias_kind in COLOR_KINDS:
            v = self.conditioned_value
            if not (isinstance(v, (list, tuple)) and len(v) == 3):
                raise UsageError(f"{path}.conditioned_value: expected an RGB triple for {bias_kind}")
        else:
            if self.conditioned_value != "clean":
                raise UsageError(
                    f"{path}.conditioned_value: only 'clean' is supported for {bias_kind}"
                )

    def tag(self) -> str:
        return self.mode


@dataclass
class LabeledDataset:
    images: Array  # (N, H, W, C) float64 in [0, 1]
    labels: Array  # (N,) int64
    bias_values: Array  # (N,) int64 factor index; -1 when no factor applied
    aligned: Array  # (N,) bool
    seed: int
    provenance: str

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.bias_values = np.asarray(self.bias_values, dtype=np.int64)
        self.aligned = np.asarray(self.aligned, dtype=bool)
        n = self.images.shape[0]
        if self.images.ndim != 4:
            raise UsageError(f"dataset: images must be (N, H, W, C), got {self.images.shape}")
        if not (self.labels.shape == self.bias_values.shape == self.aligned.shape == (n,)):
            raise UsageError("dataset: per-example arrays must all have length N")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise UsageError("dataset: pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def flat_images(self) -> Array:
        return self.images.reshape(len(self), -1)

    def replace(self, **kwargs) -> "LabeledDataset":
        fields = dict(
            images=self.images,
            labels=self.labels,
            bias_values=self.bias_values,
            aligned=self.aligned,
            seed=self.seed,
            provenance=self.provenance,
        )
        fields.update(kwargs)
        return LabeledDataset(**fields)


def default_palette(num_classes: int) -> list[list[float]]:
    """Maximally separated hues at full saturation and value."""
    return [
        [float(v) for v in colorsys.hsv_to_rgb(k / num_classes, 1.0, 1.0)]
        for k in range(num_classes)
    ]


# ---------------------------------------------------------------------------
# Glyph rendering

# Stroke endpoints in unit coordinates (x right, y down). Ten patterns:
# ring, bar, Z, plus, X, box, triangle, T, L, U.
_GLYPH_SEGMENTS: list[list[tuple[float, float, float, float]]] = [
    [],  # class 0 is a ring, handled separately
    [(0.5, 0.18, 0.5, 0.82)],
    [(0.2, 0.2, 0.8, 0.2), (0.8, 0.2, 0.2, 0.8), (0.2, 0.8, 0.8, 0.8)],
    [(0.18, 0.5, 0.82, 0.5), (0.5, 0.18, 0.5, 0.82)],
    [(0.2, 0.2, 0.8, 0.8), (0.8, 0.2, 0.2, 0.8)],
    [(0.22, 0.22, 0.78, 0.22), (0.78, 0.22, 0.78, 0.78), (0.78, 0.78, 0.22, 0.78), (0.22, 0.78, 0.22, 0.22)],
    [(0.5, 0.18, 0.2, 0.78), (0.2, 0.78, 0.8, 0.78), (0.8, 0.78, 0.5, 0.18)],
    [(0.2, 0.2, 0.8, 0.2), (0.5, 0.2, 0.5, 0.82)],
    [(0.25, 0.18, 0.25, 0.8), (0.25, 0.8, 0.8, 0.8)],
    [(0.22, 0.2, 0.22, 0.75), (0.22, 0.75, 0.78, 0.75), (0.78, 0.2, 0.78, 0.75)],
]


def _segment_distance(px: Array, py: Array, seg: tuple[float, float, float, float]) -> Array:
    x0, y0, x1, y1 = seg
    dx, dy = x1 - x0, y1 - y0
    length2 = dx * dx + dy * dy
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / length2, 0.0, 1.0)
    qx, qy = x0 + t * dx, y0 + t * dy
    return np.hypot(px - qx, py - qy)


_THICKNESS_LEVELS = (0.9, 1.15, 1.4)  # stroke widths in pixels


def render_glyph(class_id: int, height: int, width: int, rng: np.random.Generator) -> Array:
    """One antialiased stroke drawing, jittered by whole-pixel translations up
    to +-2 px and drawn at one of three stroke thicknesses. Discrete jitter
    keeps the per-patch appearance space small, which the quantiser needs.
    Returns (height, width) intensities in [0, 1]."""
    if not 0 <= class_id < GLYPH_PATTERN_COUNT:
        raise UsageError(f"render_glyph: class {class_id} has no pattern")
    dx = float(rng.integers(-2, 3)) / width
    dy = float(rng.integers(-2, 3)) / height
    scale = float(max(height, width))
    thickness = _THICKNESS_LEVELS[rng.integers(len(_THICKNESS_LEVELS))] / scale
    aa = 0.7 / scale

    cols = (np.arange(width) + 0.5) / width
    rows = (np.arange(height) + 0.5) / height
    px, py = np.meshgrid(cols, rows)
    px = px - dx
    py = py - dy

    if class_id == 0:
        dist = np.abs(np.hypot(px - 0.5, py - 0.5) - 0.30)
    else:
        dist = np.min(
            np.stack([_segment_distance(px, py, seg) for seg in _GLYPH_SEGMENTS[class_id]]),
            axis=0,
        )
    # continuous intensity jitter keeps every drawing bit-unique across seeds
    intensity = rng.uniform(0.94, 1.0)
    return intensity * np.clip((thickness - dist) / aa, 0.0, 1.0)


def _example_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def gen_glyphs(spec: GeneratorSpec) -> LabeledDataset:
    """Balanced, unbiased grayscale glyph dataset (one pattern per class)."""
    spec.validate()
    if spec.kind != "glyphs":
        raise UsageError("gen_glyphs: spec.kind must be 'glyphs'")
    h, w, _ = spec.image_size
    n = spec.num_classes * spec.samples_per_class
    images = np.zeros((n, h, w, 1))
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        label = i % spec.num_classes
        rng = _example_rng(spec.seed, _STREAM_GLYPH, i)
        images[i, :, :, 0] = render_glyph(label, h, w, rng)
        labels[i] = label
    return LabeledDataset(
        images=images,
        labels=labels,
        bias_values=np.full(n, -1, dtype=np.int64),
        aligned=np.ones(n, dtype=bool),
        seed=spec.seed,
        provenance="generated:glyphs",
    )


# ---------------------------------------------------------------------------
# Factor assignment and bias application


def _draw_factor(rng: np.random.Generator, label: int, bias_ratio: float, num_classes: int) -> tuple[int, bool]:
    """The label's own factor with probability bias_ratio, otherwise a
    uniformly random *different* class's factor."""
    if rng.random() < bias_ratio:
        return label, True
    j = int(rng.integers(num_classes - 1))
    return j + (j >= label), False


def _glyph_intensity(images: Array) -> Array:
    """Stroke intensity per pixel, regardless of channel count."""
    return images.max(axis=-1)


def _ensure_unbiased(dataset: LabeledDataset, op: str) -> None:
    if not np.all(dataset.bias_values == -1):
        raise UsageError(f"{op}: expected an unbiased base dataset")


def _apply_one_pixel(images: Array, factors: Array, pixel_value: float) -> Array:
    out = images.copy()
    out[np.arange(len(factors)), 0, factors, :] = pixel_value
    return out


def _sample_color(palette: Array, factor: int, noise_std: float, rng: np.random.Generator) -> Array:
    color = palette[factor]
    if noise_std > 0:
        color = color + rng.normal(0.0, noise_std, size=3)
    return np.clip(color, 0.0, 1.0)


def _to_rgb(images: Array) -> Array:
    if images.shape[-1] == 3:
        return images.copy()
    return np.repeat(images, 3, axis=-1)


def _paint_background(images: Array, colors: Array) -> Array:
    """Color the non-stroke pixels; stroke pixels keep their gray values."""
    intensity = _glyph_intensity(images)
    out = _to_rgb(images)
    bg = intensity < GLYPH_MASK_THRESHOLD
    out[bg] = colors[np.nonzero(bg)[0]]
    return out


def _paint_foreground(images: Array, colors: Array) -> Array:
    """Stroke pixels take the (flat) color; background goes black."""
    intensity = _glyph_intensity(images)
    out = np.zeros(images.shape[:-1] + (3,))
    fg = intensity >= GLYPH_MASK_THRESHOLD
    out[fg] = colors[np.nonzero(fg)[0]]
    return out


def _draw_all_factors(dataset: LabeledDataset, spec: BiasSpec) -> tuple[Array, Array, Array]:
    """One pass of per-example draws: factor index, alignment flag, and (for
    color kinds) the noised color, all from the example's own substream."""
    num_classes = dataset.num_classes
    n = len(dataset)
    factors = np.zeros(n, dtype=np.int64)
    aligned = np.zeros(n, dtype=bool)
    colors = np.zeros((n, 3))
    palette = (
        np.asarray(spec.resolved_palette(num_classes)) if spec.kind in COLOR_KINDS else None
    )
    for i in range(n):
        rng = _example_rng(dataset.seed, _STREAM_BIAS, i)
        factors[i], aligned[i] = _draw_factor(
            rng, int(dataset.labels[i]), spec.bias_ratio, num_classes
        )
        if palette is not None:
            colors[i] = _sample_color(palette, factors[i], spec.color_noise_std, rng)
    return factors, aligned, colors


def apply_one_pixel_bias(dataset: LabeledDataset, spec: BiasSpec) -> LabeledDataset:
    """Set pixel (row 0, column = factor index) to spec.pixel_value."""
    num_classes = dataset.num_classes
    spec.validate(num_classes)
    _ensure_unbiased(dataset, "apply_one_pixel_bias")
    if num_classes > dataset.image_shape[1]:
        raise UsageError("apply_one_pixel_bias: more classes than image columns")
    factors, aligned, _ = _draw_all_factors(dataset, spec)
    images = _apply_one_pixel(dataset.images, factors, spec.pixel_value)
    return dataset.replace(
        images=images, bias_values=factors, aligned=aligned, provenance="biased:one_pixel"
    )


def _apply_color_bias(dataset: LabeledDataset, spec: BiasSpec, paint) -> tuple[Array, Array, Array]:
    spec.validate(dataset.num_classes)
    factors, aligned, colors = _draw_all_factors(dataset, spec)
    return paint(dataset.images, colors), factors, aligned


def apply_background_bias(dataset: LabeledDataset, spec: BiasSpec) -> LabeledDataset:
    _ensure_unbiased(dataset, "apply_background_bias")
    images, factors, aligned = _apply_color_bias(dataset, spec, _paint_background)
    return dataset.replace(
        images=images, bias_values=factors, aligned=aligned, provenance="biased:background_color"
    )


def apply_foreground_bias(dataset: LabeledDataset, spec: BiasSpec) -> LabeledDataset:
    _ensure_unbiased(dataset, "apply_foreground_bias")
    images, factors, aligned = _apply_color_bias(dataset, spec, _paint_foreground)
    return dataset.replace(
        images=images, bias_values=factors, aligned=aligned, provenance="biased:foreground_color"
    )


# ---------------------------------------------------------------------------
# Corruptions


def corrupt_brightness(image: Array) -> Array:
    return np.clip(image + 0.3, 0.0, 1.0)


def corrupt_contrast(image: Array) -> Array:
    return np.clip(0.5 + 0.5 * (image - 0.5), 0.0, 1.0)


def corrupt_saturate(image: Array) -> Array:
    mean = image.mean(axis=-1, keepdims=True)
    return np.clip(mean + 1.8 * (image - mean), 0.0, 1.0)


def corrupt_pixelate(image: Array, block: int = 2) -> Array:
    h, w = image.shape[:2]
    out = image.copy()
    for r0 in range(0, h, block):
        for c0 in range(0, w, block):
            patch = image[r0 : r0 + block, c0 : c0 + block]
            out[r0 : r0 + block, c0 : c0 + block] = patch.mean(axis=(0, 1))
    return out


_CORRUPTION_FNS = {
    "brightness": corrupt_brightness,
    "contrast": corrupt_contrast,
    "saturate": corrupt_saturate,
    "pixelate": corrupt_pixelate,
}


def apply_corruption(name: str, image: Array) -> Array:
    fn = _CORRUPTION_FNS.get(name)
    if fn is None:
        raise UsageError(f"apply_corruption: unknown corruption {name!r}")
    return fn(image)


def apply_corruption_bias(dataset: LabeledDataset, spec: BiasSpec) -> LabeledDataset:
    num_classes = dataset.num_classes
    spec.validate(num_classes)
    _ensure_unbiased(dataset, "apply_corruption_bias")
    names = spec.resolved_corruptions(num_classes)
    factors, aligned, _ = _draw_all_factors(dataset, spec)
    images = np.stack(
        [apply_corruption(names[factors[i]], dataset.images[i]) for i in range(len(dataset))]
    )
    return dataset.replace(
        images=images, bias_values=factors, aligned=aligned, provenance="biased:corruption"
    )


_BIAS_APPLICATORS = {
    "one_pixel": apply_one_pixel_bias,
    "background_color": apply_background_bias,
    "foreground_color": apply_foreground_bias,
    "corruption": apply_corruption_bias,
}


def apply_bias(dataset: LabeledDataset, spec: BiasSpec) -> LabeledDataset:
    return _BIAS_APPLICATORS[spec.kind](dataset, spec)


# ---------------------------------------------------------------------------
# Evaluation sets


def make_eval_set(base: LabeledDataset, spec: BiasSpec, mode: EvalMode) -> LabeledDataset:
    """Independent mode: factor uniform over all classes' factors, regardless
    of label. Conditioned mode: one constant factor for every example (for
    one-pixel/corruption kinds that constant is the clean image)."""
    num_classes = base.num_classes
    spec.validate(num_classes)
    mode.validate(spec.kind)
    _ensure_unbiased(base, "make_eval_set")
    n = len(base)

    if mode.mode == "independent":
        factors = np.zeros(n, dtype=np.int64)
        colors = np.zeros((n, 3))
        palette = (
            np.asarray(spec.resolved_palette(num_classes)) if spec.kind in COLOR_KINDS else None
        )
        for i in range(n):
            rng = _example_rng(base.seed, _STREAM_BIAS, i)
            factors[i] = rng.integers(num_classes)
            if palette is not None:
                colors[i] = _sample_color(palette, factors[i], spec.color_noise_std, rng)
        if spec.kind == "one_pixel":
            images = _apply_one_pixel(base.images, factors, spec.pixel_value)
        elif spec.kind in COLOR_KINDS:
            paint = _paint_background if spec.kind == "background_color" else _paint_foreground
            images = paint(base.images, colors)
        else:
            names = spec.resolved_corruptions(num_classes)
            images = np.stack(
                [apply_corruption(names[factors[i]], base.images[i]) for i in range(n)]
            )
        return base.replace(
            images=images,
            bias_values=factors,
            aligned=factors == base.labels,
            provenance=f"eval:independent:{spec.kind}",
        )

    # conditioned: one constant factor; "clean" keeps the base image untouched
    if spec.kind in COLOR_KINDS:
        color = np.asarray(mode.conditioned_value, dtype=np.float64)
        colors = np.broadcast_to(color, (n, 3)).copy()
        paint = _paint_background if spec.kind == "background_color" else _paint_foreground
        images = paint(base.images, colors)
    else:
        images = base.images.copy()
    return base.replace(
        images=images,
        bias_values=np.full(n, -1, dtype=np.int64),
        aligned=np.zeros(n, dtype=bool),
        provenance=f"eval:conditioned:{spec.kind}",
    )


# ---------------------------------------------------------------------------
# Augmentation


def flip_images_horizontal(images: Array) -> Array:
    return images[:, :, ::-1, :].copy()


def crop_with_padding(images: Array, padding: int, offsets: Array) -> Array:
    """Zero-pad by `padding` and crop back to the original size at the given
    (row, col) offsets, one pair per image."""
    if padding == 0:
        return images.copy()
    n, h, w, c = images.shape
    padded = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    padded[:, padding : padding + h, padding : padding + w, :] = images
    out = np.zeros_like(images)
    for i, (oy, ox) in enumerate(offsets):
        out[i] = padded[i, oy : oy + h, ox : ox + w, :]
    return out


def augment_random_crop_flip(
    dataset: LabeledDataset, padding: int, flip: bool, seed: int
) -> LabeledDataset:
    if padding < 0:
        raise UsageError("augment_random_crop_flip: padding must be non-negative")
    if padding == 0 and not flip:
        return dataset.replace(images=dataset.images.copy())
    n = len(dataset)
    offsets = np.zeros((n, 2), dtype=np.int64)
    flips = np.zeros(n, dtype=bool)
    for i in range(n):
        rng = _example_rng(seed, _STREAM_AUGMENT, i)
        offsets[i] = rng.integers(0, 2 * padding + 1, size=2)
        if flip:
            flips[i] = rng.random() < 0.5
    images = crop_with_padding(dataset.images, padding, offsets)
    if flip and flips.any():
        images[flips] = images[flips][:, :, ::-1, :]
    return dataset.replace(images=images, provenance=dataset.provenance + "+augmented")


def batch_crop_transform(image_shape: tuple[int, int, int], padding: int, flip: bool):
    """Minibatch transform for training loops: flat features in, flat
    features out, randomness from the loop's generator."""

    def transform(x_flat: Array, rng: np.random.Generator) -> Array:
        if padding == 0 and not flip:
            return x_flat
        images = x_flat.reshape((-1,) + tuple(image_shape))
        offsets = rng.integers(0, 2 * padding + 1, size=(images.shape[0], 2))
        images = crop_with_padding(images, padding, offsets)
        if flip:
            flips = rng.random(images.shape[0]) < 0.5
            images[flips] = images[flips][:, :, ::-1, :]
        return images.reshape(x_flat.shape[0], -1)

    return transform


# ---------------------------------------------------------------------------
# IDX ingestion

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"idx: truncated file while reading {what}")
    return data


def load_idx(images_path: str | Path, labels_path: str | Path, seed: int = 0) -> LabeledDataset:
    """Parse big-endian IDX image/label files into a dataset scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise FormatError(
                f"idx: bad image magic 0x{magic:08x}, expected 0x{_IDX_IMAGES_MAGIC:08x}"
            )
        pixels = np.frombuffer(
            _read_exact(fh, count * rows * cols, "image pixels"), dtype=np.uint8
        )
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise FormatError(
                f"idx: bad label magic 0x{magic:08x}, expected 0x{_IDX_LABELS_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(fh, label_count, "labels"), dtype=np.uint8)
    if count != label_count:
        raise FormatError(f"idx: {count} images but {label_count} labels")
    images = pixels.reshape(count, rows, cols, 1).astype(np.float64) / 255.0
    return LabeledDataset(
        images=images,
        labels=labels.astype(np.int64),
        bias_values=np.full(count, -1, dtype=np.int64),
        aligned=np.ones(count, dtype=bool),
        seed=seed,
        provenance="generated:idx",
    )


def generate_base(spec: GeneratorSpec) -> LabeledDataset:
    spec.validate()
    if spec.kind == "glyphs":
        return gen_glyphs(spec)
    return load_idx(spec.images_path, spec.labels_path, seed=spec.seed)


# ---------------------------------------------------------------------------
# Dataset files


def save_dataset(path: str | Path, dataset: LabeledDataset, extra_manifest: Optional[dict] = None) -> None:
    manifest = {
        "format": "ladlab-dataset",
        "version": 1,
        "seed": dataset.seed,
        "provenance": dataset.provenance,
        "counts": {"examples": len(dataset), "classes": dataset.num_classes},
        "image_shape": list(dataset.image_shape),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    serialize.write_blob_file(
        path,
        manifest,
        [
            ("images", dataset.images),
            ("labels", dataset.labels.astype(np.float64)),
            ("bias_values", dataset.bias_values.astype(np.float64)),
            ("aligned", dataset.aligned.astype(np.float64)),
        ],
    )


def load_dataset(path: str | Path) -> LabeledDataset:
    manifest, tensors = serialize.read_blob_file(path)
    if manifest.get("format") != "ladlab-dataset":
        raise FormatError(f"{path}: not a dataset file")
    try:
        return LabeledDataset(
            images=tensors["images"],
            labels=tensors["labels"].astype(np.int64),
            bias_values=tensors["bias_values"].astype(np.int64),
            aligned=tensors["aligned"] > 0.5,
            seed=int(manifest["seed"]),
            provenance=str(manifest["provenance"]),
        )
    except KeyError as err:
        raise FormatError(f"{path}: dataset file missing blob {err}") from None
