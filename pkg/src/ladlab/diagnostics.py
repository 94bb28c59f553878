"""Instruments for measuring what a classifier is learning from.

The gradient ratio compares loss-gradient energy on the causal pixels
against the confounding pixels, per training iteration; the one-pixel
experiment tracks it while a classifier trains on a fully biased set. The
mutual-information estimator audits how much label information a dataset's
(estimated) bias factor still carries, which is how debiasing runs are
scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import biasdata as bd
from . import nn
from . import tensor as T
from .errors import NumericalError, UsageError

Array = np.ndarray

GR_INFINITY = float("inf")
_GR_DENOM_FLOOR = 1e-12


@dataclass
class PixelPartition:
    """Disjoint causal/confounding masks that together cover the image."""

    causal_mask: Array  # bool, image-shaped
    confounding_mask: Array

    def __post_init__(self):
        self.causal_mask = np.asarray(self.causal_mask, dtype=bool)
        self.confounding_mask = np.asarray(self.confounding_mask, dtype=bool)
        if self.causal_mask.shape != self.confounding_mask.shape:
            raise UsageError("pixel partition: masks must have identical shapes")
        if np.any(self.causal_mask & self.confounding_mask):
            raise UsageError("pixel partition: masks overlap")
        if not np.all(self.causal_mask | self.confounding_mask):
            raise UsageError("pixel partition: masks must cover every pixel")


def one_pixel_partition(image_shape: tuple[int, int, int], num_classes: int) -> PixelPartition:
    """Confounding region: the num_classes pixels of row 0; causal: the rest."""
    conf = np.zeros(image_shape, dtype=bool)
    conf[0, :num_classes, :] = True
    return PixelPartition(causal_mask=~conf, confounding_mask=conf)


def gradient_ratio(input_grad: Array, partition: PixelPartition) -> float:
    """L2-norm ratio of the loss gradient on causal vs confounding pixels.

    Accepts a single image gradient or a batch; batch norms are taken over
    all examples jointly. A vanishing confounding norm reports +inf.
    """
    grad = np.asarray(input_grad, dtype=np.float64)
    shape = partition.causal_mask.shape
    if grad.shape == shape:
        grad = grad[None]
    if grad.shape[1:] != shape:
        raise UsageError(
            f"gradient_ratio: gradient shape {grad.shape} does not match masks {shape}"
        )
    causal = np.linalg.norm(grad[:, partition.causal_mask])
    confounding = np.linalg.norm(grad[:, partition.confounding_mask])
    if confounding < _GR_DENOM_FLOOR:
        return GR_INFINITY
    return float(causal / confounding)


# ---------------------------------------------------------------------------
# One-pixel experiment


@dataclass
class GrRecord:
    iteration: int
    loss: float
    train_accuracy: float
    grad_norm_causal: float
    grad_norm_confounding: float
    gr: float


GR_CSV_COLUMNS = ("iter", "loss", "train_acc", "grad_norm_causal", "grad_norm_conf", "gr")


@dataclass
class OnePixelConfig:
    num_classes: int = 4
    image_size: tuple[int, int, int] = (16, 16, 1)
    samples_per_class: int = 500
    test_samples_per_class: int = 250
    pixel_value: float = 1.0
    bias_ratio: float = 1.0
    iterations: int = 2000
    # The race between the bias pixel and the stroke pattern only tips toward
    # the pixel when the strokes are faint relative to the unit pixel and the
    # classifier is narrow enough that the two routes compete for capacity.
    # Attenuating intensity changes nothing the classifier could not in
    # principle learn (accuracy is scale invariant); it changes which signal
    # the gradients reach first.
    stroke_gain: float = 0.06
    hidden_sizes: tuple[int, ...] = (4,)
    optim: nn.OptimConfig = field(default_factory=lambda: nn.OptimConfig(epochs=1))
    seed: int = 0

    def validate(self, path: str = "one_pixel") -> None:
        if self.iterations < 1:
            raise UsageError(f"{path}.iterations: must be positive")
        if not 0.0 < self.stroke_gain <= 1.0:
            raise UsageError(f"{path}.stroke_gain: must be in (0, 1]")
        self.optim.validate(f"{path}.optim")
        bd.GeneratorSpec(
            num_classes=self.num_classes,
            image_size=self.image_size,
            samples_per_class=self.samples_per_class,
            seed=self.seed,
        ).validate(path)


@dataclass
class OnePixelResult:
    series: list[GrRecord]
    final_train_accuracy: float
    clean_test_accuracy: float
    chance: float
    gr_at_start: float
    first_crossing_iteration: Optional[int]  # first iteration with GR < 1

    def series_rows(self) -> list[tuple]:
        return [
            (
                r.iteration,
                r.loss,
                r.train_accuracy,
                r.grad_norm_causal,
                r.grad_norm_confounding,
                r.gr,
            )
            for r in self.series
        ]


def run_one_pixel_experiment(config: OnePixelConfig) -> OnePixelResult:
    """Train a classifier on a one-pixel-biased set while logging, at every
    minibatch iteration, the loss, the batch accuracy, both input-gradient
    norms, and their ratio; then score the classifier on a clean test set
    drawn from a disjoint seed."""
    config.validate()
    gen = bd.GeneratorSpec(
        num_classes=config.num_classes,
        image_size=config.image_size,
        samples_per_class=config.samples_per_class,
        seed=config.seed,
    )
    base = bd.gen_glyphs(gen)
    base = base.replace(images=base.images * config.stroke_gain)
    train = bd.apply_one_pixel_bias(
        base,
        bd.BiasSpec(
            kind="one_pixel", bias_ratio=config.bias_ratio, pixel_value=config.pixel_value
        ),
    )
    test = bd.gen_glyphs(
        bd.GeneratorSpec(
            num_classes=config.num_classes,
            image_size=config.image_size,
            samples_per_class=config.test_samples_per_class,
            seed=config.seed + 1,
        )
    )
    test = test.replace(images=test.images * config.stroke_gain)
    partition = one_pixel_partition(train.image_shape, config.num_classes)

    x = train.flat_images()
    y = train.labels
    rng = np.random.default_rng(config.optim.seed)
    params = nn.init_mlp(
        [x.shape[1], *config.hidden_sizes, config.num_classes], rng
    )
    optimizer = nn.SgdOptimizer(config.optim)

    series: list[GrRecord] = []
    order = rng.permutation(len(x))
    cursor = 0
    for iteration in range(config.iterations):
        if cursor + config.optim.batch_size > len(x):
            order = rng.permutation(len(x))
            cursor = 0
        idx = order[cursor : cursor + config.optim.batch_size]
        cursor += config.optim.batch_size

        xb = T.Tensor(x[idx], requires_grad=True)
        try:
            with T.Graph() as g:
                logits = nn.mlp_forward(params, xb)
                loss = nn.cross_entropy(logits, y[idx])
            T.backward(g, loss)
        except NumericalError as err:
            raise NumericalError(f"one-pixel training diverged at iteration {iteration}: {err}") from err
        grad_images = xb.grad.reshape((-1,) + tuple(train.image_shape))
        causal = float(np.linalg.norm(grad_images[:, partition.causal_mask]))
        confounding = float(np.linalg.norm(grad_images[:, partition.confounding_mask]))
        gr = gradient_ratio(grad_images, partition)
        acc = float(np.mean(np.argmax(logits.data, axis=1) == y[idx]))
        series.append(GrRecord(iteration, loss.item(), acc, causal, confounding, gr))
        optimizer.step(params.tensors())

    crossing = next((r.iteration for r in series if r.gr < 1.0), None)
    return OnePixelResult(
        series=series,
        final_train_accuracy=nn.accuracy(params, x, y),
        clean_test_accuracy=nn.accuracy(params, test.flat_images(), test.labels),
        chance=1.0 / config.num_classes,
        gr_at_start=series[0].gr,
        first_crossing_iteration=crossing,
    )


# ---------------------------------------------------------------------------
# Label/bias mutual information

FactorExtractor = Callable[[bd.LabeledDataset], Array]


def label_bias_mutual_information(dataset: bd.LabeledDataset, factor_extractor: FactorExtractor) -> float:
    """Plug-in MI (nats) between labels and the extracted discrete factor."""
    if len(dataset) == 0:
        raise UsageError("label_bias_mutual_information: empty dataset")
    factors = np.asarray(factor_extractor(dataset))
    if factors.shape != (len(dataset),):
        raise UsageError("label_bias_mutual_information: extractor must return one factor per example")
    labels = dataset.labels
    joint = np.zeros((int(labels.max()) + 1, int(factors.max()) + 1))
    np.add.at(joint, (labels, factors), 1.0)
    p_joint = joint / joint.sum()
    p_label = p_joint.sum(axis=1, keepdims=True)
    p_factor = p_joint.sum(axis=0, keepdims=True)
    nz = p_joint > 0
    mi = float(np.sum(p_joint[nz] * np.log(p_joint[nz] / (p_label @ p_factor)[nz])))
    return max(mi, 0.0)


def make_color_factor_extractor(palette, spread_threshold: float = 0.15) -> FactorExtractor:
    """Estimate each image's dominant color as the mean over clearly
    non-gray pixels (channel spread above threshold), snapped to the nearest
    palette entry. Works for both background and foreground color biases,
    including blurry decoded images."""
    palette = np.asarray(palette, dtype=np.float64)

    def extract(dataset: bd.LabeledDataset) -> Array:
        images = dataset.images
        if images.shape[-1] != 3:
            raise UsageError("color factor extractor: needs 3-channel images")
        out = np.zeros(len(dataset), dtype=np.int64)
        for i, img in enumerate(images):
            spread = img.max(axis=-1) - img.min(axis=-1)
            mask = spread > spread_threshold
            pixels = img[mask] if mask.any() else img.reshape(-1, 3)
            mean_color = pixels.mean(axis=0)
            out[i] = int(np.argmin(((palette - mean_color) ** 2).sum(axis=1)))
        return out

    return extract


def make_one_pixel_extractor(num_classes: int) -> FactorExtractor:
    """Detected bias column: brightest of the first num_classes pixels of row 0."""

    def extract(dataset: bd.LabeledDataset) -> Array:
        row = dataset.images[:, 0, :num_classes, :].max(axis=-1)
        return np.argmax(row, axis=1).astype(np.int64)

    return extract


def recorded_factor_extractor(dataset: bd.LabeledDataset) -> Array:
    """The generator's own annotations; useful as a sanity reference."""
    if np.any(dataset.bias_values < 0):
        raise UsageError("recorded_factor_extractor: dataset has unannotated examples")
    return dataset.bias_values
