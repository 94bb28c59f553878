"""Entropy-ascent adversarial walk on the quantised latent space.

Each step evaluates the weak classifier on the current tokens, ascends the
entropy of its predictive distribution by a standardised gradient step, and
re-projects onto the codebook. Standardising the per-example gradient keeps
step lengths comparable even when the classifier is saturated and its raw
gradients are tiny. The walk ends back on the codebook, so decoded outputs
stay on the learned manifold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .biasdata import LabeledDataset
from .errors import NumericalError, UsageError
from .vqvae import LatentCode, VqVaeParams, decode, encode_quantize, quantize

Array = np.ndarray


@dataclass
class WalkConfig:
    alpha: float = 0.1
    steps: int = 20
    grad_std_epsilon: float = 1e-8

    def validate(self, path: str = "walk") -> None:
        if not self.alpha > 0:
            raise UsageError(f"{path}.alpha: must be positive")
        if self.steps < 0:
            raise UsageError(f"{path}.steps: must be non-negative")
        if not self.grad_std_epsilon > 0:
            raise UsageError(f"{path}.grad_std_epsilon: must be positive")


@dataclass
class WalkTrace:
    entropies: Array  # (steps + 1, N): row 0 is the starting point
    indices: Array  # (steps + 1, N, M) codebook indices per step
    initial: LatentCode
    final: LatentCode

    @property
    def steps(self) -> int:
        return self.entropies.shape[0] - 1

    def tokens_changed(self) -> Array:
        """(steps, N) count of tokens that moved at each step."""
        return (self.indices[1:] != self.indices[:-1]).sum(axis=-1)


def standardize_gradient(grad: Array, alpha: float, epsilon: float) -> Array:
    """alpha * (grad - mean) / std over the whole per-example vector
    (population std); a zero vector when std falls below epsilon."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("standardize_gradient: non-finite gradient")
    std = grad.std()
    if std < epsilon:
        return np.zeros_like(grad)
    return alpha * (grad - grad.mean()) / std


def standardize_gradient_rows(grads: Array, alpha: float, epsilon: float) -> Array:
    """Row-wise standardisation for a batch of per-example gradients (N, L)."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NumericalError("standardize_gradient: non-finite gradient")
    mean = grads.mean(axis=1, keepdims=True)
    std = grads.std(axis=1, keepdims=True)
    out = np.where(std < epsilon, 0.0, alpha * (grads - mean) / np.maximum(std, epsilon))
    return out


def _entropy_and_grad(
    classifier: nn.MlpParams, tokens: Array, want_grad: bool
) -> tuple[Array, Array | None]:
    """Per-example entropy of the classifier on flattened tokens, and
    optionally the entropy-sum gradient w.r.t. the tokens."""
    n, m, d = tokens.shape
    leaf = T.Tensor(tokens, requires_grad=want_grad)
    with T.Graph() as g:
        flat = T.reshape(leaf, (n, m * d))
        logits = nn.mlp_forward(classifier, flat)
        ent = nn.predictive_entropy(logits)
        if want_grad:
            total = T.sum(ent)
    if not want_grad:
        return ent.data.copy(), None
    T.backward(g, total)
    return ent.data.copy(), leaf.grad.copy()


def adversarial_walk(
    classifier: nn.MlpParams,
    h: LatentCode,
    codebook,
    config: WalkConfig,
) -> tuple[LatentCode, WalkTrace]:
    """Run the quantisation-constrained entropy-ascent walk on a batch of
    latent codes. The gradient is taken at the already-quantised point (the
    previous projection is treated as a constant), and every step ends with a
    re-projection, so the result rows are exact codebook entries.
    """
    config.validate()
    n, m, d = h.quantised.shape
    if classifier.layers[0].weight.shape[0] != m * d:
        raise UsageError(
            f"adversarial_walk: classifier input width {classifier.layers[0].weight.shape[0]} "
            f"does not match latent size {m * d}"
        )
    entropies = np.zeros((config.steps + 1, n))
    indices = np.zeros((config.steps + 1, n, m), dtype=np.int64)
    indices[0] = h.indices
    current = h.quantised.copy()
    current_idx = h.indices.copy()

    for step in range(config.steps):
        try:
            ent, grad = _entropy_and_grad(classifier, current, want_grad=True)
        except NumericalError as err:
            raise NumericalError(f"adversarial_walk: step {step}: {err}") from err
        entropies[step] = ent
        delta = standardize_gradient_rows(
            grad.reshape(n, m * d), config.alpha, config.grad_std_epsilon
        ).reshape(n, m, d)
        current, current_idx = quantize(current + delta, codebook)
        indices[step + 1] = current_idx
    try:
        ent, _ = _entropy_and_grad(classifier, current, want_grad=False)
    except NumericalError as err:
        raise NumericalError(f"adversarial_walk: step {config.steps}: {err}") from err
    entropies[config.steps] = ent

    final = LatentCode(continuous=h.continuous.copy(), quantised=current, indices=current_idx)
    trace = WalkTrace(entropies=entropies, indices=indices, initial=h, final=final)
    return final, trace


def debias_dataset(
    vqvae_params: VqVaeParams,
    classifier: nn.MlpParams,
    dataset: LabeledDataset,
    config: WalkConfig,
    batch_size: int = 256,
) -> tuple[LabeledDataset, WalkTrace]:
    """Encode, walk, and decode every example; labels, ordering, and the
    original bias annotations are preserved for auditing."""
    config.validate()
    if len(dataset) == 0:
        raise UsageError("debias_dataset: empty dataset")
    out_images = np.zeros_like(dataset.images)
    all_entropies = []
    all_indices = []
    first_initial = None
    last_final = None
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        try:
            code = encode_quantize(vqvae_params, dataset.images[start:stop])
            walked, trace = adversarial_walk(classifier, code, vqvae_params.codebook, config)
            out_images[start:stop] = decode(vqvae_params, walked.quantised)
        except (NumericalError, UsageError) as err:
            raise type(err)(f"debias_dataset: examples [{start}, {stop}): {err}") from err
        all_entropies.append(trace.entropies)
        all_indices.append(trace.indices)
        if first_initial is None:
            first_initial = trace.initial
        last_final = walked
    merged = WalkTrace(
        entropies=np.concatenate(all_entropies, axis=1),
        indices=np.concatenate(all_indices, axis=1),
        initial=first_initial,
        final=last_final,
    )
    debiased = dataset.replace(images=out_images, provenance="debiased:walk")
    return debiased, merged
