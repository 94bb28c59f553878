"""Vector-quantised autoencoder over image patches.

The encoder and decoder are shared MLPs applied to non-overlapping patches:
each patch becomes one latent token, so the token grid retains spatial
support (background patches quantise to color-like codes, stroke patches to
shape-carrying codes). Tokens are projected to their nearest codebook vector;
training uses the straight-through estimator, with the codebook learned by
gradient on its own alignment term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from . import serialize
from . import tensor as T
from .biasdata import LabeledDataset
from .errors import FormatError, NumericalError, UsageError

Array = np.ndarray


@dataclass
class Codebook:
    codes: T.Tensor  # (K, d)

    @property
    def num_codes(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def validate(self) -> None:
        data = self.codes.data
        if data.ndim != 2 or data.shape[0] < 1:
            raise UsageError(f"codebook: expected (K, d) codes, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NumericalError("codebook: non-finite code vectors")

    def duplicate_codes(self) -> int:
        """Number of bit-identical code pairs (collapse detector)."""
        seen = set()
        dupes = 0
        for row in self.codes.data:
            key = row.tobytes()
            if key in seen:
                dupes += 1
            seen.add(key)
        return dupes


@dataclass
class VqVaeConfig:
    num_codes: int = 64  # K
    code_dim: int = 8  # d
    patch_size: tuple[int, int] = (4, 4)
    tokens_per_patch: int = 4  # sub-tokens quantised independently per patch
    hidden_width: int = 256
    beta: float = 0.05
    # Plain SGD needs the codebook to chase encoder clusters much faster than
    # the mean-reduced alignment term moves it; a separate rate fixes that.
    codebook_learning_rate: float = 1.0
    # After training, the latent space is rescaled (an exact reparametrization)
    # so tokens have this per-dimension RMS; the walk's step size is only
    # meaningful relative to code spacing, and this pins that geometry.
    latent_rms: float = 0.3
    optim: nn.OptimConfig = field(
        default_factory=lambda: nn.OptimConfig(learning_rate=0.1, epochs=150)
    )

    def validate(self, path: str = "vqvae") -> None:
        if self.num_codes < 1:
            raise UsageError(f"{path}.num_codes: must be positive")
        if self.code_dim < 1:
            raise UsageError(f"{path}.code_dim: must be positive")
        if self.patch_size[0] < 1 or self.patch_size[1] < 1:
            raise UsageError(f"{path}.patch_size: must be positive")
        if self.tokens_per_patch < 1:
            raise UsageError(f"{path}.tokens_per_patch: must be positive")
        if self.hidden_width < 1:
            raise UsageError(f"{path}.hidden_width: must be positive")
        if self.beta < 0:
            raise UsageError(f"{path}.beta: must be non-negative")
        if not self.codebook_learning_rate > 0:
            raise UsageError(f"{path}.codebook_learning_rate: must be positive")
        if not self.latent_rms > 0:
            raise UsageError(f"{path}.latent_rms: must be positive")
        self.optim.validate(f"{path}.optim")


@dataclass
class VqVaeParams:
    encoder: nn.MlpParams  # patch_dim -> tokens_per_patch * d, shared across patches
    decoder: nn.MlpParams  # tokens_per_patch * d -> patch_dim, shared across patches
    codebook: Codebook
    beta: float
    image_shape: tuple[int, int, int]
    patch_size: tuple[int, int]
    tokens_per_patch: int = 1

    @property
    def grid(self) -> tuple[int, int]:
        h, w, _ = self.image_shape
        return h // self.patch_size[0], w // self.patch_size[1]

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def num_tokens(self) -> int:  # M
        return self.num_patches * self.tokens_per_patch

    @property
    def patch_dim(self) -> int:
        ph, pw = self.patch_size
        return ph * pw * self.image_shape[2]

    def tensors(self) -> list[T.Tensor]:
        return self.encoder.tensors() + self.decoder.tensors() + [self.codebook.codes]

    def validate(self) -> None:
        h, w, _ = self.image_shape
        ph, pw = self.patch_size
        if h % ph or w % pw:
            raise UsageError(
                f"vqvae: patch size {self.patch_size} does not tile image {self.image_shape}"
            )
        width = self.tokens_per_patch * self.codebook.dim
        if self.encoder.layers[0].weight.shape[0] != self.patch_dim:
            raise UsageError("vqvae: encoder input width does not match patch size")
        if self.encoder.layers[-1].weight.shape[1] != width:
            raise UsageError("vqvae: encoder output width does not match token layout")
        if self.decoder.layers[0].weight.shape[0] != width:
            raise UsageError("vqvae: decoder input width does not match token layout")
        if self.decoder.layers[-1].weight.shape[1] != self.patch_dim:
            raise UsageError("vqvae: decoder output width does not match patch size")
        self.codebook.validate()


@dataclass
class LatentCode:
    continuous: Array  # (N, M, d)
    quantised: Array  # (N, M, d); row m equals codes[indices[m]] exactly
    indices: Array  # (N, M) int64

    def __len__(self) -> int:
        return int(self.continuous.shape[0])

    def flat_quantised(self) -> Array:
        return self.quantised.reshape(len(self), -1)


def init_vqvae(config: VqVaeConfig, image_shape: tuple[int, int, int], rng: np.random.Generator) -> VqVaeParams:
    config.validate()
    h, w, c = image_shape
    ph, pw = config.patch_size
    if h % ph or w % pw:
        raise UsageError(f"vqvae: patch size {config.patch_size} does not tile image {image_shape}")
    patch_dim = ph * pw * c
    width = config.tokens_per_patch * config.code_dim
    encoder = nn.init_mlp([patch_dim, config.hidden_width, width], rng)
    decoder = nn.init_mlp([width, config.hidden_width, patch_dim], rng)
    codes = rng.uniform(
        -1.0 / config.num_codes, 1.0 / config.num_codes, size=(config.num_codes, config.code_dim)
    )
    params = VqVaeParams(
        encoder=encoder,
        decoder=decoder,
        codebook=Codebook(codes=T.Tensor(codes, requires_grad=True)),
        beta=config.beta,
        image_shape=tuple(image_shape),
        patch_size=tuple(config.patch_size),
        tokens_per_patch=config.tokens_per_patch,
    )
    params.validate()
    return params


# ---------------------------------------------------------------------------
# Patch plumbing (differentiable: slices and concats on the tape)


def extract_patches(params: VqVaeParams, x: T.Tensor) -> T.Tensor:
    """(N, H, W, C) -> (N*patches, patch_dim), row-major grid order."""
    n = x.shape[0]
    ph, pw = params.patch_size
    gh, gw = params.grid
    rows = []
    for gr in range(gh):
        for gc in range(gw):
            patch = x[:, gr * ph : (gr + 1) * ph, gc * pw : (gc + 1) * pw, :]
            rows.append(T.reshape(patch, (n, 1, params.patch_dim)))
    stacked = T.concat(rows, axis=1)  # (N, patches, patch_dim)
    return T.reshape(stacked, (n * params.num_patches, params.patch_dim))


def assemble_patches(params: VqVaeParams, patches: T.Tensor, n: int) -> T.Tensor:
    """(N*patches, patch_dim) -> (N, H, W, C), inverse of extract_patches."""
    ph, pw = params.patch_size
    gh, gw = params.grid
    c = params.image_shape[2]
    grid = T.reshape(patches, (n, gh * gw, ph, pw, c))
    bands = []
    for gr in range(gh):
        row_patches = [grid[:, gr * gw + gc] for gc in range(gw)]
        bands.append(T.concat(row_patches, axis=2))  # stitch along width
    return T.concat(bands, axis=1)  # stitch along height


# ---------------------------------------------------------------------------
# Core operations


def encode(params: VqVaeParams, images: Array) -> Array:
    """Continuous latents (N, M, d) for a batch of images. Each patch yields
    tokens_per_patch consecutive tokens (its embedding split into d-blocks)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if tuple(images.shape[1:]) != tuple(params.image_shape):
        raise UsageError(
            f"encode: image shape {images.shape[1:]} does not match model {params.image_shape}"
        )
    n = images.shape[0]
    patches = extract_patches(params, T.Tensor(images))
    cont = nn.mlp_forward(params.encoder, patches)
    return cont.data.reshape(n, params.num_tokens, params.codebook.dim)


def quantize(continuous: Array, codebook: Codebook) -> tuple[Array, Array]:
    """Map each token to its nearest code by Euclidean distance; ties break
    to the lowest index. Returns (quantised, indices) with quantised rows
    copied bit-exactly from the codebook."""
    codebook.validate()
    codes = codebook.codes.data
    cont = np.asarray(continuous, dtype=np.float64)
    if cont.shape[-1] != codes.shape[1]:
        raise UsageError(
            f"quantize: token dimension {cont.shape[-1]} does not match codebook {codes.shape[1]}"
        )
    flat = cont.reshape(-1, codes.shape[1])
    # (T, K) squared distances; argmin returns the lowest index on ties
    d2 = ((flat[:, None, :] - codes[None, :, :]) ** 2).sum(axis=-1)
    indices = np.argmin(d2, axis=1)
    quantised = codes[indices].reshape(cont.shape)
    return quantised, indices.reshape(cont.shape[:-1]).astype(np.int64)


def encode_quantize(params: VqVaeParams, images: Array) -> LatentCode:
    cont = encode(params, images)
    quantised, indices = quantize(cont, params.codebook)
    return LatentCode(continuous=cont, quantised=quantised, indices=indices)


def decode(params: VqVaeParams, quantised: Array) -> Array:
    """Decode (N, M, d) token grids to images in [0, 1] (sigmoid output)."""
    quantised = np.asarray(quantised, dtype=np.float64)
    if quantised.ndim == 2:
        quantised = quantised[None]
    n, m, d = quantised.shape
    if m != params.num_tokens or d != params.codebook.dim:
        raise UsageError(
            f"decode: latent shape {(m, d)} does not match model "
            f"{(params.num_tokens, params.codebook.dim)}"
        )
    width = params.tokens_per_patch * params.codebook.dim
    tokens = T.Tensor(quantised.reshape(n * params.num_patches, width))
    out = T.sigmoid(nn.mlp_forward(params.decoder, tokens))
    return assemble_patches(params, out, n).data


def _decode_patch_inputs_graph(params: VqVaeParams, patch_inputs: T.Tensor, n: int) -> T.Tensor:
    out = T.sigmoid(nn.mlp_forward(params.decoder, patch_inputs))
    return assemble_patches(params, out, n)


def vqvae_loss(
    x: T.Tensor,
    x_hat: T.Tensor,
    continuous: T.Tensor,
    quantised: T.Tensor,
    beta: float,
) -> tuple[T.Tensor, T.Tensor, T.Tensor, T.Tensor]:
    """Mean-squared reconstruction plus the two quantisation terms.

    codebook term: ||stopgrad(continuous) - quantised||^2 (pulls codes toward
    encoder outputs); commitment term: beta * ||continuous - stopgrad(quantised)||^2.
    Both are mean-reduced like the reconstruction so the scale is batch-size
    invariant. Straight-through wiring (gradient copied past the quantiser)
    is the caller's responsibility when building x_hat.
    """
    reconstruction = T.mean(T.square(T.sub(x, x_hat)))
    codebook_term = T.mean(T.square(T.sub(T.constant(continuous.data), quantised)))
    commitment = T.mul(
        T.Tensor(beta), T.mean(T.square(T.sub(continuous, T.constant(quantised.data))))
    )
    total = T.add(T.add(reconstruction, codebook_term), commitment)
    return total, reconstruction, codebook_term, commitment


def straight_through(continuous: T.Tensor, quantised_values: Array) -> T.Tensor:
    """Quantised values in the forward pass, identity gradient to the encoder
    output in the backward pass."""
    return T.add(continuous, T.constant(quantised_values - continuous.data))


@dataclass
class VqVaeTrainStats:
    epoch_reconstruction: list[float]
    epoch_total: list[float]
    codebook_usage: list[np.ndarray]  # per-epoch histogram over codes
    collapse_warnings: list[str]


def normalize_latent_scale(params: VqVaeParams, images: Array, target_rms: float) -> float:
    """Rescale the latent space so tokens have per-dimension RMS target_rms.

    Exact reparametrization: the encoder's final linear layer, the codebook,
    and the decoder's first layer absorb one common factor, so nearest-code
    assignments and reconstructions are unchanged. Returns the factor.
    """
    sample = np.asarray(images[: min(len(images), 512)], dtype=np.float64)
    cont = encode(params, sample)
    rms = float(np.sqrt(np.mean(cont**2)))
    if rms == 0.0:
        return 1.0
    factor = target_rms / rms
    params.encoder.layers[-1].weight.data = params.encoder.layers[-1].weight.data * factor
    params.encoder.layers[-1].bias.data = params.encoder.layers[-1].bias.data * factor
    params.codebook.codes.data = params.codebook.codes.data * factor
    params.decoder.layers[0].weight.data = params.decoder.layers[0].weight.data / factor
    return factor


def train_vqvae(
    dataset: LabeledDataset,
    config: VqVaeConfig,
    init_rng: Optional[np.random.Generator] = None,
) -> tuple[VqVaeParams, VqVaeTrainStats]:
    """Gradient training of encoder, decoder, and codebook.

    The codebook gets its own (faster) SGD instance; everything else follows
    config.optim. After the last epoch the latent scale is normalized to
    config.latent_rms. Codebook collapse (at least half the codes unused
    across an epoch) is recorded as a warning, never fatal; dead codes are
    not reseeded so runs stay reproducible.
    """
    if len(dataset) == 0:
        raise UsageError("train_vqvae: empty dataset")
    config.validate()
    rng = np.random.default_rng(config.optim.seed)
    if init_rng is None:
        init_rng = rng
    params = init_vqvae(config, dataset.image_shape, init_rng)
    optimizer = nn.SgdOptimizer(config.optim)
    cb_optim = nn.OptimConfig(
        kind=config.optim.kind,
        learning_rate=config.codebook_learning_rate,
        momentum=config.optim.momentum,
        batch_size=config.optim.batch_size,
        epochs=config.optim.epochs,
        seed=config.optim.seed,
    )
    cb_optimizer = nn.SgdOptimizer(cb_optim)
    stats = VqVaeTrainStats([], [], [], [])

    images = dataset.images
    n = len(dataset)
    mlp_tensors = params.encoder.tensors() + params.decoder.tensors()
    tokens_per_batch_item = params.num_tokens
    iteration = 0
    for epoch in range(config.optim.epochs):
        order = rng.permutation(n)
        usage = np.zeros(config.num_codes, dtype=np.int64)
        recon_sum = 0.0
        total_sum = 0.0
        batches = 0
        for start in range(0, n, config.optim.batch_size):
            idx = order[start : start + config.optim.batch_size]
            xb = T.Tensor(images[idx])
            b = len(idx)
            num_tokens = b * tokens_per_batch_item
            try:
                with T.Graph() as g:
                    patches = extract_patches(params, xb)
                    wide = nn.mlp_forward(params.encoder, patches)  # (b*patches, tpp*d)
                    cont = T.reshape(wide, (num_tokens, config.code_dim))
                    q_values, q_indices = quantize(cont.data, params.codebook)
                    onehot = np.zeros((num_tokens, config.num_codes))
                    onehot[np.arange(num_tokens), q_indices.ravel()] = 1.0
                    q_graph = T.matmul(T.Tensor(onehot), params.codebook.codes)
                    q_st = straight_through(cont, q_values)
                    patch_inputs = T.reshape(q_st, (b * params.num_patches, -1))
                    x_hat = _decode_patch_inputs_graph(params, patch_inputs, b)
                    total, recon, _, _ = vqvae_loss(xb, x_hat, cont, q_graph, params.beta)
                T.backward(g, total)
            except NumericalError as err:
                raise NumericalError(f"vqvae training diverged at iteration {iteration}: {err}") from err
            optimizer.step(mlp_tensors)
            cb_optimizer.step([params.codebook.codes])
            usage += np.bincount(q_indices.ravel(), minlength=config.num_codes)
            recon_sum += recon.item()
            total_sum += total.item()
            batches += 1
            iteration += 1
        stats.epoch_reconstruction.append(recon_sum / batches)
        stats.epoch_total.append(total_sum / batches)
        stats.codebook_usage.append(usage)
        unused = int((usage == 0).sum())
        if unused * 2 >= config.num_codes:
            stats.collapse_warnings.append(
                f"epoch {epoch}: {unused}/{config.num_codes} codes unused"
            )
    if config.optim.epochs > 0:
        normalize_latent_scale(params, images, config.latent_rms)
    return params, stats


def reconstruct(params: VqVaeParams, images: Array) -> Array:
    code = encode_quantize(params, images)
    return decode(params, code.quantised)


# ---------------------------------------------------------------------------
# Checkpoints


def save_vqvae(path: str | Path, params: VqVaeParams, extra_manifest: Optional[dict] = None) -> None:
    manifest = {
        "format": "ladlab-checkpoint",
        "version": 1,
        "kind": "vqvae",
        "K": params.codebook.num_codes,
        "d": params.codebook.dim,
        "M": params.num_tokens,
        "beta": params.beta,
        "image_shape": list(params.image_shape),
        "patch_size": list(params.patch_size),
        "tokens_per_patch": params.tokens_per_patch,
        "encoder_sizes": params.encoder.sizes(),
        "decoder_sizes": params.decoder.sizes(),
        "optimizer": {"momentum_buffers": False},
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    tensors: list[tuple[str, Array]] = []
    for role, mlp in (("encoder", params.encoder), ("decoder", params.decoder)):
        for i, layer in enumerate(mlp.layers):
            tensors.append((f"{role}.layers.{i}.weight", layer.weight.data))
            tensors.append((f"{role}.layers.{i}.bias", layer.bias.data))
    tensors.append(("codebook.codes", params.codebook.codes.data))
    serialize.write_blob_file(path, manifest, tensors)


def _mlp_from_blobs(role: str, sizes: list[int], tensors: dict[str, Array]) -> nn.MlpParams:
    layers = []
    for i in range(len(sizes) - 1):
        try:
            w = tensors[f"{role}.layers.{i}.weight"]
            b = tensors[f"{role}.layers.{i}.bias"]
        except KeyError as err:
            raise FormatError(f"checkpoint: missing tensor {err}") from None
        layers.append(
            nn.DenseLayer(T.Tensor(w, requires_grad=True), T.Tensor(b, requires_grad=True))
        )
    return nn.MlpParams(layers=layers)


def load_vqvae(path: str | Path) -> VqVaeParams:
    manifest, tensors = serialize.read_blob_file(path)
    if manifest.get("format") != "ladlab-checkpoint" or manifest.get("kind") != "vqvae":
        raise FormatError(f"{path}: not a vqvae checkpoint")
    params = VqVaeParams(
        encoder=_mlp_from_blobs("encoder", manifest["encoder_sizes"], tensors),
        decoder=_mlp_from_blobs("decoder", manifest["decoder_sizes"], tensors),
        codebook=Codebook(codes=T.Tensor(tensors["codebook.codes"], requires_grad=True)),
        beta=float(manifest["beta"]),
        image_shape=tuple(manifest["image_shape"]),
        patch_size=tuple(manifest["patch_size"]),
        tokens_per_patch=int(manifest.get("tokens_per_patch", 1)),
    )
    params.validate()
    return params


def save_classifier(
    path: str | Path, params: nn.MlpParams, extra_manifest: Optional[dict] = None
) -> None:
    manifest = {
        "format": "ladlab-checkpoint",
        "version": 1,
        "kind": "mlp",
        "sizes": params.sizes(),
        "optimizer": {"momentum_buffers": False},
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    tensors: list[tuple[str, Array]] = []
    for i, layer in enumerate(params.layers):
        tensors.append((f"layers.{i}.weight", layer.weight.data))
        tensors.append((f"layers.{i}.bias", layer.bias.data))
    serialize.write_blob_file(path, manifest, tensors)


def load_classifier(path: str | Path) -> nn.MlpParams:
    manifest, tensors = serialize.read_blob_file(path)
    if manifest.get("format") != "ladlab-checkpoint" or manifest.get("kind") != "mlp":
        raise FormatError(f"{path}: not a classifier checkpoint")
    sizes = manifest["sizes"]
    layers = []
    for i in range(len(sizes) - 1):
        try:
            w = tensors[f"layers.{i}.weight"]
            b = tensors[f"layers.{i}.bias"]
        except KeyError as err:
            raise FormatError(f"checkpoint: missing tensor {err}") from None
        layers.append(
            nn.DenseLayer(T.Tensor(w, requires_grad=True), T.Tensor(b, requires_grad=True))
        )
    params = nn.MlpParams(layers=layers)
    params.validate()
    return params
