import numpy as np
import pytest

from ladlab import biasdata as bd
from ladlab import nn
from ladlab import tensor as T
from ladlab import vqvae as vq
from ladlab import walk as wk
from ladlab.errors import UsageError


def toy_setup(seed=0):
    """Small trained-ish vqvae plus an untrained classifier on its latents."""
    spec = bd.GeneratorSpec(num_classes=4, image_size=(16, 16, 1), samples_per_class=8, seed=seed)
    ds = bd.apply_background_bias(bd.gen_glyphs(spec), bd.BiasSpec(kind="background_color"))
    cfg = vq.VqVaeConfig(
        num_codes=8,
        code_dim=4,
        hidden_width=16,
        optim=nn.OptimConfig(epochs=2, batch_size=16, seed=seed),
    )
    params, _ = vq.train_vqvae(ds, cfg)
    classifier = nn.init_mlp([params.num_tokens * 4, 32, 4], np.random.default_rng(seed))
    return ds, params, classifier


class TestStandardizeGradient:
    def test_hand_example(self):
        delta = wk.standardize_gradient(np.array([1.0, 2.0, 3.0]), alpha=0.1, epsilon=1e-8)
        std = np.sqrt(2.0 / 3.0)  # population std of (1,2,3)
        expected = 0.1 * (np.array([1.0, 2.0, 3.0]) - 2.0) / std
        assert np.allclose(delta, expected, atol=1e-12)
        assert abs(delta[0] + 0.12247) < 1e-4

    def test_constant_gradient_degenerates_to_zero(self):
        delta = wk.standardize_gradient(np.full(10, 3.7), alpha=0.1, epsilon=1e-8)
        assert np.array_equal(delta, np.zeros(10))

    def test_scales_linearly_with_alpha(self):
        g = np.array([0.5, -1.0, 2.0, 0.1])
        a = wk.standardize_gradient(g, alpha=0.2, epsilon=1e-8)
        b = wk.standardize_gradient(g, alpha=0.1, epsilon=1e-8)
        assert np.allclose(a, 2.0 * b, atol=1e-14)

    def test_zero_mean_and_fixed_norm_contract(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            g = rng.normal(size=64)
            delta = wk.standardize_gradient(g, alpha=0.1, epsilon=1e-8)
            assert abs(delta.mean()) < 1e-12
            assert abs(np.linalg.norm(delta) - 0.1 * np.sqrt(64)) < 1e-9

    def test_rows_version_matches_per_row(self):
        rng = np.random.default_rng(1)
        grads = rng.normal(size=(5, 12))
        grads[2] = 0.25  # degenerate row
        batch = wk.standardize_gradient_rows(grads, alpha=0.1, epsilon=1e-8)
        for i in range(5):
            single = wk.standardize_gradient(grads[i], alpha=0.1, epsilon=1e-8)
            assert np.allclose(batch[i], single, atol=1e-12)


class TestAdversarialWalk:
    def test_zero_steps_returns_input_unchanged(self):
        ds, params, classifier = toy_setup()
        code = vq.encode_quantize(params, ds.images[:4])
        out, trace = wk.adversarial_walk(classifier, code, params.codebook, wk.WalkConfig(steps=0))
        assert np.array_equal(out.quantised, code.quantised)
        assert np.array_equal(out.indices, code.indices)
        assert trace.entropies.shape == (1, 4)

    def test_output_tokens_are_exact_codebook_rows(self):
        ds, params, classifier = toy_setup(seed=1)
        code = vq.encode_quantize(params, ds.images[:6])
        out, _ = wk.adversarial_walk(
            classifier, code, params.codebook, wk.WalkConfig(alpha=0.3, steps=5)
        )
        codes = params.codebook.codes.data
        for n in range(6):
            for m in range(params.num_tokens):
                assert np.array_equal(out.quantised[n, m], codes[out.indices[n, m]])

    def test_trace_has_steps_plus_one_records(self):
        ds, params, classifier = toy_setup(seed=2)
        code = vq.encode_quantize(params, ds.images[:3])
        _, trace = wk.adversarial_walk(classifier, code, params.codebook, wk.WalkConfig(steps=7))
        assert trace.entropies.shape == (8, 3)
        assert trace.indices.shape == (8, 3, params.num_tokens)
        assert trace.steps == 7
        assert trace.tokens_changed().shape == (7, 3)

    def test_continuous_substep_does_not_degrade_entropy(self):
        # Before re-quantisation, a small standardized ascent step cannot
        # reduce the entropy beyond rounding.
        ds, params, classifier = toy_setup(seed=3)
        code = vq.encode_quantize(params, ds.images[:16])
        tokens = code.quantised
        n, m, d = tokens.shape
        ent0, grad = wk._entropy_and_grad(classifier, tokens, want_grad=True)
        delta = wk.standardize_gradient_rows(grad.reshape(n, m * d), 1e-3, 1e-8).reshape(n, m, d)
        ent1, _ = wk._entropy_and_grad(classifier, tokens + delta, want_grad=False)
        assert np.all(ent1 >= ent0 - 1e-6)

    def test_width_mismatch_rejected(self):
        ds, params, classifier = toy_setup(seed=4)
        bad = nn.init_mlp([7, 4], np.random.default_rng(0))
        code = vq.encode_quantize(params, ds.images[:2])
        with pytest.raises(UsageError, match="width"):
            wk.adversarial_walk(bad, code, params.codebook, wk.WalkConfig())

    def test_config_validation(self):
        with pytest.raises(UsageError, match="alpha"):
            wk.WalkConfig(alpha=0.0).validate()
        with pytest.raises(UsageError, match="steps"):
            wk.WalkConfig(steps=-1).validate()


class TestDebiasDataset:
    def test_zero_steps_equals_plain_reconstruction(self):
        ds, params, classifier = toy_setup(seed=5)
        out, _ = wk.debias_dataset(params, classifier, ds, wk.WalkConfig(steps=0))
        recon = vq.reconstruct(params, ds.images)
        assert np.array_equal(out.images, recon)

    def test_labels_and_annotations_preserved(self):
        ds, params, classifier = toy_setup(seed=6)
        out, _ = wk.debias_dataset(params, classifier, ds, wk.WalkConfig(steps=2))
        assert len(out) == len(ds)
        assert np.array_equal(out.labels, ds.labels)
        assert np.array_equal(out.bias_values, ds.bias_values)
        assert np.array_equal(out.aligned, ds.aligned)
        assert out.provenance == "debiased:walk"

    def test_deterministic(self):
        ds, params, classifier = toy_setup(seed=7)
        a, _ = wk.debias_dataset(params, classifier, ds, wk.WalkConfig(steps=3))
        b, _ = wk.debias_dataset(params, classifier, ds, wk.WalkConfig(steps=3))
        assert np.array_equal(a.images, b.images)

    def test_batching_matches_single_batch(self):
        ds, params, classifier = toy_setup(seed=8)
        a, ta = wk.debias_dataset(params, classifier, ds, wk.WalkConfig(steps=2), batch_size=7)
        b, tb = wk.debias_dataset(params, classifier, ds, wk.WalkConfig(steps=2), batch_size=512)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(ta.entropies, tb.entropies)
