"""Unit tests for the log-determinant surrogates and their exact references."""

import numpy as np
import pytest

from fif_flow.errors import ConvergenceError, DimensionError
from fif_flow.model import nets
from fif_flow.model.surrogate import (
    ALL_VARIANTS,
    EstimatorVariant,
    GradTarget,
    JacobianSite,
    TraceSpace,
    cg_logdet_grad,
    consistency_gap,
    exact_logdet,
    exact_logdet_grad,
    exact_surrogate_grad,
    surrogate_logdet,
)
from fif_flow.numerics import hutchinson
from fif_flow.numerics.autodiff import finite_diff_grad, full_jacobian

ENCODER_LATENT = EstimatorVariant(GradTarget.ENCODER, TraceSpace.LATENT, JacobianSite.OFF_MANIFOLD)
DECODER_LATENT = EstimatorVariant(GradTarget.DECODER, TraceSpace.LATENT, JacobianSite.OFF_MANIFOLD)


class TestEstimatorVariant:
    """Tests for EstimatorVariant."""

    def test_all_variants(self):
        assert len(ALL_VARIANTS) == 8
        assert len({v.label for v in ALL_VARIANTS}) == 8

    def test_parse_round_trip(self):
        for variant in ALL_VARIANTS:
            assert EstimatorVariant.parse(variant.label) == variant

    def test_parse_rejects_garbage(self):
        with pytest.raises(ValueError):
            EstimatorVariant.parse("encoder-latent")
        with pytest.raises(ValueError):
            EstimatorVariant.parse("prior-latent-off")

    def test_signs(self):
        assert ENCODER_LATENT.sign == -1.0
        assert DECODER_LATENT.sign == 1.0

    def test_probe_dim(self, small_pair):
        assert ENCODER_LATENT.probe_dim(small_pair) == 2
        assert EstimatorVariant(trace_space=TraceSpace.DATA).probe_dim(small_pair) == 3


class TestSurrogateLogdet:
    """Tests for surrogate_logdet."""

    def test_embedding_hand_values(self, embedding_pair, rng):
        """A = [1, 0], x = [1, 0]: ε = ±1 and f′g′ = 1, so the probe average is 1."""
        # Setup
        noise = hutchinson.sample("scaled_gaussian", 1, 1, rng)

        # Execute
        term = surrogate_logdet(embedding_pair, np.array([1.0, 0.0]), noise, ENCODER_LATENT)

        # Assert
        assert term.detached_value == pytest.approx(1.0)
        assert term.value.value == pytest.approx(-1.0)
        # encoder params are [W (1×2), b (1)]; the gradient is −A†ᵀ = −[1, 0]
        np.testing.assert_allclose(term.value.grad("encoder", 3), [-1.0, 0.0, 0.0], atol=1e-12)

    def test_decoder_target_on_embedding(self, embedding_pair, rng):
        noise = hutchinson.sample("scaled_gaussian", 1, 1, rng)
        term = surrogate_logdet(embedding_pair, np.array([0.3, 2.0]), noise, DECODER_LATENT)
        # decoder params are [W (2×1), b (2)]; the gradient is pinv(W)ᵀ = [1, 0]ᵀ
        np.testing.assert_allclose(term.value.grad("decoder", 4), [1.0, 0.0, 0.0, 0.0], atol=1e-12)
        assert "encoder" not in term.value.grads

    def test_value_and_detached_value_agree_up_to_sign(self, small_pair, rng):
        x = rng.standard_normal((4, 3))
        for variant in ALL_VARIANTS:
            noise = hutchinson.sample("gaussian", variant.probe_dim(small_pair), 2, rng, batch=4)
            term = surrogate_logdet(small_pair, x, noise, variant)
            assert term.value.value == pytest.approx(variant.sign * term.detached_value)

    def test_orthogonalized_full_k_is_deterministic_on_linear_pair(self, orthonormal_pair, rng):
        """K = d orthogonal probes take the trace exactly, so repeated draws agree."""
        x = rng.standard_normal((3, 4))
        grads = []
        for _ in range(3):
            noise = hutchinson.sample("orthogonalized", 2, 2, rng, batch=3)
            grads.append(surrogate_logdet(orthonormal_pair, x, noise).value.grad("encoder", orthonormal_pair.encoder.n_params))
        np.testing.assert_allclose(grads[0], grads[1], atol=1e-12)
        np.testing.assert_allclose(grads[0], grads[2], atol=1e-12)

    def test_shared_probes_broadcast_over_batch(self, small_pair, rng):
        x = rng.standard_normal((5, 3))
        shared = hutchinson.sample("rademacher", 2, 1, rng)
        per_sample = hutchinson.NoiseBatch(eps=np.broadcast_to(shared.eps, (5, 1, 2)).copy(), kind=shared.kind)
        a = surrogate_logdet(small_pair, x, shared).value.grad("encoder", small_pair.encoder.n_params)
        b = surrogate_logdet(small_pair, x, per_sample).value.grad("encoder", small_pair.encoder.n_params)
        np.testing.assert_allclose(a, b)

    def test_probe_dim_mismatch(self, small_pair, rng):
        noise = hutchinson.sample("gaussian", 3, 1, rng)
        with pytest.raises(DimensionError):
            surrogate_logdet(small_pair, np.ones(3), noise, ENCODER_LATENT)

    def test_probe_batch_mismatch(self, small_pair, rng):
        noise = hutchinson.sample("gaussian", 2, 1, rng, batch=3)
        with pytest.raises(DimensionError):
            surrogate_logdet(small_pair, np.ones((2, 3)), noise)


class TestExactSurrogateGrad:
    """Exact-trace surrogate gradients against the exact log-det gradient."""

    @pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.label)
    def test_linear_pair_matches_exact_gradient(self, variant, rng):
        """At consistency every variant's exact-trace gradient is the log-det gradient."""
        # Setup
        pair = nets.linear_pair(rng.standard_normal((2, 4)))
        x = rng.standard_normal((3, 4))

        # Execute
        estimate = exact_surrogate_grad(pair, x, variant)
        exact = exact_logdet_grad(pair, x, variant.grad_target, variant.jacobian_site)

        # Assert
        np.testing.assert_allclose(estimate, exact, atol=1e-10)


class TestExactLogdet:
    """Tests for exact_logdet."""

    def test_embedding_is_zero(self):
        pair = nets.linear_pair(np.eye(3)[:2])
        assert exact_logdet(pair, np.array([0.4, -1.0])) == pytest.approx(0.0, abs=1e-12)

    def test_square_diagonal(self):
        pair = nets.linear_pair(np.diag([0.5, 1.0 / 3.0]))
        assert exact_logdet(pair, np.zeros(2)) == pytest.approx(np.log(6.0))

    def test_matches_gram_determinant(self, small_pair, rng):
        Z = rng.standard_normal((4, 2))
        J = full_jacobian(small_pair.decoder, Z)
        expected = 0.5 * np.linalg.slogdet(np.einsum("bji,bjk->bik", J, J))[1]
        np.testing.assert_allclose(exact_logdet(small_pair, Z), expected, atol=1e-10)


class TestExactLogdetGrad:
    """Tests for exact_logdet_grad."""

    def test_linear_decoder_gradient_is_pinv_transpose(self, rng):
        A = rng.standard_normal((2, 3))
        pair = nets.linear_pair(A)
        B = nets.linear_weights(pair.decoder)
        grad = exact_logdet_grad(pair, rng.standard_normal((2, 3)), "decoder")
        np.testing.assert_allclose(grad[:6].reshape(3, 2), np.linalg.pinv(B).T, atol=1e-10)
        np.testing.assert_allclose(grad[6:], 0.0, atol=1e-12)

    def test_decoder_matches_finite_differences(self, small_pair, rng):
        # Setup
        x = rng.standard_normal((3, 3))
        Z = small_pair.encoder(x)
        p0 = small_pair.decoder.get_params()

        def logdet(p):
            small_pair.decoder.set_params(p)
            return float(np.mean(exact_logdet(small_pair, Z)))

        # Execute
        expected = finite_diff_grad(logdet, p0)
        small_pair.decoder.set_params(p0)
        grad = exact_logdet_grad(small_pair, x, "decoder")

        # Assert
        np.testing.assert_allclose(grad, expected, rtol=1e-4, atol=1e-7)

    def test_encoder_matches_finite_differences(self, small_pair, rng):
        """Encoder target: −½ log det(F Fᵀ) with F = f′(x)."""
        x = rng.standard_normal((3, 3))
        p0 = small_pair.encoder.get_params()

        def neg_logdet(p):
            small_pair.encoder.set_params(p)
            F = full_jacobian(small_pair.encoder, x)
            return float(-np.mean(0.5 * np.linalg.slogdet(np.einsum("bij,bkj->bik", F, F))[1]))

        expected = finite_diff_grad(neg_logdet, p0)
        small_pair.encoder.set_params(p0)
        grad = exact_logdet_grad(small_pair, x, "encoder", "off_manifold")
        np.testing.assert_allclose(grad, expected, rtol=1e-4, atol=1e-7)

    def test_encoder_on_manifold_mirrors_decoder_for_orthonormal_pair(self, orthonormal_pair, rng):
        """With decoder W = Aᵀ the encoder gradient is the transposed negative."""
        x = rng.standard_normal((2, 4))
        enc = exact_logdet_grad(orthonormal_pair, x, "encoder", "on_manifold")
        dec = exact_logdet_grad(orthonormal_pair, x, "decoder")
        np.testing.assert_allclose(enc[:8].reshape(2, 4), -dec[:8].reshape(4, 2).T, atol=1e-10)


class TestCgLogdetGrad:
    """Tests for cg_logdet_grad."""

    def test_orthonormal_decoder_matches_decoder_surrogate(self, orthonormal_pair, rng):
        """JᵀJ = I, so CG returns the probes and the gradient equals the decoder variant's."""
        x = rng.standard_normal((3, 4))
        noise = hutchinson.sample("gaussian", 2, 2, rng, batch=3)
        n = orthonormal_pair.decoder.n_params
        cg = cg_logdet_grad(orthonormal_pair, x, noise).value.grad("decoder", n)
        fif = surrogate_logdet(orthonormal_pair, x, noise, DECODER_LATENT).value.grad("decoder", n)
        np.testing.assert_allclose(cg, fif, atol=1e-10)

    def test_exact_trace_matches_exact_gradient(self, small_pair, rng):
        x = rng.standard_normal((3, 3))
        noise = hutchinson.basis_probes(2, batch=3)
        grad = cg_logdet_grad(small_pair, x, noise, tol=1e-10).value.grad("decoder", small_pair.decoder.n_params)
        exact = exact_logdet_grad(small_pair, x, "decoder")
        assert np.linalg.norm(grad - exact) / np.linalg.norm(exact) < 1e-3

    def test_ill_conditioned_hits_iteration_cap(self, rng):
        pair = nets.linear_pair(np.diag([1.0, 1e-8]))
        noise = hutchinson.sample("gaussian", 2, 1, rng, batch=1)
        with pytest.raises(ConvergenceError):
            cg_logdet_grad(pair, np.ones((1, 2)), noise, tol=1e-12, max_iter=1)


class TestConsistencyGap:
    """Tests for consistency_gap."""

    def test_linear_pair_is_consistent(self, rng):
        pair = nets.linear_pair(rng.standard_normal((2, 5)))
        np.testing.assert_allclose(consistency_gap(pair, rng.standard_normal((4, 5))), 0.0, atol=1e-10)

    def test_random_pair_is_not(self, small_pair, rng):
        assert np.all(consistency_gap(small_pair, rng.standard_normal((3, 3))) > 0.0)
