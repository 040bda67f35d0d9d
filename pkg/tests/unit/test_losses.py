"""Unit tests for the training objectives."""

import numpy as np
import pytest

from fif_flow.errors import DimensionError, NonFiniteLossError
from fif_flow.model import nets
from fif_flow.model.losses import (
    LOG_2PI,
    LOSSES,
    LatentPrior,
    LossConfig,
    fif_loss,
    get_loss,
    naive_nll_loss,
    recon_only_loss,
    rf_loss,
)
from fif_flow.model.surrogate import EstimatorVariant, GradTarget, exact_logdet_grad
from fif_flow.numerics.autodiff import finite_diff_grad, full_jacobian
from fif_flow.numerics.hutchinson import NoiseKind

DECODER_VARIANT = EstimatorVariant(grad_target=GradTarget.DECODER)


class TestLatentPrior:
    """Tests for LatentPrior."""

    def test_origin_is_normalizing_constant(self):
        assert LatentPrior().neg_log_prob(np.zeros(3))[0] == pytest.approx(1.5 * LOG_2PI)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            LatentPrior(kind="student_t")


class TestLossConfig:
    """Tests for LossConfig validation."""

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            LossConfig(beta=-1.0)

    def test_infinite_beta(self):
        with pytest.raises(ValueError):
            LossConfig(beta=float("inf"))

    def test_zero_probes(self):
        with pytest.raises(ValueError):
            LossConfig(K=0)

    def test_probe_kind_defaults_by_k(self):
        assert LossConfig(K=1).probe_kind is NoiseKind.SCALED_GAUSSIAN
        assert LossConfig(K=3).probe_kind is NoiseKind.ORTHOGONALIZED


class TestFifLoss:
    """Tests for fif_loss."""

    def test_embedding_hand_values(self, embedding_pair, rng):
        """A = [1, 0], x = [1, 0]: recon 0, z = 1, surrogate 1."""
        # Setup
        cfg = LossConfig(beta=3.0, K=1)

        # Execute
        total, parts = fif_loss(embedding_pair, np.array([1.0, 0.0]), cfg, rng)

        # Assert
        assert parts.recon == pytest.approx(0.0, abs=1e-15)
        assert parts.nll_prior == pytest.approx(0.5 + 0.5 * LOG_2PI)
        assert parts.surrogate == pytest.approx(1.0)
        assert parts.total == pytest.approx(parts.nll_prior - 1.0)
        assert total.value == parts.total

    def test_on_manifold_point_has_zero_recon(self, rng):
        pair = nets.linear_pair(rng.standard_normal((2, 3)))
        x = pair.decode(rng.standard_normal((4, 2)))
        _, parts = fif_loss(pair, x, LossConfig(beta=100.0), rng)
        assert parts.recon == pytest.approx(0.0, abs=1e-20)

    def test_gradient_matches_exact_objective(self, orthonormal_pair, rng):
        """K = d orthogonal probes take the trace exactly on a consistent linear pair."""
        # Setup
        pair = orthonormal_pair
        x = rng.standard_normal((5, 4))
        beta = 0.7
        cfg = LossConfig(beta=beta, K=2)
        prior = LatentPrior()

        def objective(which):
            def fn(p):
                saved = nets.get_params(pair, which)
                nets.set_params(pair, which, p)
                z = pair.encode(x)
                residual = pair.decode(z) - x
                value = np.mean(prior.neg_log_prob(z)) + beta * np.mean(np.sum(residual ** 2, axis=1))
                if which == "encoder":
                    W = nets.linear_weights(pair.encoder)
                    value -= 0.5 * np.linalg.slogdet(W @ W.T)[1]
                nets.set_params(pair, which, saved)
                return float(value)
            return fn

        # Execute
        total, _ = fif_loss(pair, x, cfg, rng)

        # Assert
        for which in ("encoder", "decoder"):
            side = pair.side(which)
            expected = finite_diff_grad(objective(which), side.get_params())
            np.testing.assert_allclose(total.grad(which, side.n_params), expected, rtol=1e-3, atol=1e-6)

    def test_data_noise_changes_inputs(self, embedding_pair):
        x = np.array([[1.0, 0.0]])
        quiet = fif_loss(embedding_pair, x, LossConfig(noise_std=0.0), np.random.default_rng(0))[1]
        noisy = fif_loss(embedding_pair, x, LossConfig(noise_std=0.5), np.random.default_rng(0))[1]
        assert quiet.recon == pytest.approx(0.0, abs=1e-15)
        assert noisy.recon > 0.0

    def test_total_finite_for_any_beta(self, small_pair, rng):
        x = rng.standard_normal((8, 3))
        for beta in (0.0, 1.0, 1e6):
            _, parts = fif_loss(small_pair, x, LossConfig(beta=beta), rng)
            assert np.isfinite(parts.total)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_term_is_named(self, embedding_pair, rng):
        with pytest.raises(NonFiniteLossError) as exc_info:
            fif_loss(embedding_pair, np.array([1e200, 0.0]), LossConfig(), rng)
        assert exc_info.value.term == "nll_prior"

    def test_empty_batch(self, small_pair, rng):
        with pytest.raises(DimensionError):
            fif_loss(small_pair, np.zeros((0, 3)), LossConfig(), rng)

    def test_wrong_data_dimension(self, small_pair, rng):
        with pytest.raises(DimensionError):
            fif_loss(small_pair, np.zeros((2, 4)), LossConfig(), rng)


class TestPinvPartner:
    """fif_loss with the exact pseudoinverse partner."""

    def test_encoder_gradient_matches_exact_objective(self, rng):
        # Setup
        pair = nets.build(nets.ArchSpec(D=3, d=1, hidden=(8,), activation="tanh", seed=6))
        X = rng.standard_normal((6, 3))
        beta = 0.3
        prior = LatentPrior()

        def objective(params):
            saved = pair.encoder.get_params()
            pair.encoder.set_params(params)
            z = pair.encode(X)
            value = np.mean(prior.neg_log_prob(z)) + beta * np.mean(np.sum((pair.decode(z) - X) ** 2, axis=1))
            value -= np.mean([0.5 * np.linalg.slogdet(j @ j.T)[1] for j in full_jacobian(pair.encoder, X)])
            pair.encoder.set_params(saved)
            return float(value)

        expected = finite_diff_grad(objective, pair.encoder.get_params())

        # Execute
        total, parts = fif_loss(pair, X, LossConfig(beta=beta, pinv_partner=True), rng)

        # Assert
        np.testing.assert_allclose(total.grad("encoder", pair.encoder.n_params), expected, rtol=1e-4, atol=1e-7)
        assert parts.surrogate == 1.0
        assert total.value == pytest.approx(parts.nll_prior + beta * parts.recon - 1.0)

    def test_agrees_with_exact_trace_on_consistent_pair(self, orthonormal_pair, rng):
        x = rng.standard_normal((5, 4))
        probed, _ = fif_loss(orthonormal_pair, x, LossConfig(beta=0.7, K=2), rng)
        exact, _ = fif_loss(orthonormal_pair, x, LossConfig(beta=0.7, pinv_partner=True), rng)
        for which in ("encoder", "decoder"):
            n = orthonormal_pair.side(which).n_params
            np.testing.assert_allclose(exact.grad(which, n), probed.grad(which, n), atol=1e-8)

    def test_differs_from_surrogate_when_decoder_is_oblique(self, rng):
        """A decoder column that is not A† moves the surrogate but not the exact term."""
        # Setup
        A = np.array([[1.0, 0.0]])
        pair = nets.linear_pair(A)
        pair.decoder.set_params(np.array([1.0, 0.5, 0.0, 0.0]))
        x = np.zeros((4, 2))

        # Execute
        probed, _ = fif_loss(pair, x, LossConfig(beta=0.0, K=1), rng)
        exact, _ = fif_loss(pair, x, LossConfig(beta=0.0, pinv_partner=True), rng)

        # Assert: −∂ log‖a‖ = −a/‖a‖² at a = [1, 0]
        np.testing.assert_allclose(exact.grad("encoder", 3)[:2], [-1.0, 0.0], atol=1e-12)
        assert abs(probed.grad("encoder", 3)[1]) > 0.1


class TestNaiveNllLoss:
    """Tests for naive_nll_loss."""

    def test_projection_invariance(self, rng):
        """With β = 0 the loss at x equals the loss at its reconstruction."""
        # Setup
        pair = nets.linear_pair(rng.standard_normal((2, 4)))
        x = rng.standard_normal((6, 4))
        x_hat = pair.decode(pair.encode(x))
        cfg = LossConfig(beta=0.0)

        # Execute
        at_x = naive_nll_loss(pair, x, cfg)[1].total
        at_x_hat = naive_nll_loss(pair, x_hat, cfg)[1].total

        # Assert
        assert at_x == pytest.approx(at_x_hat, abs=1e-10)

    def test_bounded_below_by_projected_entropy(self, rng):
        """Loss ≥ Gaussian entropy of the latents plus the decoder volume term."""
        # Setup
        X = rng.standard_normal((4000, 3)) * np.array([2.0, 1.0, 0.5])
        pair = nets.linear_pair(rng.standard_normal((2, 3)))
        B = nets.linear_weights(pair.decoder)

        # Execute
        _, parts = naive_nll_loss(pair, X, LossConfig(beta=0.0))

        # Assert
        Z = pair.encode(X)
        entropy = 0.5 * np.linalg.slogdet(2.0 * np.pi * np.e * np.cov(Z, rowvar=False, bias=True))[1]
        volume = 0.5 * np.linalg.slogdet(B.T @ B)[1]
        assert parts.total >= entropy + volume - 1e-9

    def test_decoder_gradient_nonzero_at_zero_beta(self, rng):
        # Setup
        pair = nets.build(nets.ArchSpec(D=2, d=1, hidden=(16, 16), activation="tanh", seed=4))
        X = rng.standard_normal((32, 2)) * np.array([1.0, 0.05])

        # Execute
        total, _ = naive_nll_loss(pair, X, LossConfig(beta=0.0, variant=EstimatorVariant.parse("encoder-latent-on")), rng)

        # Assert
        assert np.linalg.norm(total.grad("decoder", pair.decoder.n_params)) > 1e-6
        assert np.linalg.norm(total.grad("encoder", pair.encoder.n_params)) > 1e-6

    def test_decoder_gradient_matches_finite_differences(self, rng):
        """At β = 0 the decoder gradient is that of the mean ½ log det(g′ᵀg′) at z = f(x)."""
        # Setup
        pair = nets.build(nets.ArchSpec(D=3, d=2, hidden=(6,), activation="tanh", seed=9))
        X = rng.standard_normal((5, 3))
        Z = pair.encode(X)
        theta = pair.decoder.get_params()

        def logdet(params):
            pair.decoder.set_params(params)
            return float(np.mean([0.5 * np.linalg.slogdet(j.T @ j)[1] for j in full_jacobian(pair.decoder, Z)]))

        expected = finite_diff_grad(logdet, theta)
        pair.decoder.set_params(theta)

        # Execute
        total, _ = naive_nll_loss(pair, X, LossConfig(beta=0.0), rng)

        # Assert
        np.testing.assert_allclose(total.grad("decoder", pair.decoder.n_params), expected, rtol=1e-4, atol=1e-7)

    def test_surrogate_field_is_exact_logdet(self):
        pair = nets.linear_pair(np.diag([0.5, 0.25]))
        _, parts = naive_nll_loss(pair, np.ones((2, 2)), LossConfig(beta=0.0))
        assert parts.surrogate == pytest.approx(np.log(8.0))


class TestRfLoss:
    """Tests for rf_loss."""

    def test_matches_decoder_variant_with_exact_trace(self, rng):
        # Setup
        pair = nets.linear_pair(rng.standard_normal((2, 4)))
        x = rng.standard_normal((5, 4))
        cfg = LossConfig(beta=0.5, K=2, variant=DECODER_VARIANT)
        n = pair.decoder.n_params

        # Execute
        rf, _ = rf_loss(pair, x, cfg, rng, cg_tol=1e-12)
        fif, _ = fif_loss(pair, x, cfg, rng)

        # Assert
        np.testing.assert_allclose(rf.grad("decoder", n), fif.grad("decoder", n), atol=1e-8)

    def test_zero_beta_is_decoder_logdet_gradient(self, rng):
        pair = nets.linear_pair(rng.standard_normal((2, 3)))
        # zero latents keep the prior gradient off the decoder
        x = np.zeros((3, 3))
        total, parts = rf_loss(pair, x, LossConfig(beta=0.0, K=2), rng, cg_tol=1e-12)
        expected = exact_logdet_grad(pair, x, "decoder")
        np.testing.assert_allclose(total.grad("decoder", pair.decoder.n_params), expected, atol=1e-8)
        assert parts.recon == pytest.approx(0.0, abs=1e-20)


class TestReconOnlyLoss:
    """Tests for recon_only_loss."""

    def test_only_reconstruction(self, small_pair, rng):
        x = rng.standard_normal((4, 3))
        total, parts = recon_only_loss(small_pair, x, LossConfig(beta=2.0))
        assert parts.nll_prior == 0.0 and parts.surrogate == 0.0
        assert total.value == pytest.approx(2.0 * parts.recon)

    def test_decoder_gradient_matches_finite_differences(self, small_pair, rng):
        x = rng.standard_normal((4, 3))
        p0 = small_pair.decoder.get_params()

        def recon(p):
            small_pair.decoder.set_params(p)
            return recon_only_loss(small_pair, x, LossConfig(beta=1.0))[1].recon

        expected = finite_diff_grad(recon, p0)
        small_pair.decoder.set_params(p0)
        total, _ = recon_only_loss(small_pair, x, LossConfig(beta=1.0))
        np.testing.assert_allclose(total.grad("decoder", small_pair.decoder.n_params), expected, rtol=1e-4, atol=1e-7)


class TestGetLoss:
    """Tests for get_loss."""

    def test_known_names(self):
        for name, fn in LOSSES.items():
            assert get_loss(name) is fn

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            get_loss("elbo")
