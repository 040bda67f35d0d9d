"""
End-to-end acceptance checks.

These train real models or draw ~10^6 probes, so they are marked slow and deselected by
default. Run with: pytest -m slow
"""

import json
from pathlib import Path

import numpy as np
import pytest

from fif_flow.data.datasets import gen_gaussian
from fif_flow.evaluation import metrics
from fif_flow.model import nets
from fif_flow.model.losses import LossConfig, fif_loss, rf_loss
from fif_flow.model.surrogate import (
    ALL_VARIANTS,
    EstimatorVariant,
    GradTarget,
    TraceSpace,
    exact_logdet,
    exact_logdet_grad,
    surrogate_logdet,
)
from fif_flow.numerics import hutchinson
from fif_flow.numerics.autodiff import full_jacobian
from fif_flow.oracles import linear_oracle
from fif_flow.pipeline import commands
from fif_flow.pipeline.config import load_config
from fif_flow.pipeline.stages import build_dataset
from fif_flow.training.trainer import train

pytestmark = pytest.mark.slow

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def chunk_grads(grad_fn, n_chunks):
    """Stack of independent Monte-Carlo gradient means, one per chunk."""
    return np.stack([grad_fn(np.random.default_rng([99, c])) for c in range(n_chunks)])


def within_standard_errors(samples, exact, n_se=3.0):
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    return np.abs(mean - exact) <= n_se * se + 1e-9


class TestEstimatorExactness:
    """Orthogonalized latent probes with K = d reproduce the exact surrogate gradient."""

    @pytest.mark.parametrize("d,D", [(2, 5), (4, 12), (8, 32)])
    def test_full_rank_probes_are_exact(self, d, D):
        pair = nets.build(nets.ArchSpec(D=D, d=d, hidden=(16,), activation="tanh", seed=d))
        X = np.random.default_rng(d).standard_normal((6, D))
        (_, distance), = metrics.rel_grad_distance(pair, X, EstimatorVariant(), [d])
        assert distance < 1e-8


class TestVarianceFormulas:
    """Empirical probe variance matches the closed forms."""

    def test_all_kinds_within_ten_percent(self):
        # Setup
        rng = np.random.default_rng(2024)
        A = commands.random_symmetric(8, rng)

        # Execute
        rows = hutchinson.variance_study(A, list(hutchinson.NoiseKind), [1, 4], 1_000_000, rng)

        # Assert
        for row in rows:
            rel = abs(row['empirical_var'] - row['analytic_var']) / row['analytic_var']
            assert rel < 0.10, row

    def test_orthogonalized_full_rank_has_no_variance(self):
        rng = np.random.default_rng(3)
        A = commands.random_symmetric(8, rng)
        row, = hutchinson.variance_study(A, ["orthogonalized"], [8], 1000, rng)
        assert row['empirical_var'] < 1e-18


class TestTraceSpaceOrdering:
    """Latent-space probes give lower-variance gradients than data-space probes."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_latent_beats_data(self, seed):
        pair = nets.build(nets.ArchSpec(D=20, d=2, hidden=(), activation="identity", seed=seed))
        x = np.random.default_rng(seed).standard_normal((1, 20))
        rng = np.random.default_rng([seed, 7])

        def grad_variance(space):
            variant = EstimatorVariant(GradTarget.ENCODER, space)
            dim = variant.probe_dim(pair)
            grads = []
            for _ in range(400):
                term = surrogate_logdet(pair, x, hutchinson.sample("gaussian", dim, 1, rng, batch=1), variant)
                grads.append(term.value.grad("encoder", pair.encoder.n_params))
            return float(np.sum(np.var(np.stack(grads), axis=0, ddof=1)))

        assert grad_variance(TraceSpace.LATENT) < grad_variance(TraceSpace.DATA)


class TestGradientCorrectness:
    """Monte-Carlo means of the surrogate gradients match the exact log-det gradient."""

    @pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.label)
    def test_monte_carlo_mean(self, variant):
        # Setup
        A = np.random.default_rng(11).standard_normal((2, 4))
        pair = nets.linear_pair(A)
        X = np.random.default_rng(12).standard_normal((2, 4))
        X_rep = np.repeat(X, 100, axis=0)
        which = variant.grad_target.value
        exact = exact_logdet_grad(pair, X, variant.grad_target, variant.jacobian_site)

        def grad_fn(rng):
            noise = hutchinson.sample("gaussian", variant.probe_dim(pair), 1, rng, batch=X_rep.shape[0])
            term = surrogate_logdet(pair, X_rep, noise, variant)
            return term.value.grad(which, pair.side(which).n_params)

        # Execute: 100 chunks x 100 probes per point
        samples = chunk_grads(grad_fn, 100)

        # Assert
        assert np.mean(within_standard_errors(samples, exact)) >= 0.9
        assert np.all(within_standard_errors(samples, exact, n_se=6.0))

    def test_exact_gradient_matches_finite_differences(self):
        pair = nets.build(nets.ArchSpec(D=3, d=2, hidden=(6,), activation="tanh", seed=21))
        X = np.random.default_rng(22).standard_normal((3, 3))
        Z = pair.encoder(X)
        h = 1e-6

        def decoder_objective():
            return float(np.mean(exact_logdet(pair, Z)))

        def encoder_objective():
            F = full_jacobian(pair.encoder, X)
            return float(np.mean([-0.5 * np.linalg.slogdet(f @ f.T)[1] for f in F]))

        for which, objective in (("decoder", decoder_objective), ("encoder", encoder_objective)):
            analytic = exact_logdet_grad(pair, X, which)
            theta = nets.get_params(pair, which)
            numeric = np.zeros_like(theta)
            for i in range(theta.size):
                step = np.zeros_like(theta)
                step[i] = h
                nets.set_params(pair, which, theta + step)
                up = objective()
                nets.set_params(pair, which, theta - step)
                down = objective()
                numeric[i] = (up - down) / (2 * h)
            nets.set_params(pair, which, theta)
            assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4, which


class TestLinearPhaseTransition:
    """Trained linear decoders land on the eigenvector the closed-form oracle selects."""

    @pytest.mark.parametrize("sigma2,expected", [(0.1, 0), (10.0, 2)])
    def test_best_of_five_seeds(self, sigma2, expected, tmp_path):
        # Setup
        cfg = load_config(CONFIG_DIR / "linear_gaussian.ini", out=tmp_path)
        beta = linear_oracle.beta_from_sigma2(sigma2)
        oracle = linear_oracle.optimal_selection(np.asarray(cfg.data.sigma), sigma2, cfg.arch.d)
        assert oracle.alpha[expected]

        # Execute
        rows = [commands.phase_run((cfg, None, beta, run)) for run in range(5)]

        # Assert
        angles = [r['angle_deg'] for r in rows if r['status'] == "ok"]
        assert angles and min(angles) < 5.0


class TestSinusoidPhaseTransition:
    """Large beta aligns the latent with the curve, small beta with the noise direction."""

    @pytest.mark.parametrize("beta,curve_wins", [(100.0, True), (0.01, False)])
    def test_four_of_five_seeds(self, beta, curve_wins, tmp_path):
        cfg = load_config(CONFIG_DIR / "phase_transition_sinusoid.ini", out=tmp_path)
        rows = [commands.phase_run((cfg, 0.1, beta, run)) for run in range(5)]
        ok = [r for r in rows if r['status'] == "ok"]
        wins = sum(1 for r in ok if (r['corr_curve'] > r['corr_noise']) == curve_wins)
        assert wins >= 4


class TestTrainingLossDecreases:
    """After warm-up the smoothed training loss on the linear-Gaussian config does not rise."""

    @pytest.mark.parametrize("sigma2", [0.1, 10.0])
    def test_window_means_non_increasing(self, sigma2, tmp_path):
        # Setup
        cfg = load_config(CONFIG_DIR / "linear_gaussian.ini", out=tmp_path)
        loss_cfg = LossConfig(beta=linear_oracle.beta_from_sigma2(sigma2), K=cfg.loss_cfg.K)
        pair = nets.build(cfg.arch)
        window = 50

        # Execute
        result = train(pair, build_dataset(cfg.data), loss_cfg, cfg.optim, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, seed=cfg.seed, validate=False, verbose=False)

        # Assert
        totals = np.array([row['total'] for row in result.history])
        totals = totals[int(cfg.optim.pct_start * len(totals)):]
        chunks = totals[: len(totals) // window * window].reshape(-1, window)
        means = chunks.mean(axis=1)
        band = 3.0 * np.sqrt(2.0) * chunks.std(axis=1, ddof=1).max() / np.sqrt(window)
        assert len(means) >= 5
        assert np.all(np.diff(means) <= band)


class TestPathology:
    """The naive NLL bends the decoder; off-manifold FIF keeps it straight."""

    def curvature_trace(self, config_name, tmp_path, steps=200, every=50):
        cfg = load_config(CONFIG_DIR / config_name, out=tmp_path)
        dataset = build_dataset(cfg.data)
        pair = nets.build(cfg.arch)
        codes = pair.encoder(dataset.train)[:, 0]
        t_grid = np.linspace(*np.percentile(codes, [5, 95]), 101)
        trace = [metrics.curvature_proxy(pair, t_grid)]

        def record(row):
            if row['step'] % every == 0:
                trace.append(metrics.curvature_proxy(pair, t_grid))

        train(pair, dataset, cfg.loss_cfg, cfg.optim, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
              loss=cfg.loss, callbacks=[record], stop_after=steps, validate=False, verbose=False)
        return trace

    def test_naive_curvature_grows(self, tmp_path):
        trace = self.curvature_trace("arc_toy_naive.ini", tmp_path)
        assert all(b >= a for a, b in zip(trace, trace[1:]))
        assert trace[-1] > trace[0]

    def test_fif_curvature_shrinks(self, tmp_path):
        trace = self.curvature_trace("arc_toy.ini", tmp_path)
        assert trace[-1] < trace[0]


class TestMixtureFid:
    """FIF training on the two-component mixture beats three bootstrap baselines."""

    def test_fid_below_baseline(self, tmp_path, quiet_env):
        result = commands.cmd_train(CONFIG_DIR / "mixture.ini", out=tmp_path)
        assert result['success']
        summary = json.loads((tmp_path / "summary.json").read_text())['summary']
        assert summary['fid_like'] < 3.0 * summary['fid_bootstrap_baseline']


class TestConjugateGradientBaseline:
    """The CG objective agrees with the decoder-side FIF estimator and is not faster."""

    def test_expected_gradients_agree(self):
        # Setup
        pair = nets.linear_pair(np.random.default_rng(31).standard_normal((2, 5)))
        X = np.repeat(np.random.default_rng(32).standard_normal((2, 5)), 200, axis=0)
        fif_cfg = LossConfig(beta=1.0, K=1, variant=EstimatorVariant.parse("decoder-latent-off"),
                             noise_kind=hutchinson.NoiseKind.GAUSSIAN)

        def decoder_grad(loss_fn, **kwargs):
            def grad_fn(rng):
                total, _ = loss_fn(pair, X, fif_cfg, rng, **kwargs)
                return total.grad("decoder", pair.decoder.n_params)
            return chunk_grads(grad_fn, 50)

        # Execute
        fif = decoder_grad(fif_loss)
        rf = decoder_grad(rf_loss, cg_tol=1e-10)

        # Assert
        diff = fif.mean(axis=0) - rf.mean(axis=0)
        se = np.sqrt(fif.var(axis=0, ddof=1) / fif.shape[0] + rf.var(axis=0, ddof=1) / rf.shape[0])
        assert np.all(np.abs(diff) <= 4.0 * se + 1e-9)

    def test_fif_not_slower_than_cg(self, tmp_path):
        result = commands.cmd_benchmark(d=21, D=43, batch=256, repeats=5, out=tmp_path)
        timing = {row['loss']: row['seconds_per_batch'] for row in result['rows']}
        assert timing['fif'] <= timing['rf']


class TestDeterminism:
    """Rerunning from an emitted config reproduces the metrics bit for bit."""

    def test_rerun_from_emitted_config(self, sinusoid_ini, tmp_path, quiet_env):
        first = commands.cmd_train(sinusoid_ini, out=tmp_path / "first")
        second = commands.cmd_train(tmp_path / "first" / "config.ini", out=tmp_path / "second")
        assert first['success'] and second['success']
        assert (tmp_path / "first" / "metrics.csv").read_bytes() == (tmp_path / "second" / "metrics.csv").read_bytes()

    def test_gaussian_generator_reproducible(self):
        a = gen_gaussian(1000, np.diag([4.0, 1.0, 0.25]), seed=8)
        b = gen_gaussian(1000, np.diag([4.0, 1.0, 0.25]), seed=8)
        assert np.array_equal(a.X, b.X)
