"""
Pipeline stages for a training run.

Each stage reads and writes the shared `state` dict and returns a result dict
({'success': True, ...} or {'success': False, 'error': ..., 'exit_code': ...}).
"""

import json
from pathlib import Path
from typing import Dict

import numpy as np

from fif_flow.data.datasets import (
    Dataset,
    gen_arc_toy,
    gen_gaussian,
    gen_gaussian_mixture,
    gen_sinusoid,
    load_csv,
    write_metadata,
)
from fif_flow.errors import ConfigError
from fif_flow.evaluation import metrics
from fif_flow.model import nets
from fif_flow.pipeline.config import DataSpec, RunConfig, dumps_metadata
from fif_flow.pipeline.runner import stage
from fif_flow.training.trainer import evaluate_loss, train

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.fifckpt"
SUMMARY_FILE = "summary.json"
DATASET_FILE = "dataset.json"
METADATA_FILE = "metadata.json"
CONFIG_FILE = "config.ini"
ARTIFACTS = (METRICS_FILE, CHECKPOINT_FILE, SUMMARY_FILE, DATASET_FILE, METADATA_FILE, CONFIG_FILE)

EVAL_STREAM = 3


def build_dataset(spec: DataSpec) -> Dataset:
    """Materialize the dataset described by a DataSpec."""
    if spec.kind == "sinusoid":
        return gen_sinusoid(spec.n, spec.noise_std, spec.seed, spec.fractions)
    if spec.kind == "gaussian":
        return gen_gaussian(spec.n, np.asarray(spec.sigma), spec.seed, spec.fractions)
    if spec.kind == "mixture":
        weights = spec.weights if spec.weights else None
        return gen_gaussian_mixture(spec.n, spec.means, spec.stds, weights, spec.seed, spec.fractions)
    if spec.kind == "arc":
        return gen_arc_toy(spec.n, spec.noise_std, spec.seed, spec.fractions)
    if spec.kind == "csv":
        split_spec = spec.fractions
        if spec.split:
            split_path = Path(spec.split)
            if not split_path.exists():
                raise ConfigError(f"data.split file not found: {split_path}")
            split_spec = json.loads(split_path.read_text())
        return load_csv(spec.path, split_spec, spec.standardize, spec.dequant_noise, spec.seed)
    raise ConfigError(f"unknown data.kind '{spec.kind}'")


@stage
def prepare_data(state: Dict) -> Dict:
    """Build the dataset and write its metadata sidecar."""
    cfg: RunConfig = state['config']
    dataset = build_dataset(cfg.data)
    if dataset.D != cfg.arch.D:
        raise ConfigError(f"dataset has D={dataset.D} but the architecture expects D={cfg.arch.D}")
    state['dataset'] = dataset
    sidecar = write_metadata(dataset, cfg.out_dir / DATASET_FILE)
    print(f"[DATA] {dataset.name}: n={dataset.n}, D={dataset.D}, "
          f"train/val/test={len(dataset.splits['train'])}/{len(dataset.splits.get('val', []))}/{len(dataset.splits.get('test', []))}")
    return {'success': True, 'n': dataset.n, 'D': dataset.D, 'sidecar': str(sidecar)}


@stage
def build_model(state: Dict) -> Dict:
    """Initialize the encoder/decoder pair from the architecture spec."""
    cfg: RunConfig = state['config']
    pair = nets.build(cfg.arch)
    state['pair'] = pair
    print(f"[MODEL] {cfg.arch.block} D={pair.D} d={pair.d}: "
          f"{pair.encoder.n_params} encoder / {pair.decoder.n_params} decoder parameters")
    return {'success': True, 'encoder_params': pair.encoder.n_params, 'decoder_params': pair.decoder.n_params}


@stage
def train_model(state: Dict) -> Dict:
    """Run the optimizer, streaming metrics and checkpoints into the run directory."""
    cfg: RunConfig = state['config']
    writer = metrics.MetricsWriter(cfg.out_dir / METRICS_FILE, run_id=cfg.name)
    result = train(
        state['pair'],
        state['dataset'],
        cfg.loss_cfg,
        cfg.optim,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        loss=cfg.loss,
        metrics=writer,
        checkpoint_path=cfg.out_dir / CHECKPOINT_FILE,
        checkpoint_every=cfg.checkpoint_every,
        log_every=cfg.log_every,
        validate=cfg.validate,
        config_hash=cfg.hash,
        verbose=state.get('verbose'),
        loss_kwargs=cfg.loss_kwargs,
    )
    state['train_result'] = result
    return {
        'success': True,
        'steps': result.global_step,
        'final_total': result.final.get('total'),
        'metrics_rows': writer.rows_written,
        'checkpoint': str(result.checkpoint_path) if result.checkpoint_path else None,
    }


def evaluate_pair(pair: nets.NetworkPair, dataset: Dataset, cfg: RunConfig) -> Dict:
    """Test-split summary: loss terms, fid_like and, where defined, alignment and spectrum."""
    test = dataset.test if len(dataset.splits.get('test', [])) else dataset.train
    rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    summary = {f"test_{k}": v for k, v in evaluate_loss(pair, test, cfg.loss_cfg, cfg.loss, rng, cfg.batch_size, cfg.loss_kwargs).items()}

    if test.shape[0] >= pair.D + 1:
        samples = pair.sample(max(cfg.eval_samples, pair.D + 1), rng)
        summary['fid_like'] = metrics.fid_like(samples, test)
        summary['fid_bootstrap_baseline'] = metrics.bootstrap_fid_baseline(test, rng) if test.shape[0] >= 2 * (pair.D + 1) else None
    else:
        summary['fid_like'] = None

    if cfg.data.kind == "sinusoid" and pair.D == 2 and pair.d == 1:
        split = "test" if len(dataset.splits.get('test', [])) else "train"
        summary.update(metrics.manifold_alignment(pair, dataset, split))

    spectrum = metrics.decoder_spectrum(pair, pair.encoder(test[:256]))
    summary['decoder_log_det_mean'] = spectrum.mean_log_sum
    summary['decoder_sv_ge_one_mean'] = spectrum.mean_count_ge_one
    return summary


@stage
def evaluate_model(state: Dict) -> Dict:
    """Evaluate the trained pair on the test split."""
    cfg: RunConfig = state['config']
    summary = evaluate_pair(state['pair'], state['dataset'], cfg)
    state['summary'] = summary
    print(f"[EVAL] test_total={summary['test_total']:.4f} test_recon={summary['test_recon']:.5f} "
          f"fid_like={summary['fid_like'] if summary['fid_like'] is None else round(summary['fid_like'], 5)}")
    return {'success': True, 'metrics': sorted(summary)}


@stage
def write_summary(state: Dict) -> Dict:
    """Write summary.json and run metadata."""
    cfg: RunConfig = state['config']
    summary_path = cfg.out_dir / SUMMARY_FILE
    payload = {
        'name': cfg.name,
        'config_hash': cfg.hash,
        'steps': state['train_result'].global_step,
        'summary': state['summary'],
    }
    summary_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    (cfg.out_dir / METADATA_FILE).write_text(dumps_metadata(cfg))
    print(f"[REPORT] Summary written to {summary_path}")
    return {'success': True, 'summary_path': str(summary_path)}


TRAIN_STAGES = (prepare_data, build_model, train_model, evaluate_model, write_summary)
