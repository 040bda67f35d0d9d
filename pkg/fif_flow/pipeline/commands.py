"""
Experiment commands behind the CLI.

Every command returns a result dict with 'success' and 'exit_code'; package errors are
converted here so the CLI only maps exit codes.
"""

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from fif_flow import settings
from fif_flow.errors import ConfigError, DimensionError, FIFError, NumericalError
from fif_flow.evaluation import metrics
from fif_flow.model import nets
from fif_flow.model.losses import LossConfig, get_loss
from fif_flow.model.surrogate import EstimatorVariant, GradTarget, JacobianSite, TraceSpace, exact_logdet
from fif_flow.numerics import hutchinson
from fif_flow.oracles import linear_oracle
from fif_flow.pipeline.config import RunConfig, load_config, write_config
from fif_flow.pipeline.runner import SequentialPipeline
from fif_flow.pipeline.stages import ARTIFACTS, CONFIG_FILE, TRAIN_STAGES, build_dataset
from fif_flow.training.trainer import train

PHASE_FILE = "phase_transition.csv"
PHASE_RUNS_FILE = "runs.csv"
ORACLE_FILE = "oracle.json"
VARIANCE_FILE = "variance.csv"
GRAD_DISTANCE_FILE = "grad_distance.csv"
BENCHMARK_FILE = "benchmark.csv"
ARC_FILE = "arc_study.csv"

ALL_KINDS = tuple(k.value for k in hutchinson.NoiseKind)


def _failure(exc: FIFError) -> Dict:
    print(f"[{type(exc).__name__}] {exc}")
    return {'success': False, 'error': str(exc), 'error_type': type(exc).__name__, 'exit_code': exc.exit_code}


def _claim_out_dir(out_dir: Path, artifacts: Iterable[str], force: bool) -> None:
    """Create the run directory, refusing to overwrite earlier outputs unless forced."""
    existing = [name for name in artifacts if (out_dir / name).exists()]
    if existing and not force:
        raise ConfigError(f"output directory {out_dir} already holds {', '.join(existing)}; pass --force to overwrite")
    for name in existing:
        (out_dir / name).unlink()
        print(f"[CLI] Removed previous {out_dir / name}")
    out_dir.mkdir(parents=True, exist_ok=True)


def _write_csv(path: Path, rows: List[Dict], columns: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def _default_out(command: str, out: Optional[Union[str, Path]]) -> Path:
    return Path(out) if out is not None else settings.output_root() / command


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(config_path: Union[str, Path], seed: Optional[int] = None, out: Optional[Union[str, Path]] = None,
              force: bool = False, verbose: Optional[bool] = None) -> Dict:
    """
    Train one model from an experiment config.

    Writes config.ini, dataset.json, metrics.csv, the checkpoint, summary.json and
    metadata.json into the run directory.

    Args:
        config_path: Experiment INI file
        seed: Override for run.seed
        out: Override for run.out_dir
        force: Overwrite outputs of an earlier run in the same directory
        verbose: Print trainer progress (defaults to FIF_VERBOSE)

    Returns:
        Pipeline result dict with exit_code and out_dir
    """
    try:
        cfg = load_config(config_path, seed=seed, out=out)
        if cfg.kind != "train":
            raise ConfigError(f"experiment.kind is '{cfg.kind}'; use the matching subcommand")
        _claim_out_dir(cfg.out_dir, ARTIFACTS, force)
        write_config(cfg, cfg.out_dir / CONFIG_FILE)
    except FIFError as exc:
        return _failure(exc)

    print(f"[CLI] Run directory: {cfg.out_dir} (config hash {cfg.hash[:12]})")
    result = SequentialPipeline("train", TRAIN_STAGES).run({'config': cfg, 'verbose': verbose})
    result['out_dir'] = str(cfg.out_dir)
    return result


# ---------------------------------------------------------------------------
# variance-study
# ---------------------------------------------------------------------------

def random_symmetric(d: int, rng: np.random.Generator) -> np.ndarray:
    M = rng.standard_normal((d, d))
    return 0.5 * (M + M.T)


def cmd_variance_study(d: int = 8, D: int = 16, kinds: Sequence[str] = ALL_KINDS,
                       K_list: Sequence[int] = tuple(range(1, 9)), samples: int = 100_000, seed: int = 0,
                       out: Optional[Union[str, Path]] = None, hidden: Tuple[int, ...] = (32,),
                       batch: int = 16, force: bool = False) -> Dict:
    """
    Trace-estimator variance and gradient-distance study.

    variance.csv: analytic vs empirical variance of the K-probe trace estimate of a
    random symmetric d×d matrix, one row per (kind, K).
    grad_distance.csv: relative distance of the probe surrogate gradient to the exact one
    for a random tanh MLP pair, in latent and data trace space.

    Returns:
        Result dict with file paths and row counts
    """
    out_dir = _default_out("variance_study", out)
    try:
        parsed = [hutchinson.NoiseKind.parse(k) for k in kinds]
        if not K_list or min(K_list) < 1:
            raise ConfigError("K list must contain positive integers")
        if d >= D:
            raise DimensionError(f"need d < D, got d={d}, D={D}")
        if hutchinson.NoiseKind.ORTHOGONALIZED in parsed and max(K_list) > d:
            raise ConfigError(f"orthogonalized probes need K <= d={d}, got K={max(K_list)}")
        _claim_out_dir(out_dir, (VARIANCE_FILE, GRAD_DISTANCE_FILE), force)

        rng = np.random.default_rng([seed, 0])
        A = random_symmetric(d, rng)
        rows = hutchinson.variance_study(A, parsed, K_list, samples, rng)
        for row in rows:
            analytic = row['analytic_var']
            row['rel_error'] = abs(row['empirical_var'] - analytic) / analytic if analytic > 0 else float("nan")
        variance_path = _write_csv(out_dir / VARIANCE_FILE, rows,
                                   ("kind", "d", "K", "analytic_var", "empirical_var", "rel_error", "n_samples"))

        pair = nets.build(nets.ArchSpec(D=D, d=d, hidden=tuple(hidden), activation="tanh", seed=seed))
        X = np.random.default_rng([seed, 1]).standard_normal((batch, D))
        curves = []
        for space, K_values in ((TraceSpace.LATENT, [K for K in K_list if K <= d]),
                                (TraceSpace.DATA, sorted(set(K_list) | {D}))):
            variant = EstimatorVariant(GradTarget.ENCODER, space, JacobianSite.OFF_MANIFOLD)
            for K, distance in metrics.rel_grad_distance(pair, X, variant, K_values, seed=seed):
                curves.append({'trace_space': space.value, 'variant': variant.label, 'K': K, 'rel_distance': distance})
        distance_path = _write_csv(out_dir / GRAD_DISTANCE_FILE, curves, ("trace_space", "variant", "K", "rel_distance"))
    except FIFError as exc:
        return _failure(exc)
    except ValueError as exc:
        return _failure(ConfigError(str(exc)))

    print(f"[VARIANCE] {len(rows)} variance rows -> {variance_path}")
    print(f"[VARIANCE] {len(curves)} gradient-distance rows -> {distance_path}")
    return {'success': True, 'exit_code': 0, 'variance_csv': str(variance_path), 'grad_distance_csv': str(distance_path),
            'variance_rows': len(rows), 'distance_rows': len(curves)}


# ---------------------------------------------------------------------------
# phase-transition
# ---------------------------------------------------------------------------

def _phase_grid(cfg: RunConfig) -> List[Tuple[Optional[float], float]]:
    """(noise level, beta) pairs; linear-gaussian grids may be given in sigma² instead of beta."""
    if cfg.data.kind == "gaussian" and cfg.sweep.sigma2:
        betas = [linear_oracle.beta_from_sigma2(s) for s in cfg.sweep.sigma2]
    else:
        betas = list(cfg.sweep.betas)
    if not betas:
        raise ConfigError("sweep.betas (or sweep.sigma2 for gaussian data) must not be empty")
    if cfg.data.kind == "sinusoid":
        levels = list(cfg.sweep.noise_levels) or [cfg.data.noise_std]
        return [(level, beta) for level in levels for beta in betas]
    return [(None, beta) for beta in betas]


def _test_nll(pair: nets.NetworkPair, X: np.ndarray, cfg: LossConfig) -> float:
    """Mean exact negative log-likelihood on the decoder manifold, NaN if the decoder is degenerate."""
    Z = pair.encoder(X)
    try:
        logdet = exact_logdet(pair, Z)
    except NumericalError:
        return float("nan")
    return float(np.mean(cfg.prior.neg_log_prob(Z) + logdet))


def phase_run(task: Tuple[RunConfig, Optional[float], float, int]) -> Dict:
    """Train and evaluate one (noise level, beta, run) cell of the sweep."""
    cfg, level, beta, run = task
    data = cfg.data if level is None else replace(cfg.data, noise_std=level)
    loss_cfg = replace(cfg.loss_cfg, beta=beta)
    arch = replace(cfg.arch, seed=cfg.arch.seed + run)
    row = {'noise_level': level if level is not None else "", 'beta': beta,
           'sigma2': linear_oracle.sigma2_from_beta(beta) if beta > 0 else float("inf"),
           'run': run, 'seed': cfg.seed + run}
    try:
        dataset = build_dataset(data)
        pair = nets.build(arch)
        train(pair, dataset, loss_cfg, cfg.optim, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed + run,
              loss=cfg.loss, validate=False, verbose=False, loss_kwargs=cfg.loss_kwargs)
        test = dataset.test
        row['recon'] = float(np.mean(np.sum((pair.reconstruct(test) - test) ** 2, axis=1)))
        row['nll'] = _test_nll(pair, test, loss_cfg)
        if data.kind == "sinusoid":
            row.update(metrics.manifold_alignment(pair, dataset, "test"))
        else:
            oracle = linear_oracle.optimal_selection(np.asarray(data.sigma), row['sigma2'], arch.d)
            angles = linear_oracle.principal_angles(nets.linear_weights(pair.decoder), oracle.selected_subspace)
            row['angle_deg'] = float(np.degrees(angles[-1]))
        row['status'] = "ok"
    except NumericalError as exc:
        row['status'] = f"failed: {type(exc).__name__}"
        print(f"[PHASE] beta={beta:g} run={run} failed: {exc}")
    return row


def _summarize(rows: List[Dict], value_keys: Sequence[str], runs_per_beta: int) -> List[Dict]:
    cells: Dict[Tuple, List[Dict]] = {}
    for row in rows:
        cells.setdefault((row['noise_level'], row['beta']), []).append(row)
    summary = []
    for (level, beta), group in cells.items():
        ok = [r for r in group if r['status'] == "ok"]
        out = {'noise_level': level, 'beta': beta, 'sigma2': group[0]['sigma2'], 'n_ok': len(ok)}
        for key in value_keys:
            values = np.array([r[key] for r in ok], dtype=np.float64)
            out[f"{key}_mean"] = float(np.mean(values)) if values.size else float("nan")
            if runs_per_beta > 1:
                out[f"{key}_std"] = float(np.std(values, ddof=1)) if values.size > 1 else float("nan")
        if 'angle_deg' in value_keys:
            out['angle_deg_min'] = float(min(r['angle_deg'] for r in ok)) if ok else float("nan")
        if 'corr_curve' in value_keys:
            out['curve_wins'] = sum(1 for r in ok if r['corr_curve'] > r['corr_noise'])
        summary.append(out)
    return summary


def _oracle_report(cfg: RunConfig, grid: List[Tuple[Optional[float], float]]) -> Dict:
    Sigma = np.asarray(cfg.data.sigma)
    report = {
        'mapping': 'beta = 1 / (2 sigma2)',
        'd': cfg.arch.d,
        'selections': [linear_oracle.optimal_selection(Sigma, linear_oracle.sigma2_from_beta(beta), cfg.arch.d).to_dict()
                       for _, beta in grid],
    }
    lam = linear_oracle.optimal_selection(Sigma, 1.0, cfg.arch.d).lambdas
    if cfg.arch.d == 1 and lam.size >= 2:
        report['flip_points'] = [
            {'lam_hi': float(hi), 'lam_lo': float(lo), 'sigma2': linear_oracle.selection_flip_point(hi, lo)}
            for hi, lo in zip(lam[:-1], lam[1:]) if hi > lo
        ]
    return report


def cmd_phase_transition(config_path: Union[str, Path], seed: Optional[int] = None, out: Optional[Union[str, Path]] = None,
                         force: bool = False, jobs: int = 1) -> Dict:
    """
    Sweep beta (and, for the sinusoid, data noise) with several runs per cell.

    Sinusoid sweeps report recon, NLL and the manifold alignment correlations; linear
    Gaussian sweeps report the largest principal angle between the learned decoder span
    and the oracle's selected eigenvectors, and write oracle.json.

    Args:
        config_path: INI with experiment.kind = phase_transition and a [sweep] section
        seed: Override for run.seed (run r uses seed + r)
        out: Override for run.out_dir
        force: Overwrite earlier sweep outputs
        jobs: Worker processes, capped by FIF_NUM_THREADS

    Returns:
        Result dict with file paths
    """
    try:
        cfg = load_config(config_path, seed=seed, out=out)
        if cfg.kind != "phase_transition":
            raise ConfigError(f"experiment.kind is '{cfg.kind}'; phase-transition needs 'phase_transition'")
        if cfg.data.kind not in ("sinusoid", "gaussian"):
            raise ConfigError(f"phase-transition supports sinusoid or gaussian data, got '{cfg.data.kind}'")
        if cfg.data.kind == "gaussian" and (cfg.arch.block != "mlp" or cfg.arch.hidden):
            raise ConfigError("linear-gaussian sweeps need a linear pair: arch.block = mlp with no hidden layers")
        if cfg.sweep.runs_per_beta < 1:
            raise ConfigError("sweep.runs_per_beta must be >= 1")
        grid = _phase_grid(cfg)
        _claim_out_dir(cfg.out_dir, (PHASE_FILE, PHASE_RUNS_FILE, ORACLE_FILE, CONFIG_FILE), force)
        write_config(cfg, cfg.out_dir / CONFIG_FILE)
        oracle = _oracle_report(cfg, grid) if cfg.data.kind == "gaussian" else None
    except FIFError as exc:
        return _failure(exc)

    tasks = [(cfg, level, beta, run) for level, beta in grid for run in range(cfg.sweep.runs_per_beta)]
    workers = settings.effective_jobs(jobs)
    print(f"[PHASE] {len(tasks)} runs over {len(grid)} cells with {workers} worker(s)")
    if workers == 1:
        rows = [phase_run(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(phase_run, tasks))

    value_keys = ("recon", "nll", "corr_curve", "corr_noise") if cfg.data.kind == "sinusoid" else ("recon", "nll", "angle_deg")
    summary = _summarize(rows, value_keys, cfg.sweep.runs_per_beta)
    columns = ["noise_level", "beta", "sigma2", "n_ok"]
    for key in value_keys:
        columns.append(f"{key}_mean")
        if cfg.sweep.runs_per_beta > 1:
            columns.append(f"{key}_std")
    columns += ["curve_wins"] if cfg.data.kind == "sinusoid" else ["angle_deg_min"]

    phase_path = _write_csv(cfg.out_dir / PHASE_FILE, summary, columns)
    runs_path = _write_csv(cfg.out_dir / PHASE_RUNS_FILE, rows,
                           ["noise_level", "beta", "sigma2", "run", "seed", "status", *value_keys])
    result = {'success': True, 'exit_code': 0, 'csv': str(phase_path), 'runs_csv': str(runs_path),
              'cells': len(summary), 'runs': len(rows)}
    if oracle is not None:
        oracle_path = cfg.out_dir / ORACLE_FILE
        oracle_path.write_text(json.dumps(oracle, indent=2, sort_keys=True))
        result['oracle'] = str(oracle_path)

    failed = sum(1 for r in rows if r['status'] != "ok")
    if failed == len(rows):
        result.update({'success': False, 'exit_code': NumericalError.exit_code, 'error': "every run failed numerically"})
    print(f"[PHASE] {len(rows) - failed}/{len(rows)} runs succeeded -> {phase_path}")
    return result


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def cmd_benchmark(d: int = 21, D: int = 43, batch: int = 256, repeats: int = 5, seed: int = 0,
                  out: Optional[Union[str, Path]] = None, hidden: Tuple[int, ...] = (128, 128),
                  force: bool = False) -> Dict:
    """Median per-batch wall-clock of the reconstruction-only, FIF and CG objectives."""
    out_dir = _default_out("benchmark", out)
    try:
        _claim_out_dir(out_dir, (BENCHMARK_FILE,), force)
        pair = nets.build(nets.ArchSpec(D=D, d=d, hidden=tuple(hidden), activation="silu", seed=seed))
        X = np.random.default_rng([seed, 0]).standard_normal((batch, D))
        cfg = LossConfig(beta=10.0, K=1)
    except FIFError as exc:
        return _failure(exc)
    except ValueError as exc:
        return _failure(ConfigError(str(exc)))

    rows = []
    for name in ("recon", "fif", "rf"):
        loss_fn = get_loss(name)
        timings = []
        status = "ok"
        for r in range(repeats):
            rng = np.random.default_rng([seed, 1, r])
            start = time.perf_counter()
            try:
                total, _ = loss_fn(pair, X, cfg, rng)
                total.grad("encoder", pair.encoder.n_params)
                total.grad("decoder", pair.decoder.n_params)
            except NumericalError as exc:
                status = f"failed: {type(exc).__name__}"
                break
            timings.append(time.perf_counter() - start)
        seconds = float(np.median(timings)) if timings else float("nan")
        rows.append({'loss': name, 'd': d, 'D': D, 'batch': batch, 'repeats': len(timings),
                     'seconds_per_batch': seconds, 'status': status})
        print(f"[BENCHMARK] {name:<6} {seconds * 1e3:9.2f} ms/batch ({status})")

    base = rows[0]['seconds_per_batch']
    for row in rows:
        row['relative_to_recon'] = row['seconds_per_batch'] / base if base > 0 else float("nan")
    path = _write_csv(out_dir / BENCHMARK_FILE, rows,
                      ("loss", "d", "D", "batch", "repeats", "seconds_per_batch", "relative_to_recon", "status"))
    return {'success': True, 'exit_code': 0, 'csv': str(path), 'rows': rows}


# ---------------------------------------------------------------------------
# arc-study
# ---------------------------------------------------------------------------

def cmd_arc_study(radii: Sequence[float] = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0), beta: float = 1.0,
                  n: int = 2000, seed: int = 0, out: Optional[Union[str, Path]] = None, force: bool = False) -> Dict:
    """Entropy and reconstruction of flat data projected onto arcs of shrinking radius."""
    out_dir = _default_out("arc_study", out)
    try:
        if not radii or min(radii) <= 0:
            raise ConfigError("radii must be positive")
        _claim_out_dir(out_dir, (ARC_FILE,), force)
    except FIFError as exc:
        return _failure(exc)
    rows = metrics.arc_projection_study(radii, n=n, beta=beta, seed=seed)
    path = _write_csv(out_dir / ARC_FILE, rows, ("radius", "projected_entropy", "recon", "total"))
    for row in rows:
        print(f"[ARC] R={row['radius']:<6g} entropy={row['projected_entropy']:.4f} recon={row['recon']:.4f}")
    return {'success': True, 'exit_code': 0, 'csv': str(path), 'rows': len(rows)}
