"""
Training loop with deterministic replay.

Every random draw is derived from the run seed: the epoch shuffle from
(seed, SHUFFLE_STREAM, epoch), the per-step data noise and probes from
(seed, STEP_STREAM, global_step), and validation from (seed, VAL_STREAM, epoch).
A run resumed from a checkpoint therefore replays the uninterrupted run exactly.

Pairs built with a tied arch keep g = f† after every step; decoder gradients are
folded into the encoder by the chain rule.
"""

import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from fif_flow import settings
from fif_flow.data.datasets import Dataset, iterate_batches, n_batches
from fif_flow.errors import CheckpointError, NumericalError, TrainingAborted
from fif_flow.evaluation.metrics import MetricsWriter
from fif_flow.model.losses import LossConfig, get_loss
from fif_flow.model.nets import NetworkPair, tie_linear_decoder, tied_linear_grads
from fif_flow.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from fif_flow.training.optim import AdamHyper, OptimState, adam_step, clip_by_global_norm, current_lr

SHUFFLE_STREAM = 0
STEP_STREAM = 1
VAL_STREAM = 2
GROUPS = ("decoder", "encoder")


@dataclass
class TrainResult:
    """Outcome of a training run."""

    pair: NetworkPair
    history: List[Dict] = field(default_factory=list)
    optim: Optional[OptimState] = None
    checkpoint_path: Optional[Path] = None
    global_step: int = 0
    stopped_early: bool = False

    @property
    def final(self) -> Dict:
        return self.history[-1] if self.history else {}


def step_rng(seed: int, stream: int, counter: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(counter)])


def evaluate_loss(pair: NetworkPair, X: np.ndarray, cfg: LossConfig, loss: str = "fif",
                  rng: Optional[np.random.Generator] = None, batch_size: int = 1024,
                  loss_kwargs: Optional[Dict] = None) -> Dict[str, float]:
    """Row-weighted mean LossBreakdown over X, evaluated in batches."""
    loss_fn = functools.partial(get_loss(loss), **(loss_kwargs or {}))
    rng = rng if rng is not None else np.random.default_rng(0)
    totals: Dict[str, float] = {}
    n = X.shape[0]
    for idx in iterate_batches(n, batch_size, None):
        _, breakdown = loss_fn(pair, X[idx], cfg, rng)
        for k, v in breakdown.as_dict().items():
            totals[k] = totals.get(k, 0.0) + v * idx.size
    return {k: v / n for k, v in totals.items()}


def _params(pair: NetworkPair) -> Dict[str, np.ndarray]:
    return {g: pair.side(g).get_params() for g in GROUPS}


def _grads(total, pair: NetworkPair) -> Dict[str, np.ndarray]:
    return {g: total.grad(g, pair.side(g).n_params) for g in GROUPS}


def train(
    pair: NetworkPair,
    dataset: Dataset,
    cfg: LossConfig,
    hyper: AdamHyper,
    epochs: int,
    batch_size: int = 256,
    seed: int = 0,
    loss: str = "fif",
    callbacks: Sequence[Callable[[Dict], None]] = (),
    metrics: Optional[MetricsWriter] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    checkpoint_every: Optional[int] = None,
    resume_from: Optional[Union[str, Path]] = None,
    stop_after: Optional[int] = None,
    log_every: int = 1,
    validate: bool = True,
    config_hash: str = "",
    verbose: Optional[bool] = None,
    loss_kwargs: Optional[Dict] = None,
) -> TrainResult:
    """
    Optimize a NetworkPair on the train split.

    Args:
        pair: Encoder/decoder pair, updated in place
        dataset: Dataset with train (and optionally val) splits
        cfg: Loss configuration
        hyper: Optimizer hyperparameters
        epochs: Number of passes over the train split
        batch_size: Rows per step
        seed: Run seed for shuffles, data noise and probes
        loss: Objective name ('fif', 'naive', 'rf', 'recon')
        callbacks: Called with each step's row dict
        metrics: Optional CSV writer for per-step and validation metrics
        checkpoint_path: Where checkpoints are written
        checkpoint_every: Save every N global steps (always saved at the end)
        resume_from: Checkpoint to continue from
        stop_after: Stop (and checkpoint) once this many global steps have run
        log_every: Write step metrics every N steps
        validate: Evaluate the val split after each epoch
        config_hash: Stored in checkpoints and checked on resume
        verbose: Print progress (defaults to FIF_VERBOSE)
        loss_kwargs: Extra keyword arguments for the objective (cg_tol, cg_max_iter for rf)

    Returns:
        TrainResult
    """
    verbose = settings.verbose() if verbose is None else verbose
    loss_fn = functools.partial(get_loss(loss), **(loss_kwargs or {}))
    X = dataset.train
    n = X.shape[0]
    steps_per_epoch = n_batches(n, batch_size)
    params = _params(pair)
    state = OptimState.zeros_like(params, epochs * steps_per_epoch)
    start_epoch, start_batch, global_step = 0, 0, 0
    checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
    last_saved: Optional[Path] = None

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_arch=pair.arch.to_dict())
        if config_hash and ckpt.config_hash and ckpt.config_hash != config_hash:
            raise CheckpointError(f"checkpoint config hash {ckpt.config_hash[:12]} does not match run {config_hash[:12]}")
        params = {g: ckpt.params[g] for g in GROUPS}
        for g in GROUPS:
            pair.side(g).set_params(params[g])
        state = ckpt.optim
        start_epoch = ckpt.cursor['epoch']
        start_batch = ckpt.cursor['batch']
        global_step = ckpt.cursor['global_step']
        if metrics is not None:
            metrics.truncate(ckpt.metrics_cursor)
        last_saved = Path(resume_from)
        if verbose:
            print(f"[TRAINER] Resuming at epoch {start_epoch}, batch {start_batch}, step {global_step}")

    def save(epoch: int, batch: int) -> Optional[Path]:
        if checkpoint_path is None:
            return None
        ckpt = Checkpoint(
            arch=pair.arch.to_dict(),
            params=params,
            optim=state,
            config_hash=config_hash,
            rng={'seed': int(seed), 'scheme': 'counter', 'streams': [SHUFFLE_STREAM, STEP_STREAM, VAL_STREAM]},
            cursor={'epoch': epoch, 'batch': batch, 'global_step': global_step},
            metrics_cursor=metrics.rows_written if metrics is not None else 0,
        )
        return save_checkpoint(checkpoint_path, ckpt)

    history: List[Dict] = []
    for epoch in range(start_epoch, epochs):
        batches = list(iterate_batches(n, batch_size, step_rng(seed, SHUFFLE_STREAM, epoch)))
        first = start_batch if epoch == start_epoch else 0
        for b_idx in range(first, len(batches)):
            idx = batches[b_idx]
            try:
                total, breakdown = loss_fn(pair, X[idx], cfg, step_rng(seed, STEP_STREAM, global_step))
                grads = _grads(total, pair)
                if pair.arch.tied:
                    grads = tied_linear_grads(pair, grads)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericalError(f"non-finite gradient at step {global_step}")
            except NumericalError as exc:
                print(f"[TRAINER] Aborting at step {global_step}: {exc}")
                raise TrainingAborted(f"training aborted at step {global_step}: {exc}", checkpoint_path=str(last_saved) if last_saved else None)

            grads, grad_norm = clip_by_global_norm(grads, hyper.max_grad_norm)
            lr = current_lr(state, hyper)
            params, state = adam_step(params, grads, state, hyper)
            for g in GROUPS:
                pair.side(g).set_params(params[g])
            if pair.arch.tied:
                tie_linear_decoder(pair)
                params['decoder'] = pair.decoder.get_params()
            global_step += 1

            row = {**breakdown.as_dict(), 'lr': lr, 'grad_norm': grad_norm}
            history.append({'step': global_step, 'epoch': epoch, **row})
            if metrics is not None and log_every and global_step % log_every == 0:
                metrics.write(global_step, row)
            for callback in callbacks:
                callback({'step': global_step, 'epoch': epoch, **row})

            at_epoch_end = b_idx + 1 == len(batches)
            cursor = (epoch + 1, 0) if at_epoch_end and not validate else (epoch, b_idx + 1)
            if checkpoint_every and global_step % checkpoint_every == 0:
                last_saved = save(*cursor) or last_saved
            if stop_after is not None and global_step >= stop_after:
                last_saved = save(*cursor) or last_saved
                if verbose:
                    print(f"[TRAINER] Stopped after {global_step} steps")
                return TrainResult(pair=pair, history=history, optim=state, checkpoint_path=last_saved,
                                   global_step=global_step, stopped_early=True)

        val_row = {}
        if validate and dataset.splits.get('val') is not None and len(dataset.splits['val']) > 0:
            val = evaluate_loss(pair, dataset.val, cfg, loss, step_rng(seed, VAL_STREAM, epoch), batch_size, loss_kwargs)
            val_row = {f"val_{k}": v for k, v in val.items()}
            if metrics is not None:
                metrics.write(global_step, val_row)
            if not np.isfinite(val_row.get('val_total', 0.0)):
                raise TrainingAborted(f"non-finite validation loss after epoch {epoch}", checkpoint_path=str(last_saved) if last_saved else None)
        if verbose and history:
            last = history[-1]
            extra = f" val_total={val_row['val_total']:.4f}" if 'val_total' in val_row else ""
            print(f"[TRAINER] epoch {epoch + 1}/{epochs} step {global_step} "
                  f"loss={last['total']:.4f} recon={last['recon']:.4f}{extra}")

    last_saved = save(epochs, 0) or last_saved
    return TrainResult(pair=pair, history=history, optim=state, checkpoint_path=last_saved, global_step=global_step)
