"""
Experiment configuration: INI files parsed into typed RunConfig objects.

Every section and key is checked against the known schema; unknown names raise
ConfigError naming `section.key`. The resolved config is written back as INI so a run
can be repeated from its own output directory.
"""

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from fif_flow import settings
from fif_flow.data.datasets import load_csv
from fif_flow.errors import ConfigError
from fif_flow.model.losses import LossConfig
from fif_flow.model.nets import FINAL_ENCODER_SCALE, ArchSpec
from fif_flow.model.surrogate import EstimatorVariant
from fif_flow.numerics.hutchinson import NoiseKind
from fif_flow.oracles.linear_oracle import sigma2_from_beta
from fif_flow.training.checkpoint import config_hash
from fif_flow.training.optim import AdamHyper

EXPERIMENTS = ("train", "phase_transition")
DATA_KINDS = ("sinusoid", "gaussian", "mixture", "arc", "csv")
LOSS_KINDS = ("fif", "naive", "rf", "recon")

SCHEMA: Dict[str, Tuple[str, ...]] = {
    'experiment': ("kind", "name", "loss"),
    'data': ("kind", "n", "noise_std", "sigma", "seed", "path", "standardize", "split",
             "dequant_noise", "means", "stds", "weights", "fractions"),
    'arch': ("d", "hidden", "block", "activation", "n_blocks", "block_hidden", "tied", "encoder_scale", "seed"),
    'loss': ("beta", "k", "variant", "noise_std", "noise_kind", "pinv_partner", "cg_tol", "cg_max_iter"),
    'optim': ("lr", "weight_decay", "schedule", "pct_start", "epochs", "batch_size",
              "max_grad_norm", "beta1", "beta2", "eps"),
    'run': ("seed", "out_dir", "log_every", "checkpoint_every", "validate", "eval_samples"),
    'sweep': ("betas", "runs_per_beta", "noise_levels", "sigma2"),
}


@dataclass(frozen=True)
class DataSpec:
    """Which dataset to build and with what parameters."""

    kind: str = "sinusoid"
    n: int = 10_000
    noise_std: float = 0.1
    sigma: Tuple[Tuple[float, ...], ...] = ()
    seed: int = 0
    path: str = ""
    standardize: bool = True
    split: str = ""
    dequant_noise: float = 0.0
    means: Tuple[Tuple[float, ...], ...] = ((-2.0, 0.0), (2.0, 0.0))
    stds: Tuple[float, ...] = (0.5, 0.5)
    weights: Tuple[float, ...] = ()
    fractions: Tuple[float, ...] = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class SweepSpec:
    """Grid for phase-transition experiments."""

    betas: Tuple[float, ...] = ()
    runs_per_beta: int = 1
    noise_levels: Tuple[float, ...] = ()
    sigma2: Tuple[float, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved experiment configuration."""

    kind: str
    name: str
    loss: str
    data: DataSpec
    arch: ArchSpec
    loss_cfg: LossConfig
    optim: AdamHyper
    epochs: int
    batch_size: int
    seed: int
    out_dir: Path
    log_every: int = 1
    checkpoint_every: Optional[int] = None
    validate: bool = True
    eval_samples: int = 2000
    cg_tol: float = 1e-6
    cg_max_iter: Optional[int] = None
    sweep: SweepSpec = field(default_factory=SweepSpec)

    @property
    def loss_kwargs(self) -> Dict:
        if self.loss == "rf":
            return {"cg_tol": self.cg_tol, "cg_max_iter": self.cg_max_iter}
        return {}

    @property
    def hash(self) -> str:
        sections = to_sections(self)
        sections["run"].pop("out_dir")
        return config_hash(sections)


# ---------------------------------------------------------------------------
# Value parsing
# ---------------------------------------------------------------------------

def _num_list(raw: str, key: str) -> Tuple[float, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected a comma-separated list of numbers, got {raw!r}")


def _int_list(raw: str, key: str) -> Tuple[int, ...]:
    values = _num_list(raw, key)
    if any(v != int(v) for v in values):
        raise ConfigError(f"{key}: expected integers, got {raw!r}")
    return tuple(int(v) for v in values)


def _matrix(raw: str, key: str) -> Tuple[Tuple[float, ...], ...]:
    """Rows separated by ';', entries by ','."""
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(tuple(float(v) for v in row.split(",") if v.strip()) for row in raw.split(";") if row.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected rows of numbers separated by ';', got {raw!r}")


def _get(section: configparser.SectionProxy, key: str, conv, default):
    name = f"{section.name}.{key}"
    if key not in section:
        return default
    raw = section[key]
    try:
        if conv is bool:
            return section.getboolean(key)
        if conv is int:
            return int(raw)
        if conv is float:
            return float(raw)
        if conv == "optional_int":
            return None if raw.strip().lower() in ("", "none") else int(raw)
        if conv == "optional_float":
            return None if raw.strip().lower() in ("", "none") else float(raw)
        return conv(raw, name)
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{name}: invalid value {raw!r}")


def _str(raw: str, key: str) -> str:
    return raw.strip()


def _validate_schema(parser: configparser.ConfigParser) -> None:
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section '{section}'")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key '{section}.{key}'")


def _choice(value: str, options: Tuple[str, ...], key: str) -> str:
    if value not in options:
        raise ConfigError(f"{key}: '{value}' is not one of {options}")
    return value


def parse_config(parser: configparser.ConfigParser, seed: Optional[int] = None, out: Optional[Union[str, Path]] = None) -> RunConfig:
    """Build a RunConfig from a parsed INI, applying CLI overrides."""
    _validate_schema(parser)
    for required in ("experiment", "data", "arch"):
        if not parser.has_section(required):
            raise ConfigError(f"missing config section '{required}'")
    for section in SCHEMA:
        if not parser.has_section(section):
            parser.add_section(section)

    exp, data, arch, loss, optim, run, sweep = (parser[s] for s in ("experiment", "data", "arch", "loss", "optim", "run", "sweep"))

    kind = _choice(_get(exp, "kind", _str, "train"), EXPERIMENTS, "experiment.kind")
    loss_name = _choice(_get(exp, "loss", _str, "fif"), LOSS_KINDS, "experiment.loss")
    data_kind = _choice(_get(data, "kind", _str, "sinusoid"), DATA_KINDS, "data.kind")
    run_seed = _get(run, "seed", int, 0) if seed is None else int(seed)

    data_spec = DataSpec(
        kind=data_kind,
        n=_get(data, "n", int, 10_000),
        noise_std=_get(data, "noise_std", float, 0.1),
        sigma=_get(data, "sigma", _matrix, ()),
        seed=_get(data, "seed", int, run_seed),
        path=_get(data, "path", _str, ""),
        standardize=_get(data, "standardize", bool, True),
        split=_get(data, "split", _str, ""),
        dequant_noise=_get(data, "dequant_noise", float, 0.0),
        means=_get(data, "means", _matrix, ((-2.0, 0.0), (2.0, 0.0))),
        stds=_get(data, "stds", _num_list, (0.5, 0.5)),
        weights=_get(data, "weights", _num_list, ()),
        fractions=_get(data, "fractions", _num_list, (0.8, 0.1, 0.1)),
    )
    if data_kind == "csv" and not data_spec.path:
        raise ConfigError("data.path is required for csv datasets")
    if data_kind == "gaussian" and not data_spec.sigma:
        raise ConfigError("data.sigma is required for gaussian datasets")

    D = infer_data_dim(data_spec)
    try:
        arch_spec = ArchSpec(
            D=D,
            d=_get(arch, "d", int, 1),
            hidden=_get(arch, "hidden", _int_list, ()),
            block=_get(arch, "block", _str, "mlp"),
            activation=_get(arch, "activation", _str, "relu"),
            n_blocks=_get(arch, "n_blocks", int, 0),
            block_hidden=_get(arch, "block_hidden", _int_list, (256,)),
            tied=_get(arch, "tied", bool, False),
            encoder_scale=_get(arch, "encoder_scale", float, FINAL_ENCODER_SCALE),
            seed=_get(arch, "seed", int, run_seed),
        )
        noise_kind = _get(loss, "noise_kind", _str, "auto")
        loss_cfg = LossConfig(
            beta=_get(loss, "beta", float, 1.0),
            K=_get(loss, "k", int, 1),
            variant=EstimatorVariant.parse(_get(loss, "variant", _str, "encoder-latent-off")),
            noise_std=_get(loss, "noise_std", float, 0.0),
            noise_kind=None if noise_kind == "auto" else NoiseKind.parse(noise_kind),
            pinv_partner=_get(loss, "pinv_partner", bool, False),
        )
        hyper = AdamHyper(
            lr=_get(optim, "lr", float, 1e-3),
            beta1=_get(optim, "beta1", float, 0.9),
            beta2=_get(optim, "beta2", float, 0.999),
            eps=_get(optim, "eps", float, 1e-8),
            weight_decay=_get(optim, "weight_decay", float, 0.0),
            schedule=_get(optim, "schedule", _str, "onecycle"),
            pct_start=_get(optim, "pct_start", float, 0.3),
            max_grad_norm=_get(optim, "max_grad_norm", "optional_float", None),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc))

    out_dir = Path(out) if out is not None else Path(_get(run, "out_dir", _str, "") or settings.output_root() / _get(exp, "name", _str, kind))
    return RunConfig(
        kind=kind,
        name=_get(exp, "name", _str, kind),
        loss=loss_name,
        data=data_spec,
        arch=arch_spec,
        loss_cfg=loss_cfg,
        optim=hyper,
        epochs=_get(optim, "epochs", int, 10),
        batch_size=_get(optim, "batch_size", int, 256),
        seed=run_seed,
        out_dir=out_dir,
        log_every=_get(run, "log_every", int, 1),
        checkpoint_every=_get(run, "checkpoint_every", "optional_int", None),
        validate=_get(run, "validate", bool, True),
        eval_samples=_get(run, "eval_samples", int, 2000),
        cg_tol=_get(loss, "cg_tol", float, 1e-6),
        cg_max_iter=_get(loss, "cg_max_iter", "optional_int", None),
        sweep=SweepSpec(
            betas=_get(sweep, "betas", _num_list, ()),
            runs_per_beta=_get(sweep, "runs_per_beta", int, 1),
            noise_levels=_get(sweep, "noise_levels", _num_list, ()),
            sigma2=_get(sweep, "sigma2", _num_list, ()),
        ),
    )


def infer_data_dim(spec: DataSpec) -> int:
    """Data dimension implied by a DataSpec (reads the CSV header row for csv data)."""
    if spec.kind in ("sinusoid", "arc"):
        return 2
    if spec.kind == "gaussian":
        return len(spec.sigma)
    if spec.kind == "mixture":
        return len(spec.means[0])
    path = Path(spec.path)
    if not path.exists():
        raise ConfigError(f"data.path does not exist: {path}")
    return load_csv(path, standardize=spec.standardize).D


def load_config(path: Union[str, Path], seed: Optional[int] = None, out: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Read and validate an experiment INI file.

    Args:
        path: Config file
        seed: Override for run.seed
        out: Override for run.out_dir

    Returns:
        RunConfig
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}")
    return parse_config(parser, seed=seed, out=out)


def _fmt_list(values) -> str:
    return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def _fmt_matrix(rows) -> str:
    return "; ".join(_fmt_list(r) for r in rows)


def to_sections(cfg: RunConfig) -> Dict[str, Dict[str, str]]:
    """Resolved config as INI sections of strings (also the hash input)."""
    lc, hp, ds = cfg.loss_cfg, cfg.optim, cfg.data
    return {
        'experiment': {'kind': cfg.kind, 'name': cfg.name, 'loss': cfg.loss},
        'data': {
            'kind': ds.kind, 'n': str(ds.n), 'noise_std': repr(ds.noise_std), 'sigma': _fmt_matrix(ds.sigma),
            'seed': str(ds.seed), 'path': ds.path, 'standardize': str(ds.standardize).lower(), 'split': ds.split,
            'dequant_noise': repr(ds.dequant_noise), 'means': _fmt_matrix(ds.means), 'stds': _fmt_list(ds.stds),
            'weights': _fmt_list(ds.weights), 'fractions': _fmt_list(ds.fractions),
        },
        'arch': {
            'd': str(cfg.arch.d), 'hidden': _fmt_list(cfg.arch.hidden), 'block': cfg.arch.block,
            'activation': cfg.arch.activation, 'n_blocks': str(cfg.arch.n_blocks),
            'block_hidden': _fmt_list(cfg.arch.block_hidden), 'tied': str(cfg.arch.tied).lower(),
            'encoder_scale': repr(cfg.arch.encoder_scale), 'seed': str(cfg.arch.seed),
        },
        'loss': {
            'beta': repr(lc.beta), 'k': str(lc.K), 'variant': lc.variant.label, 'noise_std': repr(lc.noise_std),
            'noise_kind': 'auto' if lc.noise_kind is None else lc.noise_kind.value,
            'pinv_partner': str(lc.pinv_partner).lower(),
            'cg_tol': repr(cfg.cg_tol), 'cg_max_iter': '' if cfg.cg_max_iter is None else str(cfg.cg_max_iter),
        },
        'optim': {
            'lr': repr(hp.lr), 'weight_decay': repr(hp.weight_decay), 'schedule': hp.schedule,
            'pct_start': repr(hp.pct_start), 'epochs': str(cfg.epochs), 'batch_size': str(cfg.batch_size),
            'max_grad_norm': '' if hp.max_grad_norm is None else repr(hp.max_grad_norm),
            'beta1': repr(hp.beta1), 'beta2': repr(hp.beta2), 'eps': repr(hp.eps),
        },
        'run': {
            'seed': str(cfg.seed), 'out_dir': str(cfg.out_dir), 'log_every': str(cfg.log_every),
            'checkpoint_every': '' if cfg.checkpoint_every is None else str(cfg.checkpoint_every),
            'validate': str(cfg.validate).lower(), 'eval_samples': str(cfg.eval_samples),
        },
        'sweep': {
            'betas': _fmt_list(cfg.sweep.betas), 'runs_per_beta': str(cfg.sweep.runs_per_beta),
            'noise_levels': _fmt_list(cfg.sweep.noise_levels), 'sigma2': _fmt_list(cfg.sweep.sigma2),
        },
    }


def write_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    """Write the resolved config as INI."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in to_sections(cfg).items():
        parser[section] = values
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def run_metadata(cfg: RunConfig) -> Dict:
    """Provenance block stored next to run outputs."""
    return {
        'config_hash': cfg.hash,
        'seed': cfg.seed,
        'beta': cfg.loss_cfg.beta,
        'sigma2_equivalent': sigma2_from_beta(cfg.loss_cfg.beta) if cfg.loss_cfg.beta > 0 else None,
        'fid_space': 'standardized' if cfg.data.kind == 'csv' and cfg.data.standardize else 'data',
        'arc_position': 'numerical arc length of (t, sin(pi t / 2)) from t = 0',
    }


def dumps_metadata(cfg: RunConfig) -> str:
    return json.dumps(run_metadata(cfg), indent=2, sort_keys=True)
