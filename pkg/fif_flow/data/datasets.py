"""Synthetic dataset generators, tabular CSV ingestion and batch iteration."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from fif_flow.errors import CSVParseError, DataError, DimensionError

DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
SPLIT_NAMES = ("train", "val", "test")
CONSTANT_STD_TOL = 1e-12

# Tabular presets: data dim, latent dim, epochs
TABULAR_PRESETS = {
    'power': {'D': 6, 'd': 3, 'epochs': 15},
    'gas': {'D': 8, 'd': 2, 'epochs': 30},
    'hepmass': {'D': 21, 'd': 10, 'epochs': 85},
    'miniboone': {'D': 43, 'd': 21, 'epochs': 875},
}


@dataclass
class Dataset:
    """Rows of X with disjoint index splits and optional standardization stats."""

    X: np.ndarray
    splits: Dict[str, np.ndarray]
    meta: Dict
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    aux: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = self.X.shape[0]
        seen = np.concatenate([np.asarray(v, dtype=int) for v in self.splits.values()]) if self.splits else np.array([], dtype=int)
        if seen.size != n or not np.array_equal(np.sort(seen), np.arange(n)):
            raise DataError("splits must be disjoint and cover every row")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    @property
    def name(self) -> str:
        return self.meta.get('name', 'dataset')

    def part(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise DataError(f"unknown split '{split}'. Available: {sorted(self.splits)}")
        return self.X[self.splits[split]]

    @property
    def train(self) -> np.ndarray:
        return self.part("train")

    @property
    def val(self) -> np.ndarray:
        return self.part("val")

    @property
    def test(self) -> np.ndarray:
        return self.part("test")

    def aux_part(self, key: str, split: str) -> np.ndarray:
        return self.aux[key][self.splits[split]]

    def covariance(self, split: str = None) -> np.ndarray:
        """Sample covariance of a split (all rows when split is None)."""
        rows = self.X if split is None else self.part(split)
        if rows.shape[0] < 2:
            raise DataError(f"covariance undefined for {rows.shape[0]} sample(s)")
        return np.cov(rows, rowvar=False).reshape(self.D, self.D)

    def to_metadata(self) -> Dict:
        return {
            **self.meta,
            'n': self.n,
            'D': self.D,
            'splits': {k: int(len(v)) for k, v in self.splits.items()},
            'standardization': None if self.mean is None else {
                'mean': self.mean.tolist(),
                'std': self.std.tolist(),
            },
        }


def write_metadata(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Write the dataset sidecar JSON (name, seed, params, split sizes, standardization)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dataset.to_metadata(), indent=2, sort_keys=True))
    return path


def fraction_splits(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Dict[str, np.ndarray]:
    """Contiguous train/val/test index ranges; rounding remainders go to train."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or fractions.sum() <= 0:
        raise DataError(f"split fractions must be three non-negative numbers, got {fractions.tolist()}")
    fractions = fractions / fractions.sum()
    n_val = int(np.floor(n * fractions[1]))
    n_test = int(np.floor(n * fractions[2]))
    n_train = n - n_val - n_test
    edges = np.cumsum([0, n_train, n_val, n_test])
    return {name: np.arange(edges[i], edges[i + 1]) for i, name in enumerate(SPLIT_NAMES)}


def _check_n(n: int) -> None:
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")


def sinusoid_curve(t: np.ndarray) -> np.ndarray:
    """Points (t, sin(πt/2))."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack([t, np.sin(0.5 * np.pi * t)], axis=-1)


def sinusoid_arc_length(t: np.ndarray, grid_points: int = 20001) -> np.ndarray:
    """Signed arc length of the sinusoid from t=0, by trapezoidal integration."""
    t = np.asarray(t, dtype=np.float64)
    lim = max(1.0, float(np.max(np.abs(t)))) if t.size else 1.0
    grid = np.linspace(-lim, lim, grid_points)
    speed = np.sqrt(1.0 + (0.5 * np.pi * np.cos(0.5 * np.pi * grid)) ** 2)
    s = cumulative_trapezoid(speed, grid, initial=0.0)
    s -= np.interp(0.0, grid, s)
    return np.interp(t, grid, s)


def sinusoid_normal(t: np.ndarray) -> np.ndarray:
    """Unit normal of the sinusoid at parameter t."""
    t = np.asarray(t, dtype=np.float64)
    tangent = np.stack([np.ones_like(t), 0.5 * np.pi * np.cos(0.5 * np.pi * t)], axis=-1)
    tangent /= np.linalg.norm(tangent, axis=-1, keepdims=True)
    return np.stack([-tangent[..., 1], tangent[..., 0]], axis=-1)


def gen_sinusoid(n: int, noise_std: float = 0.1, seed: int = 0, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Dataset:
    """
    x ~ N(0, 1), y = sin(πx/2), plus isotropic 2-D Gaussian noise.

    aux holds the clean parameter 't' and the added 'noise' for the alignment diagnostic.
    """
    _check_n(n)
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(n)
    noise = noise_std * rng.standard_normal((n, 2))
    X = sinusoid_curve(t) + noise
    return Dataset(
        X=X,
        splits=fraction_splits(n, fractions),
        meta={'name': 'sinusoid', 'seed': seed, 'params': {'n': n, 'noise_std': noise_std}},
        aux={'t': t, 'noise': noise},
    )


def gen_gaussian(n: int, Sigma: np.ndarray, seed: int = 0, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Dataset:
    """Zero-mean Gaussian samples with covariance Sigma."""
    _check_n(n)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise DimensionError(f"Sigma must be square, got shape {Sigma.shape}")
    rng = np.random.default_rng(seed)
    X = rng.multivariate_normal(np.zeros(Sigma.shape[0]), Sigma, size=n, method="eigh")
    return Dataset(
        X=X,
        splits=fraction_splits(n, fractions),
        meta={'name': 'gaussian', 'seed': seed, 'params': {'n': n, 'Sigma': Sigma.tolist()}},
    )


def gen_gaussian_mixture(n: int, means: Sequence[Sequence[float]] = ((-2.0, 0.0), (2.0, 0.0)),
                         stds: Sequence[float] = (0.5, 0.5), weights: Sequence[float] = None,
                         seed: int = 0, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Dataset:
    """Isotropic Gaussian mixture; aux['component'] records each row's component."""
    _check_n(n)
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    k = means.shape[0]
    weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    if stds.shape != (k,) or weights.shape != (k,):
        raise DimensionError(f"need one std and weight per component ({k})")
    weights = weights / weights.sum()
    rng = np.random.default_rng(seed)
    comp = rng.choice(k, size=n, p=weights)
    X = means[comp] + stds[comp, None] * rng.standard_normal((n, means.shape[1]))
    return Dataset(
        X=X,
        splits=fraction_splits(n, fractions),
        meta={'name': 'gaussian_mixture', 'seed': seed,
              'params': {'n': n, 'means': means.tolist(), 'stds': stds.tolist(), 'weights': weights.tolist()}},
        aux={'component': comp},
    )


def gen_arc_toy(n: int, noise_std: float = 0.05, seed: int = 0, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Dataset:
    """Points uniform on the segment [-1, 1] × {0} plus isotropic noise."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=n)
    X = np.stack([u, np.zeros(n)], axis=1) + noise_std * rng.standard_normal((n, 2))
    return Dataset(
        X=X,
        splits=fraction_splits(n, fractions),
        meta={'name': 'arc_toy', 'seed': seed, 'params': {'n': n, 'noise_std': noise_std}},
        aux={'u': u},
    )


def _parse_rows(path: Path, delimiter: str) -> Tuple[Optional[list], np.ndarray]:
    header = None
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        width = None
        for line_no, row in enumerate(reader, start=1):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            values, bad = [], []
            for col, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    bad.append(col)
            nonfinite = [col for col, v in enumerate(values, start=1) if not np.isfinite(v)]
            if bad:
                if width is None and len(bad) == len(row):
                    header = [c.strip() for c in row]
                    width = len(row)
                    continue
                raise CSVParseError(f"non-numeric cell {row[bad[0] - 1]!r}", row=line_no, col=bad[0])
            if nonfinite:
                raise CSVParseError(f"non-finite cell {row[nonfinite[0] - 1]!r}", row=line_no, col=nonfinite[0])
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise CSVParseError(f"expected {width} columns, found {len(values)}", row=line_no)
            rows.append(values)
    if not rows:
        raise DataError(f"no numeric rows in {path}")
    return header, np.asarray(rows, dtype=np.float64)


def load_csv(path: Union[str, Path], split_spec: Union[None, Sequence[float], Dict[str, Sequence[int]]] = None,
             standardize: bool = True, dequant_noise: float = 0.0, seed: int = 0, delimiter: str = ",") -> Dataset:
    """
    Load a rectangular numeric CSV (an all-text first row is taken as a header).

    Args:
        path: CSV file
        split_spec: None (default fractions), three fractions, or explicit
            {'train': idx, 'val': idx, 'test': idx} row indices
        standardize: Zero-mean unit-std columns using train-split statistics;
            constant columns are dropped
        dequant_noise: Std of Gaussian noise added after loading (parity runs only)
        seed: Seed for dequantization noise

    Returns:
        Dataset
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    header, X = _parse_rows(path, delimiter)
    n = X.shape[0]

    if split_spec is None:
        splits = fraction_splits(n)
    elif isinstance(split_spec, dict):
        splits = {k: np.asarray(v, dtype=int) for k, v in split_spec.items()}
    else:
        splits = fraction_splits(n, split_spec)

    mean = std = None
    kept = list(range(X.shape[1]))
    if standardize:
        train = X[splits["train"]] if "train" in splits else X
        mean = train.mean(axis=0)
        std = train.std(axis=0)
        keep = std > CONSTANT_STD_TOL
        for col in np.flatnonzero(~keep):
            label = header[col] if header else col
            print(f"[DATA] Dropping constant column {label}")
        kept = [int(c) for c in np.flatnonzero(keep)]
        X = (X[:, keep] - mean[keep]) / std[keep]
        mean, std = mean[keep], std[keep]

    if dequant_noise > 0:
        X = X + dequant_noise * np.random.default_rng(seed).standard_normal(X.shape)

    return Dataset(
        X=X,
        splits=splits,
        meta={'name': path.stem, 'seed': seed, 'params': {
            'path': str(path), 'standardize': standardize, 'dequant_noise': dequant_noise,
            'columns': [header[c] for c in kept] if header else kept,
        }},
        mean=mean,
        std=std,
    )


def iterate_batches(n_rows: int, batch_size: int, rng: Optional[np.random.Generator], drop_last: bool = False) -> Iterator[np.ndarray]:
    """Yield index batches over a permutation of range(n_rows) (in order when rng is None)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(n_rows) if rng is None else rng.permutation(n_rows)
    for start in range(0, n_rows, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and idx.size < batch_size:
            break
        yield idx


def n_batches(n_rows: int, batch_size: int, drop_last: bool = False) -> int:
    return n_rows // batch_size if drop_last else -(-n_rows // batch_size)
