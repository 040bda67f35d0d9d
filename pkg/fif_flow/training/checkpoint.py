"""
Self-describing binary checkpoints.

Layout: 8-byte magic, little-endian uint32 format version, little-endian uint64 header
length, UTF-8 JSON header (sorted keys) with a section table and the payload sha256, then
the sections as little-endian float64 arrays. Writes go to a temp file that is renamed into place.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from fif_flow.errors import CheckpointError
from fif_flow.training.optim import OptimState

MAGIC = b"FIFCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    """Everything needed to continue a run exactly."""

    arch: Dict
    params: Dict[str, np.ndarray]
    optim: OptimState
    config_hash: str
    rng: Dict
    cursor: Dict[str, int]
    metrics_cursor: int = 0
    extra: Dict = field(default_factory=dict)


def config_hash(config: Dict) -> str:
    """sha256 of the canonical JSON form of a config dict."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _sections(ckpt: Checkpoint) -> List:
    out = []
    for group in sorted(ckpt.params):
        out.append((f"params/{group}", ckpt.params[group]))
    for group in sorted(ckpt.optim.m):
        out.append((f"adam_m/{group}", ckpt.optim.m[group]))
        out.append((f"adam_v/{group}", ckpt.optim.v[group]))
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    sections = _sections(ckpt)
    table, offset, payload = [], 0, []
    for name, arr in sections:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({'name': name, 'offset': offset, 'length': int(np.asarray(arr).size)})
        payload.append(data)
        offset += len(data)
    body = b"".join(payload)
    header = {
        'arch': ckpt.arch,
        'config_hash': ckpt.config_hash,
        'rng': ckpt.rng,
        'cursor': ckpt.cursor,
        'metrics_cursor': ckpt.metrics_cursor,
        'optim': {'step': ckpt.optim.step, 'total_steps': ckpt.optim.total_steps},
        'extra': ckpt.extra,
        'sections': table,
        'payload_sha256': hashlib.sha256(body).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + body


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """Atomically write a checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def arch_diff(stored: Dict, expected: Dict) -> List[Dict]:
    """Fields whose values differ between two arch dicts."""
    diff = []
    for key in sorted(set(stored) | set(expected)):
        a, b = stored.get(key), expected.get(key)
        if a != b:
            diff.append({'field': key, 'checkpoint': a, 'expected': b})
    return diff


def from_bytes(blob: bytes, expected_arch: Optional[Dict] = None) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        table = header['sections']
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header (version {version}): {exc}")

    if expected_arch is not None:
        diff = arch_diff(header['arch'], expected_arch)
        if diff:
            raise CheckpointError("checkpoint architecture does not match the run configuration", diff=diff)

    body = memoryview(blob)[start + header_len:]
    arrays = {}
    for entry in table:
        lo = entry['offset']
        hi = lo + 8 * entry['length']
        if hi > len(body):
            raise CheckpointError(f"section '{entry['name']}' runs past end of file")
        arrays[entry['name']] = np.frombuffer(body[lo:hi], dtype="<f8").astype(np.float64)
    digest = header.get('payload_sha256')
    if digest is not None and hashlib.sha256(body).hexdigest() != digest:
        raise CheckpointError("checkpoint payload does not match its sha256 digest")

    def group(prefix: str) -> Dict[str, np.ndarray]:
        return {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + "/")}

    optim = OptimState(
        step=header['optim']['step'],
        m=group("adam_m"),
        v=group("adam_v"),
        total_steps=header['optim']['total_steps'],
    )
    return Checkpoint(
        arch=header['arch'],
        params=group("params"),
        optim=optim,
        config_hash=header['config_hash'],
        rng=header['rng'],
        cursor=header['cursor'],
        metrics_cursor=header['metrics_cursor'],
        extra=header.get('extra', {}),
    )


def load_checkpoint(path: Union[str, Path], expected_arch: Optional[Dict] = None) -> Checkpoint:
    """
    Read a checkpoint, checking magic, version and (optionally) the architecture.

    Args:
        path: Checkpoint file
        expected_arch: ArchSpec dict the caller is about to load into

    Returns:
        Checkpoint
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), expected_arch)
