"""On-disk artifacts: atomic writes, payload matrices, checkpoints and JSON/CSV tables."""
import hashlib
import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Tuple, Union

import numpy as np
import pandas as pd

from msidebias.core.errors import ManifestParseError, MissingArtifactError
from msidebias.models.models import MlpParams, ModelBundle

# Set up logging
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"MSIDB"
CHECKPOINT_VERSION = 1


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a temporary sibling file, then rename over the destination"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: PathLike, obj: Any) -> Path:
    return atomic_write_text(path, dumps_json(obj))


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}", path=str(path))
    with open(path, "r") as f:
        return json.load(f)


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def read_csv(path: PathLike) -> pd.DataFrame:
    """Read a CSV as strings; malformed rows surface as ManifestParseError"""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}", path=str(path))
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise ManifestParseError(f"{path.name}: {e}")
    except pd.errors.EmptyDataError:
        raise ManifestParseError(f"{path.name}: file is empty", line=1)


# Payload matrices

def write_matrix(path: PathLike, matrix: np.ndarray) -> Path:
    """Row-major little-endian float32 with an 8-byte (rows, cols) uint32 header"""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    rows, cols = matrix.shape
    return atomic_write_bytes(path, struct.pack("<II", rows, cols) + matrix.tobytes())


def read_matrix(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing payload matrix {path}", path=str(path))
    data = path.read_bytes()
    if len(data) < 8:
        raise ManifestParseError(f"{path.name}: truncated header")
    rows, cols = struct.unpack("<II", data[:8])
    expected = 8 + 4 * rows * cols
    if len(data) != expected:
        raise ManifestParseError(f"{path.name}: expected {expected} bytes for {rows}x{cols}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(rows, cols).astype(np.float32)


# Checkpoints

def _mlp_blocks(bundle: ModelBundle) -> List[Tuple[str, MlpParams]]:
    return [("fe", bundle.fe), ("msi", bundle.msi_head)] + list(zip(bundle.bias_names, bundle.be_heads))


def bundle_hash(bundle: ModelBundle, parts: Iterable[str] = ("fe", "msi")) -> str:
    """SHA-256 over the float64 parameters of the named parts ('fe', 'msi' or a bias name)"""
    blocks = dict(_mlp_blocks(bundle))
    digest = hashlib.sha256()
    for part in parts:
        for p in blocks[part].parameters():
            digest.update(part.encode())
            digest.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return digest.hexdigest()


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path: PathLike, bundle: ModelBundle, config: Dict[str, Any]) -> Path:
    """Binary checkpoint plus a JSON sidecar (``<path>.json``)"""
    blocks = _mlp_blocks(bundle)
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<HI", CHECKPOINT_VERSION, len(blocks))
    body = bytearray()
    for _, mlp in blocks:
        dims = mlp.dims
        header += struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
        for p in mlp.parameters():
            body += np.ascontiguousarray(p, dtype="<f4").tobytes()
    path = atomic_write_bytes(path, bytes(header + body))
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "bias_names": list(bundle.bias_names),
        "bias_levels": bundle.bias_levels,
        "config_hash": config_hash(config),
        "task_hash": bundle_hash(bundle, ("fe", "msi")),
    }
    write_json(Path(f"{path}.json"), sidecar)
    logger.info(f"Checkpoint written: {path}")
    return path


def load_checkpoint(path: PathLike) -> ModelBundle:
    path = Path(path)
    sidecar_path = Path(f"{path}.json")
    if not path.exists() or not sidecar_path.exists():
        raise MissingArtifactError(f"missing checkpoint {path}", path=str(path))
    sidecar = read_json(sidecar_path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ManifestParseError(f"{path.name}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    version, n_blocks = struct.unpack_from("<HI", data, offset)
    offset += struct.calcsize("<HI")
    if version != CHECKPOINT_VERSION:
        raise ManifestParseError(f"{path.name}: unsupported checkpoint version {version}")
    all_dims = []
    for _ in range(n_blocks):
        (n_dims,) = struct.unpack_from("<I", data, offset)
        offset += 4
        all_dims.append(list(struct.unpack_from(f"<{n_dims}I", data, offset)))
        offset += 4 * n_dims
    mlps = []
    for dims in all_dims:
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(data, dtype="<f4", count=fan_in * fan_out, offset=offset)
            offset += 4 * fan_in * fan_out
            b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=offset)
            offset += 4 * fan_out
            weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
            biases.append(b.astype(np.float64))
        mlps.append(MlpParams(weights, biases))
    if offset != len(data):
        raise ManifestParseError(f"{path.name}: {len(data) - offset} trailing bytes")
    names = list(sidecar["bias_names"])
    return ModelBundle(mlps[0], mlps[1], mlps[2:], names, {k: list(v) for k, v in sidecar["bias_levels"].items()})
