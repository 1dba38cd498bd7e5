"""
Checkpoint files.

Layout:

    PMLM-CHECKPOINT v1\\n
    <manifest byte length>\\n
    <manifest: JSON text>
    <raw little-endian arrays, in manifest order>

The manifest carries the model config, the vocabulary version, training
state scalars and one entry per array (name, shape, dtype, offset, nbytes),
with offsets relative to the first byte after the manifest.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from pairwise_mlm.config import __version__
from pairwise_mlm.encoder import ModelConfig
from pairwise_mlm.exceptions import (CheckpointError, CheckpointNotFoundError,
                                     CheckpointShapeError,
                                     CheckpointVersionError,
                                     TruncatedCheckpointError)
from pairwise_mlm.heads import PmlmModel
from pairwise_mlm.seqio import VOCAB_VERSION

logger = logging.getLogger(__name__)

MAGIC = "PMLM-CHECKPOINT"
FORMAT_VERSION = 1

PARAM_PREFIX = "param/"
ADAM_M_PREFIX = "adam_m/"
ADAM_V_PREFIX = "adam_v/"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: Dict[str, np.ndarray]
    step: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    best_val: Dict[str, Optional[float]] = field(default_factory=dict)
    manifest: Dict[str, Any] = field(default_factory=dict)

    def params(self) -> Dict[str, np.ndarray]:
        return _strip(self.arrays, PARAM_PREFIX)

    def adam_m(self) -> Dict[str, np.ndarray]:
        return _strip(self.arrays, ADAM_M_PREFIX)

    def adam_v(self) -> Dict[str, np.ndarray]:
        return _strip(self.arrays, ADAM_V_PREFIX)


def _strip(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {name[len(prefix) :]: a for name, a in arrays.items() if name.startswith(prefix)}


def _little_endian(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))


def save_checkpoint(
    path: Union[str, Path],
    model: PmlmModel,
    step: int = 0,
    adam_m: Optional[Dict[str, np.ndarray]] = None,
    adam_v: Optional[Dict[str, np.ndarray]] = None,
    rng_state: Optional[Dict[str, Any]] = None,
    best_val: Optional[Dict[str, Optional[float]]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Writes the model parameters and optional optimizer state. The file is
    written next to `path` first and renamed into place, so a crash never
    leaves a half-written checkpoint under the final name.
    """
    path = Path(path)
    named: List[Tuple[str, np.ndarray]] = [(PARAM_PREFIX + n, p.data) for n, p in model.named_parameters()]
    for prefix, moments in ((ADAM_M_PREFIX, adam_m), (ADAM_V_PREFIX, adam_v)):
        named.extend((prefix + n, a) for n, a in (moments or {}).items())

    entries = []
    chunks = []
    offset = 0
    for name, array in named:
        data = _little_endian(np.asarray(array))
        entries.append(
            {
                "name": name,
                "shape": list(data.shape),
                "dtype": data.dtype.str,
                "offset": offset,
                "nbytes": int(data.nbytes),
            }
        )
        chunks.append(data.tobytes(order="C"))
        offset += data.nbytes

    manifest = {
        "format_version": FORMAT_VERSION,
        "vocab_version": VOCAB_VERSION,
        "package_version": __version__,
        "model_config": model.config.model_dump(mode="json", by_alias=True),
        "config_hash": model.config.config_hash,
        "step": int(step),
        "rng_state": rng_state,
        "best_val": best_val or {},
        "extra": extra or {},
        "arrays": entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as stream:
        stream.write(f"{MAGIC} v{FORMAT_VERSION}\n".encode("ascii"))
        stream.write(f"{len(manifest_bytes)}\n".encode("ascii"))
        stream.write(manifest_bytes)
        for chunk in chunks:
            stream.write(chunk)
    os.replace(tmp_path, path)

    logger.info("checkpoint_saved | path=%s | step=%d | arrays=%d | bytes=%d", path, step, len(entries), offset)
    return path


def _read_header(raw: bytes, path: Path) -> Tuple[Dict[str, Any], int]:
    first_end = raw.find(b"\n")
    if first_end < 0:
        raise TruncatedCheckpointError(f"truncated checkpoint {path}: missing header line")
    magic, _, version = raw[:first_end].decode("ascii", errors="replace").partition(" v")
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path} is not a checkpoint file (header '{raw[:first_end][:40]!r}')")
    if version != str(FORMAT_VERSION):
        raise CheckpointVersionError(f"{path} uses checkpoint format v{version}, expected v{FORMAT_VERSION}")

    second_end = raw.find(b"\n", first_end + 1)
    if second_end < 0:
        raise TruncatedCheckpointError(f"truncated checkpoint {path}: missing manifest length")
    try:
        manifest_len = int(raw[first_end + 1 : second_end])
    except ValueError:
        raise CheckpointError(f"{path}: malformed manifest length")

    body_start = second_end + 1 + manifest_len
    if len(raw) < body_start:
        raise TruncatedCheckpointError(
            f"truncated checkpoint {path}: manifest needs {manifest_len} bytes, "
            f"{len(raw) - second_end - 1} present"
        )
    manifest = json.loads(raw[second_end + 1 : body_start].decode("utf-8"))
    return manifest, body_start


def load_checkpoint(path: Union[str, Path], model: Optional[PmlmModel] = None) -> Checkpoint:
    """
    Reads a checkpoint. With `model`, its parameters are overwritten by the
    stored arrays, but only after every shape has been verified; a mismatch
    leaves the model untouched.

    Raises:
        CheckpointNotFoundError: if `path` does not exist.
        CheckpointVersionError: on another file format or vocabulary version.
        TruncatedCheckpointError: if the file is shorter than its manifest says.
        CheckpointShapeError: naming the first array whose shape disagrees with `model`.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(path)

    raw = path.read_bytes()
    manifest, body_start = _read_header(raw, path)

    if manifest.get("vocab_version") != VOCAB_VERSION:
        raise CheckpointVersionError(
            f"{path} was written with vocabulary {manifest.get('vocab_version')}, expected {VOCAB_VERSION}"
        )

    body_len = len(raw) - body_start
    needed = max((e["offset"] + e["nbytes"] for e in manifest["arrays"]), default=0)
    if body_len < needed:
        raise TruncatedCheckpointError(f"truncated checkpoint {path}: arrays need {needed} bytes, {body_len} present")

    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        flat = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start + entry["offset"])
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(dtype.newbyteorder("="))

    checkpoint = Checkpoint(
        model_config=ModelConfig.create(manifest["model_config"]),
        arrays=arrays,
        step=int(manifest.get("step", 0)),
        rng_state=manifest.get("rng_state"),
        best_val=manifest.get("best_val", {}),
        manifest=manifest,
    )

    if model is not None:
        assign_parameters(model, checkpoint.params())

    logger.info("checkpoint_loaded | path=%s | step=%d | arrays=%d", path, checkpoint.step, len(arrays))
    return checkpoint


def assign_parameters(model: PmlmModel, params: Dict[str, np.ndarray]) -> None:
    named = list(model.named_parameters())
    for name, param in named:
        if name not in params:
            raise CheckpointShapeError(name, param.shape, ())
        if tuple(params[name].shape) != tuple(param.shape):
            raise CheckpointShapeError(name, param.shape, tuple(params[name].shape))
    for name, param in named:
        param.data = params[name].copy()


def load_model(path: Union[str, Path]) -> Tuple[PmlmModel, Checkpoint]:
    """Rebuilds the model described by a checkpoint's manifest and fills in its weights."""
    checkpoint = load_checkpoint(path)
    model = PmlmModel(checkpoint.model_config, np.random.default_rng(0))
    assign_parameters(model, checkpoint.params())
    return model, checkpoint
