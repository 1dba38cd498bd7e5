import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from pairwise_mlm.config import __version__, get_config
from pairwise_mlm.exceptions import (PairwiseMlmImportError,
                                     PairwiseMlmTypeError,
                                     UnsupportedFileFormatError)

GLOBAL_CONFIGS = get_config()


def check_support_by_extension(file_path: Path) -> bool:
    """Checks if the file represented by `file_path` is of a
    supported format.

    Here we take a rather naive approach and only check the file
    extension.

    Raises:
        PairwiseMlmTypeError: If `file_path` does not represent a file.
    """
    if not file_path.is_file():
        raise PairwiseMlmTypeError(f"{file_path.absolute()} does not exist or is not a file.")
    return file_path.suffix.lstrip(".") in GLOBAL_CONFIGS.supported_formats


def load_file_to_dict(file_path: Union[str, Path]) -> Any:
    """Finds the appropriate loader for the file format and uses it to load the file.

    Args:
        file_path (str, Path): the path to the file to be loaded.

    Raises:
        PairwiseMlmImportError: If no loader function exists for the extension.
        UnsupportedFileFormatError: If the file format is not supported.

    Returns:
        the loaded file, a dict for config formats, a list for jsonl.
    """
    file_path = Path(file_path)

    if not check_support_by_extension(file_path):
        raise UnsupportedFileFormatError(
            f"File extension {file_path.suffix.lstrip('.')} not supported. "
            f"Supported formats are {GLOBAL_CONFIGS.supported_formats}"
        )

    try:
        loader_function = getattr(
            GLOBAL_CONFIGS.loaders_module, f"{file_path.suffix.lstrip('.')}_loader"
        )
    except AttributeError:
        raise PairwiseMlmImportError(
            f"Could not find a loader function with name {file_path.suffix.lstrip('.')}_loader"
        )
    return loader_function(file_path)


def dump_to_file(data: Any, file_path: Union[str, Path], *args, **kwargs) -> str:
    """Writes `data` with the dumper matching the extension of `file_path`."""
    file_path = Path(file_path)
    fmt = file_path.suffix.lstrip(".")

    try:
        dumper_function = getattr(GLOBAL_CONFIGS.dumpers_module, f"{fmt}_dumper")
    except AttributeError:
        raise PairwiseMlmImportError(f"Could not find a dumper function with name {fmt}_dumper")

    return dumper_function(data, file_path, *args, **kwargs)


def canonical_hash(data: Any) -> str:
    """Short sha256 of the key-sorted compact JSON form of `data`."""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def derive_seed(seed: int, *streams: int) -> int:
    """
    Mixes a base seed with stream indices (epoch, step, sequence index...).

    The result only depends on its arguments, never on call order, so work
    spread over threads draws the same random numbers as a serial run.
    """
    entropy = [int(seed)] + [int(s) for s in streams]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int, *streams: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *streams))


def output_header(config_hash: str, seed: int, kind: str = "header", **extra: Any) -> Dict[str, Any]:
    """First record of every emitted line-delimited file."""
    header = {
        "kind": kind,
        "config_hash": config_hash,
        "seed": int(seed),
        "version": __version__,
    }
    header.update(extra)
    return header


def resolve_data_path(path: Union[str, Path]) -> Path:
    """Relative paths are resolved against `PMLM_DATA_DIR`."""
    path = Path(path)
    if path.is_absolute() or path.exists():
        return path
    return GLOBAL_CONFIGS.data_dir / path
