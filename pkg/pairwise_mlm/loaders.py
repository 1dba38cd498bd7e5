"""
Readers for run configs, coupled-model spec documents and line-delimited
record files (metric logs, contact records, score maps).

utils.load_file_to_dict() picks the reader named `{extension}_loader`, so
`run.toml` goes through `toml_loader`. Point `PMLM_LOADERS_MODULE` at another
module to add formats. FASTA lives in seqio.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, TextIO, Union

import toml
import yaml

from pairwise_mlm.decorators import stream_loader

Source = Union[Path, str, TextIO]


@stream_loader
def json_loader(source: Source, **kwargs) -> Dict[str, Any]:
    return json.load(source, **kwargs)


@stream_loader
def yaml_loader(source: Source, **kwargs) -> Dict[str, Any]:
    # safe_load takes no extra options
    return yaml.safe_load(source)


yml_loader = yaml_loader


@stream_loader
def toml_loader(source: Source, **kwargs) -> Dict[str, Any]:
    return toml.load(source, **kwargs)


@stream_loader
def jsonl_loader(source: Source, **kwargs) -> List[Dict[str, Any]]:
    """One JSON object per non-blank line."""
    return [json.loads(line, **kwargs) for line in source if line.strip()]
