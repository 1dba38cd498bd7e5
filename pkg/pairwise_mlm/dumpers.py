"""
Writers for every format the loaders read back.

Each writer gets an in-memory stream from `stream_dumper` and the caller gets
the text, plus the file when a path is given. utils.dump_to_file() chooses the
writer from the extension; `PMLM_DUMPERS_MODULE` swaps in another module.
"""

import io
import json
from typing import Any, Dict, Iterable

import toml
import yaml

from pairwise_mlm.decorators import stream_dumper


@stream_dumper
def json_dumper(data: Dict[str, Any], stream: io.StringIO, **kwargs) -> None:
    json.dump(data, stream, **kwargs)


@stream_dumper
def yaml_dumper(data: Dict[str, Any], stream: io.StringIO, **kwargs) -> None:
    yaml.safe_dump(data, stream, sort_keys=False, **kwargs)


yml_dumper = yaml_dumper


@stream_dumper
def toml_dumper(data: Dict[str, Any], stream: io.StringIO, **kwargs) -> None:
    toml.dump(data, stream, **kwargs)


@stream_dumper
def jsonl_dumper(records: Iterable[Dict[str, Any]], stream: io.StringIO) -> None:
    """Compact, key-sorted, one record per line."""
    for record in records:
        stream.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
