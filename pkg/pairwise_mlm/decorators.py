import io
import os
from functools import wraps
from pathlib import Path
from typing import Any, BinaryIO, Callable, Iterable, Optional, TextIO, Union

from pairwise_mlm.exceptions import PairwiseMlmDumperError

Source = Union[Path, str, TextIO, BinaryIO, Iterable[bytes]]


def write_atomically(text: str, file_path: Union[Path, str]) -> None:
    """Writes `<name>.part` next to the target, then renames it into place."""
    target = Path(file_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    partial = target.with_name(target.name + ".part")
    with open(partial, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    os.replace(partial, target)


def stream_dumper(dump_func: Callable[..., None]):
    """
    Turns `dump_func(data, stream, ...)` into `dumper(data, file_path=None, ...)`
    returning the serialized text. With a `file_path` the text is also written
    there; parent directories are created and a reader never sees a half-written
    file, which matters for metric logs that are tailed while a run is going.

    Any failure is re-raised as PairwiseMlmDumperError.
    """

    @wraps(dump_func)
    def dumper(data: Any, file_path: Optional[Union[Path, str]] = None, *args, **kwargs) -> str:
        stream = io.StringIO()
        try:
            dump_func(data, stream, *args, **kwargs)
            text = stream.getvalue()
            if file_path is not None:
                write_atomically(text, file_path)
        except Exception as e:
            raise PairwiseMlmDumperError(f"{dump_func.__name__}: {e}") from e
        return text

    return dumper


def stream_loader(load_func: Callable[..., Any]):
    """
    Lets `load_func(stream, ...)` take a path or path string as well as an
    open stream. Streams, text or binary, are handed over untouched.
    """

    @wraps(load_func)
    def loader(source: Source, *args, **kwargs) -> Any:
        if isinstance(source, (str, Path)):
            with open(source, "r", encoding="utf-8") as stream:
                return load_func(stream, *args, **kwargs)
        return load_func(source, *args, **kwargs)

    return loader
