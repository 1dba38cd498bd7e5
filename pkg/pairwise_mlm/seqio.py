"""
Residue and pair vocabularies, FASTA ingestion and the encoded dataset cache.

Residue ids 0..19 are the canonical amino acids in `RESIDUES` order; the
special symbols follow at 20..24. Pair ids cover ordered residue pairs:
pair_id(a, b) = 20 * a + b.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import (Any, Iterable, List, Mapping, Optional, TextIO, Tuple,
                    Union)

from pydantic import Field, field_validator

from pairwise_mlm.decorators import stream_loader, write_atomically
from pairwise_mlm.dumpers import json_dumper
from pairwise_mlm.exceptions import (FastaParseError, SequenceTooLongError,
                                     VocabularyError)
from pairwise_mlm.loaders import json_loader
from pairwise_mlm.models import PairwiseMlmBaseModel

logger = logging.getLogger(__name__)

VOCAB_VERSION = "res20-pair400-v1"

RESIDUES = "ACDEFGHIKLMNPQRSTVWY"
NUM_RESIDUES = len(RESIDUES)
NUM_PAIRS = NUM_RESIDUES * NUM_RESIDUES

PAD, MASK, UNK, BOS, EOS = 20, 21, 22, 23, 24
SPECIAL_SYMBOLS = {PAD: "<pad>", MASK: "<mask>", UNK: "<unk>", BOS: "<bos>", EOS: "<eos>"}
VOCAB_SIZE = NUM_RESIDUES + len(SPECIAL_SYMBOLS)

NONSTANDARD_RESIDUES = frozenset("BJOUXZ")

_RESIDUE_TO_ID = {symbol: i for i, symbol in enumerate(RESIDUES)}


class NonstandardPolicy(str, Enum):
    DROP = "drop"
    UNK = "unk"


class OverflowPolicy(str, Enum):
    TRUNCATE = "truncate"
    SKIP = "skip"


def residue_id(symbol: str) -> int:
    try:
        return _RESIDUE_TO_ID[symbol.upper()]
    except KeyError:
        raise VocabularyError(f"'{symbol}' is not one of the 20 canonical residues")


def residue_symbol(rid: int) -> str:
    if 0 <= rid < NUM_RESIDUES:
        return RESIDUES[rid]
    if rid in SPECIAL_SYMBOLS:
        return SPECIAL_SYMBOLS[rid]
    raise VocabularyError(f"id {rid} is outside of the vocabulary")


def pair_id(a: int, b: int) -> int:
    """
    Raises:
        VocabularyError: if either id is not a residue (pairs never cover specials).
    """
    if not (0 <= a < NUM_RESIDUES and 0 <= b < NUM_RESIDUES):
        raise VocabularyError(f"pair ({a}, {b}) is not over residue ids [0, {NUM_RESIDUES})")
    return NUM_RESIDUES * a + b


def split_pair_id(pid: int) -> Tuple[int, int]:
    if not 0 <= pid < NUM_PAIRS:
        raise VocabularyError(f"pair id {pid} outside of [0, {NUM_PAIRS})")
    return divmod(pid, NUM_RESIDUES)


def encode(sequence: str) -> List[int]:
    return [residue_id(symbol) for symbol in sequence]


def decode(ids: Iterable[int]) -> str:
    return "".join(RESIDUES[i] if 0 <= i < NUM_RESIDUES else "X" for i in ids)


class SequenceRecord(PairwiseMlmBaseModel):
    """One protein sequence: residue ids only, no framing specials."""

    _key = ("identifier",)

    identifier: str
    residues: Tuple[int, ...] = Field(min_length=2)

    @field_validator("residues")
    @classmethod
    def _check_ids(cls, residues: Tuple[int, ...]) -> Tuple[int, ...]:
        for rid in residues:
            if not (0 <= rid < NUM_RESIDUES or rid == UNK):
                raise ValueError(f"residue id {rid} is neither a residue nor UNK")
        return residues

    def __len__(self) -> int:
        return len(self.residues)

    @property
    def sequence(self) -> str:
        return decode(self.residues)


class FastaReader:
    """
    Turns FASTA text into SequenceRecords.

    Counters of what was dropped are kept on the instance so callers can
    report them: `skipped_empty`, `skipped_short`, `skipped_long`,
    `truncated`, `dropped_residues`, `unk_residues`.
    """

    def __init__(
        self,
        nonstandard: Union[NonstandardPolicy, str] = NonstandardPolicy.DROP,
        max_len: Optional[int] = None,
        overflow: Union[OverflowPolicy, str] = OverflowPolicy.TRUNCATE,
    ):
        self.nonstandard = NonstandardPolicy(nonstandard)
        self.overflow = OverflowPolicy(overflow)
        # BOS and EOS take two slots of the encoder window
        self.max_residues = None if max_len is None else max_len - 2
        self.skipped_empty = 0
        self.skipped_short = 0
        self.skipped_long = 0
        self.truncated = 0
        self.dropped_residues = 0
        self.unk_residues = 0

    def read(self, stream: Iterable[Union[str, bytes]]) -> List[SequenceRecord]:
        records: List[SequenceRecord] = []
        identifier: Optional[str] = None
        header_line = 0
        chunks: List[str] = []

        for line_number, raw in enumerate(stream, start=1):
            line = raw.decode("ascii", errors="replace") if isinstance(raw, bytes) else raw
            line = line.strip()
            if not line or line.startswith(";"):
                continue
            if line.startswith(">"):
                if identifier is not None:
                    self._emit(records, identifier, "".join(chunks), header_line)
                identifier = line[1:].split()[0] if line[1:].strip() else f"record{len(records)}"
                header_line = line_number
                chunks = []
                continue
            if identifier is None:
                raise FastaParseError("sequence line before any header", line_number)
            chunks.append(line)

        if identifier is not None:
            self._emit(records, identifier, "".join(chunks), header_line)

        if self.skipped_empty or self.skipped_short or self.skipped_long:
            logger.warning(
                "fasta_records_skipped | empty=%d | too_short=%d | too_long=%d",
                self.skipped_empty,
                self.skipped_short,
                self.skipped_long,
            )
        return records

    def _emit(self, records: List[SequenceRecord], identifier: str, letters: str, line: int) -> None:
        if not letters:
            self.skipped_empty += 1
            return

        ids: List[int] = []
        for position, symbol in enumerate(letters.upper()):
            if symbol in _RESIDUE_TO_ID:
                ids.append(_RESIDUE_TO_ID[symbol])
            elif symbol in NONSTANDARD_RESIDUES:
                if self.nonstandard is NonstandardPolicy.UNK:
                    ids.append(UNK)
                    self.unk_residues += 1
                else:
                    self.dropped_residues += 1
            elif symbol in "*-.":
                # stop codons and gap symbols carry no residue
                continue
            else:
                raise FastaParseError(
                    f"invalid residue letter '{symbol}' at offset {position} of record '{identifier}'",
                    line,
                )

        if self.max_residues is not None and len(ids) > self.max_residues:
            if self.overflow is OverflowPolicy.SKIP:
                self.skipped_long += 1
                return
            ids = ids[: self.max_residues]
            self.truncated += 1

        if len(ids) < 2:
            self.skipped_short += 1
            return

        records.append(SequenceRecord(identifier=identifier, residues=tuple(ids)))


def parse_fasta(
    source: Union[Path, str, TextIO, Iterable[bytes]],
    nonstandard: Union[NonstandardPolicy, str] = NonstandardPolicy.DROP,
    max_len: Optional[int] = None,
    overflow: Union[OverflowPolicy, str] = OverflowPolicy.TRUNCATE,
) -> List[SequenceRecord]:
    """
    Parses FASTA from a path or an open (text or binary) stream.

    Letters are uppercased. Nonstandard residues (B, J, O, U, X, Z) are dropped
    by default, or become UNK tokens with `nonstandard="unk"`. Empty records
    and records left with fewer than 2 residues are skipped with a warning.

    Raises:
        FastaParseError: on a sequence line before any header, or an invalid letter.
    """
    reader = FastaReader(nonstandard=nonstandard, max_len=max_len, overflow=overflow)
    return _read_fasta(source, reader)


@stream_loader
def _read_fasta(stream: TextIO, reader: FastaReader) -> List[SequenceRecord]:
    return reader.read(stream)


def check_length(record: SequenceRecord, max_len: int) -> None:
    if len(record) + 2 > max_len:
        raise SequenceTooLongError(
            f"record '{record.identifier}' has {len(record)} residues; "
            f"max_len {max_len} leaves room for {max_len - 2}"
        )


def write_fasta(
    records: Iterable[SequenceRecord],
    path: Union[str, Path],
    width: int = 60,
    header: Optional[Mapping[str, Any]] = None,
) -> str:
    """
    Wraps residues at `width` letters. `header` (hash, seed, version) goes on
    a leading `;` comment line, which parse_fasta skips.
    """
    lines: List[str] = []
    if header is not None:
        lines.append(";" + json.dumps(dict(header), sort_keys=True, separators=(",", ":")))
    for record in records:
        lines.append(f">{record.identifier}")
        sequence = record.sequence
        lines.extend(sequence[i : i + width] for i in range(0, len(sequence), width))
    text = "\n".join(lines) + "\n"
    write_atomically(text, path)
    return text


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def write_dataset_cache(records: List[SequenceRecord], path: Union[str, Path]) -> Path:
    """
    One record per line: identifier, tab, space separated residue ids. A
    sidecar `<name>.manifest.json` holds the vocabulary version and counts.
    """
    path = Path(path)
    write_atomically(
        "".join(f"{record.identifier}\t{' '.join(str(r) for r in record.residues)}\n" for record in records), path
    )

    json_dumper(
        {
            "vocab_version": VOCAB_VERSION,
            "n_records": len(records),
            "n_residues": int(sum(len(r) for r in records)),
        },
        _manifest_path(path),
        sort_keys=True,
        indent=2,
    )
    return path


def read_dataset_cache(path: Union[str, Path]) -> List[SequenceRecord]:
    """
    Raises:
        VocabularyError: if the manifest names another vocabulary version or
        its record count disagrees with the file.
    """
    path = Path(path)
    manifest = json_loader(_manifest_path(path))
    if manifest.get("vocab_version") != VOCAB_VERSION:
        raise VocabularyError(
            f"cache {path} uses vocabulary {manifest.get('vocab_version')}, expected {VOCAB_VERSION}"
        )

    records = []
    with open(path) as stream:
        for line in stream:
            if not line.strip():
                continue
            identifier, _, ids = line.rstrip("\n").partition("\t")
            records.append(
                SequenceRecord(identifier=identifier, residues=tuple(int(i) for i in ids.split()))
            )

    if len(records) != manifest.get("n_records"):
        raise VocabularyError(
            f"cache {path} holds {len(records)} records, manifest says {manifest.get('n_records')}"
        )
    return records


def load_sequences(path: Union[str, Path], **fasta_kwargs) -> List[SequenceRecord]:
    """Reads a dataset cache when a sidecar manifest exists, FASTA otherwise."""
    path = Path(path)
    if _manifest_path(path).exists():
        return read_dataset_cache(path)
    return parse_fasta(path, **fasta_kwargs)
