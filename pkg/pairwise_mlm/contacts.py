"""
Contact maps, sequence-separation range filters and contact record files.

Positions here are 0-based residue indices (no BOS/EOS framing).
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import Field, field_validator, model_validator

from pairwise_mlm.dumpers import jsonl_dumper
from pairwise_mlm.exceptions import (ContactMapMismatchError,
                                     RangeFilterError)
from pairwise_mlm.loaders import jsonl_loader
from pairwise_mlm.models import PairwiseMlmBaseModel
from pairwise_mlm.seqio import SequenceRecord, encode
from pairwise_mlm.utils import output_header

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 8.0

Pair = Tuple[int, int]


class ContactMap(PairwiseMlmBaseModel):
    """
    Symmetric boolean L x L map stored as its sorted upper-triangle contacts.
    `threshold` is set when the map was derived from distances.
    """

    _key = ("identifier",)

    identifier: str = ""
    length: int = Field(ge=1)
    contacts: Tuple[Pair, ...] = ()
    threshold: Optional[float] = None
    source: Literal["list", "distances", "spec"] = "list"

    @field_validator("contacts")
    @classmethod
    def _normalize(cls, contacts: Tuple[Pair, ...]) -> Tuple[Pair, ...]:
        upper = {(min(i, j), max(i, j)) for i, j in contacts if i != j}
        return tuple(sorted(upper))

    @model_validator(mode="after")
    def _check_bounds(self) -> "ContactMap":
        for i, j in self.contacts:
            if i < 0 or j >= self.length:
                raise ValueError(f"contact ({i}, {j}) outside of length {self.length}")
        return self

    @classmethod
    def from_pairs(cls, length: int, pairs: Iterable[Pair], identifier: str = "", **kwargs) -> "ContactMap":
        return cls(identifier=identifier, length=length, contacts=tuple((int(i), int(j)) for i, j in pairs), **kwargs)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, identifier: str = "", **kwargs) -> "ContactMap":
        """Any true (i, j) or (j, i) entry off the diagonal becomes a contact."""
        matrix = np.asarray(matrix, dtype=bool)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"contact matrix must be square, got {matrix.shape}")
        sym = matrix | matrix.T
        i, j = np.nonzero(np.triu(sym, k=1))
        return cls.from_pairs(matrix.shape[0], zip(i.tolist(), j.tolist()), identifier=identifier, **kwargs)

    @classmethod
    def from_distances(
        cls, distances: np.ndarray, threshold: float = DEFAULT_THRESHOLD, identifier: str = ""
    ) -> "ContactMap":
        """contact(i, j) iff distance(i, j) <= threshold; NaN distances are never contacts."""
        distances = np.asarray(distances, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            close = distances <= threshold
        return cls.from_matrix(close, identifier=identifier, threshold=threshold, source="distances")

    def to_matrix(self) -> np.ndarray:
        matrix = np.zeros((self.length, self.length), dtype=bool)
        if self.contacts:
            i, j = np.asarray(self.contacts).T
            matrix[i, j] = True
            matrix[j, i] = True
        return matrix

    def is_contact(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in set(self.contacts)

    def __len__(self) -> int:
        return self.length


class RangeFilter(PairwiseMlmBaseModel):
    """
    Keeps pairs with min_sep <= |i - j| (< max_sep when set). The test is
    symmetric in (i, j).
    """

    name: str = "custom"
    min_sep: int = Field(1, ge=1)
    max_sep: Optional[int] = None

    @model_validator(mode="after")
    def _check_range(self) -> "RangeFilter":
        if self.max_sep is not None and self.max_sep <= self.min_sep:
            raise ValueError(f"max_sep {self.max_sep} must exceed min_sep {self.min_sep}")
        return self

    def accepts(self, i: int, j: int) -> bool:
        sep = abs(i - j)
        return sep >= self.min_sep and (self.max_sep is None or sep < self.max_sep)

    def pairs(self, length: int) -> List[Pair]:
        """All i < j pairs passing the filter, in lexicographic order."""
        return [(i, j) for i in range(length) for j in range(i + 1, length) if self.accepts(i, j)]

    def mask(self, length: int) -> np.ndarray:
        idx = np.arange(length)
        sep = np.abs(idx[:, None] - idx[None, :])
        keep = sep >= self.min_sep
        if self.max_sep is not None:
            keep &= sep < self.max_sep
        return keep


RANGE_PRESETS: Dict[str, Tuple[int, Optional[int]]] = {
    "short": (6, 12),
    "medium": (12, 24),
    "long": (24, None),
    "medium-long": (12, None),
    "all": (1, None),
}


def range_filter(name: str = "medium-long", strict: bool = False, min_sep: Optional[int] = None) -> RangeFilter:
    """
    Named filter, or `custom` with an explicit `min_sep`. `strict` reads
    "at least 12 residues between the pair" as twelve residues strictly in
    between, i.e. the lower bound moves up by one.

    Raises:
        RangeFilterError: on an unknown name or a custom filter without `min_sep`.
    """
    if name == "custom":
        if min_sep is None:
            raise RangeFilterError("a custom range filter needs min_sep")
        low, high = min_sep, None
    else:
        try:
            low, high = RANGE_PRESETS[name]
        except KeyError:
            raise RangeFilterError(f"unknown range filter '{name}', choose from {sorted(RANGE_PRESETS)} or custom")
    if strict:
        low += 1
    return RangeFilter(name=name, min_sep=low, max_sep=high)


class ContactRecord(PairwiseMlmBaseModel):
    """A sequence with its true contacts."""

    _key = ("identifier",)

    identifier: str
    sequence: SequenceRecord
    contact_map: ContactMap

    @model_validator(mode="after")
    def _check_lengths(self) -> "ContactRecord":
        check_contact_map(self.sequence, self.contact_map)
        return self


def check_contact_map(record: SequenceRecord, contact_map: ContactMap) -> None:
    """
    Raises:
        ContactMapMismatchError: naming the record when lengths disagree.
    """
    if len(record) != contact_map.length:
        raise ContactMapMismatchError(record.identifier, len(record), contact_map.length)


def contact_record(identifier: str, sequence: Union[str, SequenceRecord], contact_map: ContactMap) -> ContactRecord:
    if isinstance(sequence, str):
        sequence = SequenceRecord(identifier=identifier, residues=tuple(encode(sequence)))
    if len(sequence) != contact_map.length:
        raise ContactMapMismatchError(identifier, len(sequence), contact_map.length)
    return ContactRecord(identifier=identifier, sequence=sequence, contact_map=contact_map)


def parse_contact_row(row: Dict) -> ContactRecord:
    """
    One line of a contact file: `id`, `sequence`, then either `contacts`
    (list of [i, j]) or `distances` (L x L) with an optional `threshold`.

    Raises:
        ContactMapMismatchError: if the map size differs from the sequence length.
    """
    identifier = str(row["id"])
    sequence = row["sequence"]
    if "distances" in row:
        distances = np.asarray(row["distances"], dtype=np.float64)
        if distances.shape != (len(sequence), len(sequence)):
            raise ContactMapMismatchError(identifier, len(sequence), distances.shape[0])
        cmap = ContactMap.from_distances(
            distances, threshold=float(row.get("threshold", DEFAULT_THRESHOLD)), identifier=identifier
        )
    else:
        pairs = [tuple(p) for p in row.get("contacts", [])]
        length = int(row.get("length", len(sequence)))
        if length != len(sequence):
            raise ContactMapMismatchError(identifier, len(sequence), length)
        cmap = ContactMap.from_pairs(length, pairs, identifier=identifier)
    return contact_record(identifier, sequence, cmap)


def read_contact_records(path: Union[str, Path]) -> List[ContactRecord]:
    """Reads a contact jsonl file; header lines (`kind == "header"`) are skipped."""
    rows = jsonl_loader(path)
    return [parse_contact_row(row) for row in rows if row.get("kind") != "header"]


def write_contact_records(
    records: Iterable[ContactRecord],
    path: Union[str, Path],
    config_hash: str,
    seed: int,
) -> str:
    rows = [output_header(config_hash, seed, stream="contacts")]
    for record in records:
        rows.append(
            {
                "id": record.identifier,
                "sequence": record.sequence.sequence,
                "contacts": [list(p) for p in record.contact_map.contacts],
            }
        )
    return jsonl_dumper(rows, path)
