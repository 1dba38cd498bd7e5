"""
Masked-position sampling, input corruption and label construction.

Positions are framed coordinates: BOS sits at 0, residue k at k + 1 and EOS
at the end. Only residue positions holding one of the 20 canonical
residues can enter M.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import Field, field_validator, model_validator

from pairwise_mlm.custom_collections import MaskPositions
from pairwise_mlm.exceptions import SequenceTooLongError
from pairwise_mlm.models import PairwiseMlmBaseModel
from pairwise_mlm.seqio import (BOS, EOS, MASK, NUM_RESIDUES, PAD,
                                SequenceRecord, pair_id)
from pairwise_mlm.utils import make_rng

logger = logging.getLogger(__name__)

PairLabel = Tuple[int, int, int]
CorruptionKind = Literal["mask", "random", "keep"]


class MaskingConfig(PairwiseMlmBaseModel):
    mask_prob: float = Field(0.15, gt=0.0, le=1.0)
    # (p_mask, p_random, p_keep) applied to positions in M
    corrupt_split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    max_pairs_per_seq: Optional[int] = Field(None, ge=2)
    include_diagonal: bool = False
    force_minimum: bool = True

    @field_validator("corrupt_split")
    @classmethod
    def _check_split(cls, split: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(p < 0 for p in split):
            raise ValueError(f"corrupt_split entries must be non-negative, got {split}")
        if abs(sum(split) - 1.0) > 1e-9:
            raise ValueError(f"corrupt_split must sum to 1, got {sum(split)}")
        return split


class MaskedSequence(PairwiseMlmBaseModel):
    identifier: str
    original_ids: Tuple[int, ...]
    input_ids: Tuple[int, ...]
    mask_positions: Tuple[int, ...]
    token_labels: Tuple[int, ...]
    corruption: Tuple[CorruptionKind, ...]
    pair_labels: Tuple[Tuple[int, int, int], ...]

    @model_validator(mode="after")
    def _check_alignment(self) -> "MaskedSequence":
        if len(self.token_labels) != len(self.mask_positions):
            raise ValueError("one token label per masked position is required")
        if len(self.corruption) != len(self.mask_positions):
            raise ValueError("one corruption kind per masked position is required")
        if list(self.mask_positions) != sorted(set(self.mask_positions)):
            raise ValueError("mask positions must be sorted and unique")
        return self

    def __len__(self) -> int:
        return len(self.input_ids)


def frame(record: SequenceRecord) -> List[int]:
    return [BOS, *record.residues, EOS]


def maskable_positions(framed: Sequence[int]) -> List[int]:
    return [p for p, rid in enumerate(framed) if 0 <= rid < NUM_RESIDUES]


def build_pair_labels(
    mask_positions: Iterable[int],
    token_labels: Union[Sequence[int], Mapping[int, int]],
    include_diagonal: bool = False,
) -> List[PairLabel]:
    """
    Ordered pair labels (i, j, pair_id(x_i, x_j)) over M with i != j, in
    lexicographic (i, j) order. With `include_diagonal`, the (i, i) pairs
    are appended after them.

    `token_labels` is either aligned with `mask_positions` or a mapping
    from position to residue id.
    """
    positions = list(MaskPositions(mask_positions))
    if isinstance(token_labels, Mapping):
        labels = [token_labels[p] for p in positions]
    else:
        labels = list(token_labels)
        if len(labels) != len(positions):
            raise ValueError("token_labels must align with mask_positions")

    pairs = [
        (i, j, pair_id(li, lj))
        for i, li in zip(positions, labels)
        for j, lj in zip(positions, labels)
        if i != j
    ]
    if include_diagonal:
        pairs.extend((i, i, pair_id(li, li)) for i, li in zip(positions, labels))
    return pairs


def _cap_pairs(pairs: List[PairLabel], cap: int, rng: np.random.Generator) -> List[PairLabel]:
    """
    Keeps at most `cap` labels. Diagonal (i, i) labels count against the
    cap but are never dropped, since each masked position needs its own;
    the rest of the budget goes to unordered pairs, each kept with both
    of its directions. With more masked positions than `cap`, only the
    diagonal labels remain.
    """
    n_diagonal = sum(1 for i, j, _ in pairs if i == j)
    unordered = sorted({(min(i, j), max(i, j)) for i, j, _ in pairs if i != j})
    n_keep = max(cap - n_diagonal, 0) // 2
    if len(unordered) <= n_keep:
        return pairs
    chosen = rng.choice(len(unordered), size=n_keep, replace=False)
    keep = {unordered[k] for k in chosen}
    return [p for p in pairs if p[0] == p[1] or (min(p[0], p[1]), max(p[0], p[1])) in keep]


def sample_mask(
    seq: SequenceRecord,
    cfg: MaskingConfig,
    rng: np.random.Generator,
) -> MaskedSequence:
    """
    Draws M, corrupts the input and builds token and pair labels.

    Each maskable position enters M independently with `cfg.mask_prob`. A
    position in M becomes MASK, a uniformly random residue, or stays as it
    is, according to `cfg.corrupt_split`. If nothing was drawn and
    `cfg.force_minimum` is set, sampling is retried once and then a single
    random position is forced in.
    """
    framed = frame(seq)
    candidates = maskable_positions(framed)

    def draw() -> List[int]:
        hits = rng.random(len(candidates)) < cfg.mask_prob
        return [p for p, hit in zip(candidates, hits) if hit]

    chosen = draw()
    if not chosen and cfg.force_minimum and candidates:
        chosen = draw()
        if not chosen:
            chosen = [candidates[int(rng.integers(len(candidates)))]]
            logger.debug("mask_forced | identifier=%s | position=%d", seq.identifier, chosen[0])

    positions = MaskPositions(chosen)
    p_mask, p_random, _ = cfg.corrupt_split
    u = rng.random(len(positions))
    replacements = rng.integers(0, NUM_RESIDUES, size=len(positions))

    input_ids = list(framed)
    corruption: List[CorruptionKind] = []
    for k, position in enumerate(positions):
        if u[k] < p_mask:
            input_ids[position] = MASK
            corruption.append("mask")
        elif u[k] < p_mask + p_random:
            input_ids[position] = int(replacements[k])
            corruption.append("random")
        else:
            corruption.append("keep")

    labels = [framed[p] for p in positions]
    pairs = build_pair_labels(positions, labels, include_diagonal=cfg.include_diagonal)
    if cfg.max_pairs_per_seq is not None:
        pairs = _cap_pairs(pairs, cfg.max_pairs_per_seq, rng)

    return MaskedSequence(
        identifier=seq.identifier,
        original_ids=tuple(framed),
        input_ids=tuple(input_ids),
        mask_positions=tuple(positions),
        token_labels=tuple(labels),
        corruption=tuple(corruption),
        pair_labels=tuple(pairs),
    )


def mask_positions_exactly(seq: SequenceRecord, positions: Iterable[int], include_diagonal: bool = False) -> MaskedSequence:
    """Replaces exactly `positions` (framed coordinates) with MASK."""
    framed = frame(seq)
    chosen = MaskPositions(positions)
    input_ids = list(framed)
    for p in chosen:
        input_ids[p] = MASK
    labels = [framed[p] for p in chosen]
    return MaskedSequence(
        identifier=seq.identifier,
        original_ids=tuple(framed),
        input_ids=tuple(input_ids),
        mask_positions=tuple(chosen),
        token_labels=tuple(labels),
        corruption=tuple("mask" for _ in chosen),
        pair_labels=tuple(build_pair_labels(chosen, labels, include_diagonal=include_diagonal)),
    )


def sample_masks(
    records: Sequence[SequenceRecord],
    cfg: MaskingConfig,
    streams: Tuple[int, ...] = (),
    threads: int = 1,
) -> List[MaskedSequence]:
    """
    Masks every record with a generator derived from (cfg.seed, *streams,
    record index), so the result is independent of `threads`.
    """

    def work(index: int) -> MaskedSequence:
        return sample_mask(records[index], cfg, make_rng(cfg.seed, *streams, index))

    if threads <= 1:
        return [work(i) for i in range(len(records))]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, range(len(records))))


@dataclass(frozen=True)
class MaskedBatch:
    """
    Padded inputs plus flattened label index lists.

    Token label k belongs to sequence `token_batch[k]` at position
    `token_pos[k]`; pair label k to sequence `pair_batch[k]` at positions
    (`pair_i[k]`, `pair_j[k]`). `token_offsets[b]` / `pair_offsets[b]` give
    the index of sequence b's first label.
    """

    identifiers: Tuple[str, ...]
    input_ids: np.ndarray
    attention_mask: np.ndarray
    token_batch: np.ndarray
    token_pos: np.ndarray
    token_labels: np.ndarray
    token_offsets: np.ndarray
    pair_batch: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_labels: np.ndarray
    pair_offsets: np.ndarray

    @property
    def batch_size(self) -> int:
        return int(self.input_ids.shape[0])

    @property
    def num_tokens(self) -> int:
        return int(self.token_labels.shape[0])

    @property
    def num_pairs(self) -> int:
        return int(self.pair_labels.shape[0])


def collate_batch(
    sequences: Sequence[MaskedSequence],
    max_len: int,
    pad_to_longest: bool = False,
) -> MaskedBatch:
    """
    Right-pads inputs with PAD to `max_len` (or to the longest sequence with
    `pad_to_longest`); the attention mask is False on padding.

    Raises:
        SequenceTooLongError: if any sequence exceeds `max_len`.
    """
    for seq in sequences:
        if len(seq) > max_len:
            raise SequenceTooLongError(
                f"masked sequence '{seq.identifier}' has length {len(seq)} > max_len {max_len}"
            )

    width = max((len(s) for s in sequences), default=0) if pad_to_longest else max_len
    batch = len(sequences)
    input_ids = np.full((batch, width), PAD, dtype=np.int64)
    attention_mask = np.zeros((batch, width), dtype=bool)

    token_batch, token_pos, token_labels, token_offsets = [], [], [], []
    pair_batch, pair_i, pair_j, pair_labels, pair_offsets = [], [], [], [], []

    for b, seq in enumerate(sequences):
        input_ids[b, : len(seq)] = seq.input_ids
        attention_mask[b, : len(seq)] = True

        token_offsets.append(len(token_labels))
        token_batch.extend([b] * len(seq.mask_positions))
        token_pos.extend(seq.mask_positions)
        token_labels.extend(seq.token_labels)

        pair_offsets.append(len(pair_labels))
        for i, j, pid in seq.pair_labels:
            pair_batch.append(b)
            pair_i.append(i)
            pair_j.append(j)
            pair_labels.append(pid)

    def as_index(values: List[int]) -> np.ndarray:
        return np.asarray(values, dtype=np.int64)

    return MaskedBatch(
        identifiers=tuple(s.identifier for s in sequences),
        input_ids=input_ids,
        attention_mask=attention_mask,
        token_batch=as_index(token_batch),
        token_pos=as_index(token_pos),
        token_labels=as_index(token_labels),
        token_offsets=as_index(token_offsets),
        pair_batch=as_index(pair_batch),
        pair_i=as_index(pair_i),
        pair_j=as_index(pair_j),
        pair_labels=as_index(pair_labels),
        pair_offsets=as_index(pair_offsets),
    )
