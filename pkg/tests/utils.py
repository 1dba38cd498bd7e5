"""
This module contains utility functions for test cases
"""

from typing import List, Optional, Set, Tuple

import numpy as np
from scipy.stats import norm

from pairwise_mlm.encoder import model_preset
from pairwise_mlm.heads import PmlmModel
from pairwise_mlm.seqio import NUM_RESIDUES, SequenceRecord, encode
from pairwise_mlm.utils import make_rng


def bonferroni_z(n_cells: int, confidence: float = 0.99) -> float:
    """Two-sided z for a family-wise `confidence` over `n_cells` intervals."""
    alpha = (1.0 - confidence) / max(n_cells, 1)
    return float(norm.ppf(1.0 - alpha / 2.0))


def assert_frequencies_within_ci(
    observed: np.ndarray,
    expected: np.ndarray,
    n: int,
    n_cells: Optional[int] = None,
    confidence: float = 0.99,
    what: str = "frequency",
):
    """Every observed frequency lies in the normal-approximation interval of its expected probability."""
    observed = np.asarray(observed, dtype=np.float64).reshape(-1)
    expected = np.asarray(expected, dtype=np.float64).reshape(-1)
    z = bonferroni_z(n_cells or observed.size, confidence)
    half_width = z * np.sqrt(expected * (1.0 - expected) / n)
    outside = np.abs(observed - expected) > half_width + 1e-12
    assert not outside.any(), (
        f"{what} outside its {confidence:.0%} interval at cells {np.nonzero(outside)[0].tolist()}: "
        f"observed {observed[outside].tolist()}, expected {expected[outside].tolist()}"
    )


def pair_frequencies(samples: np.ndarray, q: int) -> np.ndarray:
    """(L, L, q, q) empirical frequencies of every position pair."""
    n, length = samples.shape
    out = np.zeros((length, length, q, q))
    for i in range(length):
        for j in range(length):
            np.add.at(out[i, j], (samples[:, i], samples[:, j]), 1.0)
    return out / n


def brute_force_precision(
    scores: np.ndarray,
    contacts: Set[Tuple[int, int]],
    length: int,
    min_sep: int,
    max_sep: Optional[int],
    divisor: int,
) -> float:
    """Re-ranks every filtered pair with numpy's lexsort and counts hits in the top L // divisor."""
    i_idx, j_idx = np.triu_indices(length, k=1)
    sep = j_idx - i_idx
    keep = sep >= min_sep
    if max_sep is not None:
        keep &= sep < max_sep
    i_idx, j_idx = i_idx[keep], j_idx[keep]
    values = scores[i_idx, j_idx]
    # lexsort sorts by the last key first
    order = np.lexsort((j_idx, i_idx, -values))
    top = order[: max(1, length // divisor)]
    hits = sum((int(i_idx[k]), int(j_idx[k])) in contacts for k in top)
    return hits / len(top)


def random_records(
    n: int,
    rng: np.random.Generator,
    min_len: int = 4,
    max_len: int = 8,
    prefix: str = "rec",
) -> List[SequenceRecord]:
    records = []
    for index in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        residues = tuple(int(r) for r in rng.integers(0, NUM_RESIDUES, size=length))
        records.append(SequenceRecord(identifier=f"{prefix}{index}", residues=residues))
    return records


def tiny_model(seed: int = 0, **overrides) -> PmlmModel:
    return PmlmModel(model_preset("tiny", **overrides), make_rng(seed))


def record_from(sequence: str, identifier: str = "s") -> SequenceRecord:
    return SequenceRecord(identifier=identifier, residues=tuple(encode(sequence)))
