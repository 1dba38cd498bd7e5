import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairwise_mlm.custom_collections import MaskPositions
from pairwise_mlm.exceptions import ConfigValidationError, SequenceTooLongError
from pairwise_mlm.masking import (MaskingConfig, build_pair_labels,
                                  collate_batch, frame, mask_positions_exactly,
                                  maskable_positions, sample_mask,
                                  sample_masks)
from pairwise_mlm.seqio import BOS, EOS, MASK, PAD, UNK, SequenceRecord, pair_id
from pairwise_mlm.utils import make_rng
from tests.utils import (assert_frequencies_within_ci, random_records,
                         record_from)


### FIXTURES ###
@pytest.fixture
def long_record():
    rng = np.random.default_rng(3)
    return SequenceRecord(identifier="long", residues=tuple(int(r) for r in rng.integers(0, 20, 10_000)))


### TESTS ###
def test_mask_positions_set():
    assert list(MaskPositions([7, 1, 4, 1])) == [1, 4, 7]

    with pytest.raises(TypeError):
        MaskPositions([1.5])
    with pytest.raises(ValueError):
        MaskPositions([-1])


def test_config_validation():
    with pytest.raises(ConfigValidationError):
        MaskingConfig.create({"corrupt_split": [0.8, 0.1, 0.2]})
    with pytest.raises(ConfigValidationError):
        MaskingConfig.create({"mask_prob": 0.0})
    with pytest.raises(ConfigValidationError):
        MaskingConfig.create({"max_pairs_per_seq": 1})


def test_framing_and_maskable_positions():
    record = SequenceRecord(identifier="u", residues=(0, UNK, 3))

    assert frame(record) == [BOS, 0, UNK, 3, EOS]
    assert maskable_positions(frame(record)) == [1, 3], "UNK positions never enter M"


def test_build_pair_labels_examples():
    assert build_pair_labels([2], [5]) == []

    labels = build_pair_labels([7, 1, 4], {1: 0, 4: 1, 7: 2})
    assert [(i, j) for i, j, _ in labels] == [(1, 4), (1, 7), (4, 1), (4, 7), (7, 1), (7, 4)]

    # A at 1, C at 4
    assert build_pair_labels([1, 4], [0, 1]) == [(1, 4, 1), (4, 1, 20)]


def test_build_pair_labels_with_diagonal():
    labels = build_pair_labels([1, 4, 7], [0, 1, 2], include_diagonal=True)

    assert len(labels) == 9
    assert labels[-3:] == [(1, 1, pair_id(0, 0)), (4, 4, pair_id(1, 1)), (7, 7, pair_id(2, 2))]


@given(st.sets(st.integers(min_value=1, max_value=60), min_size=0, max_size=12))
@settings(max_examples=60, deadline=None)
def test_pair_label_count_and_symmetry(positions):
    labels = build_pair_labels(positions, {p: p % 20 for p in positions})
    n = len(positions)

    assert len(labels) == n * n - n
    assert [(i, j) for i, j, _ in labels] == sorted((i, j) for i, j, _ in labels)
    forward = {(i, j): pid for i, j, pid in labels}
    for (i, j), pid in forward.items():
        a, b = divmod(pid, 20)
        assert forward[(j, i)] == pair_id(b, a)


def test_full_mask_on_four_residues():
    cfg = MaskingConfig.create({"mask_prob": 1.0, "corrupt_split": [1.0, 0.0, 0.0]})
    masked = sample_mask(record_from("ACDE"), cfg, make_rng(0))

    assert masked.mask_positions == (1, 2, 3, 4)
    assert masked.input_ids == (BOS, MASK, MASK, MASK, MASK, EOS)
    assert masked.token_labels == (0, 1, 2, 3)
    assert len(masked.pair_labels) == 12


def test_no_mask_without_forced_minimum():
    cfg = MaskingConfig.create({"mask_prob": 1e-12, "force_minimum": False})
    masked = sample_mask(record_from("ACDEFG"), cfg, make_rng(0))

    assert masked.mask_positions == ()
    assert masked.input_ids == masked.original_ids


def test_forced_minimum():
    cfg = MaskingConfig.create({"mask_prob": 1e-12})
    masked = sample_mask(record_from("ACDEFG"), cfg, make_rng(0))

    assert len(masked.mask_positions) == 1
    assert masked.pair_labels == ()


def test_mask_fraction_and_corruption_split(long_record):
    cfg = MaskingConfig.create({"mask_prob": 0.15})
    masked = sample_mask(long_record, cfg, make_rng(11))
    n_masked = len(masked.mask_positions)

    assert_frequencies_within_ci([n_masked / 10_000], [0.15], 10_000, what="mask fraction")
    kinds = np.array(masked.corruption)
    observed = [np.mean(kinds == kind) for kind in ("mask", "random", "keep")]
    assert_frequencies_within_ci(observed, [0.8, 0.1, 0.1], n_masked, what="corruption split")

    for position, kind in zip(masked.mask_positions, masked.corruption):
        if kind == "mask":
            assert masked.input_ids[position] == MASK
        elif kind == "keep":
            assert masked.input_ids[position] == masked.original_ids[position]


def test_pair_cap_keeps_both_directions():
    cfg = MaskingConfig.create({"mask_prob": 1.0, "max_pairs_per_seq": 6})
    masked = sample_mask(record_from("ACDEFGHIK"), cfg, make_rng(5))
    pairs = {(i, j) for i, j, _ in masked.pair_labels}

    assert len(pairs) == 6
    assert all((j, i) in pairs for i, j in pairs)


def test_pair_cap_counts_diagonal_labels():
    record = record_from("ACDEF")
    cfg = MaskingConfig.create({"mask_prob": 1.0, "max_pairs_per_seq": 9, "include_diagonal": True})
    masked = sample_mask(record, cfg, make_rng(2))
    diagonal = [(i, j) for i, j, _ in masked.pair_labels if i == j]

    assert len(masked.pair_labels) == 9
    assert diagonal == [(p, p) for p in masked.mask_positions]

    for cap in range(2, 30):
        capped = sample_mask(record, cfg.updated(max_pairs_per_seq=cap), make_rng(cap))
        n_masked = len(capped.mask_positions)
        assert len(capped.pair_labels) <= max(cap, n_masked), f"cap {cap}"
        assert sum(1 for i, j, _ in capped.pair_labels if i == j) == n_masked, f"cap {cap}"


def test_sampling_is_deterministic():
    cfg = MaskingConfig.create({"mask_prob": 0.3, "seed": 4})
    records = random_records(20, np.random.default_rng(0))

    first = sample_masks(records, cfg, streams=(1, 0))
    second = sample_masks(records, cfg, streams=(1, 0))
    other_stream = sample_masks(records, cfg, streams=(1, 1))

    assert first == second
    assert first != other_stream


def test_thread_count_does_not_change_masks():
    cfg = MaskingConfig.create({"mask_prob": 0.3, "seed": 4})
    records = random_records(40, np.random.default_rng(1))

    assert sample_masks(records, cfg, threads=1) == sample_masks(records, cfg, threads=4)


def test_mask_positions_exactly():
    masked = mask_positions_exactly(record_from("ACDEF"), [4, 2])

    assert masked.mask_positions == (2, 4)
    assert masked.input_ids == (BOS, 0, MASK, 2, MASK, 4, EOS)
    assert masked.pair_labels == ((2, 4, pair_id(1, 3)), (4, 2, pair_id(3, 1)))


def test_collate_single_sequence():
    batch = collate_batch([mask_positions_exactly(record_from("ACD"), [1, 2])], max_len=5)

    assert batch.input_ids.shape == (1, 5)
    assert batch.attention_mask.all()


def test_collate_pads_and_masks_attention():
    first = mask_positions_exactly(record_from("ACDE"), [1, 2])
    second = mask_positions_exactly(record_from("AC"), [1])
    batch = collate_batch([first, second], max_len=8)

    assert batch.input_ids.shape == (2, 8)
    assert batch.attention_mask[0].tolist() == [True] * 6 + [False] * 2
    assert batch.attention_mask[1].tolist() == [True] * 4 + [False] * 4
    assert (batch.input_ids[1, 4:] == PAD).all()

    tight = collate_batch([first, second], max_len=8, pad_to_longest=True)
    assert tight.input_ids.shape == (2, 6)


def test_collate_flattens_labels():
    first = mask_positions_exactly(record_from("ACDEFG"), [1, 3, 5])
    second = mask_positions_exactly(record_from("ACDEFG"), [1, 2, 3, 4])
    batch = collate_batch([first, second], max_len=8)

    assert batch.num_tokens == 7
    assert batch.num_pairs == 18
    assert batch.pair_offsets.tolist() == [0, 6]
    assert batch.token_offsets.tolist() == [0, 3]
    assert batch.token_batch.tolist() == [0, 0, 0, 1, 1, 1, 1]
    assert batch.pair_batch[6:].tolist() == [1] * 12


def test_collate_rejects_overlong():
    masked = mask_positions_exactly(record_from("ACDEFG"), [1])

    with pytest.raises(SequenceTooLongError):
        collate_batch([masked], max_len=7)
