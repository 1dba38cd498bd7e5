import io
import itertools

import pytest
from pydantic import ValidationError

from pairwise_mlm.dumpers import json_dumper
from pairwise_mlm.exceptions import (FastaParseError, SequenceTooLongError,
                                     VocabularyError)
from pairwise_mlm.loaders import json_loader
from pairwise_mlm.seqio import (BOS, NUM_PAIRS, UNK, VOCAB_SIZE, FastaReader,
                                SequenceRecord, check_length, decode, encode,
                                load_sequences, pair_id, parse_fasta,
                                read_dataset_cache, residue_id,
                                residue_symbol, split_pair_id,
                                write_dataset_cache, write_fasta)


### FIXTURES ###
@pytest.fixture
def small_fasta_file():
    return "tests/mocked_data/small.fasta"


### TESTS ###
def test_vocabulary_layout():
    assert VOCAB_SIZE == 25
    assert encode("ACDE") == [0, 1, 2, 3]
    assert residue_id("y") == 19, "lowercase letters are accepted"
    assert residue_symbol(BOS) == "<bos>"
    assert decode([0, UNK, 19]) == "AXY"

    with pytest.raises(VocabularyError):
        residue_id("X")
    with pytest.raises(VocabularyError):
        residue_symbol(99)


def test_pair_id_examples():
    assert pair_id(0, 0) == 0
    assert pair_id(19, 19) == 399
    assert pair_id(1, 2) == 22


def test_pair_id_is_a_bijection():
    seen = {pair_id(a, b) for a, b in itertools.product(range(20), repeat=2)}

    assert seen == set(range(NUM_PAIRS))
    for a, b in itertools.product(range(20), repeat=2):
        assert split_pair_id(pair_id(a, b)) == (a, b)


@pytest.mark.parametrize("a, b", [(20, 0), (0, UNK), (-1, 3)])
def test_pair_id_rejects_specials(a, b):
    with pytest.raises(VocabularyError):
        pair_id(a, b)


def test_parse_minimal_text():
    records = parse_fasta(io.StringIO(">s1\nACDE\n"))

    assert len(records) == 1
    assert records[0].identifier == "s1"
    assert records[0].residues == (0, 1, 2, 3)


def test_parse_wrapped_lines_from_bytes():
    records = parse_fasta(io.BytesIO(b">s1\nAC\nDE\n>s2\nGG\n"))

    assert [len(r) for r in records] == [4, 2]


def test_nonstandard_residue_dropped_by_default():
    (record,) = parse_fasta(io.StringIO(">s1\nAXA\n"))

    assert record.sequence == "AA"


def test_parse_file(small_fasta_file):
    reader = FastaReader()
    with open(small_fasta_file) as stream:
        records = reader.read(stream)

    assert [r.identifier for r in records] == ["seq1", "seq2", "seq3"]
    assert records[0].sequence == "ACDEFGHIKLMNPQ"
    assert records[1].sequence == "MKVLAAG"
    assert records[2].sequence == "ACDE"
    assert (reader.skipped_empty, reader.skipped_short, reader.dropped_residues) == (1, 1, 2)


def test_nonstandard_as_unk(small_fasta_file):
    records = parse_fasta(small_fasta_file, nonstandard="unk")

    assert records[2].residues == (0, 1, UNK, 2, UNK, 3)


def test_overflow_policies(small_fasta_file):
    truncating = FastaReader(max_len=10)
    with open(small_fasta_file) as stream:
        truncated = truncating.read(stream)

    assert len(truncated[0]) == 8, "max_len counts BOS and EOS"
    assert truncating.truncated == 1

    skipped = parse_fasta(small_fasta_file, max_len=10, overflow="skip")
    assert [r.identifier for r in skipped] == ["seq2", "seq3"]


def test_sequence_before_header():
    with pytest.raises(FastaParseError) as err:
        parse_fasta(io.StringIO("; note\nACDE\n>s1\nAC\n"))

    assert err.value.line_number == 2


def test_invalid_letter():
    with pytest.raises(FastaParseError) as err:
        parse_fasta(io.StringIO(">s1\nAC\nA1C\n"))

    assert err.value.line_number == 1, "errors inside a record point at its header"


def test_gap_and_stop_symbols_are_ignored():
    (record,) = parse_fasta(io.StringIO(">s1\nAC-D.E*\n"))

    assert record.sequence == "ACDE"


def test_sequence_record_validation():
    with pytest.raises(ValidationError):
        SequenceRecord(identifier="short", residues=(0,))
    with pytest.raises(ValidationError):
        SequenceRecord(identifier="special", residues=(0, BOS))


def test_check_length(small_fasta_file):
    record = parse_fasta(small_fasta_file)[0]

    check_length(record, 16)
    with pytest.raises(SequenceTooLongError):
        check_length(record, 15)


def test_write_fasta_wraps_and_reparses(tmp_path, small_fasta_file):
    records = parse_fasta(small_fasta_file)
    path = tmp_path / "out.fasta"
    text = write_fasta(records, path, width=5)

    assert text.splitlines()[:4] == [">seq1", "ACDEF", "GHIKL", "MNPQ"]
    assert parse_fasta(path) == records


def test_write_fasta_header_and_atomic_replace(tmp_path, small_fasta_file, monkeypatch):
    records = parse_fasta(small_fasta_file)
    path = tmp_path / "out.fasta"
    write_fasta(records, path, header={"config_hash": "abc", "seed": 3, "version": "0.1.0"})

    first = path.read_text().splitlines()[0]
    assert first == ';{"config_hash":"abc","seed":3,"version":"0.1.0"}'
    assert parse_fasta(path) == records, "the header line is a comment"
    assert not list(tmp_path.glob("*.part"))

    def interrupted(src, dst):
        raise OSError("disk full")

    before = path.read_text()
    monkeypatch.setattr("pairwise_mlm.decorators.os.replace", interrupted)
    with pytest.raises(OSError):
        write_fasta(records[:1], path)
    assert path.read_text() == before, "a failed write leaves the previous file in place"


def test_dataset_cache(tmp_path, small_fasta_file):
    records = parse_fasta(small_fasta_file)
    path = write_dataset_cache(records, tmp_path / "cache.tsv")

    assert read_dataset_cache(path) == records
    assert load_sequences(path) == records, "a manifest makes load_sequences read the cache"
    assert load_sequences(small_fasta_file) == records


def test_dataset_cache_vocabulary_mismatch(tmp_path, small_fasta_file):
    path = write_dataset_cache(parse_fasta(small_fasta_file), tmp_path / "cache.tsv")
    manifest_path = tmp_path / "cache.tsv.manifest.json"
    manifest = json_loader(manifest_path)
    manifest["vocab_version"] = "res20-pair400-v0"
    json_dumper(manifest, manifest_path)

    with pytest.raises(VocabularyError):
        read_dataset_cache(path)
