import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from pairwise_mlm.checkpoint import save_checkpoint
from pairwise_mlm.contacts import ContactMap, contact_record, range_filter
from pairwise_mlm.encoder import model_preset
from pairwise_mlm.evalkit import (CompareConfig, FinetuneConfig, KlRecord,
                                  compare_mlm_vs_pmlm,
                                  contact_pair_representation,
                                  evaluate_contact_predictor,
                                  evaluate_contact_scores,
                                  finetune_contact, kl_divergence,
                                  kl_histogram, kl_product_vs_joint,
                                  kl_scan_report, kl_separation, kl_to_oracle,
                                  load_contact_predictor, precision_at_k,
                                  precision_at_L5, random_precision_baseline,
                                  ranked_pairs, read_score_maps, scan_pair_kl,
                                  select_pairs, save_contact_predictor,
                                  symmetric_pair_representation,
                                  write_score_maps)
from pairwise_mlm.exceptions import (CheckpointError, DatasetSplitError,
                                     RangeFilterError, ScoreMapError,
                                     ShapeMismatchError, SequenceTooLongError)
from pairwise_mlm.heads import FactorizedPredictor
from pairwise_mlm.loaders import jsonl_loader
from pairwise_mlm.numcore import Tensor
from pairwise_mlm.synthgen import (contacts_from_spec, embed_joint,
                                   exact_conditional, sample_sequences,
                                   spec_to_document, synth_preset)
from pairwise_mlm.trainer import TrainConfig
from pairwise_mlm.utils import canonical_hash, make_rng
from tests.utils import brute_force_precision, record_from, tiny_model


### FIXTURES ###
@pytest.fixture
def accept_spec():
    return synth_preset("accept-L8")


@pytest.fixture
def labeled(accept_spec):
    records = sample_sequences(accept_spec, 6, make_rng(0))
    return [contact_record(r.identifier, r, contacts_from_spec(accept_spec, r.identifier)) for r in records]


@pytest.fixture
def probe_cfg():
    return FinetuneConfig(epochs=3, batch_size=2, min_separation=2, lr=1e-2, seed=1)


class ExactPredictor:
    """Returns the exact conditional of a synthetic spec as its pair prediction."""

    def __init__(self, spec):
        self.spec = spec

    def predict_pairs(self, record, pairs):
        out = []
        for i, j in pairs:
            oracle = exact_conditional(self.spec, i, j, list(record.residues))
            joint = embed_joint(oracle.joint)
            out.append((joint.sum(axis=1), joint.sum(axis=0), joint))
        return out


def precision_example():
    """L = 60: nine contacts and three decoys above everything else, so P@L/5 counts 9 of 12."""
    length = 60
    contacts = [(i, i + 20) for i in range(9)]
    decoys = [(30, 45), (31, 46), (32, 47)]
    scores = np.zeros((length, length))
    for i, j in contacts:
        scores[i, j] = scores[j, i] = 0.9
    for i, j in decoys:
        scores[i, j] = scores[j, i] = 0.8
    return scores, ContactMap.from_pairs(length, contacts, identifier="p60")


### TESTS ###
def test_kl_two_symbol_example():
    assert kl_divergence([0.5, 0.5], [0.8, 0.2]) == pytest.approx(0.2231, abs=1e-4)
    assert kl_divergence([1.0, 0.0], [1.0, 0.0]) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ShapeMismatchError):
        kl_divergence([0.5, 0.5], [1.0])


@given(
    arrays(np.float64, (3, 4), elements=st.floats(min_value=0.01, max_value=1.0)),
    arrays(np.float64, (3, 4), elements=st.floats(min_value=0.0, max_value=1.0)),
)
@settings(max_examples=60, deadline=None)
def test_kl_is_non_negative(p, q):
    p, q = p / p.sum(), (q + 1e-3) / (q + 1e-3).sum()

    assert kl_divergence(p, q) >= -1e-9


def test_kl_product_vs_joint():
    p = np.array([0.2, 0.8])
    q = np.array([0.6, 0.1, 0.3])

    assert kl_product_vs_joint(p, q, np.outer(p, q)) == pytest.approx(0.0, abs=1e-9)

    coupled = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert kl_product_vs_joint([0.5, 0.5], [0.5, 0.5], coupled) > 1.0, "the floor keeps empty cells finite"
    assert math.isfinite(kl_product_vs_joint([0.5, 0.5], [0.5, 0.5], coupled))

    with pytest.raises(ShapeMismatchError):
        kl_product_vs_joint(p, q, np.outer(q, p))


def test_select_pairs():
    assert select_pairs(8, "0-5,2-7") == [(0, 5), (2, 7)]
    assert select_pairs(8, "5-0, 0-5") == [(0, 5)]
    assert select_pairs(4, "all") == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    assert select_pairs(20, "short") == range_filter("short").pairs(20)

    for bad in ("a-b", "3-3", "0-8"):
        with pytest.raises(RangeFilterError):
            select_pairs(8, bad)


def test_scan_pair_kl_flags_coupled_pairs():
    record = record_from("ACDEFGHI", "k1")
    truth = ContactMap.from_pairs(8, [(0, 5)])
    records = scan_pair_kl(tiny_model(0), record, [(0, 5), (2, 7)], truth)

    assert [(r.i, r.j) for r in records] == [(0, 5), (2, 7)]
    assert [r.coupled for r in records] == [True, False]
    assert all(r.kl >= 0.0 and r.identifier == "k1" for r in records)


def test_factorized_predictor_scans_near_zero():
    record = record_from("ACDEFGHI")
    records = scan_pair_kl(FactorizedPredictor(tiny_model(1)), record)

    assert len(records) == 28
    assert max(r.kl for r in records) == pytest.approx(0.0, abs=1e-6)
    assert all(r.coupled is None for r in records)


def test_kl_histogram():
    assert kl_histogram([0.05, 0.15, 0.32]) == [(0.0, 1), (0.1, 1), (0.2, 0), (0.3, 1)]
    assert kl_histogram([]) == []
    assert kl_histogram([KlRecord(identifier="a", i=0, j=1, kl=0.7)], width=0.5) == [(0.0, 0), (0.5, 1)]
    with pytest.raises(ValueError):
        kl_histogram([0.1], width=0.0)


def test_kl_separation_and_report():
    records = [
        KlRecord(identifier="a", i=0, j=1, kl=0.8, coupled=True),
        KlRecord(identifier="a", i=0, j=2, kl=0.4, coupled=True),
        KlRecord(identifier="a", i=1, j=2, kl=0.1, coupled=False),
        KlRecord(identifier="b", i=0, j=1, kl=0.3, coupled=False),
    ]
    separation = kl_separation(records)

    assert separation.median_coupled == pytest.approx(0.6)
    assert separation.median_uncoupled == pytest.approx(0.2)
    assert separation.ratio == pytest.approx(3.0)
    assert kl_separation(records[:2]).ratio is None

    report = kl_scan_report(records, config_hash="0123456789abcdef", selection="all")
    assert report.n_sequences == 2 and report.n_records == 4
    assert report.median_kl == pytest.approx(0.35)
    assert "config_hash=0123456789abcdef" in report.get_rendered_str()


def test_kl_to_exact_oracle_is_zero():
    spec = synth_preset("toy-pair")
    records = sample_sequences(spec, 5, make_rng(3))

    values = kl_to_oracle(ExactPredictor(spec), spec, records, [(0, 1)])

    assert len(values) == 5
    assert_allclose(values, 0.0, atol=1e-9)


def test_kl_to_oracle_penalizes_independence(accept_spec):
    records = sample_sequences(accept_spec, 3, make_rng(4))
    pairs = list(accept_spec.coupled_pairs)

    class UniformPredictor:
        def predict_pairs(self, record, pairs):
            joint = embed_joint(np.full((20, 20), 1 / 400))
            return [(joint.sum(axis=1), joint.sum(axis=0), joint) for _ in pairs]

    exact = kl_to_oracle(ExactPredictor(accept_spec), accept_spec, records, pairs)
    uniform = kl_to_oracle(UniformPredictor(), accept_spec, records, pairs)

    assert max(exact) < 1e-9
    assert min(uniform) > 0.0


def test_precision_example():
    scores, truth = precision_example()

    assert precision_at_L5(scores, truth) == 0.75
    assert precision_at_k(scores, truth, divisor=1) == pytest.approx(9 / 60)


def test_precision_matches_brute_force():
    rng = np.random.default_rng(11)
    filters = ["short", "medium", "long", "medium-long", "all"]

    for trial in range(500):
        length = int(rng.integers(26, 41))
        upper = np.round(rng.uniform(size=(length, length)), 1)
        scores = np.triu(upper, 1) + np.triu(upper, 1).T
        pair_filter = range_filter(filters[trial % len(filters)])
        candidates = pair_filter.pairs(length)
        picks = rng.choice(len(candidates), size=int(rng.integers(1, min(8, len(candidates) + 1))), replace=False)
        truth = ContactMap.from_pairs(length, [candidates[k] for k in picks])
        divisor = (1, 2, 5)[trial % 3]

        expected = brute_force_precision(
            scores, set(truth.contacts), length, pair_filter.min_sep, pair_filter.max_sep, divisor
        )
        assert precision_at_k(scores, truth, pair_filter, divisor) == pytest.approx(expected), f"trial {trial}"


def test_raising_a_contact_score_never_lowers_precision():
    rng = np.random.default_rng(12)
    length = 40
    truth = ContactMap.from_pairs(length, [(0, 20), (3, 30), (5, 25), (10, 39)])
    upper = rng.uniform(size=(length, length))
    scores = np.triu(upper, 1) + np.triu(upper, 1).T
    before = precision_at_L5(scores, truth)

    for i, j in truth.contacts:
        scores[i, j] = scores[j, i] = scores[i, j] + 0.5
        after = precision_at_L5(scores, truth)
        assert after >= before
        before = after


def test_ranked_pairs_ties_and_errors():
    scores = {(0, 2): 0.5, (1, 3): 0.5, (0, 3): 0.9}

    assert ranked_pairs(scores, 4, range_filter("custom", min_sep=2)) == [(0, 3), (0, 2), (1, 3)]
    with pytest.raises(ScoreMapError):
        ranked_pairs({(0, 2): 0.5}, 4, range_filter("custom", min_sep=2))
    with pytest.raises(ScoreMapError):
        ranked_pairs(np.zeros((3, 3)), 4, range_filter("custom", min_sep=2))
    with pytest.raises(RangeFilterError):
        ranked_pairs(np.zeros((10, 10)), 10, range_filter("medium-long"))


def test_random_baseline():
    truth = ContactMap.from_pairs(20, [(0, 15), (2, 19), (1, 3)])

    assert random_precision_baseline(truth) == pytest.approx(2 / 36)


def test_evaluate_contact_scores():
    scores, truth = precision_example()
    report = evaluate_contact_scores({"p60": scores}, [truth])

    assert report.n_records == 1
    assert report.precision_l5 == 0.75
    assert report.range_name == "medium-long" and report.min_sep == 12
    assert "P@L/5" in report.get_rendered_str()

    with pytest.raises(ScoreMapError):
        evaluate_contact_scores({}, [truth])
    with pytest.raises(DatasetSplitError):
        evaluate_contact_scores({"p60": scores}, [])


def test_score_map_files(tmp_path):
    scores, _ = precision_example()
    path = tmp_path / "scores.jsonl"
    write_score_maps({"p60": scores}, path, config_hash="0123456789abcdef", seed=2)

    assert jsonl_loader(path)[0]["kind"] == "header"
    assert_array_equal(read_score_maps(path)["p60"], scores)

    pairs_file = tmp_path / "pairs.jsonl"
    pairs_file.write_text('{"id": "x", "length": 3, "pairs": [[0, 2, 0.7], [0, 1, 0.1], [1, 2, 0.2]]}\n')
    matrix = read_score_maps(pairs_file)["x"]
    assert matrix[2, 0] == 0.7 and matrix[0, 2] == 0.7

    pairs_file.write_text('{"id": "y", "length": 3}\n')
    with pytest.raises(ScoreMapError):
        read_score_maps(pairs_file)


def test_contact_pair_representation_widths():
    model = tiny_model(0)
    rng = np.random.default_rng(3)
    h_i, h_j = Tensor(rng.normal(size=(5, 16))), Tensor(rng.normal(size=(5, 16)))

    assert contact_pair_representation(h_i, h_j, model.pair_head).shape == (5, model.config.d_pair)
    assert contact_pair_representation(h_i, h_j).shape == (5, 32), "without a pair head the pair feature is used"
    assert_allclose(
        symmetric_pair_representation(h_i, h_j, model.pair_head).data,
        symmetric_pair_representation(h_j, h_i, model.pair_head).data,
    )


def test_probe_scores_are_symmetric(labeled, probe_cfg):
    model = tiny_model(0)
    result = finetune_contact(model, labeled, probe_cfg)
    scores = result.predictor.scores(labeled[0].sequence)

    assert len(result.history) == 3
    assert all(math.isfinite(h.loss) for h in result.history)
    assert result.predictor.representation == "pair_head"
    assert result.predictor.head.in_dim == model.config.d_pair
    assert_allclose(scores, scores.T)
    assert np.all(np.diag(scores) == 0.0) and np.all(np.diag(scores, k=1) == 0.0)
    assert np.all((scores[np.triu_indices(8, k=2)] > 0.0) & (scores[np.triu_indices(8, k=2)] < 1.0))


def test_probe_leaves_model_frozen(labeled, probe_cfg):
    model = tiny_model(0)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    finetune_contact(model, labeled, probe_cfg)

    for name, p in model.named_parameters():
        assert_array_equal(p.data, before[name], err_msg=name)


def test_frozen_encoder_with_random_labels_stays_at_chance(accept_spec, probe_cfg):
    label_rng = make_rng(11)

    def randomly_labeled(records):
        labeled = []
        for r in records:
            contacts = [(i, j) for i in range(8) for j in range(i + 2, 8) if label_rng.random() < 0.3]
            labeled.append(contact_record(r.identifier, r, ContactMap.from_pairs(8, contacts, identifier=r.identifier)))
        return labeled

    records = sample_sequences(accept_spec, 80, make_rng(3))
    train, held_out = randomly_labeled(records[:40]), randomly_labeled(records[40:])
    result = finetune_contact(tiny_model(0), train, probe_cfg.updated(epochs=5, batch_size=8))
    report = evaluate_contact_predictor(result.predictor, held_out, range_filter("custom", min_sep=2))

    assert report.random_baseline == pytest.approx(0.3, abs=0.05)
    for name in ("precision_l", "precision_l2", "precision_l5"):
        value = getattr(report, name)
        assert abs(value - report.random_baseline) < 0.15, f"{name} {value:.3f} vs chance {report.random_baseline:.3f}"


@pytest.mark.parametrize("mode", ["probe", "full"])
def test_finetune_is_deterministic_for_a_seed(labeled, probe_cfg, mode):
    cfg = probe_cfg.updated(mode=mode)
    runs = [finetune_contact(tiny_model(0), labeled, cfg) for _ in range(2)]
    reseeded = finetune_contact(tiny_model(0), labeled, cfg.updated(seed=cfg.seed + 1))

    first, second = runs
    assert [h.model_dump() for h in first.history] == [h.model_dump() for h in second.history]
    for item in labeled:
        assert_array_equal(first.predictor.scores(item.sequence), second.predictor.scores(item.sequence))
    assert not np.array_equal(
        first.predictor.scores(labeled[0].sequence), reseeded.predictor.scores(labeled[0].sequence)
    ), "another seed draws another head"


def test_full_finetune_updates_encoder(labeled, probe_cfg):
    model = tiny_model(0)
    before = model.encoder.token_embedding.data.copy()
    finetune_contact(model, labeled, probe_cfg.updated(mode="full"))

    assert not np.array_equal(model.encoder.token_embedding.data, before)


def test_mlm_model_falls_back_to_pair_feature(labeled, probe_cfg):
    model = tiny_model(0, lambda_=0.0)
    result = finetune_contact(model, labeled, probe_cfg)

    assert result.predictor.representation == "fallback"
    assert result.predictor.head.in_dim == 2 * model.config.hidden_dim


def test_finetune_errors(labeled, probe_cfg):
    with pytest.raises(DatasetSplitError):
        finetune_contact(tiny_model(0), [], probe_cfg)
    with pytest.raises(SequenceTooLongError):
        finetune_contact(tiny_model(0, max_len=8), labeled, probe_cfg)


def test_contact_predictor_save_and_load(tmp_path, labeled, probe_cfg):
    result = finetune_contact(tiny_model(0), labeled, probe_cfg)
    path = save_contact_predictor(result.predictor, tmp_path / "probe.ckpt")
    restored = load_contact_predictor(path)

    assert restored.representation == result.predictor.representation
    assert restored.min_separation == 2
    assert_allclose(restored.scores(labeled[1].sequence), result.predictor.scores(labeled[1].sequence), rtol=1e-6)

    plain = save_checkpoint(tmp_path / "plain.ckpt", tiny_model(0))
    with pytest.raises(CheckpointError):
        load_contact_predictor(plain)


def test_compare_rejects_pmlm_only():
    with pytest.raises(ValidationError):
        CompareConfig(model=model_preset("tiny", pmlm_only_with_diagonal=True))


def test_compare_smoke(tmp_path):
    cfg = CompareConfig(
        n_pretrain=60,
        n_finetune=4,
        n_heldout=3,
        model=model_preset("tiny"),
        train=TrainConfig(
            peak_lr=1e-3, warmup_steps=1, total_steps=4, batch_size=8, validate_every=4, val_fraction=0.3
        ),
        finetune=FinetuneConfig(epochs=1, batch_size=2),
        n_kl_pairs=3,
        n_kl_sequences=2,
        seed=1,
    )
    report = compare_mlm_vs_pmlm(cfg=cfg, out_dir=tmp_path)
    mlm, pmlm = report.arms

    assert (mlm.arm, pmlm.arm) == ("mlm", "pmlm")
    assert mlm.lambda_ == 0.0 and pmlm.lambda_ == 1.0
    assert not mlm.pair_head_updated and pmlm.pair_head_updated
    assert mlm.delta_acc is None and pmlm.delta_acc is not None
    assert mlm.l_pmlm is None and pmlm.l_pmlm is not None
    assert 0.0 < report.pair_nll_oracle and 0.0 < report.pair_nll_floor
    # the run seed only drives sampling and training; the preset couplings stay fixed
    assert report.spec_hash == canonical_hash(spec_to_document(synth_preset("accept-L8")))
    assert mlm.shared_config_hash == pmlm.shared_config_hash == report.shared_config_hash
    assert mlm.run_hash != pmlm.run_hash

    rows = jsonl_loader(tmp_path / "compare.jsonl")
    assert rows[0]["kind"] == "header" and rows[0]["spec_hash"] == report.spec_hash
    assert [r["arm"] for r in rows[1:]] == ["mlm", "pmlm"]
    assert "MLM vs PMLM" in report.get_rendered_str()
