import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pairwise_mlm.exceptions import ExactModeBoundError, SpecValidationError
from pairwise_mlm.synthgen import (PRESET_SPEC_SEED, SYNTH_PRESETS,
                                   CoupledModelSpec, Coupling,
                                   contacts_from_spec, coupling_components,
                                   exact_conditional, exact_mode_available,
                                   load_spec, oracle_pair_losses, random_spec,
                                   sample_array, sample_sequences, save_spec,
                                   spec_from_document, synth_preset)
from pairwise_mlm.utils import make_rng
from tests.utils import assert_frequencies_within_ci, pair_frequencies


### FIXTURES ###
@pytest.fixture
def toy_spec_yaml_file():
    return "tests/mocked_data/toy_spec.yaml"


@pytest.fixture
def small_spec():
    return random_spec(4, 3, 3, make_rng(8), coupling_scale=1.2, field_scale=0.6)


def enumerate_joint(spec: CoupledModelSpec) -> np.ndarray:
    states = np.array(list(itertools.product(range(spec.alphabet_size), repeat=spec.length)))
    weights = np.exp(spec.energy(states))
    return (weights / weights.sum()).reshape((spec.alphabet_size,) * spec.length)


def position_marginals(joint: np.ndarray) -> np.ndarray:
    axes = range(joint.ndim)
    return np.stack([joint.sum(axis=tuple(a for a in axes if a != p)) for p in axes])


### TESTS ###
def test_presets_build():
    for name in SYNTH_PRESETS:
        spec = synth_preset(name, spec_seed=1)
        assert spec.length >= 2, name

    assert len(synth_preset("accept-L8").coupled_pairs) == 3
    assert synth_preset("independent-L8").coupled_pairs == ()
    assert not exact_mode_available(synth_preset("gibbs-L16"))
    with pytest.raises(SpecValidationError):
        synth_preset("nope")


def test_presets_are_seeded():
    assert synth_preset("accept-L8", spec_seed=3) == synth_preset("accept-L8", spec_seed=3)
    assert synth_preset("accept-L8", spec_seed=3) != synth_preset("accept-L8", spec_seed=4)


def test_preset_couplings_do_not_follow_the_run_seed():
    fixed = synth_preset("accept-L8")

    assert fixed == synth_preset("accept-L8", spec_seed=PRESET_SPEC_SEED)
    # two runs with different seeds sample different sequences from the same model
    first = sample_sequences(synth_preset("accept-L8"), 50, make_rng(0))
    second = sample_sequences(synth_preset("accept-L8"), 50, make_rng(1))
    assert first != second
    assert synth_preset("accept-L8") == fixed


def test_coupling_orientation(toy_spec_yaml_file):
    spec = load_spec(toy_spec_yaml_file)
    (coupling,) = spec.couplings

    assert (coupling.i, coupling.j) == (0, 2)
    assert coupling.matrix == ((1.0, -1.0), (0.0, 1.0))
    assert spec.coupled_pairs == ((0, 2),)
    assert contacts_from_spec(spec).contacts == ((0, 2),)


def test_spec_validation():
    with pytest.raises(SpecValidationError):
        Coupling(i=1, j=1, matrix=((0.0, 0.0), (0.0, 0.0)))
    with pytest.raises(SpecValidationError):
        CoupledModelSpec(length=2, alphabet_size=2, fields=((0.0, 0.0),))
    with pytest.raises(SpecValidationError):
        CoupledModelSpec(
            length=2,
            alphabet_size=2,
            fields=((0.0, 0.0), (0.0, 0.0)),
            couplings=(Coupling(i=0, j=5, matrix=((1.0, 0.0), (0.0, 1.0))),),
        )
    with pytest.raises(SpecValidationError):
        spec_from_document(
            {"length": 2, "alphabet_size": 2, "fields": [[0, 0], [0, 0]], "couplings": [], "coupled_pairs": [[0, 1]]}
        )


def test_toy_pair_joint():
    spec = synth_preset("toy-pair")
    oracle = exact_conditional(spec, 0, 1, [0, 0])
    e = math.e

    assert_allclose(oracle.joint, np.array([[e, 1.0], [1.0, e]]) / (2 * e + 2), rtol=1e-12)
    assert_allclose(oracle.marginal_i, [0.5, 0.5], rtol=1e-12)


def test_toy_pair_sample_frequencies():
    spec = synth_preset("toy-pair")
    samples = sample_array(spec, 50_000, make_rng(0))
    freq = np.mean((samples[:, 0] == 0) & (samples[:, 1] == 0))

    assert freq == pytest.approx(0.3655, abs=0.01)


def test_exact_conditional_uses_context(toy_spec_yaml_file):
    spec = load_spec(toy_spec_yaml_file)
    oracle = exact_conditional(spec, 2, 0, {1: 1})
    weights = np.exp(np.array([[1.0, -1.0], [0.0, 1.0]])).T

    assert_allclose(oracle.joint, weights / weights.sum(), rtol=1e-12)


def test_independent_positions_factorize(small_spec):
    spec = CoupledModelSpec(length=4, alphabet_size=3, fields=small_spec.fields)
    oracle = exact_conditional(spec, 0, 3, [0, 2, 1, 0])

    assert_allclose(oracle.joint, np.outer(oracle.marginal_i, oracle.marginal_j), atol=1e-12)


def test_exact_conditional_errors(small_spec):
    with pytest.raises(SpecValidationError):
        exact_conditional(small_spec, 1, 1, [0, 0, 0, 0])
    with pytest.raises(SpecValidationError):
        exact_conditional(small_spec, 0, 1, {2: 0})
    with pytest.raises(ExactModeBoundError):
        exact_conditional(synth_preset("gibbs-L16"), 0, 1, [0] * 16)


def test_sample_needs_positive_n(small_spec):
    with pytest.raises(SpecValidationError):
        sample_array(small_spec, 0, make_rng(0))


def test_exact_mode_length_bound():
    with pytest.raises(ExactModeBoundError):
        sample_array(synth_preset("gibbs-L16"), 10, make_rng(0), mode="exact")


def test_uniform_spec_frequencies():
    samples = sample_array(synth_preset("independent-L8"), 20_000, make_rng(1))
    observed = np.stack([np.bincount(samples[:, p], minlength=20) / 20_000 for p in range(8)])

    assert_frequencies_within_ci(observed, np.full((8, 20), 0.05), 20_000, what="letter frequency")


def test_exact_sampler_matches_enumeration(small_spec):
    n = 40_000
    samples = sample_array(small_spec, n, make_rng(2))
    expected = position_marginals(enumerate_joint(small_spec))
    observed = np.stack([np.bincount(samples[:, p], minlength=3) / n for p in range(4)])

    assert_frequencies_within_ci(observed, expected, n, what="exact marginal")


def test_components():
    spec = CoupledModelSpec(
        length=5,
        alphabet_size=2,
        fields=[[0.0, 0.0]] * 5,
        couplings=(
            Coupling(i=0, j=3, matrix=((1.0, 0.0), (0.0, 1.0))),
            Coupling(i=3, j=4, matrix=((1.0, 0.0), (0.0, 1.0))),
        ),
    )

    assert coupling_components(spec) == [[0, 3, 4], [1], [2]]


def test_gibbs_matches_exact_marginals(small_spec):
    samples = sample_array(small_spec, 5_000, make_rng(3), mode="gibbs", burn_in=200, thin=5)
    expected = position_marginals(enumerate_joint(small_spec))
    observed = np.stack([np.bincount(samples[:, p], minlength=3) / len(samples) for p in range(4)])

    assert samples.shape == (5_000, 4)
    assert_allclose(observed, expected, atol=0.03)


@pytest.mark.slow
def test_gibbs_pair_frequencies_within_intervals(small_spec):
    n = 50_000
    samples = sample_array(small_spec, n, make_rng(4), mode="gibbs")
    joint = enumerate_joint(small_spec)

    for i, j in itertools.combinations(range(4), 2):
        other = tuple(a for a in range(4) if a not in (i, j))
        expected = joint.sum(axis=other)
        observed = pair_frequencies(samples[:, [i, j]], 3)[0, 1]
        assert_frequencies_within_ci(observed, expected, n, n_cells=6 * 9, what=f"pair ({i}, {j})")


def test_sampling_is_deterministic(small_spec):
    first = sample_sequences(small_spec, 100, make_rng(5))
    second = sample_sequences(small_spec, 100, make_rng(5))

    assert first == second
    assert first[0].identifier == "synth00" and first[-1].identifier == "synth99"
    assert max(max(r.residues) for r in first) < 3


def test_spec_save_and_load(tmp_path):
    spec = synth_preset("accept-L8", spec_seed=2)
    for suffix in ("yaml", "json", "toml"):
        path = tmp_path / f"spec.{suffix}"
        save_spec(spec, path)
        assert load_spec(path) == spec, suffix


def test_oracle_losses():
    coupled = synth_preset("toy-pair")
    samples = sample_array(coupled, 2_000, make_rng(6))
    joint_nll, product_nll = oracle_pair_losses(coupled, samples, [(0, 1)])

    assert joint_nll < product_nll
    assert product_nll == pytest.approx(2 * math.log(2), rel=1e-9)

    independent = CoupledModelSpec(length=2, alphabet_size=2, fields=((0.3, 0.0), (0.0, 0.0)))
    joint_nll, product_nll = oracle_pair_losses(independent, sample_array(independent, 500, make_rng(7)), [(0, 1)])
    assert joint_nll == pytest.approx(product_nll, rel=1e-12)
