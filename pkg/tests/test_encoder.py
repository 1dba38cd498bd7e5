import numpy as np
import pytest
from numpy.testing import assert_allclose

from pairwise_mlm.encoder import (MODEL_PRESETS, EncoderParams, ModelConfig,
                                  encode, model_preset, sinusoidal_positions)
from pairwise_mlm.exceptions import (ConfigValidationError,
                                     NonFiniteActivationError,
                                     ShapeMismatchError)
from pairwise_mlm.numcore import Tensor
from pairwise_mlm.seqio import BOS, EOS, MASK, PAD
from pairwise_mlm.utils import make_rng


### FIXTURES ###
@pytest.fixture
def tiny_cfg():
    return model_preset("tiny")


@pytest.fixture
def tiny_params(tiny_cfg):
    return EncoderParams(tiny_cfg, make_rng(0))


### TESTS ###
def test_presets_validate():
    for name in MODEL_PRESETS:
        cfg = model_preset(name)
        assert cfg.hidden_dim % cfg.n_heads == 0, name

    assert model_preset("mlm-base").lambda_ == 0.0
    assert model_preset("pmlm-xl").pmlm_only_with_diagonal
    with pytest.raises(KeyError):
        model_preset("huge")


def test_config_rejects_bad_dimensions():
    with pytest.raises(ConfigValidationError):
        ModelConfig.create({"hidden_dim": 18, "n_heads": 4})
    with pytest.raises(ConfigValidationError):
        ModelConfig.create({"hidden_dim": 9, "n_heads": 3})
    with pytest.raises(ConfigValidationError):
        ModelConfig.create({"lambda": -1.0})


def test_config_head_usage():
    assert not model_preset("tiny", lambda_=0.0).uses_pair_head
    pmlm_only = model_preset("tiny", pmlm_only_with_diagonal=True, lambda_=0.0)
    assert pmlm_only.uses_pair_head and not pmlm_only.uses_token_head


def test_sinusoidal_positions():
    table = sinusoidal_positions(8, 6)

    assert table.shape == (8, 6)
    assert_allclose(table[0, 0::2], 0.0)
    assert_allclose(table[0, 1::2], 1.0)
    assert_allclose(table[1, :2], [0.8415, 0.5403], atol=1e-4)

    with pytest.raises(ShapeMismatchError):
        sinusoidal_positions(8, 5)


def test_single_token_shape(tiny_cfg):
    cfg = tiny_cfg.updated(n_layers=1)
    out = encode(EncoderParams(cfg, make_rng(0)), np.array([[MASK]]), np.array([[True]]), cfg)

    assert out.shape == (1, 1, cfg.hidden_dim)
    assert np.all(np.isfinite(out.data))


def test_identical_sequences_identical_outputs(tiny_params, tiny_cfg):
    ids = np.array([[BOS, 0, MASK, 5, EOS]] * 2)
    out = encode(tiny_params, ids, np.ones_like(ids, dtype=bool), tiny_cfg).data

    assert_allclose(out[0], out[1], atol=1e-6)


def test_padding_does_not_leak(tiny_params, tiny_cfg):
    short = np.array([[BOS, 3, MASK, 7, EOS, PAD, PAD, PAD]])
    other_pad = short.copy()
    other_pad[0, 5:] = [MASK, 1, 2]
    mask = np.array([[True] * 5 + [False] * 3])

    first = encode(tiny_params, short, mask, tiny_cfg).data
    second = encode(tiny_params, other_pad, mask, tiny_cfg).data

    assert_allclose(first[0, :5], second[0, :5], atol=1e-6)


def test_batch_composition_does_not_matter(tiny_params, tiny_cfg):
    a = np.array([BOS, 3, MASK, 7, EOS, PAD])
    b = np.array([BOS, 1, 2, 3, 4, EOS])
    mask_a = np.array([True] * 5 + [False])
    mask_b = np.ones(6, dtype=bool)

    alone = encode(tiny_params, a[None], mask_a[None], tiny_cfg).data
    together = encode(tiny_params, np.stack([b, a]), np.stack([mask_b, mask_a]), tiny_cfg).data

    assert_allclose(alone[0, :5], together[1, :5], atol=1e-5)


def test_dropout_only_in_training(tiny_params):
    cfg = model_preset("tiny", dropout_rate=0.5)
    ids = np.array([[BOS, 3, 4, 5, EOS]])
    mask = np.ones_like(ids, dtype=bool)

    eval_a = encode(tiny_params, ids, mask, cfg).data
    eval_b = encode(tiny_params, ids, mask, cfg).data
    trained = encode(tiny_params, ids, mask, cfg, train=True, rng=make_rng(1)).data

    assert_allclose(eval_a, eval_b)
    assert not np.allclose(eval_a, trained)


def test_input_validation(tiny_params, tiny_cfg):
    with pytest.raises(ShapeMismatchError):
        encode(tiny_params, np.array([[BOS, 30]]), np.ones((1, 2), dtype=bool), tiny_cfg)
    with pytest.raises(ShapeMismatchError):
        encode(tiny_params, np.zeros((1, 17), dtype=int), np.ones((1, 17), dtype=bool), tiny_cfg)
    with pytest.raises(ShapeMismatchError):
        encode(tiny_params, np.zeros((1, 4), dtype=int), np.ones((1, 3), dtype=bool), tiny_cfg)


def test_non_finite_embedding_names_layer(tiny_params, tiny_cfg):
    tiny_params.token_embedding.data[MASK, 0] = np.nan

    with pytest.raises(NonFiniteActivationError) as err:
        encode(tiny_params, np.array([[BOS, MASK, EOS]]), np.ones((1, 3), dtype=bool), tiny_cfg)

    assert err.value.layer_name == "embedding"


def test_gradients_reach_every_parameter(tiny_params, tiny_cfg):
    ids = np.array([[BOS, 3, MASK, 7, EOS]])
    out = encode(tiny_params, ids, np.ones_like(ids, dtype=bool), tiny_cfg)
    projection = Tensor(np.random.default_rng(0).normal(size=out.shape), dtype=out.dtype)
    (out * projection).sum().backward()

    for name, param in tiny_params.named_parameters():
        assert param.grad is not None, f"{name} received no gradient"
        assert np.all(np.isfinite(param.grad)), name
