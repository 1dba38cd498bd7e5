"""
Transformer encoder producing contextual vectors h_1..h_N for X_{/M}.

Pre-layer-norm blocks: x + Attn(LN(x)) then x + FFN(LN(x)), with a final
layer norm. Sinusoidal positions are added to the token embeddings once,
at the input, and never trained.
"""

import logging
from typing import Dict, List, Optional

import numpy as np
from pydantic import Field, model_validator

from pairwise_mlm.exceptions import (NonFiniteActivationError,
                                     NonFiniteError, ShapeMismatchError)
from pairwise_mlm.models import PairwiseMlmBaseModel
from pairwise_mlm.numcore import (Module, Tensor, dropout, gather, gelu,
                                  get_default_dtype, layer_norm, parameter,
                                  softmax)
from pairwise_mlm.seqio import NUM_PAIRS, NUM_RESIDUES, VOCAB_SIZE

logger = logging.getLogger(__name__)

# additive attention bias on padded keys; exp() of it underflows to exactly 0
_MASKED_SCORE = -1e9


class ModelConfig(PairwiseMlmBaseModel):
    hidden_dim: int = Field(64, ge=2)
    ffn_dim: int = Field(256, ge=1)
    n_layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    max_len: int = Field(128, ge=3)
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    vocab_size: int = VOCAB_SIZE
    n_residues: int = NUM_RESIDUES
    n_pairs: int = NUM_PAIRS
    pair_hidden_dim: Optional[int] = Field(None, ge=1)
    lambda_: float = Field(1.0, ge=0.0, alias="lambda")
    pmlm_only_with_diagonal: bool = False
    init_std: float = Field(0.02, gt=0.0)
    layer_norm_eps: float = Field(1e-5, gt=0.0)

    @model_validator(mode="after")
    def _check_dims(self) -> "ModelConfig":
        if self.hidden_dim % self.n_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}"
            )
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even for sinusoidal positions")
        if self.n_pairs != self.n_residues ** 2:
            raise ValueError("n_pairs must equal n_residues squared")
        return self

    @property
    def d_pair(self) -> int:
        return self.pair_hidden_dim or self.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def uses_token_head(self) -> bool:
        return not self.pmlm_only_with_diagonal

    @property
    def uses_pair_head(self) -> bool:
        return self.pmlm_only_with_diagonal or self.lambda_ > 0


MODEL_PRESETS: Dict[str, Dict] = {
    # gradient checks
    "tiny": dict(hidden_dim=16, ffn_dim=32, n_layers=2, n_heads=2, max_len=16, dropout_rate=0.0, init_std=0.3),
    "desk": dict(hidden_dim=64, ffn_dim=256, n_layers=4, n_heads=4, max_len=128, dropout_rate=0.1),
    # full-scale shapes, too large to train here
    "mlm-base": dict(hidden_dim=768, ffn_dim=3072, n_layers=12, n_heads=12, max_len=512, lambda_=0.0),
    "pmlm-base": dict(hidden_dim=768, ffn_dim=3072, n_layers=12, n_heads=12, max_len=512, lambda_=1.0),
    "pmlm-large": dict(hidden_dim=768, ffn_dim=3072, n_layers=34, n_heads=12, max_len=1024, lambda_=1.0),
    "pmlm-xl": dict(
        hidden_dim=1280, ffn_dim=5120, n_layers=36, n_heads=20, max_len=512, pmlm_only_with_diagonal=True
    ),
}


def model_preset(name: str, **overrides) -> ModelConfig:
    try:
        values = dict(MODEL_PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown model preset '{name}', choose from {sorted(MODEL_PRESETS)}")
    values.update(overrides)
    return ModelConfig(**values)


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    """
    Row p, columns (2k, 2k+1) = (sin(p / 10000^(2k/d)), cos(p / 10000^(2k/d))).

    Raises:
        ShapeMismatchError: if d is odd.
    """
    if d % 2:
        raise ShapeMismatchError(f"sinusoidal positions need an even dimension, got {d}")
    positions = np.arange(max_len, dtype=np.float64)[:, None]
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    angles = positions * inv_freq[None, :]
    table = np.empty((max_len, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(get_default_dtype())


def _zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=get_default_dtype())


def _ones(shape) -> np.ndarray:
    return np.ones(shape, dtype=get_default_dtype())


class EncoderLayerParams(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, f, std = cfg.hidden_dim, cfg.ffn_dim, cfg.init_std
        self.ln1_gain = parameter(_ones(d))
        self.ln1_bias = parameter(_zeros(d))
        self.w_q = parameter(_normal(rng, (d, d), std))
        self.w_k = parameter(_normal(rng, (d, d), std))
        self.w_v = parameter(_normal(rng, (d, d), std))
        self.w_o = parameter(_normal(rng, (d, d), std))
        self.ln2_gain = parameter(_ones(d))
        self.ln2_bias = parameter(_zeros(d))
        self.w_ffn1 = parameter(_normal(rng, (d, f), std))
        self.b_ffn1 = parameter(_zeros(f))
        self.w_ffn2 = parameter(_normal(rng, (f, d), std))
        self.b_ffn2 = parameter(_zeros(d))


class EncoderParams(Module):
    """θ: token embeddings, per-layer weights and the final layer norm."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.token_embedding = parameter(_normal(rng, (cfg.vocab_size, cfg.hidden_dim), cfg.init_std))
        self.layers: List[EncoderLayerParams] = [
            EncoderLayerParams(cfg, rng) for _ in range(cfg.n_layers)
        ]
        self.final_ln_gain = parameter(_ones(cfg.hidden_dim))
        self.final_ln_bias = parameter(_zeros(cfg.hidden_dim))
        self.positions = sinusoidal_positions(cfg.max_len, cfg.hidden_dim)


def _check_activation(x: Tensor, layer_name: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteActivationError(layer_name)
    return x


def _self_attention(
    layer: EncoderLayerParams,
    x: Tensor,
    key_bias: Tensor,
    cfg: ModelConfig,
    name: str,
    train: bool,
    rng: Optional[np.random.Generator],
) -> Tensor:
    batch, length, d = x.shape
    heads, head_dim = cfg.n_heads, cfg.head_dim

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(batch, length, heads, head_dim).transpose(0, 2, 1, 3)

    q = split_heads(x @ layer.w_q)
    k = split_heads(x @ layer.w_k)
    v = split_heads(x @ layer.w_v)

    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(head_dim)) + key_bias
    weights = softmax(scores.named(f"{name}.attention.scores"), axis=-1)
    weights = dropout(weights, cfg.dropout_rate, rng, train)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, length, d)
    return context @ layer.w_o


def encode(
    params: EncoderParams,
    input_ids: np.ndarray,
    attention_mask: np.ndarray,
    cfg: ModelConfig,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Maps (batch, len) token ids to (batch, len, d) hidden states.

    Keys where `attention_mask` is False get zero attention weight from
    every query, so padding never influences real positions.

    Raises:
        ShapeMismatchError: on ids outside the vocabulary or a length above max_len.
        NonFiniteActivationError: naming the first layer whose output is not finite.
    """
    input_ids = np.asarray(input_ids, dtype=np.int64)
    attention_mask = np.asarray(attention_mask, dtype=bool)
    if input_ids.ndim != 2 or input_ids.shape != attention_mask.shape:
        raise ShapeMismatchError(
            f"input ids {input_ids.shape} and attention mask {attention_mask.shape} must be (batch, len)"
        )
    if input_ids.size and (input_ids.min() < 0 or input_ids.max() >= cfg.vocab_size):
        raise ShapeMismatchError(f"token ids must lie in [0, {cfg.vocab_size})")
    batch, length = input_ids.shape
    if length > cfg.max_len:
        raise ShapeMismatchError(f"input length {length} exceeds max_len {cfg.max_len}")

    dtype = params.token_embedding.dtype
    positions = Tensor(params.positions[:length], dtype=dtype)
    key_bias = Tensor(
        np.where(attention_mask, 0.0, _MASKED_SCORE)[:, None, None, :], dtype=dtype
    )

    x = gather(params.token_embedding, input_ids) + positions
    x = _check_activation(dropout(x, cfg.dropout_rate, rng, train), "embedding")

    for index, layer in enumerate(params.layers):
        name = f"layer{index}"
        h = layer_norm(x, layer.ln1_gain, layer.ln1_bias, cfg.layer_norm_eps)
        try:
            h = _self_attention(layer, h, key_bias, cfg, name, train, rng)
        except NonFiniteError as err:
            raise NonFiniteActivationError(name) from err
        x = x + dropout(h, cfg.dropout_rate, rng, train)

        h = layer_norm(x, layer.ln2_gain, layer.ln2_bias, cfg.layer_norm_eps)
        h = gelu(h @ layer.w_ffn1 + layer.b_ffn1) @ layer.w_ffn2 + layer.b_ffn2
        x = x + dropout(h, cfg.dropout_rate, rng, train)
        _check_activation(x, name)

    out = layer_norm(x, params.final_ln_gain, params.final_ln_bias, cfg.layer_norm_eps)
    return _check_activation(out, "final_layer_norm")
