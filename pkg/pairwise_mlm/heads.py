"""
Token and pair prediction heads, the MLM / PMLM losses and accuracy metrics.

Both heads are two-layer MLPs with a GELU in between. The token head maps a
hidden vector to 20 residue logits; the pair head maps the pair feature
concat(h_i * h_j, h_i - h_j) to 400 logits over ordered residue pairs.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from pairwise_mlm.encoder import EncoderParams, ModelConfig, encode
from pairwise_mlm.exceptions import EmptyMaskError, ShapeMismatchError
from pairwise_mlm.masking import (MaskedBatch, collate_batch,
                                  mask_positions_exactly)
from pairwise_mlm.numcore import (Module, Tensor, concat, cross_entropy,
                                  gather, gelu, get_default_dtype, no_grad,
                                  parameter, softmax_np)
from pairwise_mlm.seqio import NUM_PAIRS, NUM_RESIDUES, SequenceRecord

logger = logging.getLogger(__name__)

def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(get_default_dtype())


class TokenHeadParams(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.w1 = parameter(_normal(rng, (d, d), cfg.init_std))
        self.b1 = parameter(np.zeros(d, dtype=get_default_dtype()))
        self.w2 = parameter(_normal(rng, (d, cfg.n_residues), cfg.init_std))
        self.b2 = parameter(np.zeros(cfg.n_residues, dtype=get_default_dtype()))

    def __call__(self, h: Tensor) -> Tensor:
        return gelu(h @ self.w1 + self.b1) @ self.w2 + self.b2


class PairHeadParams(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, d_pair = cfg.hidden_dim, cfg.d_pair
        self.w1 = parameter(_normal(rng, (2 * d, d_pair), cfg.init_std))
        self.b1 = parameter(np.zeros(d_pair, dtype=get_default_dtype()))
        self.w2 = parameter(_normal(rng, (d_pair, cfg.n_pairs), cfg.init_std))
        self.b2 = parameter(np.zeros(cfg.n_pairs, dtype=get_default_dtype()))

    def hidden(self, feature: Tensor) -> Tensor:
        """Activation of the first layer; the contact probe reads this."""
        return gelu(feature @ self.w1 + self.b1)

    def __call__(self, feature: Tensor) -> Tensor:
        return self.hidden(feature) @ self.w2 + self.b2


def pair_feature(h_i: Tensor, h_j: Tensor) -> Tensor:
    """
    concat(h_i ⊙ h_j, h_i − h_j) along the last axis. Works row-wise on
    (n, d) inputs as well as on single vectors.

    Raises:
        ShapeMismatchError: if the inputs differ in shape.
    """
    if h_i.shape != h_j.shape:
        raise ShapeMismatchError(f"pair_feature inputs differ: {h_i.shape} vs {h_j.shape}")
    return concat([h_i * h_j, h_i - h_j], axis=-1)


def mlm_loss(token_logits: Tensor, token_labels: np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood of the true residue over masked positions.

    Raises:
        EmptyMaskError: if there are no masked positions.
    """
    labels = np.asarray(token_labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise EmptyMaskError("mlm_loss needs at least one masked position")
    return cross_entropy(token_logits, labels).mean()


def pmlm_loss(
    pair_logits: Optional[Tensor], pair_labels: np.ndarray, counters: Optional[Counter] = None
) -> Tensor:
    """
    Mean negative log-likelihood of the true residue pair over pair labels.
    An empty label set (every |M| == 1) contributes 0 and bumps
    `counters["empty_pair_batches"]` when a counter is given.
    """
    labels = np.asarray(pair_labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        if counters is not None:
            counters["empty_pair_batches"] += 1
        logger.warning("empty_pair_labels | pair loss set to 0")
        return Tensor(0.0)
    return cross_entropy(pair_logits, labels).mean()


def combined_loss(
    mlm: Optional[Union[Tensor, float]],
    pmlm: Optional[Union[Tensor, float]],
    lambda_: float,
) -> Union[Tensor, float]:
    """
    mlm + lambda_ * pmlm. `mlm=None` is the PMLM-only variant (token head
    off), where the loss is the pair loss alone. `pmlm=None` or
    lambda_ == 0 degenerates to plain MLM.
    """
    if lambda_ < 0:
        raise ValueError(f"lambda must be non-negative, got {lambda_}")
    if mlm is None:
        if pmlm is None:
            raise EmptyMaskError("neither token nor pair loss is available")
        return pmlm
    if pmlm is None or lambda_ == 0:
        return mlm
    return mlm + pmlm * lambda_


def masked_accuracy(dists: np.ndarray, labels: Sequence[int]) -> float:
    """
    Fraction of rows whose argmax equals the label; argmax ties go to the
    lowest index. Returns 0.0 for an empty label list.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        return 0.0
    dists = np.asarray(dists)
    if dists.ndim != 2 or dists.shape[0] != labels.size:
        raise ShapeMismatchError(f"need one distribution per label, got {dists.shape} for {labels.size}")
    return float(np.mean(np.argmax(dists, axis=1) == labels))


def delta_acc(acc_pmlm: float, acc_mlm: float) -> float:
    return acc_pmlm - acc_mlm * acc_mlm


def delta_acc_ratio(acc_pmlm: float, acc_mlm: float) -> Optional[float]:
    if acc_pmlm == 0:
        return None
    return delta_acc(acc_pmlm, acc_mlm) / acc_pmlm


def factorized_pair_logits(logits_i: np.ndarray, logits_j: np.ndarray) -> np.ndarray:
    """
    Outer-sum pair logits: logit(a, b) = logits_i[a] + logits_j[b], flattened
    in pair-id order. Their softmax is exactly the product of the two
    marginal softmaxes.
    """
    logits_i = np.asarray(logits_i)
    logits_j = np.asarray(logits_j)
    outer = logits_i[..., :, None] + logits_j[..., None, :]
    return outer.reshape(*outer.shape[:-2], -1)


def marginals_from_diagonal_joint(joint: np.ndarray) -> np.ndarray:
    """Token marginals of position i from the joint over (x_i, x_i), summed over the second index."""
    joint = np.asarray(joint)
    return joint.reshape(*joint.shape[:-1], NUM_RESIDUES, NUM_RESIDUES).sum(axis=-1)


@dataclass
class ForwardOutput:
    hidden: Tensor
    token_logits: Optional[Tensor]
    pair_logits: Optional[Tensor]


@dataclass
class LossOutput:
    total: Tensor
    mlm: Optional[Tensor]
    pmlm: Optional[Tensor]
    forward: ForwardOutput


class PmlmModel(Module):
    """
    Encoder plus both heads. Both heads always exist so every checkpoint
    has the same arrays; which ones are evaluated depends on the config
    (λ == 0 skips the pair head, PMLM-only mode skips the token head).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.encoder = EncoderParams(cfg, rng)
        self.token_head = TokenHeadParams(cfg, rng)
        self.pair_head = PairHeadParams(cfg, rng)
        self.config = cfg
        # per-model tallies, e.g. batches without pair labels
        self.loss_counters: Counter = Counter()

    def forward(
        self,
        batch: MaskedBatch,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        with_token_head: Optional[bool] = None,
        with_pair_head: Optional[bool] = None,
    ) -> ForwardOutput:
        cfg = self.config
        with_token_head = cfg.uses_token_head if with_token_head is None else with_token_head
        with_pair_head = cfg.uses_pair_head if with_pair_head is None else with_pair_head

        hidden = encode(self.encoder, batch.input_ids, batch.attention_mask, cfg, train=train, rng=rng)
        batch_size, length, d = hidden.shape
        flat = hidden.reshape(batch_size * length, d)

        token_logits = None
        if with_token_head and batch.num_tokens:
            rows = gather(flat, batch.token_batch * length + batch.token_pos)
            token_logits = self.token_head(rows)

        pair_logits = None
        if with_pair_head and batch.num_pairs:
            h_i = gather(flat, batch.pair_batch * length + batch.pair_i)
            h_j = gather(flat, batch.pair_batch * length + batch.pair_j)
            pair_logits = self.pair_head(pair_feature(h_i, h_j))

        return ForwardOutput(hidden=hidden, token_logits=token_logits, pair_logits=pair_logits)

    def losses(
        self,
        batch: MaskedBatch,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> LossOutput:
        cfg = self.config
        out = self.forward(batch, train=train, rng=rng)
        mlm = mlm_loss(out.token_logits, batch.token_labels) if cfg.uses_token_head else None
        pmlm = pmlm_loss(out.pair_logits, batch.pair_labels, self.loss_counters) if cfg.uses_pair_head else None
        total = combined_loss(mlm, pmlm, 1.0 if cfg.pmlm_only_with_diagonal else cfg.lambda_)
        return LossOutput(total=total, mlm=mlm, pmlm=pmlm, forward=out)

    def predict_pairs(
        self,
        record: SequenceRecord,
        pairs: Iterable[Tuple[int, int]],
        chunk_size: int = 32,
    ) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """
        For each residue pair (i, j), 0-based, masks exactly those two
        positions and returns (P(x_i), P(x_j), P(x_i, x_j)) with the joint
        as a 20 x 20 array. Copies of the sequence, one per pair, are
        encoded together in chunks of `chunk_size`.

        In PMLM-only mode the marginals come from the diagonal joints at
        (i, i) and (j, j).
        """
        cfg = self.config
        pairs = [(int(i), int(j)) for i, j in pairs]
        results: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = []

        for start in range(0, len(pairs), chunk_size):
            chunk = pairs[start : start + chunk_size]
            masked = [
                mask_positions_exactly(record, (i + 1, j + 1), include_diagonal=cfg.pmlm_only_with_diagonal)
                for i, j in chunk
            ]
            batch = collate_batch(masked, cfg.max_len, pad_to_longest=True)
            with no_grad():
                out = self.forward(batch, train=False, with_token_head=cfg.uses_token_head, with_pair_head=True)

            pair_probs = softmax_np(out.pair_logits.data.astype(np.float64), axis=-1)
            token_probs = (
                softmax_np(out.token_logits.data.astype(np.float64), axis=-1)
                if out.token_logits is not None
                else None
            )

            for b, (i, j) in enumerate(chunk):
                rows = {
                    (int(batch.pair_i[k]), int(batch.pair_j[k])): k
                    for k in range(batch.pair_offsets[b], _end(batch.pair_offsets, b, batch.num_pairs))
                }
                joint = pair_probs[rows[(i + 1, j + 1)]].reshape(NUM_RESIDUES, NUM_RESIDUES)
                if token_probs is not None:
                    first = batch.token_offsets[b]
                    marg_i, marg_j = token_probs[first], token_probs[first + 1]
                    if i > j:
                        marg_i, marg_j = marg_j, marg_i
                else:
                    marg_i = marginals_from_diagonal_joint(pair_probs[rows[(i + 1, i + 1)]])
                    marg_j = marginals_from_diagonal_joint(pair_probs[rows[(j + 1, j + 1)]])
                results.append((marg_i, marg_j, joint))

        return results

    def predict_pair(self, record: SequenceRecord, i: int, j: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.predict_pairs(record, [(i, j)])[0]


def _end(offsets: np.ndarray, b: int, total: int) -> int:
    return int(offsets[b + 1]) if b + 1 < len(offsets) else total


class FactorizedPredictor:
    """
    Wraps a model so that its pair joint is replaced by the outer product
    of its own token marginals. Any KL diagnostic over it is zero, which
    makes it the reference for the degeneration property.
    """

    def __init__(self, model: PmlmModel):
        self.model = model

    def predict_pairs(self, record: SequenceRecord, pairs: Iterable[Tuple[int, int]]):
        results = []
        for marg_i, marg_j, _ in self.model.predict_pairs(record, pairs):
            logits = factorized_pair_logits(np.log(marg_i), np.log(marg_j))
            joint = softmax_np(logits).reshape(NUM_RESIDUES, NUM_RESIDUES)
            results.append((marg_i, marg_j, joint))
        return results

    def predict_pair(self, record: SequenceRecord, i: int, j: int):
        return self.predict_pairs(record, [(i, j)])[0]
