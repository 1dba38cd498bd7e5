"""
Post-training analysis: pairwise KL diagnostics, contact-prediction probes,
precision@L/k and the MLM-vs-PMLM comparison on synthetic data.

Residue positions are 0-based throughout; framing is handled internally.
"""

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import (Dict, Iterable, List, Literal, Mapping, Optional,
                    Protocol, Sequence, Tuple, Union)

import numpy as np
from pydantic import Field, model_validator

from pairwise_mlm.checkpoint import load_model, save_checkpoint
from pairwise_mlm.contacts import (RANGE_PRESETS, ContactMap, ContactRecord,
                                   RangeFilter, contact_record, range_filter)
from pairwise_mlm.dumpers import jsonl_dumper
from pairwise_mlm.encoder import ModelConfig, encode, model_preset
from pairwise_mlm.exceptions import (CheckpointError, DatasetSplitError,
                                     RangeFilterError, ScoreMapError,
                                     SequenceTooLongError, ShapeMismatchError)
from pairwise_mlm.heads import (FactorizedPredictor, PairHeadParams,
                                PmlmModel, pair_feature)
from pairwise_mlm.loaders import jsonl_loader
from pairwise_mlm.masking import (MaskingConfig, collate_batch,
                                  mask_positions_exactly)
from pairwise_mlm.models import (PairwiseMlmBaseModel,
                                 PairwiseMlmRenderableModel)
from pairwise_mlm.numcore import (Module, Tensor, cross_entropy, dropout,
                                  gather, get_default_dtype, no_grad,
                                  parameter, softmax_np)
from pairwise_mlm.seqio import SequenceRecord
from pairwise_mlm.synthgen import (PRESET_SPEC_SEED, CoupledModelSpec,
                                   SamplingMode, contacts_from_spec, embed_joint,
                                   exact_conditional, oracle_pair_losses,
                                   sample_sequences, spec_to_document,
                                   synth_preset)
from pairwise_mlm.trainer import (TrainConfig, TrainState, adam_step,
                                  clip_global_norm, init_model, pretrain,
                                  split_train_val)
from pairwise_mlm.utils import canonical_hash, make_rng, output_header

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12
KL_HISTOGRAM_WIDTH = 0.1

Pair = Tuple[int, int]
ScoreInput = Union[np.ndarray, Mapping[Pair, float]]

# seed streams
_SAMPLE_STREAM = 10
_HEAD_INIT_STREAM = 11
_FINETUNE_SHUFFLE_STREAM = 12
_FINETUNE_DROPOUT_STREAM = 13


class PairPredictor(Protocol):
    def predict_pairs(
        self, record: SequenceRecord, pairs: Iterable[Pair]
    ) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]: ...


# --- KL diagnostics ---


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = KL_FLOOR) -> float:
    """Σ p ln(p / (q + eps)) over the cells where p > 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatchError(f"distributions differ in shape: {p.shape} vs {q.shape}")
    support = p > 0
    return float(np.sum(p[support] * np.log(p[support] / (q[support] + eps))))


def kl_product_vs_joint(
    marginal_i: np.ndarray,
    marginal_j: np.ndarray,
    joint: np.ndarray,
    eps: float = KL_FLOOR,
) -> float:
    """
    KL(P(x_i) P(x_j) || P(x_i, x_j)). Zero when the joint factorizes; the
    `eps` floor keeps it finite when the joint has no mass where the
    product has some.

    Raises:
        ShapeMismatchError: if the joint is not len(marginal_i) x len(marginal_j).
    """
    marginal_i = np.asarray(marginal_i, dtype=np.float64).reshape(-1)
    marginal_j = np.asarray(marginal_j, dtype=np.float64).reshape(-1)
    joint = np.asarray(joint, dtype=np.float64)
    if joint.shape != (marginal_i.size, marginal_j.size):
        raise ShapeMismatchError(
            f"joint {joint.shape} does not match marginals ({marginal_i.size}, {marginal_j.size})"
        )
    return kl_divergence(np.outer(marginal_i, marginal_j), joint, eps)


class KlRecord(PairwiseMlmBaseModel):
    _key = ("identifier", "i", "j")

    kind: str = "kl"
    identifier: str
    i: int = Field(ge=0)
    j: int = Field(ge=0)
    kl: float = Field(ge=-1e-9)
    coupled: Optional[bool] = None


def select_pairs(length: int, selection: str = "all") -> List[Pair]:
    """
    `all`, a range filter name (`short`, `medium`, `long`, `medium-long`)
    or an explicit list such as `0-5,2-7`.
    """
    if selection == "all":
        return range_filter("all").pairs(length)
    if selection in RANGE_PRESETS:
        return range_filter(selection).pairs(length)
    pairs = []
    for item in selection.split(","):
        a, _, b = item.strip().partition("-")
        try:
            i, j = int(a), int(b)
        except ValueError:
            raise RangeFilterError(f"cannot read pair '{item}', expected i-j")
        if not (0 <= i < length and 0 <= j < length) or i == j:
            raise RangeFilterError(f"pair ({i}, {j}) is not valid for length {length}")
        pairs.append((min(i, j), max(i, j)))
    return sorted(set(pairs))


def scan_pair_kl(
    predictor: PairPredictor,
    record: SequenceRecord,
    pairs: Optional[Iterable[Pair]] = None,
    truth: Optional[ContactMap] = None,
) -> List[KlRecord]:
    """
    One KlRecord per pair: both positions masked, one encoder pass, token
    marginals against the pair joint. With `truth`, each record is flagged
    as coupled or not.
    """
    pairs = list(pairs) if pairs is not None else select_pairs(len(record))
    predictions = predictor.predict_pairs(record, pairs)
    contacts = set(truth.contacts) if truth is not None else None
    return [
        KlRecord(
            identifier=record.identifier,
            i=i,
            j=j,
            kl=max(kl_product_vs_joint(marg_i, marg_j, joint), 0.0),
            coupled=None if contacts is None else (min(i, j), max(i, j)) in contacts,
        )
        for (i, j), (marg_i, marg_j, joint) in zip(pairs, predictions)
    ]


def scan_dataset_kl(
    predictor: PairPredictor,
    records: Sequence[SequenceRecord],
    selection: str = "all",
    truths: Optional[Mapping[str, ContactMap]] = None,
) -> List[KlRecord]:
    out: List[KlRecord] = []
    for record in records:
        truth = truths.get(record.identifier) if truths else None
        out.extend(scan_pair_kl(predictor, record, select_pairs(len(record), selection), truth))
    logger.info("kl_scan_done | sequences=%d | records=%d", len(records), len(out))
    return out


def kl_histogram(
    values: Iterable[Union[float, KlRecord]],
    width: float = KL_HISTOGRAM_WIDTH,
) -> List[Tuple[float, int]]:
    """(bucket_low, count) for every bucket from 0 up to the largest value, empty ones included."""
    if width <= 0:
        raise ValueError(f"bucket width must be positive, got {width}")
    kls = np.array([v.kl if isinstance(v, KlRecord) else v for v in values], dtype=np.float64)
    if kls.size == 0:
        return []
    buckets = np.floor(np.maximum(kls, 0.0) / width).astype(np.int64)
    counts = np.bincount(buckets)
    return [(round(float(k * width), 10), int(c)) for k, c in enumerate(counts)]


def _median(values: Sequence[float]) -> Optional[float]:
    return float(np.median(values)) if len(values) else None


@dataclass
class KlSeparation:
    median_coupled: Optional[float]
    median_uncoupled: Optional[float]

    @property
    def ratio(self) -> Optional[float]:
        if self.median_coupled is None or not self.median_uncoupled:
            return None
        return self.median_coupled / self.median_uncoupled


def kl_separation(records: Iterable[KlRecord]) -> KlSeparation:
    records = list(records)
    return KlSeparation(
        median_coupled=_median([r.kl for r in records if r.coupled]),
        median_uncoupled=_median([r.kl for r in records if r.coupled is False]),
    )


class KlScanReport(PairwiseMlmRenderableModel):
    config_hash: str
    seed: int = 0
    selection: str
    n_sequences: int
    n_records: int
    median_kl: Optional[float]
    median_coupled: Optional[float]
    median_uncoupled: Optional[float]
    histogram_width: float
    histogram: Tuple[Tuple[float, int], ...]


def kl_scan_report(
    records: Sequence[KlRecord],
    config_hash: str,
    selection: str,
    width: float = KL_HISTOGRAM_WIDTH,
    seed: int = 0,
) -> KlScanReport:
    separation = kl_separation(records)
    return KlScanReport(
        config_hash=config_hash,
        seed=seed,
        selection=selection,
        n_sequences=len({r.identifier for r in records}),
        n_records=len(records),
        median_kl=_median([r.kl for r in records]),
        median_coupled=separation.median_coupled,
        median_uncoupled=separation.median_uncoupled,
        histogram_width=width,
        histogram=tuple(kl_histogram(records, width)),
    )


def kl_to_oracle(
    predictor: PairPredictor,
    spec: CoupledModelSpec,
    records: Sequence[SequenceRecord],
    pairs: Sequence[Pair],
    eps: float = KL_FLOOR,
) -> List[float]:
    """
    KL(exact conditional || predicted joint) for every record and pair; the
    record supplies the context of the exact conditional.
    """
    values = []
    for record in records:
        context = np.asarray(record.residues, dtype=np.int64)
        for (i, j), (_, _, joint) in zip(pairs, predictor.predict_pairs(record, pairs)):
            oracle = embed_joint(exact_conditional(spec, i, j, context).joint)
            values.append(kl_divergence(oracle, joint, eps))
    return values


# --- contact probe ---


def contact_pair_representation(
    h_i: Tensor,
    h_j: Tensor,
    pair_head: Optional[PairHeadParams] = None,
) -> Tensor:
    """
    First-layer activation of the pair head on pair_feature(h_i, h_j), of
    width d_pair. Without a pair head (MLM baselines) the pair feature
    itself, of width 2d.
    """
    feature = pair_feature(h_i, h_j)
    if pair_head is None:
        return feature
    return pair_head.hidden(feature)


def symmetric_pair_representation(
    h_i: Tensor, h_j: Tensor, pair_head: Optional[PairHeadParams] = None
) -> Tensor:
    return contact_pair_representation(h_i, h_j, pair_head) + contact_pair_representation(h_j, h_i, pair_head)


class ContactHeadParams(Module):
    """Dropout on the pair representation, then a linear map to (no-contact, contact) logits."""

    def __init__(self, in_dim: int, rng: np.random.Generator, dropout_rate: float = 0.5, init_std: float = 0.02):
        self.w = parameter(rng.normal(0.0, init_std, size=(in_dim, 2)).astype(get_default_dtype()))
        self.b = parameter(np.zeros(2, dtype=get_default_dtype()))
        self.dropout_rate = dropout_rate

    @property
    def in_dim(self) -> int:
        return int(self.w.shape[0])

    def __call__(self, features: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return dropout(features, self.dropout_rate, rng, train) @ self.w + self.b


Representation = Literal["auto", "pair_head", "fallback"]


class FinetuneConfig(PairwiseMlmBaseModel):
    mode: Literal["probe", "full"] = "probe"
    representation: Representation = "auto"
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    lr: float = Field(1e-3, gt=0.0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(8, ge=1)
    # pairs closer than this are neither trained on nor scored
    min_separation: int = Field(1, ge=1)
    clip_norm: float = Field(1.0, gt=0.0)
    seed: int = 0

    def optimizer(self, total_steps: int) -> TrainConfig:
        return TrainConfig(
            peak_lr=self.lr, warmup_steps=0, total_steps=max(total_steps, 1), clip_norm=self.clip_norm, seed=self.seed
        )


class FinetuneEpochRecord(PairwiseMlmBaseModel):
    _key = ("epoch",)

    kind: str = "finetune"
    epoch: int
    loss: float
    accuracy: float
    n_pairs: int


@dataclass
class ContactPredictor:
    """A (possibly fine-tuned) model plus contact head, scoring every pair of a sequence."""

    model: PmlmModel
    head: ContactHeadParams
    representation: Literal["pair_head", "fallback"]
    min_separation: int = 1

    def _pair_head(self) -> Optional[PairHeadParams]:
        return self.model.pair_head if self.representation == "pair_head" else None

    def logits(
        self,
        records: Sequence[SequenceRecord],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        features: Optional[Tuple[Tensor, Tensor]] = None,
    ) -> Tuple[Tensor, List[List[Pair]]]:
        """
        Symmetrized logits, (logit(i, j) + logit(j, i)) / 2, for every scored
        pair of every record, concatenated in record order.
        """
        pair_lists = [_scored_pairs(len(r), self.min_separation) for r in records]
        if features is None:
            features = self.features(records, pair_lists, train=train, rng=rng)
        forward, backward = features
        logits = (self.head(forward, train=train, rng=rng) + self.head(backward, train=train, rng=rng)) * 0.5
        return logits, pair_lists

    def features(
        self,
        records: Sequence[SequenceRecord],
        pair_lists: Sequence[List[Pair]],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[Tensor, Tensor]:
        cfg = self.model.config
        batch = collate_batch([mask_positions_exactly(r, ()) for r in records], cfg.max_len, pad_to_longest=True)
        hidden = encode(self.model.encoder, batch.input_ids, batch.attention_mask, cfg, train=train, rng=rng)
        batch_size, length, d = hidden.shape
        flat = hidden.reshape(batch_size * length, d)
        rows_i = np.array([b * length + i + 1 for b, pairs in enumerate(pair_lists) for i, _ in pairs], dtype=np.int64)
        rows_j = np.array([b * length + j + 1 for b, pairs in enumerate(pair_lists) for _, j in pairs], dtype=np.int64)
        h_i, h_j = gather(flat, rows_i), gather(flat, rows_j)
        pair_head = self._pair_head()
        return contact_pair_representation(h_i, h_j, pair_head), contact_pair_representation(h_j, h_i, pair_head)

    def scores(self, record: SequenceRecord) -> np.ndarray:
        """Symmetric L x L contact probabilities; pairs that are not scored stay 0."""
        with no_grad():
            logits, pair_lists = self.logits([record])
        probs = softmax_np(logits.data.astype(np.float64), axis=-1)[:, 1]
        out = np.zeros((len(record), len(record)))
        for (i, j), p in zip(pair_lists[0], probs):
            out[i, j] = out[j, i] = p
        return out


def _scored_pairs(length: int, min_separation: int) -> List[Pair]:
    return [(i, j) for i in range(length) for j in range(i + min_separation, length)]


@dataclass
class FinetuneResult:
    predictor: ContactPredictor
    config: FinetuneConfig
    history: List[FinetuneEpochRecord] = field(default_factory=list)


def _resolve_representation(model: PmlmModel, requested: Representation) -> Literal["pair_head", "fallback"]:
    if requested == "auto":
        return "pair_head" if model.config.uses_pair_head else "fallback"
    return requested


def finetune_contact(
    model: PmlmModel,
    labeled: Sequence[ContactRecord],
    cfg: Optional[FinetuneConfig] = None,
) -> FinetuneResult:
    """
    Trains a contact head with 2-way cross-entropy over residue pairs.

    In `probe` mode the encoder and pair head stay frozen, so their pair
    representations are computed once; in `full` mode the encoder and pair
    head are updated together with the contact head (the model is modified
    in place).

    Raises:
        DatasetSplitError: if `labeled` is empty.
        SequenceTooLongError: if a sequence does not fit the model's max_len.
        ContactMapMismatchError: raised by ContactRecord for inconsistent inputs.
    """
    cfg = cfg or FinetuneConfig()
    if not labeled:
        raise DatasetSplitError("contact fine-tuning needs at least one labeled sequence")
    for item in labeled:
        if len(item.sequence) + 2 > model.config.max_len:
            raise SequenceTooLongError(
                f"record '{item.identifier}' has {len(item.sequence)} residues, max_len is {model.config.max_len}"
            )

    representation = _resolve_representation(model, cfg.representation)
    in_dim = model.config.d_pair if representation == "pair_head" else 2 * model.config.hidden_dim
    head = ContactHeadParams(in_dim, make_rng(cfg.seed, _HEAD_INIT_STREAM), dropout_rate=cfg.dropout_rate)
    predictor = ContactPredictor(model, head, representation, cfg.min_separation)

    sequences = [item.sequence for item in labeled]
    labels = [
        np.array([item.contact_map.is_contact(i, j) for i, j in _scored_pairs(len(item.sequence), cfg.min_separation)],
                 dtype=np.int64)
        for item in labeled
    ]
    n_batches = -(-len(labeled) // cfg.batch_size)
    optimizer = cfg.optimizer(cfg.epochs * n_batches)
    state = TrainState()

    params: Dict[str, Tensor] = {f"contact_head.{n}": p for n, p in head.named_parameters()}
    if cfg.mode == "full":
        params.update({f"model.{n}": p for n, p in model.named_parameters()})

    cached: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None
    if cfg.mode == "probe":
        with no_grad():
            cached = []
            for index in range(len(sequences)):
                pair_lists = [_scored_pairs(len(sequences[index]), cfg.min_separation)]
                forward, backward = predictor.features([sequences[index]], pair_lists)
                cached.append((forward.data, backward.data))

    logger.info(
        "finetune_start | mode=%s | representation=%s | sequences=%d | epochs=%d",
        cfg.mode,
        representation,
        len(labeled),
        cfg.epochs,
    )
    history: List[FinetuneEpochRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, _FINETUNE_SHUFFLE_STREAM, epoch).permutation(len(labeled))
        losses, hits, n_pairs = [], 0, 0
        for start in range(0, len(order), cfg.batch_size):
            step += 1
            index = [int(k) for k in order[start : start + cfg.batch_size]]
            rng = make_rng(cfg.seed, _FINETUNE_DROPOUT_STREAM, step)
            batch_labels = np.concatenate([labels[k] for k in index])
            if batch_labels.size == 0:
                continue

            for p in params.values():
                p.zero_grad()
            features = None
            if cached is not None:
                features = (
                    Tensor(np.concatenate([cached[k][0] for k in index])),
                    Tensor(np.concatenate([cached[k][1] for k in index])),
                )
            logits, _ = predictor.logits([sequences[k] for k in index], train=True, rng=rng, features=features)
            loss = cross_entropy(logits, batch_labels).mean()
            loss.backward()

            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state, cfg.lr, optimizer)

            losses.append(float(loss.data) * batch_labels.size)
            hits += int(np.sum(np.argmax(logits.data, axis=1) == batch_labels))
            n_pairs += int(batch_labels.size)

        record = FinetuneEpochRecord(
            epoch=epoch,
            loss=sum(losses) / max(n_pairs, 1),
            accuracy=hits / max(n_pairs, 1),
            n_pairs=n_pairs,
        )
        history.append(record)
        logger.debug("finetune_epoch | epoch=%d | loss=%.5f | accuracy=%.4f", epoch, record.loss, record.accuracy)

    logger.info("finetune_done | final_loss=%.5f | final_accuracy=%.4f", history[-1].loss, history[-1].accuracy)
    return FinetuneResult(predictor=predictor, config=cfg, history=history)


def save_contact_predictor(
    predictor: ContactPredictor, path: Union[str, Path], extra: Optional[Dict] = None
) -> Path:
    """The model goes in as a regular checkpoint; the small contact head rides in the manifest."""
    head = {
        "w": predictor.head.w.data.tolist(),
        "b": predictor.head.b.data.tolist(),
        "dropout_rate": predictor.head.dropout_rate,
        "representation": predictor.representation,
        "min_separation": predictor.min_separation,
    }
    return save_checkpoint(path, predictor.model, extra={"contact_head": head, **(extra or {})})


def load_contact_predictor(path: Union[str, Path]) -> ContactPredictor:
    """
    Raises:
        CheckpointError: if the checkpoint carries no contact head.
    """
    model, checkpoint = load_model(path)
    doc = checkpoint.manifest.get("extra", {}).get("contact_head")
    if doc is None:
        raise CheckpointError(f"{path} holds no contact head; run finetune-contact first")
    w = np.asarray(doc["w"], dtype=get_default_dtype())
    head = ContactHeadParams(w.shape[0], np.random.default_rng(0), dropout_rate=doc["dropout_rate"])
    head.w.data = w
    head.b.data = np.asarray(doc["b"], dtype=get_default_dtype())
    return ContactPredictor(model, head, doc["representation"], int(doc["min_separation"]))


# --- precision ---


def _score_matrix(scores: ScoreInput, length: int) -> np.ndarray:
    if isinstance(scores, Mapping):
        matrix = np.full((length, length), np.nan)
        for (i, j), value in scores.items():
            matrix[i, j] = matrix[j, i] = value
        return matrix
    matrix = np.asarray(scores, dtype=np.float64)
    if matrix.shape != (length, length):
        raise ScoreMapError(f"score map of shape {matrix.shape} does not fit length {length}")
    return matrix


def ranked_pairs(scores: ScoreInput, length: int, pair_filter: RangeFilter) -> List[Pair]:
    """
    Pairs passing `pair_filter`, highest score first, ties broken by (i, j).
    Matrix scores are read at [i, j] with i < j.

    Raises:
        RangeFilterError: if no pair passes the filter.
        ScoreMapError: if a filtered pair has no score.
    """
    candidates = pair_filter.pairs(length)
    if not candidates:
        raise RangeFilterError("sequence too short for range filter")
    matrix = _score_matrix(scores, length)
    values = np.array([matrix[i, j] for i, j in candidates])
    if np.isnan(values).any():
        missing = candidates[int(np.argmax(np.isnan(values)))]
        raise ScoreMapError(f"no score for pair {missing}")
    order = sorted(range(len(candidates)), key=lambda k: (-values[k], candidates[k]))
    return [candidates[k] for k in order]


def precision_at_k(
    scores: ScoreInput,
    truth: ContactMap,
    pair_filter: Optional[RangeFilter] = None,
    divisor: int = 5,
) -> float:
    """
    Fraction of true contacts among the top max(1, L // divisor) ranked
    pairs (fewer when fewer pairs pass the filter). divisor=1 gives P@L,
    5 gives P@L/5.
    """
    pair_filter = pair_filter or range_filter("medium-long")
    ranked = ranked_pairs(scores, truth.length, pair_filter)
    top = ranked[: max(1, truth.length // divisor)]
    contacts = set(truth.contacts)
    return sum(pair in contacts for pair in top) / len(top)


def precision_at_L5(scores: ScoreInput, truth: ContactMap, pair_filter: Optional[RangeFilter] = None) -> float:
    return precision_at_k(scores, truth, pair_filter, divisor=5)


def random_precision_baseline(truth: ContactMap, pair_filter: Optional[RangeFilter] = None) -> float:
    """Expected precision of a random ranking: the contact density among filtered pairs."""
    pair_filter = pair_filter or range_filter("medium-long")
    candidates = pair_filter.pairs(truth.length)
    if not candidates:
        raise RangeFilterError("sequence too short for range filter")
    contacts = set(truth.contacts)
    return sum(pair in contacts for pair in candidates) / len(candidates)


class ContactEvalRecord(PairwiseMlmBaseModel):
    _key = ("identifier",)

    kind: str = "contact_eval"
    identifier: str
    length: int
    precision_l: float
    precision_l2: float
    precision_l5: float
    random_baseline: float


class ContactEvalReport(PairwiseMlmRenderableModel):
    config_hash: str
    seed: int = 0
    range_name: str
    min_sep: int
    max_sep: Optional[int]
    n_records: int
    precision_l: float
    precision_l2: float
    precision_l5: float
    random_baseline: float
    records: Tuple[ContactEvalRecord, ...]


def evaluate_contact_scores(
    score_maps: Mapping[str, ScoreInput],
    truths: Sequence[ContactMap],
    pair_filter: Optional[RangeFilter] = None,
    config_hash: Optional[str] = None,
    seed: int = 0,
) -> ContactEvalReport:
    """
    Per-record P@L, P@L/2 and P@L/5 and their means. The report carries
    `config_hash` (the filter's own hash by default) and `seed`.

    Raises:
        ScoreMapError: if a truth record has no score map.
        RangeFilterError: if a record is too short for the filter.
    """
    pair_filter = pair_filter or range_filter("medium-long")
    if not truths:
        raise DatasetSplitError("contact evaluation needs at least one record")
    records = []
    for truth in truths:
        if truth.identifier not in score_maps:
            raise ScoreMapError(f"no score map for record '{truth.identifier}'")
        scores = _score_matrix(score_maps[truth.identifier], truth.length)
        records.append(
            ContactEvalRecord(
                identifier=truth.identifier,
                length=truth.length,
                precision_l=precision_at_k(scores, truth, pair_filter, divisor=1),
                precision_l2=precision_at_k(scores, truth, pair_filter, divisor=2),
                precision_l5=precision_at_k(scores, truth, pair_filter, divisor=5),
                random_baseline=random_precision_baseline(truth, pair_filter),
            )
        )

    def mean(attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in records]))

    report = ContactEvalReport(
        config_hash=config_hash or pair_filter.config_hash,
        seed=seed,
        range_name=pair_filter.name,
        min_sep=pair_filter.min_sep,
        max_sep=pair_filter.max_sep,
        n_records=len(records),
        precision_l=mean("precision_l"),
        precision_l2=mean("precision_l2"),
        precision_l5=mean("precision_l5"),
        random_baseline=mean("random_baseline"),
        records=tuple(sorted(records)),
    )
    logger.info(
        "contact_eval | range=%s | records=%d | p_l5=%.4f | random=%.4f",
        report.range_name,
        report.n_records,
        report.precision_l5,
        report.random_baseline,
    )
    return report


def evaluate_contact_predictor(
    predictor: ContactPredictor,
    labeled: Sequence[ContactRecord],
    pair_filter: Optional[RangeFilter] = None,
    config_hash: Optional[str] = None,
    seed: int = 0,
) -> ContactEvalReport:
    score_maps = {item.identifier: predictor.scores(item.sequence) for item in labeled}
    return evaluate_contact_scores(
        score_maps, [item.contact_map for item in labeled], pair_filter, config_hash=config_hash, seed=seed
    )


def write_score_maps(
    score_maps: Mapping[str, np.ndarray], path: Union[str, Path], config_hash: str, seed: int
) -> str:
    rows = [output_header(config_hash, seed, stream="contact_scores")]
    for identifier in sorted(score_maps):
        matrix = np.asarray(score_maps[identifier], dtype=np.float64)
        rows.append({"id": identifier, "length": int(matrix.shape[0]), "scores": matrix.tolist()})
    return jsonl_dumper(rows, path)


def read_score_maps(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Score files hold one record per line: `id` and either `scores` (L x L)
    or `pairs` (list of [i, j, score]) with `length`.
    """
    out: Dict[str, np.ndarray] = {}
    for row in jsonl_loader(path):
        if row.get("kind") == "header":
            continue
        identifier = str(row["id"])
        if "scores" in row:
            out[identifier] = np.asarray(row["scores"], dtype=np.float64)
        elif "pairs" in row:
            out[identifier] = _score_matrix({(int(i), int(j)): float(s) for i, j, s in row["pairs"]}, int(row["length"]))
        else:
            raise ScoreMapError(f"record '{identifier}' has neither 'scores' nor 'pairs'")
    return out


# --- MLM vs PMLM ---


class CompareConfig(PairwiseMlmBaseModel):
    synth_preset: str = "accept-L8"
    spec_seed: int = PRESET_SPEC_SEED
    sampling: SamplingMode = "exact"
    n_pretrain: int = Field(5000, ge=2)
    n_finetune: int = Field(200, ge=1)
    n_heldout: int = Field(100, ge=1)
    model: ModelConfig = Field(default_factory=lambda: model_preset("desk", max_len=32))
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(total_steps=2000, validate_every=500))
    masking: MaskingConfig = Field(default_factory=MaskingConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    pmlm_lambda: float = Field(1.0, gt=0.0)
    # contact ranking on short synthetic sequences uses a custom separation
    contact_min_sep: int = Field(2, ge=1)
    n_kl_pairs: int = Field(200, ge=1)
    n_kl_sequences: int = Field(20, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_token_head(self) -> "CompareConfig":
        if self.model.pmlm_only_with_diagonal:
            raise ValueError("the comparison needs the token head; pmlm_only_with_diagonal must be off")
        return self

    @property
    def shared_config_hash(self) -> str:
        """Hash of everything but λ, identical for both arms."""
        data = self.model_dump(mode="json", by_alias=True)
        data.pop("pmlm_lambda")
        data["model"].pop("lambda")
        return canonical_hash(data)


class CompareArm(PairwiseMlmBaseModel):
    _key = ("arm",)

    kind: str = "compare_arm"
    arm: Literal["mlm", "pmlm"]
    lambda_: float = Field(alias="lambda")
    shared_config_hash: str
    run_hash: str
    acc_mlm: Optional[float]
    acc_pmlm: Optional[float]
    delta_acc: Optional[float]
    l_pmlm: Optional[float]
    precision_l5: float
    random_baseline: float
    kl_oracle_coupled: float
    kl_median_coupled: Optional[float]
    kl_median_uncoupled: Optional[float]
    pair_head_updated: bool


class CompareReport(PairwiseMlmRenderableModel):
    spec_hash: str
    seed: int
    shared_config_hash: str
    range_name: str
    # mean pair NLL on the validation split under the exact joint and under the product of exact marginals
    pair_nll_oracle: float
    pair_nll_floor: float
    arms: Tuple[CompareArm, ...]


def _pair_head_changed(model: PmlmModel, model_cfg: ModelConfig, seed: int) -> bool:
    initial = dict(init_model(model_cfg, seed).pair_head.named_parameters())
    return any(not np.array_equal(p.data, initial[n].data) for n, p in model.pair_head.named_parameters())


def _oracle_pairs(coupled: Sequence[Pair], records: Sequence[SequenceRecord], n: int) -> List[Tuple[SequenceRecord, List[Pair]]]:
    """Walks the held-out records, taking every coupled pair of each, until `n` pairs are covered."""
    plan, taken = [], 0
    for record in records:
        if taken >= n or not coupled:
            break
        pairs = list(coupled[: n - taken])
        plan.append((record, pairs))
        taken += len(pairs)
    return plan


def compare_mlm_vs_pmlm(
    spec: Optional[CoupledModelSpec] = None,
    cfg: Optional[CompareConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> CompareReport:
    """
    Pre-trains an MLM-only arm (λ = 0) and an MLM+PMLM arm on the same
    synthetic sequences, fits a frozen contact probe on each and reports
    held-out P@L/5, the random baseline, and KL diagnostics against the
    exact conditionals of `spec`.
    """
    cfg = cfg or CompareConfig()
    spec = spec or synth_preset(cfg.synth_preset, spec_seed=cfg.spec_seed)
    out_dir = Path(out_dir) if out_dir is not None else None

    n_total = cfg.n_pretrain + cfg.n_finetune + cfg.n_heldout
    sequences = sample_sequences(spec, n_total, make_rng(cfg.seed, _SAMPLE_STREAM), mode=cfg.sampling)
    pretrain_set = sequences[: cfg.n_pretrain]
    finetune_set = sequences[cfg.n_pretrain : cfg.n_pretrain + cfg.n_finetune]
    heldout_set = sequences[cfg.n_pretrain + cfg.n_finetune :]

    # same split pretrain() makes, so the floor is measured on the sequences it validates on
    _, validation_set = split_train_val(pretrain_set, cfg.train.val_fraction)
    pair_nll_oracle, pair_nll_floor = oracle_pair_losses(
        spec,
        np.array([r.residues for r in validation_set]),
        list(itertools.combinations(range(spec.length), 2)),
    )

    def labeled(records: Sequence[SequenceRecord]) -> List[ContactRecord]:
        return [contact_record(r.identifier, r, contacts_from_spec(spec, r.identifier)) for r in records]

    finetune_labeled, heldout_labeled = labeled(finetune_set), labeled(heldout_set)
    truths = {item.identifier: item.contact_map for item in heldout_labeled}
    pair_filter = range_filter("custom", min_sep=cfg.contact_min_sep)
    coupled = list(spec.coupled_pairs)
    oracle_plan = _oracle_pairs(coupled, heldout_set, cfg.n_kl_pairs)
    kl_records = heldout_set[: cfg.n_kl_sequences]

    arms = []
    for arm, lambda_ in (("mlm", 0.0), ("pmlm", cfg.pmlm_lambda)):
        model_cfg = cfg.model.updated(lambda_=lambda_)
        train_cfg = cfg.train.updated(seed=cfg.seed)
        masking_cfg = cfg.masking.updated(seed=cfg.seed)
        logger.info("compare_arm_start | arm=%s | lambda=%s", arm, lambda_)
        result = pretrain(
            pretrain_set,
            model_cfg,
            train_cfg,
            masking_cfg,
            out_dir=out_dir / arm if out_dir is not None else None,
        )
        model = result.model
        validation = result.summary.validations[-1]

        probe = finetune_contact(model, finetune_labeled, cfg.finetune.updated(seed=cfg.seed))
        contacts = evaluate_contact_predictor(probe.predictor, heldout_labeled, pair_filter)

        # the MLM arm's pairwise prediction is the product of its marginals
        predictor: PairPredictor = model if arm == "pmlm" else FactorizedPredictor(model)
        oracle_kls = [
            kl for record, pairs in oracle_plan for kl in kl_to_oracle(predictor, spec, [record], pairs)
        ]
        separation = kl_separation(scan_dataset_kl(predictor, kl_records, "all", truths))

        arms.append(
            CompareArm(
                arm=arm,
                lambda_=lambda_,
                shared_config_hash=cfg.shared_config_hash,
                run_hash=result.summary.config_hash,
                acc_mlm=validation.acc_mlm,
                acc_pmlm=validation.acc_pmlm,
                delta_acc=validation.delta_acc,
                l_pmlm=validation.l_pmlm,
                precision_l5=contacts.precision_l5,
                random_baseline=contacts.random_baseline,
                kl_oracle_coupled=float(np.mean(oracle_kls)) if oracle_kls else 0.0,
                kl_median_coupled=separation.median_coupled,
                kl_median_uncoupled=separation.median_uncoupled,
                pair_head_updated=_pair_head_changed(model, model_cfg, train_cfg.seed),
            )
        )

    report = CompareReport(
        spec_hash=canonical_hash(spec_to_document(spec)),
        seed=cfg.seed,
        shared_config_hash=cfg.shared_config_hash,
        range_name=f"|i-j|>={pair_filter.min_sep}",
        pair_nll_oracle=pair_nll_oracle,
        pair_nll_floor=pair_nll_floor,
        arms=tuple(arms),
    )
    if out_dir is not None:
        rows = [output_header(cfg.shared_config_hash, cfg.seed, stream="compare", spec_hash=report.spec_hash)]
        rows.extend(arm.model_dump(mode="json", by_alias=True) for arm in arms)
        jsonl_dumper(rows, out_dir / "compare.jsonl")
    for arm in arms:
        logger.info(
            "compare_arm | arm=%s | p_l5=%.4f | random=%.4f | kl_oracle=%.4f",
            arm.arm,
            arm.precision_l5,
            arm.random_baseline,
            arm.kl_oracle_coupled,
        )
    return report
