"""
Pre-training loop: dynamic masking, combined loss, Adam with linear warmup
and linear decay, global-norm clipping, validation metrics and checkpoints.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import Field, model_validator

from pairwise_mlm.checkpoint import Checkpoint, save_checkpoint
from pairwise_mlm.datastore import RecordStore
from pairwise_mlm.dumpers import jsonl_dumper
from pairwise_mlm.encoder import ModelConfig
from pairwise_mlm.exceptions import (DatasetSplitError, NonFiniteGradientError,
                                     NumericError, TrainingAbortedError)
from pairwise_mlm.heads import (PmlmModel, delta_acc, delta_acc_ratio,
                                marginals_from_diagonal_joint)
from pairwise_mlm.masking import MaskingConfig, collate_batch, sample_masks
from pairwise_mlm.models import (PairwiseMlmBaseModel,
                                 PairwiseMlmRenderableModel)
from pairwise_mlm.numcore import Tensor, log_softmax_np, no_grad
from pairwise_mlm.seqio import SequenceRecord
from pairwise_mlm.utils import canonical_hash, make_rng, output_header

logger = logging.getLogger(__name__)

# seed streams, so each consumer of randomness is independent of the others
_INIT_STREAM = 0
_SHUFFLE_STREAM = 1
_DROPOUT_STREAM = 2
_MASK_STREAM = 3
_VALIDATION_MASK_STREAM = 4


class TrainConfig(PairwiseMlmBaseModel):
    peak_lr: float = Field(3e-4, gt=0.0)
    warmup_steps: int = Field(100, ge=0)
    total_steps: int = Field(2000, ge=1)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.98, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    clip_norm: float = Field(1.0, gt=0.0)
    batch_size: int = Field(32, ge=1)
    # framed tokens per batch; when set, batches are cut by size instead of count
    max_tokens: Optional[int] = Field(None, ge=3)
    epochs: Optional[int] = Field(None, ge=1)
    seed: int = 0
    validate_every: int = Field(200, ge=1)
    log_every: int = Field(50, ge=1)
    val_fraction: float = Field(0.05, gt=0.0, lt=1.0)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        if self.warmup_steps >= self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be smaller than total_steps ({self.total_steps})"
            )
        return self


TRAIN_PRESETS: Dict[str, Dict] = {
    "desk": dict(peak_lr=3e-4, warmup_steps=100, total_steps=2000, batch_size=32),
    # the published schedule, kept for reference
    "full": dict(peak_lr=3e-4, warmup_steps=20000, total_steps=500000, batch_size=32, validate_every=5000),
    "full-large": dict(peak_lr=1e-4, warmup_steps=20000, total_steps=500000, batch_size=32, validate_every=5000),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    try:
        values = dict(TRAIN_PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown train preset '{name}', choose from {sorted(TRAIN_PRESETS)}")
    values.update(overrides)
    return TrainConfig(**values)


@dataclass
class TrainState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    best_val: Dict[str, Optional[float]] = field(default_factory=lambda: {"l_mlm": None, "l_pmlm": None})

    @classmethod
    def for_model(cls, model: PmlmModel) -> "TrainState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in model.named_parameters()},
            v={n: np.zeros_like(p.data) for n, p in model.named_parameters()},
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "TrainState":
        return cls(
            step=checkpoint.step,
            m=checkpoint.adam_m(),
            v=checkpoint.adam_v(),
            best_val=dict(checkpoint.best_val),
        )


def init_model(model_cfg: ModelConfig, seed: int) -> PmlmModel:
    """The freshly initialized model `pretrain` starts from for this seed."""
    return PmlmModel(model_cfg, make_rng(seed, _INIT_STREAM))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """
    Linear ramp from 0 to `peak_lr` over `warmup_steps`, then linear decay
    to 0 at `total_steps`; 0 beyond.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def clip_global_norm(
    grads: Dict[str, np.ndarray],
    clip_norm: float,
) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Scales every gradient by clip_norm / norm when the global L2 norm
    exceeds `clip_norm`. Returns the (possibly) scaled gradients and the
    norm before clipping.

    Raises:
        NonFiniteGradientError: naming the first parameter with a non-finite gradient.
    """
    total = 0.0
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)
        total += float(np.sum(np.square(grad, dtype=np.float64)))
    norm = math.sqrt(total)

    if norm <= clip_norm:
        return dict(grads), norm
    scale = clip_norm / norm
    return {name: grad * np.asarray(scale, dtype=grad.dtype) for name, grad in grads.items()}, norm


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: TrainState,
    lr: float,
    cfg: TrainConfig,
) -> TrainState:
    """
    One bias-corrected Adam update. Parameters without an entry in
    `grads` are not touched. A parameter whose gradient is identically zero
    keeps its value while its moments decay.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for name, grad in grads.items():
        param = params[name]
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * np.square(grad)
        if not np.any(grad):
            continue
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(param.data.dtype)

    return state


def split_train_val(
    records: Sequence[SequenceRecord],
    val_fraction: float = 0.05,
) -> Tuple[List[SequenceRecord], List[SequenceRecord]]:
    """
    Holds out the records whose sha1(identifier) falls in the lowest
    `val_fraction` of the hash range, so the split never depends on
    record order or on the run.

    Raises:
        DatasetSplitError: if either side comes out empty.
    """
    threshold = int(val_fraction * 10000)
    train, val = [], []
    for record in records:
        bucket = int(hashlib.sha1(record.identifier.encode("utf-8")).hexdigest(), 16) % 10000
        (val if bucket < threshold else train).append(record)

    if not train or not val:
        raise DatasetSplitError(
            f"split of {len(records)} records gave {len(train)} training and {len(val)} validation records"
        )
    return train, val


class TrainStepRecord(PairwiseMlmBaseModel):
    _key = ("step",)

    kind: str = "train"
    step: int
    lr: float
    loss: float
    l_mlm: Optional[float]
    l_pmlm: Optional[float]
    grad_norm: float


class ValidationRecord(PairwiseMlmBaseModel):
    _key = ("step",)

    kind: str = "validation"
    step: int
    lr: float
    l_mlm: Optional[float]
    l_pmlm: Optional[float]
    acc_mlm: Optional[float]
    acc_pmlm: Optional[float]
    delta_acc: Optional[float]
    delta_acc_ratio: Optional[float]
    n_tokens: int
    n_pairs: int


class PretrainSummary(PairwiseMlmRenderableModel):
    config_hash: str
    seed: int
    steps: int
    epochs: int
    n_train: int
    n_val: int
    n_parameters: int
    # training batches whose masks produced no pair labels
    empty_pair_batches: int = 0
    validations: Tuple[ValidationRecord, ...]


@dataclass
class PretrainResult:
    model: PmlmModel
    state: TrainState
    checkpoint_path: Optional[Path]
    metric_log_path: Optional[Path]
    metric_rows: List[Dict]
    store: RecordStore
    summary: PretrainSummary


def _nll_rows(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    log_probs = log_softmax_np(logits.astype(np.float64), axis=-1)
    return -log_probs[np.arange(labels.size), labels]


def evaluate(
    model: PmlmModel,
    records: Sequence[SequenceRecord],
    masking_cfg: MaskingConfig,
    step: int = 0,
    lr: float = 0.0,
    batch_size: int = 32,
) -> ValidationRecord:
    """
    Validation metrics over `records` under masks drawn from a fixed stream,
    so every validation pass of a run scores the same masked inputs.

    Acc_pmlm and L_pmlm cover the i != j pair labels. In PMLM-only mode the
    token marginals for Acc_mlm come from the diagonal pair joints and
    L_mlm is None. Pair metrics are None when the pair head is unused.
    """
    cfg = model.config
    masked = sample_masks(records, masking_cfg, streams=(_VALIDATION_MASK_STREAM,))

    token_nll: List[np.ndarray] = []
    token_hits: List[np.ndarray] = []
    pair_nll: List[np.ndarray] = []
    pair_hits: List[np.ndarray] = []

    for start in range(0, len(masked), batch_size):
        batch = collate_batch(masked[start : start + batch_size], cfg.max_len, pad_to_longest=True)
        with no_grad():
            out = model.forward(batch, train=False)

        off_diagonal = batch.pair_i != batch.pair_j
        if out.pair_logits is not None:
            logits = out.pair_logits.data[off_diagonal]
            labels = batch.pair_labels[off_diagonal]
            pair_nll.append(_nll_rows(logits, labels))
            pair_hits.append(np.argmax(logits, axis=1) == labels)

        if out.token_logits is not None:
            logits = out.token_logits.data
            token_nll.append(_nll_rows(logits, batch.token_labels))
            token_hits.append(np.argmax(logits, axis=1) == batch.token_labels)
        elif out.pair_logits is not None:
            # every masked position has exactly one diagonal label, in position order
            diagonal = ~off_diagonal
            marginals = marginals_from_diagonal_joint(
                np.exp(log_softmax_np(out.pair_logits.data[diagonal].astype(np.float64), axis=-1))
            )
            token_hits.append(np.argmax(marginals, axis=1) == batch.token_labels)

    def mean_of(chunks: List[np.ndarray]) -> Optional[float]:
        joined = np.concatenate(chunks) if chunks else np.empty(0)
        return float(np.mean(joined)) if joined.size else None

    l_mlm = mean_of(token_nll)
    acc_mlm = mean_of(token_hits)
    l_pmlm = mean_of(pair_nll) if cfg.uses_pair_head else None
    acc_pmlm = mean_of(pair_hits) if cfg.uses_pair_head else None

    both = acc_mlm is not None and acc_pmlm is not None
    return ValidationRecord(
        step=step,
        lr=lr,
        l_mlm=l_mlm,
        l_pmlm=l_pmlm,
        acc_mlm=acc_mlm,
        acc_pmlm=acc_pmlm,
        delta_acc=delta_acc(acc_pmlm, acc_mlm) if both else None,
        delta_acc_ratio=delta_acc_ratio(acc_pmlm, acc_mlm) if both else None,
        n_tokens=int(sum(len(m.mask_positions) for m in masked)),
        n_pairs=int(sum(len(m.pair_labels) for m in masked)),
    )


def _batches(
    records: Sequence[SequenceRecord],
    cfg: TrainConfig,
    epoch: int,
) -> Iterator[List[SequenceRecord]]:
    order = make_rng(cfg.seed, _SHUFFLE_STREAM, epoch).permutation(len(records))
    batch: List[SequenceRecord] = []
    tokens = 0
    for index in order:
        record = records[int(index)]
        size = len(record) + 2
        full = len(batch) >= cfg.batch_size or (
            cfg.max_tokens is not None and batch and tokens + size > cfg.max_tokens
        )
        if full:
            yield batch
            batch, tokens = [], 0
        batch.append(record)
        tokens += size
    if batch:
        yield batch


def _masking_for(model_cfg: ModelConfig, masking_cfg: MaskingConfig) -> MaskingConfig:
    if model_cfg.pmlm_only_with_diagonal and not masking_cfg.include_diagonal:
        return masking_cfg.updated(include_diagonal=True)
    return masking_cfg


def _to_float(value: Optional[Tensor]) -> Optional[float]:
    return None if value is None else float(value.data)


def pretrain(
    records: Sequence[SequenceRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    masking_cfg: Optional[MaskingConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
    val_records: Optional[Sequence[SequenceRecord]] = None,
) -> PretrainResult:
    """
    Trains a PmlmModel from scratch.

    Each step draws fresh masks, evaluates the combined loss, backpropagates,
    clips the global gradient norm and applies Adam at `lr_at(step)`.
    Validation runs every `validate_every` steps and after the last one;
    each pass appends a ValidationRecord to the metric log and, with
    `out_dir`, refreshes `last.ckpt`.

    Without `val_records`, a hash-based `val_fraction` of `records` is held out.

    Raises:
        DatasetSplitError: if the training or validation split is empty.
        TrainingAbortedError: on a non-finite loss or gradient; carries the
        path of the last good checkpoint, if any.
    """
    masking_cfg = _masking_for(model_cfg, masking_cfg or MaskingConfig(seed=train_cfg.seed))
    if val_records is None:
        train_records, val_records = split_train_val(records, train_cfg.val_fraction)
    else:
        train_records, val_records = list(records), list(val_records)
        if not train_records or not val_records:
            raise DatasetSplitError("training and validation sets must both be non-empty")

    for record in list(train_records) + list(val_records):
        if len(record) + 2 > model_cfg.max_len:
            raise DatasetSplitError(
                f"record '{record.identifier}' does not fit max_len {model_cfg.max_len}; ingest with truncation"
            )

    out_dir = Path(out_dir) if out_dir is not None else None
    run_hash = _run_hash(model_cfg, train_cfg, masking_cfg)
    model = init_model(model_cfg, train_cfg.seed)
    state = TrainState.for_model(model)
    params = dict(model.named_parameters())
    store = RecordStore(err_on_duplicate=True)
    log_rows: List[Dict] = [output_header(run_hash, train_cfg.seed, kind="header", stream="pretrain")]
    metric_log = out_dir / "metrics.jsonl" if out_dir else None
    last_good: Optional[Path] = None

    batches_per_epoch = len(list(_batches(train_records, train_cfg, 0)))
    total_steps = train_cfg.total_steps
    if train_cfg.epochs is not None:
        total_steps = min(total_steps, train_cfg.epochs * batches_per_epoch)
    epochs = math.ceil(total_steps / batches_per_epoch)

    logger.info(
        "pretrain_start | config_hash=%s | n_train=%d | n_val=%d | steps=%d | epochs=%d | params=%d",
        run_hash,
        len(train_records),
        len(val_records),
        total_steps,
        epochs,
        model.num_parameters(),
    )

    def validate(step: int, lr: float) -> None:
        nonlocal last_good
        record = evaluate(model, val_records, masking_cfg, step=step, lr=lr, batch_size=train_cfg.batch_size)
        store.save(record)
        log_rows.append(record.model_dump(mode="json"))
        for key in ("l_mlm", "l_pmlm"):
            value = getattr(record, key)
            best = state.best_val.get(key)
            if value is not None and (best is None or value < best):
                state.best_val[key] = value
        logger.info(
            "validation | step=%d | l_mlm=%s | l_pmlm=%s | acc_mlm=%s | acc_pmlm=%s | delta_acc=%s",
            step,
            _fmt(record.l_mlm),
            _fmt(record.l_pmlm),
            _fmt(record.acc_mlm),
            _fmt(record.acc_pmlm),
            _fmt(record.delta_acc),
        )
        if out_dir is not None:
            last_good = save_checkpoint(
                out_dir / "last.ckpt",
                model,
                step=state.step,
                adam_m=state.m,
                adam_v=state.v,
                best_val=state.best_val,
                extra={"run_hash": run_hash, "train_config": train_cfg.model_dump(mode="json")},
            )
            jsonl_dumper(log_rows, metric_log)

    step = 0
    epoch = 0
    while step < total_steps:
        for batch_records in _batches(train_records, train_cfg, epoch):
            if step >= total_steps:
                break
            step += 1
            lr = lr_at(step, train_cfg)
            masked = sample_masks(batch_records, masking_cfg, streams=(_MASK_STREAM, step), threads=train_cfg.threads)
            batch = collate_batch(masked, model_cfg.max_len, pad_to_longest=True)

            model.zero_grad()
            try:
                losses = model.losses(batch, train=True, rng=make_rng(train_cfg.seed, _DROPOUT_STREAM, step))
            except NumericError as err:
                raise TrainingAbortedError(f"{err} at step {step}", last_good) from err
            loss_value = float(losses.total.data)
            if not math.isfinite(loss_value):
                raise TrainingAbortedError(f"non-finite loss {loss_value} at step {step}", last_good)
            losses.total.backward()

            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            try:
                grads, grad_norm = clip_global_norm(grads, train_cfg.clip_norm)
            except NonFiniteGradientError as err:
                raise TrainingAbortedError(f"{err} at step {step}", last_good) from err
            adam_step(params, grads, state, lr, train_cfg)

            logger.debug(
                "train_step | step=%d | lr=%.3e | loss=%.5f | grad_norm=%.4f", step, lr, loss_value, grad_norm
            )
            if step % train_cfg.log_every == 0:
                row = TrainStepRecord(
                    step=step,
                    lr=lr,
                    loss=loss_value,
                    l_mlm=_to_float(losses.mlm),
                    l_pmlm=_to_float(losses.pmlm),
                    grad_norm=grad_norm,
                )
                store.save(row)
                log_rows.append(row.model_dump(mode="json"))
            if step % train_cfg.validate_every == 0 and step < total_steps:
                validate(step, lr)
        epoch += 1

    validate(step, lr_at(step, train_cfg))

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = save_checkpoint(
            out_dir / "final.ckpt",
            model,
            step=state.step,
            adam_m=state.m,
            adam_v=state.v,
            best_val=state.best_val,
            extra={"run_hash": run_hash, "train_config": train_cfg.model_dump(mode="json")},
        )

    summary = PretrainSummary(
        config_hash=run_hash,
        seed=train_cfg.seed,
        steps=step,
        epochs=epochs,
        n_train=len(train_records),
        n_val=len(val_records),
        n_parameters=model.num_parameters(),
        empty_pair_batches=model.loss_counters["empty_pair_batches"],
        validations=tuple(store.get_all_by_class(ValidationRecord)),
    )
    logger.info("pretrain_done | config_hash=%s | steps=%d | checkpoint=%s", run_hash, step, checkpoint_path)
    return PretrainResult(
        model=model,
        state=state,
        checkpoint_path=checkpoint_path,
        metric_log_path=metric_log,
        metric_rows=log_rows,
        store=store,
        summary=summary,
    )


def _run_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, masking_cfg: MaskingConfig) -> str:
    return canonical_hash(
        {
            "model": model_cfg.model_dump(mode="json", by_alias=True),
            "train": train_cfg.model_dump(mode="json"),
            "masking": masking_cfg.model_dump(mode="json"),
        }
    )


def _fmt(value: Optional[float]) -> str:
    return "null" if value is None else f"{value:.4f}"
