"""
Central finite-difference check of analytic gradients.

For a parameter tensor w and a scalar loss f, every checked element gets
(f(w + h e_k) - f(w - h e_k)) / 2h. The per-parameter error is the norm
ratio ||g_analytic - g_numeric|| / max(||g_analytic|| + ||g_numeric||, floor),
which stays meaningful for elements whose gradient is close to zero.
"""

import logging
from typing import Callable, Optional, Tuple

import numpy as np
from pydantic import Field

from pairwise_mlm.encoder import model_preset
from pairwise_mlm.heads import PmlmModel
from pairwise_mlm.masking import collate_batch, mask_positions_exactly
from pairwise_mlm.models import (PairwiseMlmBaseModel,
                                 PairwiseMlmRenderableModel)
from pairwise_mlm.numcore import Module, Tensor, float64_mode
from pairwise_mlm.seqio import NUM_RESIDUES, SequenceRecord
from pairwise_mlm.utils import make_rng

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-4
_ERROR_FLOOR = 1e-12


class GradCheckResult(PairwiseMlmBaseModel):
    _key = ("param_name",)

    param_name: str
    relative_error: float
    n_checked: int
    passed: bool


class GradCheckReport(PairwiseMlmRenderableModel):
    tolerance: float = Field(gt=0.0)
    step: float
    results: Tuple[GradCheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def worst(self) -> Optional[GradCheckResult]:
        if not self.results:
            return None
        return max(self.results, key=lambda r: r.relative_error)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = _ERROR_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    module: Module,
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    max_elements_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """
    Compares backprop gradients of `loss_fn()` against central differences
    for every parameter of `module`.

    `loss_fn` must rebuild the graph from the current parameter values on
    every call. With `max_elements_per_param`, a random subset of that many
    elements is checked per parameter (all of them for smaller tensors).
    Parameters the loss never touches are compared against zero.
    """
    rng = rng if rng is not None else np.random.default_rng(0)

    module.zero_grad()
    loss_fn().backward()

    results = []
    for name, param in module.named_parameters():
        analytic_full = np.zeros_like(param.data) if param.grad is None else param.grad
        flat = param.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements_per_param is not None and flat.size > max_elements_per_param:
            indices = np.sort(rng.choice(flat.size, size=max_elements_per_param, replace=False))

        numeric = np.empty(indices.size, dtype=np.float64)
        for n, k in enumerate(indices):
            original = flat[k]
            flat[k] = original + h
            plus = float(loss_fn().data)
            flat[k] = original - h
            minus = float(loss_fn().data)
            flat[k] = original
            numeric[n] = (plus - minus) / (2.0 * h)

        analytic = analytic_full.reshape(-1)[indices]
        error = relative_error(analytic, numeric)
        passed = bool(error < tolerance)
        if not passed:
            logger.warning("gradcheck_mismatch | param=%s | relative_error=%.3e", name, error)
        results.append(
            GradCheckResult(param_name=name, relative_error=error, n_checked=int(indices.size), passed=passed)
        )

    module.zero_grad()
    return GradCheckReport(tolerance=tolerance, step=h, results=tuple(results))


def check_model_gradients(
    preset: str = "tiny",
    seed: int = 0,
    n_sequences: int = 2,
    seq_len: int = 6,
    n_masked: int = 3,
    max_elements_per_param: Optional[int] = 16,
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    **model_overrides,
) -> GradCheckReport:
    """
    Builds a randomly initialized model from `preset` in float64 and checks
    the combined MLM + PMLM loss on a small random batch.
    """
    rng = make_rng(seed, 0)
    with float64_mode():
        cfg = model_preset(preset, dropout_rate=0.0, **model_overrides)
        model = PmlmModel(cfg, make_rng(seed, 1))

        masked = []
        for index in range(n_sequences):
            residues = tuple(int(r) for r in rng.integers(0, NUM_RESIDUES, size=seq_len))
            record = SequenceRecord(identifier=f"gradcheck{index}", residues=residues)
            positions = rng.choice(np.arange(1, seq_len + 1), size=min(n_masked, seq_len), replace=False)
            masked.append(
                mask_positions_exactly(
                    record, positions.tolist(), include_diagonal=cfg.pmlm_only_with_diagonal
                )
            )
        batch = collate_batch(masked, cfg.max_len, pad_to_longest=False)

        def loss_fn() -> Tensor:
            return model.losses(batch, train=False).total

        report = check_gradients(
            loss_fn,
            model,
            h=h,
            tolerance=tolerance,
            max_elements_per_param=max_elements_per_param,
            rng=make_rng(seed, 2),
        )

    worst = report.worst
    logger.info(
        "gradcheck_done | preset=%s | passed=%s | worst_param=%s | worst_error=%.3e",
        preset,
        report.passed,
        worst.param_name if worst else None,
        worst.relative_error if worst else 0.0,
    )
    return report
