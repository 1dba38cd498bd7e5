"""
Run configuration: one validated object holding every section a command
needs, merged from (lowest to highest precedence)

    named presets < config file < PMLM__<SECTION>__<KEY> environment < command-line flags

Top-level keys of a config file are `seed`, `model_preset`, `train_preset`
and the sections `model`, `masking`, `train` and `finetune`.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pydantic import Field

from pairwise_mlm.config import get_config
from pairwise_mlm.encoder import MODEL_PRESETS, ModelConfig
from pairwise_mlm.evalkit import FinetuneConfig
from pairwise_mlm.exceptions import (ConfigKeyError, ConfigValidationError,
                                     PairwiseMlmTypeError)
from pairwise_mlm.masking import MaskingConfig
from pairwise_mlm.models import PairwiseMlmBaseModel
from pairwise_mlm.trainer import TRAIN_PRESETS, TrainConfig
from pairwise_mlm.utils import load_file_to_dict, output_header

logger = logging.getLogger(__name__)

SECTIONS = {
    "model": ModelConfig,
    "masking": MaskingConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
}
SCALARS = ("seed", "model_preset", "train_preset")
# sections whose own seed follows the run seed unless set explicitly
_SEEDED_SECTIONS = ("masking", "train", "finetune")

Layer = Mapping[str, Any]


class RunConfig(PairwiseMlmBaseModel):
    seed: int = 0
    model_preset: str = "desk"
    train_preset: str = "desk"
    model: ModelConfig
    masking: MaskingConfig = Field(default_factory=MaskingConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)

    def to_document(self, with_meta: bool = False) -> Dict[str, Any]:
        """With `with_meta`, a `meta` block carries the hash, seed and package version."""
        document = self.model_dump(mode="json", by_alias=True)
        if with_meta:
            document["meta"] = output_header(self.config_hash, self.seed, kind="meta")
        return document


def _check_layer(layer: Layer, origin: str) -> None:
    if not isinstance(layer, Mapping):
        raise PairwiseMlmTypeError(f"{origin} must hold a mapping, got {type(layer).__name__}")
    valid = set(SCALARS) | set(SECTIONS)
    for key, value in layer.items():
        if key not in valid:
            raise ConfigKeyError(key, valid)
        if key in SECTIONS and not isinstance(value, Mapping):
            raise PairwiseMlmTypeError(f"section '{key}' in {origin} must be a mapping")


def merge_layers(*layers: Optional[Layer]) -> Dict[str, Any]:
    """Later layers win, key by key inside each section. None values in a layer are ignored."""
    merged: Dict[str, Any] = {name: {} for name in SECTIONS}
    for layer in layers:
        for key, value in (layer or {}).items():
            if key in SECTIONS:
                merged[key].update({k: v for k, v in value.items() if v is not None})
            elif value is not None:
                merged[key] = value
    return merged


def _preset(table: Dict[str, Dict], name: str, kind: str) -> Dict[str, Any]:
    try:
        return dict(table[name])
    except KeyError:
        raise ConfigValidationError(f"unknown {kind} preset '{name}', choose from {sorted(table)}")


def build_run_config(merged: Dict[str, Any]) -> RunConfig:
    """
    Raises:
        ConfigKeyError: on a key no section defines, listing the valid ones.
        ConfigValidationError: on values that fail validation or unknown presets.
    """
    seed = int(merged.get("seed", 0))
    model_preset = merged.get("model_preset", "desk")
    train_preset = merged.get("train_preset", "desk")

    sections = {name: dict(merged.get(name, {})) for name in SECTIONS}
    for name in _SEEDED_SECTIONS:
        sections[name].setdefault("seed", seed)

    model = ModelConfig.create({**_preset(MODEL_PRESETS, model_preset, "model"), **sections["model"]})
    train = TrainConfig.create({**_preset(TRAIN_PRESETS, train_preset, "train"), **sections["train"]})
    return RunConfig(
        seed=seed,
        model_preset=model_preset,
        train_preset=train_preset,
        model=model,
        masking=MaskingConfig.create(sections["masking"]),
        train=train,
        finetune=FinetuneConfig.create(sections["finetune"]),
    )


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    flags: Optional[Layer] = None,
    env: Optional[Layer] = None,
) -> RunConfig:
    """
    Merges the optional config file, the environment overrides (read from
    the process environment unless `env` is given) and command-line flags.
    """
    layers = []
    if path is not None:
        file_layer = load_file_to_dict(path) or {}
        if isinstance(file_layer, dict):
            # written by a previous run, not a setting
            file_layer.pop("meta", None)
        _check_layer(file_layer, str(path))
        layers.append(file_layer)

    env_layer: Dict[str, Any] = dict(get_config().env_overrides if env is None else env)
    # PMLM__RUN__SEED and friends address the top-level keys
    env_layer.update(env_layer.pop("run", {}))
    _check_layer(env_layer, "the environment")
    layers.append(env_layer)

    if flags:
        _check_layer(flags, "command-line flags")
        layers.append(flags)

    run = build_run_config(merge_layers(*layers))
    logger.debug("run_config | config_hash=%s | model_preset=%s", run.config_hash, run.model_preset)
    return run
