from pairwise_mlm.config import __version__
from pairwise_mlm.datastore import RecordStore
from pairwise_mlm.encoder import ModelConfig, model_preset
from pairwise_mlm.heads import PmlmModel
from pairwise_mlm.masking import MaskingConfig
from pairwise_mlm.models import (PairwiseMlmBaseModel,
                                 PairwiseMlmRenderableModel)
from pairwise_mlm.seqio import SequenceRecord, load_sequences, parse_fasta
from pairwise_mlm.trainer import TrainConfig, pretrain

__all__ = [
    "__version__",
    "PairwiseMlmBaseModel",
    "PairwiseMlmRenderableModel",
    "RecordStore",
    "ModelConfig",
    "model_preset",
    "MaskingConfig",
    "PmlmModel",
    "SequenceRecord",
    "load_sequences",
    "parse_fasta",
    "TrainConfig",
    "pretrain",
]
