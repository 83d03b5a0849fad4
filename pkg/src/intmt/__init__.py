"""Integer-quantized Transformer training at desk scale.

Every matrix multiplication in a small translation Transformer runs in
b-bit integer arithmetic (b = 8 or 6): weights are quantized
range-preservingly, activation scales are learned threshold scalars, and
a six-phase schedule takes a float baseline to an integer checkpoint
whose fake-quant and pure-integer forward paths agree.
"""

from .bleu import corpus_bleu
from .config import RunConfig, load_config, parse_config, serialize_config
from .decoding import BeamParams, beam_decode, decode_corpus
from .errors import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    ConfigurationError,
    DataError,
    DivergenceError,
    GradientStateError,
    MissingStatsError,
    SequencingError,
    ShapeMismatchError,
)
from .model import (
    MODE_FAKE,
    MODE_FP32,
    MODE_INT,
    Transformer,
    TransformerConfig,
    base_dimension_config,
)
from .quant import (
    IntTensor,
    QuantConfig,
    ThresholdScalar,
    fake_quant,
    quantize_signed,
    quantize_unsigned,
    range_scalar_signed,
    range_scalar_unsigned,
)
from .schedule import Adam, PhasePlan, QatSchedule, lr_factor

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BeamParams",
    "CheckpointFormatError",
    "CheckpointIntegrityError",
    "ConfigurationError",
    "DataError",
    "DivergenceError",
    "GradientStateError",
    "IntTensor",
    "MODE_FAKE",
    "MODE_FP32",
    "MODE_INT",
    "MissingStatsError",
    "PhasePlan",
    "QatSchedule",
    "QuantConfig",
    "RunConfig",
    "SequencingError",
    "ShapeMismatchError",
    "ThresholdScalar",
    "Transformer",
    "TransformerConfig",
    "base_dimension_config",
    "beam_decode",
    "corpus_bleu",
    "decode_corpus",
    "fake_quant",
    "load_config",
    "lr_factor",
    "parse_config",
    "quantize_signed",
    "quantize_unsigned",
    "range_scalar_signed",
    "range_scalar_unsigned",
    "serialize_config",
    "__version__",
]
