"""Condition-aware adaptation of a frozen speech encoder, self-contained on numpy.

Lightweight conditioners (channel affine, optionally with time attention)
modulate a frozen transformer encoder using language and speaker embeddings
estimated from the encoder's own intermediate layers. Includes the autodiff
engine, task decoders (CTC transcription, language ID, speaker verification),
a synthetic multilingual corpus generator, and a staged training harness.
"""

from .autodiff import NumericalError, ShapeError, Tensor, grad_check, no_grad
from .conditioner import (
    CC,
    TCAC,
    ConditionerParams,
    ConditioningFeature,
    compose_conditions,
    encode_condition,
    init_identity,
    modulate,
)
from .decoders import AsrConfig, AsrDecoder, ClsConfig, ClsDecoder
from .encoder import (
    ConfigError,
    EncoderConfig,
    EncoderState,
    add_conditioners,
    init_encoder_state,
    run_dual,
    run_hierarchical,
    trainable_parameter_report,
)
from .harness import (
    ExperimentConfig,
    InvariantBreach,
    ModelBundle,
    build_bundle,
    compare,
    evaluate,
    run_pipeline,
    run_stage,
)
from .losses import InfeasibleAlignmentError, ctc_greedy_decode, ctc_loss, multitask_loss
from .metrics import cer, eer, lid_accuracy, min_dcf
from .synthdata import Corpus, CorpusSpec, build_corpora, load_corpus, save_corpus

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "grad_check",
    "ShapeError",
    "NumericalError",
    "CC",
    "TCAC",
    "ConditionerParams",
    "ConditioningFeature",
    "init_identity",
    "modulate",
    "compose_conditions",
    "encode_condition",
    "EncoderConfig",
    "EncoderState",
    "ConfigError",
    "init_encoder_state",
    "add_conditioners",
    "run_hierarchical",
    "run_dual",
    "trainable_parameter_report",
    "AsrConfig",
    "AsrDecoder",
    "ClsConfig",
    "ClsDecoder",
    "ctc_loss",
    "ctc_greedy_decode",
    "multitask_loss",
    "InfeasibleAlignmentError",
    "cer",
    "eer",
    "min_dcf",
    "lid_accuracy",
    "CorpusSpec",
    "Corpus",
    "build_corpora",
    "save_corpus",
    "load_corpus",
    "ExperimentConfig",
    "ModelBundle",
    "InvariantBreach",
    "build_bundle",
    "run_stage",
    "run_pipeline",
    "evaluate",
    "compare",
    "__version__",
]
