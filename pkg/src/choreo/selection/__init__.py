"""Step selection: model the next step given history and rhythm features.

Three model families: a smoothed 5-gram with modified Kneser-Ney backoff,
a fixed-window MLP over the previous 4 steps, and a 2-layer LSTM. All
emit a distribution over the 256 possible arrow combinations.
"""

from choreo.selection.features import (
    EMISSION_SIZE,
    START_INDEX,
    VOCAB_SIZE,
    RhythmFeatures,
    bag_of_arrows,
    beat_phase,
    chart_tokens,
    rhythm_features,
)
from choreo.selection.ngram import KnModel, kn_prob, kn_train, load_kn_model, save_kn_model
from choreo.selection.neural import (
    SelectionLstm,
    SelectionMlp5,
    SelectionTrainConfig,
    build_selection_model,
    generate,
    load_selection_model,
    next_step_distribution,
    save_selection_model,
    sequence_distributions,
    train_selection,
    valid_token_mask,
)

__all__ = [
    "EMISSION_SIZE", "START_INDEX", "VOCAB_SIZE", "RhythmFeatures",
    "bag_of_arrows", "beat_phase", "chart_tokens", "rhythm_features",
    "KnModel", "kn_prob", "kn_train", "load_kn_model", "save_kn_model",
    "SelectionLstm", "SelectionMlp5", "SelectionTrainConfig",
    "build_selection_model", "generate", "load_selection_model",
    "next_step_distribution", "save_selection_model",
    "sequence_distributions", "train_selection", "valid_token_mask",
]
