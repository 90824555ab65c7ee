"""Neural networks as iterated block non-linear maps."""
from .autodiff import (
    AdamState,
    NonFiniteActivationError,
    ParamVector,
    accuracy,
    adam_step,
    backward,
    forward_unrolled,
    loss_xent,
    softmax,
)
from .blockmap import (
    Activation,
    Affine,
    BlockMap,
    BlockPartition,
    MapFormatError,
    PartitionMismatchError,
    ScaledIdentity,
    StateBatch,
    StateVector,
    Zero,
    apply,
    apply_batch,
    deserialize,
    iterate,
    serialize,
)
from .constructors import (
    MlpLayerSpec,
    RnnSpec,
    TileGrid,
    build_tiled_map,
    logit_depth,
    make_above_map,
    make_diag_map,
    make_epsilon_map,
    make_layered_tiling,
    make_mlp_map,
    make_random_tiling,
    make_rnn_map,
    make_skip_map,
    make_superdiag_map,
)
from .dynamics import (
    FixedPointReport,
    ImpulseClass,
    classify_impulse,
    closed_form_diag,
    closed_form_superdiag,
    epsilon_decay_check,
    find_fixed_point,
    q_invariance_check,
)
from .estimator import ImagePreprocessor, TiledMapClassifier
from .training import Continuation, TrainConfig, train

__all__ = [
    "Activation", "AdamState", "Affine", "BlockMap", "BlockPartition", "Continuation",
    "FixedPointReport", "ImagePreprocessor", "ImpulseClass", "MapFormatError",
    "MlpLayerSpec", "NonFiniteActivationError", "ParamVector", "PartitionMismatchError",
    "RnnSpec", "ScaledIdentity", "StateBatch", "StateVector", "TileGrid",
    "TiledMapClassifier", "TrainConfig", "Zero", "accuracy", "adam_step", "apply",
    "apply_batch", "backward", "build_tiled_map", "classify_impulse", "closed_form_diag",
    "closed_form_superdiag", "deserialize", "epsilon_decay_check", "find_fixed_point",
    "forward_unrolled", "iterate", "logit_depth", "loss_xent", "make_above_map",
    "make_diag_map", "make_epsilon_map", "make_layered_tiling", "make_mlp_map",
    "make_random_tiling", "make_rnn_map", "make_skip_map", "make_superdiag_map",
    "q_invariance_check", "serialize", "softmax", "train",
]

__version__ = "0.1.0"
