from chime.numerics.tensor import (
    ContractError,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    matmul,
    mse,
    softmax,
    stack,
)
from chime.numerics.optim import DEFAULT_LR, AdamState, EmaShadow, ParamStore, adam_step
from chime.numerics.rng import Rng, seed_streams
from chime.numerics.nn import (
    ConfigurationError,
    gru_forward,
    init_attention,
    init_gru,
    init_mlp,
    mlp_forward,
    multi_head_attention,
)
from chime.numerics.checkpoint import CheckpointError, load_params, restore_into, save_params

__all__ = [
    "AdamState",
    "CheckpointError",
    "ConfigurationError",
    "ContractError",
    "DEFAULT_LR",
    "EmaShadow",
    "ParamStore",
    "Rng",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "concat",
    "gru_forward",
    "init_attention",
    "init_gru",
    "init_mlp",
    "load_params",
    "matmul",
    "mlp_forward",
    "mse",
    "multi_head_attention",
    "restore_into",
    "save_params",
    "seed_streams",
    "softmax",
    "stack",
]
