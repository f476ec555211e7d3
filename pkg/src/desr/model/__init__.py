"""Small trainable SR network whose output head can end in the DE layer."""

from .checkpoint import load_checkpoint, save_checkpoint
from .losses import loss_de_regularized, loss_dual_resolution, loss_mse
from .network import (
    LayerSpec,
    ModelSpec,
    Tape,
    backward,
    forward,
    init_weights,
    pixel_shuffle,
    pixel_unshuffle,
    srcnn_spec,
)
from .train import (
    Adam,
    TrainConfig,
    TrainResult,
    augment,
    dihedral,
    dihedral_inverse,
    log_csv,
    parse_config,
    predict,
    train,
    validation_chips,
)
