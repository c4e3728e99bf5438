"""Minimal NumPy neural-network engine."""
from .gradcheck import check_gradients, relative_error
from .init import glorot_init
from .losses import bce_loss, mse_loss
from .network import LayerSpec, Network, NetworkSpec, ShapeError
from .optim import TrainConfig, sgd_step

__all__ = ["LayerSpec", "Network", "NetworkSpec", "ShapeError", "TrainConfig",
           "bce_loss", "check_gradients", "glorot_init", "mse_loss", "relative_error",
           "sgd_step"]
