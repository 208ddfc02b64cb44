from .checkpoint import Checkpoint, init_for_dataset, init_model, load_checkpoint, save_checkpoint
from .config import LossWeights, ModelConfig, TrainConfig
from .gradcheck import grad_check
from .losses import Targets, loss, loss_and_grads
from .network import HeadOutputs, forward, param_count
from .selection import select_checkpoint
from .training import finetune, train

__all__ = [
    "Checkpoint", "HeadOutputs", "LossWeights", "ModelConfig", "Targets", "TrainConfig",
    "finetune", "forward", "grad_check", "init_for_dataset", "init_model", "load_checkpoint",
    "loss", "loss_and_grads", "param_count", "save_checkpoint", "select_checkpoint", "train",
]
