from .beta import BetaParams, beta_entropy, beta_logprob, beta_mean, beta_sample, scale_action
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .optim import Adam, adam_step
from .policy import PolicyConfig, PolicyNet, forward
from .tensor import Tensor

__all__ = [
    "Adam", "BetaParams", "CheckpointError", "PolicyConfig", "PolicyNet", "Tensor", "adam_step",
    "beta_entropy", "beta_logprob", "beta_mean", "beta_sample", "forward", "load_checkpoint",
    "read_header", "save_checkpoint", "scale_action",
]
