"""Sparse modular activation and the SeqBoat architecture on a float64 torch backend."""

import torch

# every primitive assumes double precision
torch.set_default_dtype(torch.float64)

from .model import ModelConfig, SeqBoatModel, model_init  # noqa: E402
from .tasks import TaskSpec  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = ["ModelConfig", "SeqBoatModel", "TaskSpec", "TrainConfig", "model_init", "train"]
