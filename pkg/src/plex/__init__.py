"""Planner-executor imitation learning at desk scale.

A causal-transformer planner predicts future observation embeddings from a
task spec and visual history; an inverse-dynamics executor turns those
predictions into actions. Training is staged (executor first when encoders
are trainable), and all numerics run on a minimal numpy autograd engine with
an exact stop-gradient operator.
"""

from .encoders import EncoderConfig, ObservationEncoders, PlaceholderBank, random_crop, spatial_softmax
from .env import EnvConfig, TaskSpec, WorldState, env_reset, env_step, make_tasks, render, scripted_policy
from .errors import (
    ContractError,
    DivergenceError,
    FormatError,
    GenerationError,
    PlexError,
    PositionRangeError,
    ShapeError,
    StagedTrainingError,
)
from .model import ContextWindow, PlexConfig, PlexModel, assemble_executor_context, assemble_planner_context
from .tensor import Tape, Tensor, backward, grad_check, stop_gradient
from .training import AdamW, StageState, TrainConfig, finetune, pretrain_executor, pretrain_planner, sample_batch
from .trajectory import Trajectory
from .transformer import CausalTransformer, TransformerConfig, absolute_positional_encoding

__version__ = "0.1.0"
