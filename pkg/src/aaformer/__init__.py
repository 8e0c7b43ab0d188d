"""Part-token vision transformer with optimal-transport patch alignment, on numpy."""
from .attention import LayerTrace, TokenLayout
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config_text
from .data import DatasetSpec, SyntheticDataset, generate_dataset
from .evaluation import EvalReport, evaluate, evaluate_distances
from .model import AAformer, ConfigError, ModelConfig, patchify
from .sinkhorn import AssignmentMask, TransportPlan, entropic_transport, round_assignment
from .tensor import ContractError, DimensionError, NonFiniteError, ParameterStore, Tensor
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "AAformer", "AssignmentMask", "Checkpoint", "ConfigError", "ContractError", "DatasetSpec",
    "DimensionError", "EvalReport", "LayerTrace", "ModelConfig", "NonFiniteError", "ParameterStore",
    "RunConfig", "SyntheticDataset", "Tensor", "TokenLayout", "TrainConfig", "Trainer", "TransportPlan",
    "entropic_transport", "evaluate", "evaluate_distances", "generate_dataset", "load_checkpoint",
    "load_config", "parse_config_text", "patchify", "round_assignment", "save_checkpoint", "train",
]
