"""Contrastive pre-training based clustered federated learning on a NumPy engine."""

from .datagen import PartitionSpec, generate_synthetic, partition_clients
from .federation import FederationConfig, run_federation
from .nn import ArchConfig, Model, build_model
from .pretrain import PretrainConfig, linear_evaluation, pretrain_encoder

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "FederationConfig",
    "Model",
    "PartitionSpec",
    "PretrainConfig",
    "build_model",
    "generate_synthetic",
    "linear_evaluation",
    "partition_clients",
    "pretrain_encoder",
    "run_federation",
]
