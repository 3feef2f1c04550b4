"""Dual-scale graph transformer agent for graph-world instruction following."""

from .envsim import EnvConfig, generate_environment, make_episode, generate_dataset
from .model import DuetConfig, DuetModel, init_params
from .topomap import TopoMap

__version__ = "0.1.0"

__all__ = [
    "EnvConfig", "generate_environment", "make_episode", "generate_dataset",
    "DuetConfig", "DuetModel", "init_params", "TopoMap",
]
