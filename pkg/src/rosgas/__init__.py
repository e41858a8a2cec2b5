"""Reinforced subgraph architecture search for social bot detection on
heterogeneous graphs, with a small NumPy autodiff core."""

from .hetgraph import EdgeType, HetGraph, MetaPath, NodeType, extract_subgraph, read_jsonl, write_jsonl
from .synthgen import SynthConfig, generate
from .trainer import VARIANTS, TrainConfig, run
from .rl import AgentConfig

__all__ = [
    "AgentConfig", "EdgeType", "HetGraph", "MetaPath", "NodeType", "SynthConfig", "TrainConfig",
    "VARIANTS", "extract_subgraph", "generate", "read_jsonl", "run", "write_jsonl",
]
__version__ = "0.1.0"
