"""Serverless mixture-of-experts inference: a deterministic toy MoE transformer
whose expert FFNs are served as scale-to-zero functions on a small FaaS platform.
"""
from .config import BlockMap, ConfigError, ModelConfig, dump_config, load_config, pack_blocks, parse_config
from .model import GateDecision, ParamStore, detokenize, forward, gate, generate, tokenize
from .orchestrator import DispatchError, Orchestrator, OrchestratorConfig, remote_forward
from .protocol import ProtocolError

__version__ = "0.1.0"

__all__ = [
    "BlockMap",
    "ConfigError",
    "DispatchError",
    "GateDecision",
    "ModelConfig",
    "Orchestrator",
    "OrchestratorConfig",
    "ParamStore",
    "ProtocolError",
    "detokenize",
    "dump_config",
    "forward",
    "gate",
    "generate",
    "load_config",
    "pack_blocks",
    "parse_config",
    "remote_forward",
    "tokenize",
]
