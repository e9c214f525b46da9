"""Mini function-as-a-service platform for expert blocks."""
from .core import (
    DuplicateFunctionError,
    FunctionCounters,
    FunctionSpec,
    InstanceState,
    InvokeTimeout,
    NotFoundError,
    Phase,
    PlatformError,
    UpstreamError,
    counters_document,
)
from .gateway import HttpGateway, serve_gateway
from .live import Platform
from .runtime import InProcessRuntime, SubprocessRuntime
from .sim import SimPlatform, Ticket

__all__ = [
    "DuplicateFunctionError",
    "FunctionCounters",
    "FunctionSpec",
    "HttpGateway",
    "InProcessRuntime",
    "InstanceState",
    "InvokeTimeout",
    "NotFoundError",
    "Phase",
    "Platform",
    "PlatformError",
    "SimPlatform",
    "SubprocessRuntime",
    "Ticket",
    "UpstreamError",
    "counters_document",
    "register_blocks",
    "serve_gateway",
]


def register_blocks(platform, blockmap, max_replicas: int = 4, idle_timeout_ms: float = 30_000.0, cold_start_ms: float = 200.0):
    """Register one function per expert block of ``blockmap``."""
    for blk in blockmap.blocks:
        platform.register(FunctionSpec(
            blk.name, blk.layer, blk.index, blk.experts,
            max_replicas=max_replicas, idle_timeout_ms=idle_timeout_ms, cold_start_ms=cold_start_ms,
        ))
