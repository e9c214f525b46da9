"""Expert-block function body: materialize only the hosted experts, then serve batches."""
from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .config import BlockMap, ModelConfig, function_name
from .httpio import Handler, start_server
from .model import ParamStore, ffn
from .protocol import (
    ExpertBatchRequest,
    ExpertBatchResponse,
    ExpertResult,
    ProtocolError,
    decode_request,
    encode_response,
)


class RoutingError(ProtocolError):
    """A request addressed an expert or block this host does not serve."""


@dataclass(frozen=True)
class BlockHost:
    cfg: ModelConfig
    layer: int
    block: int
    hosted: tuple[int, ...]
    weights: dict = field(repr=False)

    @property
    def resident_bytes(self) -> int:
        return sum(w.nbytes for triple in self.weights.values() for w in triple)


def init_block(cfg: ModelConfig, layer: int, block: int, blockmap: BlockMap) -> BlockHost:
    try:
        spec = blockmap.get(layer, block)
    except KeyError:
        raise RoutingError(f"unknown block {block} in layer {layer}") from None
    params = ParamStore(cfg)
    weights = {e: params.expert_weights(layer, e) for e in spec.experts}
    return BlockHost(cfg, layer, block, spec.experts, weights)


def handle(req: ExpertBatchRequest, host: BlockHost) -> ExpertBatchResponse:
    if req.model_seed != host.cfg.model_seed:
        raise ProtocolError(f"model_seed {req.model_seed} does not match host seed {host.cfg.model_seed}")
    if (req.layer, req.block) != (host.layer, host.block):
        raise RoutingError(f"request for l{req.layer}/b{req.block} reached host l{host.layer}/b{host.block}")
    by_expert: dict[int, list[int]] = {}
    for pos, item in enumerate(req.items):
        if item.expert not in host.weights:
            raise RoutingError(f"expert {item.expert} is not hosted by block {host.block} of layer {host.layer}")
        if np.shape(item.activation) != (host.cfg.embed_dim,):
            raise ProtocolError(f"activation length {np.size(item.activation)} != {host.cfg.embed_dim}")
        by_expert.setdefault(item.expert, []).append(pos)
    outputs: list[np.ndarray | None] = [None] * len(req.items)
    # Batching per expert is bit-identical to per-item evaluation (see matmul_f32).
    for expert, positions in by_expert.items():
        batch = np.stack([req.items[p].activation for p in positions])
        out = ffn(batch, *host.weights[expert])
        for row, p in enumerate(positions):
            outputs[p] = out[row]
    return ExpertBatchResponse(tuple(
        ExpertResult(it.token_ref, it.expert, out) for it, out in zip(req.items, outputs)
    ))


class ExpertService:
    """One or more block hosts behind a bytes-in, bytes-out ``invoke``.

    A FaaS worker hosts a single block; the local distribution server hosts
    every block of the model persistently.
    """

    def __init__(self, hosts: list[BlockHost]):
        self.hosts = {function_name(h.layer, h.block): h for h in hosts}
        self.requests_served = 0
        self._lock = threading.Lock()

    @classmethod
    def for_block(cls, cfg: ModelConfig, blockmap: BlockMap, layer: int, block: int) -> "ExpertService":
        return cls([init_block(cfg, layer, block, blockmap)])

    @classmethod
    def for_model(cls, cfg: ModelConfig, blockmap: BlockMap) -> "ExpertService":
        return cls([init_block(cfg, b.layer, b.index, blockmap) for b in blockmap.blocks])

    def invoke(self, name: str | None, payload: bytes) -> bytes:
        if name is None:
            if len(self.hosts) != 1:
                raise KeyError("function name required")
            (host,) = self.hosts.values()
        else:
            host = self.hosts[name]
        resp = encode_response(handle(decode_request(payload), host))
        with self._lock:
            self.requests_served += 1
        return resp

    __call__ = invoke

    def stats(self) -> dict:
        return {
            "pid": os.getpid(),
            "resident_bytes": sum(h.resident_bytes for h in self.hosts.values()),
            "hosted": {name: list(h.hosted) for name, h in self.hosts.items()},
            "requests_served": self.requests_served,
        }


class ExpertHandler(Handler):
    def do_POST(self):
        parts = self.path.strip("/").split("/")
        if parts[0] != "invoke" or len(parts) > 2:
            return self.reply_error(404, f"no route {self.path}")
        payload = self.body()
        try:
            out = self.app.invoke(parts[1] if len(parts) == 2 else None, payload)
        except KeyError as exc:
            return self.reply_error(404, f"unknown function {exc}")
        except ProtocolError as exc:
            return self.reply_error(400, str(exc))
        self.reply(200, out)

    def do_GET(self):
        if self.path.rstrip("/") == "/stats":
            return self.reply_json(200, self.app.stats())
        self.reply_error(404, f"no route {self.path}")


def serve_experts(service: ExpertService, host: str = "127.0.0.1", port: int = 0):
    return start_server(ExpertHandler, service, host, port)
