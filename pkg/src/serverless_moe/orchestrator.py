"""Control plane: trunk, gating, token micro-batching and expert-block dispatch.

The orchestrator owns every non-expert parameter, including the shared
experts, and turns each MoE layer into at most one invocation per expert
block. Aggregation order is fixed by expert index in the model code, so the
order in which block responses arrive never affects the output.
"""
from __future__ import annotations

import itertools
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Generator

import numpy as np

from .config import BlockMap, ModelConfig, function_name
from .faas.core import InvokeTimeout, NotFoundError, UpstreamError
from .httpio import Handler, start_server
from .model import (
    GateDecision,
    LayerDispatch,
    ParamStore,
    Routed,
    detokenize,
    drive,
    forward_steps,
    generate_steps,
    local_resolver,
)
from .protocol import (
    ExpertBatchRequest,
    ExpertWorkItem,
    ProtocolError,
    decode_response,
    encode_request,
)

log = logging.getLogger(__name__)


class DispatchError(RuntimeError):
    """A layer could not be completed; no partial aggregation happens."""

    def __init__(self, message: str, layer: int | None = None, block: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.block = block
        self.invocations = 0


@dataclass
class DispatchPlan:
    layer: int
    buckets: dict[int, list[ExpertWorkItem]]
    provenance: dict[int, tuple[int, int, float]]

    @property
    def item_count(self) -> int:
        return sum(len(items) for items in self.buckets.values())


def plan_dispatch(
    decisions: list[GateDecision],
    activations,
    blockmap: BlockMap,
    refs=None,
) -> DispatchPlan:
    """Group every selected (token, expert) pair into its hosting block's bucket."""
    if len(decisions) != len(activations):
        raise ValueError("one activation per token required")
    refs = refs if refs is not None else itertools.count()
    layer = decisions[0].layer if decisions else 0
    buckets: dict[int, list[ExpertWorkItem]] = {}
    provenance = {}
    for decision, x in zip(decisions, activations):
        for expert, weight in zip(decision.selected, decision.weights):
            try:
                block = blockmap.block_of(decision.layer, expert)
            except KeyError:
                raise DispatchError(f"expert {expert} of layer {decision.layer} has no hosting block") from None
            ref = next(refs)
            buckets.setdefault(block.index, []).append(ExpertWorkItem(ref, expert, x))
            provenance[ref] = (decision.token_index, expert, weight)
    return DispatchPlan(layer, dict(sorted(buckets.items())), provenance)


def match_response(payload: bytes, request: ExpertBatchRequest) -> dict[int, np.ndarray]:
    resp = decode_response(payload)
    expected = {it.token_ref: it.expert for it in request.items}
    out = {}
    for item in resp.items:
        if item.token_ref in out:
            raise ProtocolError(f"duplicate token_ref {item.token_ref} in response")
        if expected.get(item.token_ref) != item.expert:
            raise ProtocolError(f"unexpected (token_ref, expert) = ({item.token_ref}, {item.expert}) in response")
        out[item.token_ref] = item.output
    missing = expected.keys() - out.keys()
    if missing:
        raise ProtocolError(f"response is missing token_refs {sorted(missing)[:5]}")
    return out


def dispatch_plans(
    plans: list[DispatchPlan],
    gateway,
    model_seed: int,
    timeout_ms: float | None = 30_000.0,
    retries: int = 2,
) -> tuple[list[dict[int, np.ndarray]], int]:
    """Invoke every block touched by ``plans`` once (merging plans per block).

    All plans must be for the same layer. Returns one ``token_ref -> output``
    map per plan and the number of gateway invocations issued.
    """
    layers = {p.layer for p in plans}
    if len(layers) > 1:
        raise ValueError(f"cannot merge plans across layers {sorted(layers)}")
    merged: dict[int, list[ExpertWorkItem]] = {}
    for plan in plans:
        for block, items in plan.buckets.items():
            merged.setdefault(block, []).extend(items)
    if not merged:
        return [{} for _ in plans], 0
    layer = layers.pop()
    requests = {b: ExpertBatchRequest(model_seed, layer, b, tuple(items)) for b, items in sorted(merged.items())}
    payloads = {b: encode_request(r) for b, r in requests.items()}
    outputs: dict[int, np.ndarray] = {}
    pending = list(requests)
    invocations = 0
    try:
        for attempt in range(retries + 1):
            results = gateway.invoke_many([(function_name(layer, b), payloads[b]) for b in pending], timeout_ms)
            failed, fatal = [], None
            for block, result in zip(pending, results):
                if not isinstance(result, NotFoundError):
                    invocations += 1
                if fatal is not None:
                    continue
                if isinstance(result, (InvokeTimeout, UpstreamError)):
                    failed.append((block, result))
                elif isinstance(result, Exception):
                    fatal = DispatchError(f"layer {layer} block {block}: {result}", layer, block)
                else:
                    try:
                        outputs.update(match_response(result, requests[block]))
                    except ProtocolError as exc:
                        fatal = DispatchError(f"layer {layer} block {block}: {exc}", layer, block)
            if fatal is not None:
                raise fatal
            if not failed:
                break
            log.info("layer %d: retrying blocks %s (attempt %d)", layer, [b for b, _ in failed], attempt + 1)
            pending = [b for b, _ in failed]
        else:
            block, err = failed[0]
            raise DispatchError(f"layer {layer} block {block} failed after {retries} retries: {err}", layer, block)
    except DispatchError as exc:
        exc.invocations = invocations
        raise
    return [{ref: outputs[ref] for ref in plan.provenance} for plan in plans], invocations


def routed_outputs(req: LayerDispatch, plan: DispatchPlan, outputs: dict[int, np.ndarray]) -> Routed:
    routed: Routed = [{} for _ in req.decisions]
    for ref, (token, expert, _) in plan.provenance.items():
        routed[token][expert] = outputs[ref]
    return routed


@dataclass
class OrchestratorConfig:
    cfg: ModelConfig
    blockmap: BlockMap
    gateway: str = ""
    timeout_ms: float = 30_000.0
    retries: int = 2
    mode: str = "private"
    window_ms: float = 10.0

    def __post_init__(self):
        if self.retries < 0 or self.window_ms < 0:
            raise ValueError("retries and window_ms must be non-negative")
        if self.mode not in ("shared", "private"):
            raise ValueError(f"mode must be shared or private, got {self.mode!r}")

    @property
    def merging(self) -> bool:
        return self.mode == "shared" and self.window_ms > 0


@dataclass
class Generation:
    prompt: bytes
    ids: list[int]
    invocations: list[int]
    latency_ms: float

    @property
    def text(self) -> bytes:
        return detokenize(self.ids)


@dataclass
class _Group:
    layer: int
    plans: list[DispatchPlan] = field(default_factory=list)
    full: threading.Event = field(default_factory=threading.Event)
    done: threading.Event = field(default_factory=threading.Event)
    results: list | None = None
    invocations: int = 0
    error: BaseException | None = None


class WindowMerger:
    """Joins plans for the same layer that arrive within ``window_ms`` of the first."""

    def __init__(self, orch: "Orchestrator", window_ms: float):
        self.orch = orch
        self.window_s = window_ms / 1000.0
        self._lock = threading.Lock()
        self._open: dict[int, _Group] = {}

    def submit(self, plan: DispatchPlan) -> tuple[dict, int]:
        with self._lock:
            group = self._open.get(plan.layer)
            leader = group is None
            if leader:
                group = self._open[plan.layer] = _Group(plan.layer)
            index = len(group.plans)
            group.plans.append(plan)
            if len(group.plans) >= self.orch.active_requests:
                group.full.set()
        if leader:
            group.full.wait(self.window_s)
            with self._lock:
                del self._open[plan.layer]
            try:
                group.results, group.invocations = self.orch.dispatch(group.plans)
            except BaseException as exc:
                group.error = exc
            group.done.set()
        else:
            group.done.wait()
        if group.error is not None:
            raise group.error
        return group.results[index], group.invocations


class Orchestrator:
    def __init__(self, ocfg: OrchestratorConfig, gateway):
        self.ocfg = ocfg
        self.cfg = ocfg.cfg
        self.gateway = gateway
        self.params = ParamStore(self.cfg).materialize(routed_experts=False)
        self._refs = itertools.count()
        self._lock = threading.Lock()
        self.invocations = [0] * self.cfg.num_layers
        self.requests = 0
        self.errors = 0
        self.active_requests = 0
        self.merger = WindowMerger(self, ocfg.window_ms) if ocfg.merging else None

    # dispatch primitives

    def plan(self, req: LayerDispatch) -> DispatchPlan:
        with self._lock:
            return plan_dispatch(req.decisions, req.activations, self.ocfg.blockmap, self._refs)

    def dispatch(self, plans: list[DispatchPlan]) -> tuple[list[dict], int]:
        counted = 0
        try:
            results, counted = dispatch_plans(
                plans, self.gateway, self.cfg.model_seed, self.ocfg.timeout_ms, self.ocfg.retries
            )
            return results, counted
        except DispatchError as exc:
            # Attempts made before the failure still reached the platform.
            counted = exc.invocations
            raise
        finally:
            if plans:
                with self._lock:
                    self.invocations[plans[0].layer] += counted

    def dispatch_layer(self, plan: DispatchPlan) -> dict[int, np.ndarray]:
        return self.dispatch([plan])[0][0]

    def resolver(self, per_layer: list[int] | None = None):
        def resolve(req: LayerDispatch) -> Routed:
            plan = self.plan(req)
            if self.merger is not None:
                outputs, n = self.merger.submit(plan)
            else:
                (outputs,), n = self.dispatch([plan])
            if per_layer is not None:
                per_layer[req.layer] += n
            return routed_outputs(req, plan, outputs)

        return resolve

    # request level

    def remote_forward(self, tokens) -> np.ndarray:
        return drive(forward_steps(tokens, self.cfg, self.params), self.resolver())

    def generate(self, prompt: bytes | str, max_new: int) -> Generation:
        if isinstance(prompt, str):
            prompt = prompt.encode("utf-8")
        per_layer = [0] * self.cfg.num_layers
        start = time.perf_counter()
        with self._lock:
            self.active_requests += 1
            self.requests += 1
        try:
            ids = drive(generate_steps(prompt, max_new, self.cfg, self.params), self.resolver(per_layer))
        except Exception:
            with self._lock:
                self.errors += 1
            raise
        finally:
            with self._lock:
                self.active_requests -= 1
        return Generation(prompt, ids, per_layer, (time.perf_counter() - start) * 1000.0)

    def stats(self) -> dict:
        with self._lock:
            return {
                "pid": os.getpid(),
                "mode": self.ocfg.mode,
                "window_ms": self.ocfg.window_ms,
                "invocations_per_layer": list(self.invocations),
                "requests": self.requests,
                "errors": self.errors,
                "trunk_bytes": self.params.resident_bytes(),
                "resident_bytes": 0,
            }


class MonolithicEngine:
    """A full model per tenant: the baseline deployment, with local expert evaluation."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params = ParamStore(cfg).materialize()
        self._lock = threading.Lock()
        self.requests = 0

    def generate(self, prompt: bytes | str, max_new: int) -> Generation:
        if isinstance(prompt, str):
            prompt = prompt.encode("utf-8")
        start = time.perf_counter()
        ids = drive(generate_steps(prompt, max_new, self.cfg, self.params), local_resolver(self.cfg, self.params))
        with self._lock:
            self.requests += 1
        return Generation(prompt, ids, [0] * self.cfg.num_layers, (time.perf_counter() - start) * 1000.0)

    def stats(self) -> dict:
        return {
            "pid": os.getpid(),
            "mode": "monolithic",
            "invocations_per_layer": [0] * self.cfg.num_layers,
            "requests": self.requests,
            "errors": 0,
            "trunk_bytes": self.params.resident_bytes(routed_experts=False),
            "resident_bytes": self.params.resident_bytes(routed_experts=True),
        }


def remote_forward(tokens, orch: Orchestrator) -> np.ndarray:
    return orch.remote_forward(tokens)


# --- deterministic multi-tenant scheduling --------------------------------

@dataclass
class RequestOutcome:
    tenant: int
    index: int
    prompt: bytes
    ids: list[int] | None = None
    error: str | None = None
    invocations: list[int] | None = None

    @property
    def text(self) -> bytes | None:
        return None if self.ids is None else detokenize(self.ids)


def tenant_job(tenant: int, prompts: list[bytes], max_new: int, cfg: ModelConfig, params=None) -> Generator:
    """Generation steps for one tenant's requests, in order; failures are recorded, not raised."""
    outcomes = []
    for i, prompt in enumerate(prompts):
        outcome = RequestOutcome(tenant, i, prompt)
        try:
            outcome.ids = yield from generate_steps(prompt, max_new, cfg, params)
        except DispatchError as exc:
            outcome.error = str(exc)
        outcomes.append(outcome)
    return outcomes


def run_lockstep(tenants: list[tuple[Orchestrator, Generator]], on_round=None) -> list[list[RequestOutcome]]:
    """Advance every tenant one MoE layer at a time in a single thread.

    Tenants sharing an orchestrator whose config enables merging have their
    same-layer plans merged into one invocation per block. Everything else
    is dispatched tenant by tenant in index order, so runs are reproducible.
    """
    results: list = [None] * len(tenants)
    pending: dict[int, LayerDispatch] = {}
    for i, (_, job) in enumerate(tenants):
        try:
            pending[i] = next(job)
        except StopIteration as stop:
            results[i] = stop.value
    while pending:
        groups: dict[tuple[int, int], list[int]] = {}
        for i, req in pending.items():
            orch = tenants[i][0]
            key = (id(orch), req.layer) if orch.ocfg.merging else (id(orch), req.layer, i)
            groups.setdefault(key, []).append(i)
        replies: dict[int, object] = {}
        for members in groups.values():
            orch = tenants[members[0]][0]
            plans = [orch.plan(pending[i]) for i in members]
            try:
                outputs, _ = orch.dispatch(plans)
            except DispatchError as exc:
                for i in members:
                    replies[i] = exc
                continue
            for i, plan, out in zip(members, plans, outputs):
                replies[i] = routed_outputs(pending[i], plan, out)
        for i in sorted(replies):
            job = tenants[i][1]
            reply = replies[i]
            try:
                if isinstance(reply, Exception):
                    pending[i] = job.throw(reply)
                else:
                    pending[i] = job.send(reply)
            except StopIteration as stop:
                del pending[i]
                results[i] = stop.value
        if on_round is not None:
            on_round()
    return results


# --- HTTP service ----------------------------------------------------------

class OrchestratorHandler(Handler):
    """``POST /generate {tenant, prompt, max_new}`` and ``GET /stats``."""

    def do_POST(self):
        if self.path.rstrip("/") != "/generate":
            return self.reply_error(404, f"no route {self.path}")
        req = self.json_body()
        try:
            tenant = req.get("tenant", 0)
            if "prompt_hex" in req:
                prompt = bytes.fromhex(req["prompt_hex"])
            else:
                prompt = str(req["prompt"]).encode("utf-8")
            max_new = int(req.get("max_new", 16))
            if max_new < 0 or len(prompt) >= self.app.cfg.max_seq:
                raise ValueError("max_new must be >= 0 and the prompt must fit max_seq")
        except (AttributeError, KeyError, TypeError, ValueError) as exc:
            return self.reply_error(400, f"malformed request: {exc}")
        try:
            gen = self.app.generate(prompt, max_new)
        except DispatchError as exc:
            return self.reply_error(502, str(exc))
        self.reply_json(200, {
            "tenant": tenant,
            "text": gen.text.decode("utf-8", "replace"),
            "hex": gen.text.hex(),
            "ids": gen.ids,
            "invocations": gen.invocations,
            "latency_ms": gen.latency_ms,
        })

    def do_GET(self):
        if self.path.rstrip("/") == "/stats":
            return self.reply_json(200, self.app.stats())
        self.reply_error(404, f"no route {self.path}")


def serve(orch: Orchestrator, host: str = "127.0.0.1", port: int = 0):
    return start_server(OrchestratorHandler, orch, host, port)
