"""Deployment strategies, runs and block-size sweeps.

Two execution modes share one report format:

* in-process (``processes=False``): every role lives in this process, FaaS
  strategies run on the simulated platform and tenants advance in lockstep.
  Counters and logical residency are exactly reproducible.
* process (``processes=True``): every role is a separate OS process started
  through the CLI, talking HTTP; tenants are concurrent client threads and
  per-process CPU/RSS is sampled at ``cadence_s``.
"""
from __future__ import annotations

import enum
import logging
import os
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..config import BlockMap, ModelConfig, dump_config, pack_blocks
from ..expert import ExpertService
from ..faas import FunctionSpec, HttpGateway, InProcessRuntime, NotFoundError, SimPlatform, register_blocks
from ..httpio import HttpClient
from ..model import ParamStore, default_params, drive, generate_steps, local_resolver
from ..orchestrator import Orchestrator, OrchestratorConfig, RequestOutcome, run_lockstep, tenant_job
from .sampling import ResourceSample, Sampler
from .workload import Workload, make_workload

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    BASELINE = "baseline"
    LOCAL = "local"
    SHARED = "shared"
    PRIVATE = "private"

    @property
    def uses_platform(self) -> bool:
        return self in (Strategy.SHARED, Strategy.PRIVATE)


@dataclass(frozen=True)
class StrategyConfig:
    kind: Strategy
    tenants: int = 6
    requests: int = 5
    cfg: ModelConfig = field(default_factory=ModelConfig)
    block_size: int = 3
    seed: int = 0
    skew: float = 1.0
    max_new: int = 8
    min_prompt: int = 8
    max_prompt: int = 24
    processes: bool = False
    window_ms: float = 10.0
    cold_start_ms: float = 200.0
    idle_timeout_ms: float = 30_000.0
    max_replicas: int = 4
    concurrency_limit: int = 4
    timeout_ms: float = 30_000.0
    retries: int = 2
    cadence_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Strategy(self.kind))
        if self.tenants < 1 or self.requests < 1:
            raise ValueError("tenants and requests must be >= 1")
        if self.max_prompt >= self.cfg.max_seq:
            raise ValueError("max_prompt must be below max_seq")
        pack_blocks(self.cfg, self.block_size)

    @property
    def blockmap(self) -> BlockMap:
        return pack_blocks(self.cfg, self.block_size)

    def workload(self) -> Workload:
        return make_workload(self.seed, self.tenants, self.requests, self.skew, self.min_prompt, self.max_prompt)


@dataclass(frozen=True)
class ResidencyRow:
    snapshot: int
    timestamp: float
    role: str
    pid: int
    unit: str
    expert_bytes: int
    trunk_bytes: int


@dataclass
class RunReport:
    strategy: StrategyConfig
    outcomes: list[RequestOutcome]
    mismatches: list[tuple[int, int]]
    invocations_per_layer: list[int]
    platform_counters: dict | None
    residency: list[ResidencyRow]
    samples: list[ResourceSample]
    latencies_ms: list[float]
    wall_s: float
    functions_registered: int = 0

    @property
    def failed(self) -> int:
        return sum(o.error is not None for o in self.outcomes)

    @property
    def degraded(self) -> bool:
        return bool(self.failed or self.mismatches)

    @property
    def invocations(self) -> int:
        return sum(self.invocations_per_layer)

    @property
    def cold_starts(self) -> int:
        return self.platform_counters["totals"]["cold_starts"] if self.platform_counters else 0

    def _last(self) -> list[ResidencyRow]:
        if not self.residency:
            return []
        last = max(r.snapshot for r in self.residency)
        return [r for r in self.residency if r.snapshot == last]

    @property
    def expert_bytes(self) -> int:
        """Logical expert-parameter residency at the end of the run."""
        return sum(r.expert_bytes for r in self._last())

    @property
    def trunk_bytes(self) -> int:
        return sum(r.trunk_bytes for r in self._last())

    @property
    def per_tenant_bytes(self) -> float:
        return (self.expert_bytes + self.trunk_bytes) / self.strategy.tenants

    def texts(self) -> dict[tuple[int, int], bytes | None]:
        return {(o.tenant, o.index): o.text for o in self.outcomes}

    def role_usage(self) -> dict[str, dict[str, float]]:
        """Per role: mean over sampling instants of summed CPU% and RSS."""
        by_role: dict[str, dict[float, list[ResourceSample]]] = {}
        for s in self.samples:
            if not s.terminal:
                by_role.setdefault(s.role, {}).setdefault(s.timestamp, []).append(s)
        out = {}
        for role, instants in by_role.items():
            cpu = [sum(s.cpu_percent for s in group) for group in instants.values()]
            rss = [sum(s.rss_bytes for s in group) for group in instants.values()]
            out[role] = {"cpu_percent": sum(cpu) / len(cpu), "rss_bytes": sum(rss) / len(rss)}
        return out


_ORACLE: dict[tuple[ModelConfig, bytes, int], list[int]] = {}


def oracle_ids(cfg: ModelConfig, prompt: bytes, max_new: int) -> list[int]:
    """Monolithic reference continuation (memoized per process)."""
    key = (cfg, prompt, max_new)
    if key not in _ORACLE:
        params = default_params(cfg)
        _ORACLE[key] = drive(generate_steps(prompt, max_new, cfg, params), local_resolver(cfg, params))
    return _ORACLE[key]


def check_oracle(cfg: ModelConfig, outcomes: list[RequestOutcome], max_new: int) -> list[tuple[int, int]]:
    return [
        (o.tenant, o.index) for o in outcomes
        if o.ids is not None and o.ids != oracle_ids(cfg, o.prompt, max_new)
    ]


# --- in-process topology ---------------------------------------------------

class ServiceGateway:
    """Gateway adapter calling an in-process expert server (no platform, no scaling)."""

    def __init__(self, service: ExpertService):
        self.service = service

    def invoke_many(self, calls, timeout_ms=None) -> list:
        out = []
        for name, payload in calls:
            try:
                out.append(self.service.invoke(name, payload))
            except KeyError:
                out.append(NotFoundError(f"function {name!r} is not hosted"))
        return out


@dataclass
class InProcessTopology:
    sc: StrategyConfig
    engines: list[ParamStore] = field(default_factory=list)
    service: ExpertService | None = None
    platform: SimPlatform | None = None
    orchestrators: list[Orchestrator] = field(default_factory=list)

    @property
    def platform_processes(self) -> int:
        return 0

    @property
    def functions_registered(self) -> int:
        return len(self.platform.functions()) if self.platform else 0

    def orchestrator_for(self, tenant: int) -> Orchestrator:
        return self.orchestrators[0] if self.sc.kind is Strategy.SHARED else self.orchestrators[tenant]

    def now_s(self) -> float:
        return self.platform.now() / 1000.0 if self.platform else 0.0

    def residency(self, snapshot: int = 0) -> list[ResidencyRow]:
        t, pid = self.now_s(), os.getpid()
        rows = []
        for i, engine in enumerate(self.engines):
            rows.append(ResidencyRow(snapshot, t, "server", pid, f"engine-{i}",
                                     engine.resident_bytes(routed_experts=True),
                                     engine.resident_bytes(routed_experts=False)))
        for i, orch in enumerate(self.orchestrators):
            rows.append(ResidencyRow(snapshot, t, "orchestrator", pid, f"orchestrator-{i}", 0, orch.params.resident_bytes()))
        if self.service is not None:
            rows.append(ResidencyRow(snapshot, t, "server", pid, "local-server", self.service.stats()["resident_bytes"], 0))
        if self.platform is not None:
            for rep in self.platform.replicas():
                if rep["phase"] == "warm":
                    unit = f"{rep['function']}#{rep['replica_id']}"
                    rows.append(ResidencyRow(snapshot, t, "worker", pid, unit, rep["resident_bytes"], 0))
        return rows

    def teardown(self) -> None:
        pass


def deploy_inprocess(sc: StrategyConfig) -> InProcessTopology:
    cfg, blockmap = sc.cfg, sc.blockmap
    topo = InProcessTopology(sc)
    ocfg = OrchestratorConfig(cfg, blockmap, timeout_ms=sc.timeout_ms, retries=sc.retries,
                              mode="shared" if sc.kind is Strategy.SHARED else "private", window_ms=sc.window_ms)
    if sc.kind is Strategy.BASELINE:
        topo.engines = [ParamStore(cfg).materialize() for _ in range(sc.tenants)]
        return topo
    if sc.kind is Strategy.LOCAL:
        topo.service = ExpertService.for_model(cfg, blockmap)
        gateway = ServiceGateway(topo.service)
    else:
        topo.platform = SimPlatform(InProcessRuntime(cfg, blockmap), concurrency_limit=sc.concurrency_limit)
        register_blocks(topo.platform, blockmap, sc.max_replicas, sc.idle_timeout_ms, sc.cold_start_ms)
        gateway = topo.platform
    count = 1 if sc.kind is Strategy.SHARED else sc.tenants
    topo.orchestrators = [Orchestrator(ocfg, gateway) for _ in range(count)]
    return topo


def _run_inprocess(topo: InProcessTopology, workload: Workload) -> RunReport:
    sc, cfg = topo.sc, topo.sc.cfg
    start = time.perf_counter()
    residency: list[ResidencyRow] = []
    state = None

    def record():
        nonlocal state
        rows = topo.residency(len({r.snapshot for r in residency}))
        key = sorted((r.unit, r.expert_bytes, r.trunk_bytes) for r in rows)
        if key != state:
            residency.extend(rows)
            state = key

    record()
    if sc.kind is Strategy.BASELINE:
        per_tenant = [
            drive(tenant_job(i, list(workload.prompts[i]), sc.max_new, cfg, engine), local_resolver(cfg, engine))
            for i, engine in enumerate(topo.engines)
        ]
    else:
        jobs = [
            (topo.orchestrator_for(i), tenant_job(i, list(workload.prompts[i]), sc.max_new, cfg,
                                                  topo.orchestrator_for(i).params))
            for i in range(workload.tenants)
        ]
        per_tenant = run_lockstep(jobs, on_round=record)
    record()
    outcomes = [o for row in per_tenant for o in row]
    layers = [0] * cfg.num_layers
    for orch in topo.orchestrators:
        layers = [a + b for a, b in zip(layers, orch.invocations)]
    return RunReport(
        strategy=sc,
        outcomes=outcomes,
        mismatches=check_oracle(cfg, outcomes, sc.max_new),
        invocations_per_layer=layers,
        platform_counters=topo.platform.counters_document() if topo.platform else None,
        residency=residency,
        samples=[],
        latencies_ms=[],
        wall_s=time.perf_counter() - start,
        functions_registered=topo.functions_registered,
    )


# --- process topology ------------------------------------------------------

@dataclass
class ManagedProcess:
    role: str
    proc: subprocess.Popen
    url: str
    pid: int


def spawn(role: str, argv: list[str], timeout_s: float = 120.0) -> ManagedProcess:
    proc = subprocess.Popen(
        [sys.executable, "-m", "serverless_moe", *argv],
        stdout=subprocess.PIPE, stdin=subprocess.DEVNULL, text=True,
    )
    line: list[str] = []
    reader = threading.Thread(target=lambda: line.extend(proc.stdout.readline().split()), daemon=True)
    reader.start()
    reader.join(timeout_s)
    if len(line) != 3 or line[0] != "READY":
        proc.kill()
        raise RuntimeError(f"failed to start {role} process ({' '.join(argv)}): got {line!r}")
    return ManagedProcess(role, proc, line[1], int(line[2]))


@dataclass
class ProcessTopology:
    sc: StrategyConfig
    config_path: Path
    processes: list[ManagedProcess] = field(default_factory=list)
    tenant_urls: list[str] = field(default_factory=list)
    platform: ManagedProcess | None = None
    residency_rows: list[ResidencyRow] = field(default_factory=list)
    client: HttpClient = field(default_factory=HttpClient)

    @property
    def platform_processes(self) -> int:
        return 1 if self.platform else 0

    def by_role(self, role: str) -> list[ManagedProcess]:
        return [p for p in self.processes if p.role == role]

    @property
    def functions_registered(self) -> int:
        return len(self.client.get_json(self.platform.url + "/functions")) if self.platform else 0

    def replicas(self) -> list[dict]:
        return self.client.get_json(self.platform.url + "/replicas") if self.platform else []

    def targets(self) -> list[tuple[int, str]]:
        out = [(os.getpid(), "client")] + [(p.pid, p.role) for p in self.processes]
        if self.platform:
            try:
                out += [(r["pid"], "worker") for r in self.replicas() if "pid" in r]
            except Exception:
                pass
        return out

    def scrape_residency(self, now: float | None = None) -> list[ResidencyRow]:
        now = time.time() if now is None else now
        snap = len({r.snapshot for r in self.residency_rows})
        rows = []
        for p in self.processes:
            if p.role in ("orchestrator", "server"):
                stats = self.client.get_json(p.url + "/stats")
                rows.append(ResidencyRow(snap, now, p.role, p.pid, p.url, stats.get("resident_bytes", 0),
                                         stats.get("trunk_bytes", 0)))
        for r in self.replicas():
            if r["phase"] == "warm":
                rows.append(ResidencyRow(snap, now, "worker", r.get("pid", 0), f"{r['function']}#{r['replica_id']}",
                                         r.get("resident_bytes", 0), 0))
        self.residency_rows.extend(rows)
        return rows

    def teardown(self) -> None:
        for p in reversed(self.processes):
            if p.proc.poll() is None:
                p.proc.send_signal(signal.SIGINT)
        for p in reversed(self.processes):
            try:
                p.proc.wait(15)
            except subprocess.TimeoutExpired:
                p.proc.kill()
                p.proc.wait()
            if p.proc.stdout:
                p.proc.stdout.close()
        self.client.close()


def deploy_processes(sc: StrategyConfig, workdir: str | Path | None = None) -> ProcessTopology:
    workdir = Path(workdir or tempfile.mkdtemp(prefix="smoe-"))
    workdir.mkdir(parents=True, exist_ok=True)
    config_path = workdir / "model.cfg"
    config_path.write_text(dump_config(sc.cfg, sc.blockmap))
    topo = ProcessTopology(sc, config_path)
    common = ["--config", str(config_path), "--port", "0"]
    orch_flags = ["--timeout-ms", str(sc.timeout_ms), "--retries", str(sc.retries)]
    try:
        if sc.kind is Strategy.BASELINE:
            for _ in range(sc.tenants):
                topo.processes.append(spawn("server", ["orchestrate", *common, "--monolithic"]))
            topo.tenant_urls = [p.url for p in topo.processes]
            return topo
        if sc.kind is Strategy.LOCAL:
            backend = spawn("server", ["local-server", *common])
        else:
            backend = spawn("platform", [
                "platform", *common,
                "--idle-timeout-ms", str(sc.idle_timeout_ms),
                "--cold-start-ms", str(sc.cold_start_ms),
                "--max-replicas", str(sc.max_replicas),
                "--concurrency-limit", str(sc.concurrency_limit),
            ])
            topo.platform = backend
            gateway = HttpGateway(backend.url)
            for blk in sc.blockmap.blocks:
                gateway.register(FunctionSpec(
                    blk.name, blk.layer, blk.index, blk.experts, sc.max_replicas, sc.idle_timeout_ms, sc.cold_start_ms,
                ))
            gateway.close()
        topo.processes.append(backend)
        mode = "shared" if sc.kind is Strategy.SHARED else "private"
        count = 1 if sc.kind is Strategy.SHARED else sc.tenants
        for _ in range(count):
            topo.processes.append(spawn("orchestrator", [
                "orchestrate", *common, "--gateway", backend.url, "--mode", mode,
                "--window-ms", str(sc.window_ms), *orch_flags,
            ]))
        orchs = topo.by_role("orchestrator")
        topo.tenant_urls = [orchs[0].url] * sc.tenants if count == 1 else [p.url for p in orchs]
        return topo
    except Exception:
        topo.teardown()
        raise


def _run_processes(topo: ProcessTopology, workload: Workload) -> RunReport:
    sc = topo.sc
    sampler = Sampler(topo.targets, sc.cadence_s, on_tick=topo.scrape_residency)
    outcomes: list[RequestOutcome] = []
    latencies: list[float] = []
    lock = threading.Lock()
    barrier = threading.Barrier(workload.tenants)
    client = HttpClient()

    def tenant(i: int):
        barrier.wait()
        for j, prompt in enumerate(workload.prompts[i]):
            outcome = RequestOutcome(i, j, prompt)
            t0 = time.perf_counter()
            try:
                status, body = client.post_json(
                    topo.tenant_urls[i] + "/generate",
                    {"tenant": i, "prompt_hex": prompt.hex(), "max_new": sc.max_new},
                    timeout=sc.timeout_ms * (sc.retries + 2) / 1000.0,
                )
                if status == 200:
                    outcome.ids = body["ids"]
                    outcome.invocations = body["invocations"]
                else:
                    outcome.error = f"{status}: {body}"
            except Exception as exc:
                outcome.error = f"{type(exc).__name__}: {exc}"
            with lock:
                outcomes.append(outcome)
                latencies.append((time.perf_counter() - t0) * 1000.0)

    start = time.perf_counter()
    sampler.start()
    threads = [threading.Thread(target=tenant, args=(i,)) for i in range(workload.tenants)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - start
    topo.scrape_residency()
    sampler.stop()
    layers = [0] * sc.cfg.num_layers
    for p in topo.by_role("orchestrator"):
        stats = topo.client.get_json(p.url + "/stats")
        layers = [a + b for a, b in zip(layers, stats["invocations_per_layer"])]
    counters = topo.client.get_json(topo.platform.url + "/counters") if topo.platform else None
    outcomes.sort(key=lambda o: (o.tenant, o.index))
    for o in outcomes:
        if o.error:
            log.warning("tenant %d request %d failed: %s", o.tenant, o.index, o.error)
    return RunReport(
        strategy=sc,
        outcomes=outcomes,
        mismatches=check_oracle(sc.cfg, outcomes, sc.max_new),
        invocations_per_layer=layers,
        platform_counters=counters,
        residency=list(topo.residency_rows),
        samples=list(sampler.samples),
        latencies_ms=latencies,
        wall_s=wall,
        functions_registered=topo.functions_registered,
    )


# --- public entry points ---------------------------------------------------

def deploy(sc: StrategyConfig, workdir: str | Path | None = None):
    """Bring up the topology for ``sc`` and return a handle for :func:`run`."""
    return deploy_processes(sc, workdir) if sc.processes else deploy_inprocess(sc)


def run(topology, workload: Workload | None = None) -> RunReport:
    workload = workload or topology.sc.workload()
    if isinstance(topology, ProcessTopology):
        return _run_processes(topology, workload)
    return _run_inprocess(topology, workload)


def run_strategy(sc: StrategyConfig, workdir: str | Path | None = None) -> RunReport:
    """Deploy, run and tear down in one call."""
    topo = deploy(sc, workdir)
    try:
        return run(topo)
    finally:
        topo.teardown()


def sweep_block_size(base: StrategyConfig, sizes: list[int], workdir: str | Path | None = None) -> list[RunReport]:
    reports = []
    for b in sizes:
        sub = None if workdir is None else Path(workdir) / f"B{b}"
        reports.append(run_strategy(replace(base, block_size=b), sub))
    return reports
