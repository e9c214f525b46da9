"""Registry, replica lifecycle and counters shared by the simulated and live platforms."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields


class PlatformError(Exception):
    pass


class NotFoundError(PlatformError):
    pass


class DuplicateFunctionError(PlatformError):
    pass


class InvokeTimeout(PlatformError):
    pass


class UpstreamError(PlatformError):
    pass


class Phase(enum.Enum):
    COLD = "cold"
    STARTING = "starting"
    WARM = "warm"
    DRAINING = "draining"


_ALLOWED = {
    (Phase.COLD, Phase.STARTING),
    (Phase.STARTING, Phase.WARM),
    (Phase.WARM, Phase.DRAINING),
    (Phase.DRAINING, Phase.COLD),
}


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    layer: int = 0
    block: int = 0
    experts: tuple[int, ...] = ()
    max_replicas: int = 4
    idle_timeout_ms: float = 30_000.0
    cold_start_ms: float = 200.0

    def __post_init__(self):
        if not self.name:
            raise ValueError("function name must be non-empty")
        if self.max_replicas < 1:
            raise ValueError("max_replicas must be >= 1")
        if self.idle_timeout_ms < 0 or self.cold_start_ms < 0:
            raise ValueError("durations must be non-negative")
        object.__setattr__(self, "experts", tuple(self.experts))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["experts"] = list(self.experts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown FunctionSpec fields {sorted(extra)}")
        return cls(**d)


@dataclass
class InstanceState:
    function: str
    replica_id: int
    phase: Phase = Phase.COLD
    last_used: float = 0.0
    in_flight: int = 0
    warm_since: float | None = None
    broken: bool = False
    instance: object = field(default=None, repr=False)


@dataclass
class FunctionCounters:
    invocations: int = 0
    cold_starts: int = 0
    max_concurrent_replicas: int = 0
    total_warm_ms: float = 0.0
    bytes_in: int = 0
    bytes_out: int = 0
    completed: int = 0
    timeouts: int = 0
    upstream_errors: int = 0


@dataclass
class _Function:
    spec: FunctionSpec
    replicas: list[InstanceState] = field(default_factory=list)
    counters: FunctionCounters = field(default_factory=FunctionCounters)
    next_replica: int = 0


class PlatformBase:
    """State and policy common to both platform drivers.

    Subclasses provide ``now()`` and ``_start_instance``/``_stop_instance``.
    Callers must hold whatever lock the subclass uses around every method here.
    """

    def __init__(self, runtime, concurrency_limit: int = 4):
        if concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        self.runtime = runtime
        self.concurrency_limit = concurrency_limit
        self._functions: dict[str, _Function] = {}
        self.transitions: list[tuple[float, str, int, str, str]] = []

    def now(self) -> float:
        raise NotImplementedError

    # registry

    def _register(self, spec: FunctionSpec) -> None:
        if spec.name in self._functions:
            raise DuplicateFunctionError(f"function {spec.name!r} already registered")
        self._functions[spec.name] = _Function(spec)

    def _lookup(self, name: str) -> _Function:
        try:
            return self._functions[name]
        except KeyError:
            raise NotFoundError(f"function {name!r} is not registered") from None

    def _functions_listing(self) -> list[dict]:
        out = []
        for fn in self._functions.values():
            d = fn.spec.to_dict()
            d["warm_replicas"] = sum(r.phase is Phase.WARM for r in fn.replicas)
            d["replicas"] = len(fn.replicas)
            out.append(d)
        return out

    # lifecycle

    def _move(self, fn: _Function, rep: InstanceState, phase: Phase) -> None:
        if (rep.phase, phase) not in _ALLOWED:
            raise RuntimeError(f"illegal transition {rep.phase} -> {phase}")
        now = self.now()
        self.transitions.append((now, fn.spec.name, rep.replica_id, rep.phase.value, phase.value))
        if phase is Phase.WARM:
            rep.warm_since = rep.last_used = now
        elif phase is Phase.DRAINING and rep.warm_since is not None:
            fn.counters.total_warm_ms += now - rep.warm_since
            rep.warm_since = None
        rep.phase = phase
        if phase is Phase.COLD:
            fn.replicas.remove(rep)

    def _new_replica(self, fn: _Function) -> InstanceState:
        rep = InstanceState(fn.spec.name, fn.next_replica)
        fn.next_replica += 1
        fn.replicas.append(rep)
        self._move(fn, rep, Phase.STARTING)
        fn.counters.cold_starts += 1
        fn.counters.max_concurrent_replicas = max(fn.counters.max_concurrent_replicas, len(fn.replicas))
        return rep

    def _pick(self, fn: _Function) -> InstanceState | None:
        """Least in-flight warm replica with spare capacity, lowest id on ties."""
        ready = [
            r for r in fn.replicas
            if r.phase is Phase.WARM and not r.broken and r.in_flight < self.concurrency_limit
        ]
        return min(ready, key=lambda r: (r.in_flight, r.replica_id), default=None)

    def _scaling(self, fn: _Function, now: float, backlog: int) -> tuple[bool, list[InstanceState]]:
        starting = sum(r.phase is Phase.STARTING for r in fn.replicas)
        spare = sum(
            self.concurrency_limit - r.in_flight
            for r in fn.replicas if r.phase is Phase.WARM and not r.broken
        )
        capacity = starting * self.concurrency_limit + max(spare, 0)
        scale_up = backlog > capacity and len(fn.replicas) < fn.spec.max_replicas
        idle = [
            r for r in fn.replicas
            if r.phase is Phase.WARM and r.in_flight == 0 and now - r.last_used >= fn.spec.idle_timeout_ms
        ]
        return scale_up, idle

    # accounting

    def _snapshot(self) -> dict[str, FunctionCounters]:
        now = self.now()
        snap = {}
        for name, fn in self._functions.items():
            c = FunctionCounters(**asdict(fn.counters))
            c.total_warm_ms += sum(now - r.warm_since for r in fn.replicas if r.warm_since is not None)
            snap[name] = c
        return snap

    def _replica_listing(self) -> list[dict]:
        out = []
        for fn in self._functions.values():
            for r in fn.replicas:
                info = {
                    "function": r.function,
                    "replica_id": r.replica_id,
                    "phase": r.phase.value,
                    "in_flight": r.in_flight,
                    "last_used": r.last_used,
                }
                for attr in ("url", "pid"):
                    if hasattr(r.instance, attr):
                        info[attr] = getattr(r.instance, attr)
                if r.phase is Phase.WARM and hasattr(r.instance, "resident_bytes"):
                    info["resident_bytes"] = r.instance.resident_bytes
                out.append(info)
        return out

    def warm_replicas(self, name: str | None = None) -> int:
        fns = [self._lookup(name)] if name else self._functions.values()
        return sum(r.phase is Phase.WARM for fn in fns for r in fn.replicas)


def counters_document(snapshot: dict[str, FunctionCounters]) -> dict:
    """Counters as a JSON-ready document with per-function rows and totals."""
    functions = {name: asdict(c) for name, c in snapshot.items()}
    totals = {}
    for f in fields(FunctionCounters):
        values = [row[f.name] for row in functions.values()]
        totals[f.name] = max(values, default=0) if f.name == "max_concurrent_replicas" else sum(values)
    return {"functions": functions, "totals": totals}
