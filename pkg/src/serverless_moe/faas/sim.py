"""Discrete-event platform driven by an injected millisecond clock.

Single-threaded and fully deterministic: a trace of submissions produces
the same invocations, cold starts and replica transitions on every run.
Handlers execute instantly at dispatch; their service time comes from
``instance.service_ms(payload)`` when defined, else the platform default.
"""
from __future__ import annotations

import heapq
import itertools
import threading
from collections import deque
from dataclasses import dataclass, field

from .core import (
    FunctionSpec,
    InvokeTimeout,
    Phase,
    PlatformBase,
    PlatformError,
    UpstreamError,
    counters_document,
)


@dataclass(eq=False)
class Ticket:
    id: int
    function: str
    payload: bytes = field(repr=False)
    submitted: float
    deadline: float | None
    done: bool = False
    response: bytes | None = field(default=None, repr=False)
    error: Exception | None = None
    completed_at: float | None = None

    def result(self) -> bytes:
        if not self.done:
            raise RuntimeError(f"ticket {self.id} still pending")
        if self.error is not None:
            raise self.error
        return self.response


class SimPlatform(PlatformBase):
    def __init__(self, runtime, concurrency_limit: int = 4, tick_ms: float = 100.0, service_ms: float = 0.0):
        super().__init__(runtime, concurrency_limit)
        self.tick_ms = tick_ms
        self.service_ms = service_ms
        self._now = 0.0
        self._next_tick = tick_ms
        self._events: list = []
        self._seq = itertools.count()
        self._ids = itertools.count()
        self._queues: dict[str, deque[Ticket]] = {}
        # Serializes access when a simulated platform sits behind the HTTP gateway.
        self.lock = threading.RLock()

    def now(self) -> float:
        return self._now

    def register(self, spec: FunctionSpec) -> None:
        self._register(spec)
        self._queues[spec.name] = deque()

    def functions(self) -> list[dict]:
        return self._functions_listing()

    def replicas(self) -> list[dict]:
        return self._replica_listing()

    def snapshot_counters(self):
        return self._snapshot()

    def counters_document(self) -> dict:
        return counters_document(self._snapshot())

    # event loop

    def _schedule(self, when: float, kind: str, *args) -> None:
        heapq.heappush(self._events, (when, next(self._seq), kind, args))

    def _step(self) -> None:
        """Process the earliest event; ticks run after events at the same instant."""
        if self._events and self._events[0][0] <= self._next_tick:
            when, _, kind, args = heapq.heappop(self._events)
            self._now = max(self._now, when)
            getattr(self, f"_on_{kind}")(*args)
        else:
            self._now = self._next_tick
            self._next_tick += self.tick_ms
            self.autoscale_tick()

    def run_until(self, t_ms: float, final_tick: bool = True) -> None:
        """Advance the clock to ``t_ms``, processing every event up to and including it."""
        while True:
            nxt = min(self._events[0][0] if self._events else float("inf"), self._next_tick)
            if nxt > t_ms:
                break
            self._step()
        self._now = max(self._now, t_ms)
        if final_tick:
            self.autoscale_tick()

    def advance(self, dt_ms: float) -> None:
        self.run_until(self._now + dt_ms)

    def wait(self, tickets) -> None:
        tickets = list(tickets)
        while not all(t.done for t in tickets):
            if not self._events:
                raise RuntimeError("simulation stalled with pending tickets")
            self._step()

    # invocation

    def submit(self, name: str, payload: bytes, deadline_ms: float | None = None) -> Ticket:
        fn = self._lookup(name)
        deadline = None if deadline_ms is None else self._now + deadline_ms
        ticket = Ticket(next(self._ids), name, payload, self._now, deadline)
        fn.counters.invocations += 1
        fn.counters.bytes_in += len(payload)
        self._queues[name].append(ticket)
        if deadline is not None:
            self._schedule(deadline, "deadline", ticket)
        self._dispatch(name)
        return ticket

    def invoke(self, name: str, payload: bytes, deadline_ms: float | None = None) -> bytes:
        with self.lock:
            ticket = self.submit(name, payload, deadline_ms)
            self.wait([ticket])
            return ticket.result()

    def invoke_many(self, calls, timeout_ms: float | None = None) -> list:
        """Submit every call at the current instant and run until all resolve."""
        with self.lock:
            tickets = []
            for name, payload in calls:
                try:
                    tickets.append(self.submit(name, payload, timeout_ms))
                except PlatformError as exc:
                    tickets.append(exc)
            self.wait([t for t in tickets if isinstance(t, Ticket)])
            return [t if isinstance(t, Exception) else (t.error or t.response) for t in tickets]

    def _dispatch(self, name: str) -> None:
        fn = self._functions[name]
        queue = self._queues[name]
        while queue:
            if queue[0].done:
                queue.popleft()
                continue
            rep = self._pick(fn)
            if rep is None:
                if not fn.replicas:
                    self._start(fn)
                return
            ticket = queue.popleft()
            rep.in_flight += 1
            try:
                response, error = rep.instance(ticket.payload), None
            except Exception as exc:  # handler crash surfaces as an upstream error
                response, error = None, UpstreamError(f"{name} replica {rep.replica_id} failed: {exc}")
            service = getattr(rep.instance, "service_ms", None)
            delay = service(ticket.payload) if callable(service) else self.service_ms
            self._schedule(self._now + delay, "done", name, rep, ticket, response, error)

    def _start(self, fn) -> None:
        rep = self._new_replica(fn)
        rep.instance = self.runtime.start(fn.spec)
        self._schedule(self._now + fn.spec.cold_start_ms, "warm", fn.spec.name, rep)

    def _resolve(self, ticket: Ticket, response=None, error=None) -> None:
        ticket.done = True
        ticket.response, ticket.error = response, error
        ticket.completed_at = self._now
        c = self._functions[ticket.function].counters
        if error is None:
            c.completed += 1
            c.bytes_out += len(response)
        elif isinstance(error, InvokeTimeout):
            c.timeouts += 1
        else:
            c.upstream_errors += 1

    def _on_warm(self, name: str, rep) -> None:
        self._move(self._functions[name], rep, Phase.WARM)
        self._dispatch(name)

    def _on_done(self, name: str, rep, ticket: Ticket, response, error) -> None:
        rep.in_flight -= 1
        rep.last_used = self._now
        if not ticket.done:
            self._resolve(ticket, response, error)
        self._dispatch(name)

    def _on_deadline(self, ticket: Ticket) -> None:
        if not ticket.done:
            self._resolve(ticket, error=InvokeTimeout(f"{ticket.function}: deadline exceeded"))

    def autoscale_tick(self, now: float | None = None) -> list[tuple[str, str, int]]:
        """Apply scaling policy at the current simulated instant."""
        if now is not None and now > self._now:
            self.run_until(now, final_tick=False)
        actions = []
        for name, fn in self._functions.items():
            backlog = sum(not t.done for t in self._queues[name])
            scale_up, idle = self._scaling(fn, self._now, backlog)
            if scale_up:
                self._start(fn)
                actions.append(("scale_up", name, fn.replicas[-1].replica_id))
            for rep in idle:
                self._move(fn, rep, Phase.DRAINING)
                stop = getattr(rep.instance, "stop", None)
                if stop:
                    stop()
                self._move(fn, rep, Phase.COLD)
                actions.append(("scale_down", name, rep.replica_id))
        return actions
