"""Threaded platform on the wall clock, used behind the HTTP gateway."""
from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout

from .core import (
    FunctionSpec,
    InvokeTimeout,
    Phase,
    PlatformBase,
    PlatformError,
    UpstreamError,
    counters_document,
)

log = logging.getLogger(__name__)


class Platform(PlatformBase):
    def __init__(self, runtime, concurrency_limit: int = 4, tick_ms: float = 50.0, default_deadline_ms: float = 30_000.0):
        super().__init__(runtime, concurrency_limit)
        self.tick_ms = tick_ms
        self.default_deadline_ms = default_deadline_ms
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._waiting: dict[str, int] = {}
        self._start_failures: dict[str, int] = {}
        self._closed = threading.Event()
        self._pool = ThreadPoolExecutor(max_workers=32, thread_name_prefix="invoke")
        # handler calls run apart from invoke_many callers so neither pool can starve the other
        self._handlers = ThreadPoolExecutor(max_workers=256, thread_name_prefix="handler")
        self._ticker = threading.Thread(target=self._tick_loop, name="autoscaler", daemon=True)
        self._ticker.start()

    def now(self) -> float:
        return time.monotonic() * 1000.0

    def register(self, spec: FunctionSpec) -> None:
        with self._lock:
            self._register(spec)
            self._waiting[spec.name] = 0
            self._start_failures[spec.name] = 0

    def functions(self) -> list[dict]:
        with self._lock:
            return self._functions_listing()

    def replicas(self) -> list[dict]:
        with self._lock:
            return self._replica_listing()

    def snapshot_counters(self):
        with self._lock:
            return self._snapshot()

    def counters_document(self) -> dict:
        return counters_document(self.snapshot_counters())

    def warm_replicas(self, name: str | None = None) -> int:
        with self._lock:
            return super().warm_replicas(name)

    # replica lifecycle

    def _start(self, fn) -> None:
        rep = self._new_replica(fn)

        def boot():
            time.sleep(fn.spec.cold_start_ms / 1000.0)
            try:
                instance = self.runtime.start(fn.spec)
            except Exception:
                log.exception("failed to start %s replica %d", fn.spec.name, rep.replica_id)
                with self._lock:
                    fn.replicas.remove(rep)
                    self._start_failures[fn.spec.name] += 1
                    self._cond.notify_all()
                return
            with self._lock:
                rep.instance = instance
                self._move(fn, rep, Phase.WARM)
                self._cond.notify_all()

        threading.Thread(target=boot, name=f"boot-{fn.spec.name}-{rep.replica_id}", daemon=True).start()

    def _retire(self, fn, rep) -> None:
        self._move(fn, rep, Phase.DRAINING)
        instance = rep.instance
        self._move(fn, rep, Phase.COLD)
        stop = getattr(instance, "stop", None)
        if stop:
            self._pool.submit(stop)

    def autoscale_tick(self, now: float | None = None) -> list[tuple[str, str, int]]:
        actions = []
        with self._lock:
            now = self.now() if now is None else now
            for name, fn in self._functions.items():
                scale_up, idle = self._scaling(fn, now, self._waiting[name])
                if scale_up:
                    self._start(fn)
                    actions.append(("scale_up", name, fn.replicas[-1].replica_id))
                for rep in idle:
                    self._retire(fn, rep)
                    actions.append(("scale_down", name, rep.replica_id))
        return actions

    def _tick_loop(self) -> None:
        while not self._closed.wait(self.tick_ms / 1000.0):
            try:
                self.autoscale_tick()
            except Exception:
                log.exception("autoscale tick failed")

    # invocation

    def invoke(self, name: str, payload: bytes, deadline_ms: float | None = None) -> bytes:
        deadline = self.now() + (self.default_deadline_ms if deadline_ms is None else deadline_ms)
        with self._lock:
            fn = self._lookup(name)
            fn.counters.invocations += 1
            fn.counters.bytes_in += len(payload)
            failures_seen = self._start_failures[name]
            self._waiting[name] += 1
            try:
                while (rep := self._pick(fn)) is None:
                    if self._start_failures[name] != failures_seen and not fn.replicas:
                        fn.counters.upstream_errors += 1
                        raise UpstreamError(f"{name}: replica failed to start")
                    if not fn.replicas:
                        self._start(fn)
                    remaining = deadline - self.now()
                    if remaining <= 0:
                        fn.counters.timeouts += 1
                        raise InvokeTimeout(f"{name}: deadline exceeded waiting for a replica")
                    self._cond.wait(remaining / 1000.0)
            finally:
                self._waiting[name] -= 1
            rep.in_flight += 1
        future = self._handlers.submit(rep.instance, payload, timeout_ms=max(deadline - self.now(), 1.0))
        # the replica stays busy until the handler really returns, even past the deadline
        future.add_done_callback(lambda _: self._release(fn, rep))
        try:
            response = future.result(timeout=max(deadline - self.now(), 1.0) / 1000.0)
        except (InvokeTimeout, FutureTimeout):
            with self._lock:
                fn.counters.timeouts += 1
            raise InvokeTimeout(f"{name}: deadline exceeded") from None
        except Exception as exc:
            with self._lock:
                fn.counters.upstream_errors += 1
                if getattr(rep.instance, "alive", True) is False:
                    rep.broken = True
            raise UpstreamError(f"{name} replica {rep.replica_id} failed: {exc}") from exc
        with self._lock:
            fn.counters.completed += 1
            fn.counters.bytes_out += len(response)
        return response

    def _release(self, fn, rep) -> None:
        with self._lock:
            rep.in_flight -= 1
            rep.last_used = self.now()
            if rep.broken and rep.in_flight == 0 and rep.phase is Phase.WARM:
                self._retire(fn, rep)
            self._cond.notify_all()

    def invoke_many(self, calls, timeout_ms: float | None = None) -> list:
        def one(call):
            try:
                return self.invoke(call[0], call[1], timeout_ms)
            except PlatformError as exc:
                return exc

        return list(self._pool.map(one, calls))

    def close(self) -> None:
        self._closed.set()
        with self._lock:
            for fn in self._functions.values():
                for rep in list(fn.replicas):
                    if rep.phase is Phase.WARM:
                        self._retire(fn, rep)
        self._pool.shutdown(wait=True)
        self._handlers.shutdown(wait=True)
        with self._lock:
            for fn in self._functions.values():
                for rep in list(fn.replicas):
                    stop = getattr(rep.instance, "stop", None)
                    if stop:
                        stop()
