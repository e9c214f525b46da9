"""Per-process CPU and RSS sampling at a fixed cadence."""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import psutil

ROLES = ("client", "orchestrator", "gateway", "platform", "worker", "server")


@dataclass(frozen=True)
class ResourceSample:
    timestamp: float
    role: str
    pid: int
    cpu_percent: float
    rss_bytes: int
    terminal: bool = False


class _Tracker:
    def __init__(self):
        self.procs: dict[int, psutil.Process] = {}
        self.gone: set[int] = set()
        self.errors: dict[int, str] = {}

    def sample(self, targets: Iterable[tuple[int, str]], now: float) -> list[ResourceSample]:
        out = []
        for pid, role in targets:
            if pid in self.gone:
                continue
            try:
                proc = self.procs.get(pid)
                if proc is None:
                    proc = self.procs[pid] = psutil.Process(pid)
                    proc.cpu_percent(None)
                with proc.oneshot():
                    out.append(ResourceSample(now, role, pid, proc.cpu_percent(None), proc.memory_info().rss))
            except psutil.NoSuchProcess:
                self.gone.add(pid)
                out.append(ResourceSample(now, role, pid, 0.0, 0, terminal=True))
            except psutil.AccessDenied as exc:
                self.errors[pid] = f"access denied: {exc}"
        return out


def sample_resources(
    targets: Callable[[], Iterable[tuple[int, str]]] | Iterable[tuple[int, str]],
    cadence_s: float = 1.0,
    count: int | None = None,
) -> Iterator[ResourceSample]:
    """Yield samples for ``(pid, role)`` targets every ``cadence_s`` seconds.

    ``targets`` may be a callable, re-evaluated each round, so processes that
    appear later (scaled-out workers) are picked up. A process that disappears
    yields one terminal sample with zero usage and is then dropped.
    """
    tracker = _Tracker()
    resolve = targets if callable(targets) else (lambda fixed=list(targets): fixed)
    rounds = 0
    next_at = time.monotonic()
    while count is None or rounds < count:
        yield from tracker.sample(resolve(), time.time())
        rounds += 1
        next_at += cadence_s
        time.sleep(max(0.0, next_at - time.monotonic()))


class Sampler(threading.Thread):
    """Background sampler collecting into ``samples`` until ``stop()``."""

    def __init__(self, targets, cadence_s: float = 1.0, on_tick: Callable[[float], None] | None = None):
        super().__init__(name="sampler", daemon=True)
        self.targets = targets
        self.cadence_s = cadence_s
        self.on_tick = on_tick
        self.samples: list[ResourceSample] = []
        self.tracker = _Tracker()
        self._halt = threading.Event()

    def run(self):
        while True:
            now = time.time()
            self.samples.extend(self.tracker.sample(self.targets(), now))
            if self.on_tick:
                try:
                    self.on_tick(now)
                except Exception:  # scraping is best effort; sampling continues
                    pass
            if self._halt.wait(self.cadence_s):
                break

    def stop(self):
        self._halt.set()
        self.join()

    @property
    def errors(self) -> dict[int, str]:
        return self.tracker.errors
