"""Instance runtimes: how the platform turns a FunctionSpec into a running replica."""
from __future__ import annotations

import socket
import subprocess
import sys
from pathlib import Path

from ..config import BlockMap, ModelConfig
from ..expert import ExpertService
from ..httpio import HttpClient
from .core import FunctionSpec, InvokeTimeout, UpstreamError


class LocalInstance:
    """Expert block living inside the platform process."""

    def __init__(self, service: ExpertService):
        self.service = service

    def __call__(self, payload: bytes, timeout_ms: float | None = None) -> bytes:
        return self.service.invoke(None, payload)

    @property
    def resident_bytes(self) -> int:
        return self.service.stats()["resident_bytes"]


class InProcessRuntime:
    def __init__(self, cfg: ModelConfig, blockmap: BlockMap):
        self.cfg = cfg
        self.blockmap = blockmap

    def start(self, spec: FunctionSpec) -> LocalInstance:
        return LocalInstance(ExpertService.for_block(self.cfg, self.blockmap, spec.layer, spec.block))


class WorkerProcess:
    """An expert-block worker in its own OS process, reached over HTTP."""

    def __init__(self, argv: list[str], ready_timeout_s: float = 120.0):
        self.proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stdin=subprocess.DEVNULL, text=True)
        line = self.proc.stdout.readline().split()
        if len(line) != 3 or line[0] != "READY":
            self.proc.kill()
            raise RuntimeError(f"worker {argv} did not report readiness (got {line!r})")
        self.url, self.pid = line[1], int(line[2])
        self._client = HttpClient()
        self.resident_bytes = self._client.get_json(self.url + "/stats", timeout=ready_timeout_s)["resident_bytes"]

    @property
    def alive(self) -> bool:
        return self.proc.poll() is None

    def __call__(self, payload: bytes, timeout_ms: float | None = None) -> bytes:
        timeout = None if timeout_ms is None else timeout_ms / 1000.0
        try:
            status, body = self._client.request("POST", self.url + "/invoke", payload, timeout=timeout)
        except (socket.timeout, TimeoutError):
            raise InvokeTimeout(f"worker {self.pid} timed out") from None
        except OSError as exc:
            raise UpstreamError(f"worker {self.pid} unreachable: {exc}") from None
        if status != 200:
            raise UpstreamError(f"worker {self.pid} answered {status}: {body[:200]!r}")
        return body

    def stats(self) -> dict:
        return self._client.get_json(self.url + "/stats")

    def stop(self) -> None:
        self._client.close()
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        if self.proc.stdout:
            self.proc.stdout.close()


class SubprocessRuntime:
    """Start each replica as ``python -m serverless_moe expert`` on a free port."""

    def __init__(self, config_path: str | Path, python: str = sys.executable):
        self.config_path = str(config_path)
        self.python = python

    def start(self, spec: FunctionSpec) -> WorkerProcess:
        return WorkerProcess([
            self.python, "-m", "serverless_moe", "expert",
            "--config", self.config_path,
            "--layer", str(spec.layer),
            "--block", str(spec.block),
            "--port", "0",
        ])
