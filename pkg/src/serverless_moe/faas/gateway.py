"""HTTP gateway in front of a platform, and the matching client.

Routes::

    POST /invoke/{name}   protocol bytes in, protocol bytes out
                          404 unknown function, 504 timeout, 502 upstream error
    POST /register        JSON FunctionSpec; 201, 409 duplicate, 400 invalid
    GET  /functions       JSON list of registered functions with replica counts
    GET  /counters        JSON {"functions": {name: counters}, "totals": {...}}
    GET  /replicas        JSON list of live replicas (phase, in_flight, pid, url, resident_bytes)

An ``X-Deadline-Ms`` request header overrides the gateway's default deadline.
"""
from __future__ import annotations

import socket
from concurrent.futures import ThreadPoolExecutor

from ..httpio import Handler, HttpClient, start_server
from ..protocol import ProtocolError
from .core import (
    DuplicateFunctionError,
    FunctionSpec,
    InvokeTimeout,
    NotFoundError,
    PlatformError,
    UpstreamError,
)


class GatewayHandler(Handler):
    def do_POST(self):
        parts = self.path.strip("/").split("/")
        platform = self.app
        if len(parts) == 2 and parts[0] == "invoke":
            payload = self.body()
            deadline = self.headers.get("X-Deadline-Ms")
            try:
                out = platform.invoke(parts[1], payload, float(deadline) if deadline else None)
            except NotFoundError as exc:
                return self.reply_error(404, str(exc))
            except InvokeTimeout as exc:
                return self.reply_error(504, str(exc))
            except UpstreamError as exc:
                return self.reply_error(502, str(exc))
            return self.reply(200, out)
        if parts == ["register"]:
            data = self.json_body()
            try:
                spec = FunctionSpec.from_dict({**getattr(platform, "spec_defaults", {}), **data})
                platform.register(spec)
            except DuplicateFunctionError as exc:
                return self.reply_error(409, str(exc))
            except (TypeError, ValueError, AttributeError) as exc:
                return self.reply_error(400, f"invalid function spec: {exc}")
            return self.reply_json(201, spec.to_dict())
        self.reply_error(404, f"no route {self.path}")

    def do_GET(self):
        route = self.path.rstrip("/")
        if route == "/functions":
            return self.reply_json(200, self.app.functions())
        if route == "/counters":
            return self.reply_json(200, self.app.counters_document())
        if route == "/replicas":
            return self.reply_json(200, self.app.replicas())
        self.reply_error(404, f"no route {self.path}")


def serve_gateway(platform, host: str = "127.0.0.1", port: int = 0):
    return start_server(GatewayHandler, platform, host, port)


class HttpGateway:
    """Client for anything exposing ``POST /invoke/{name}`` with platform status codes."""

    def __init__(self, url: str, max_workers: int = 16):
        self.url = url.rstrip("/")
        self.client = HttpClient()
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="gw")

    def invoke(self, name: str, payload: bytes, timeout_ms: float | None = None) -> bytes:
        timeout = None if timeout_ms is None else timeout_ms / 1000.0
        headers = {} if timeout_ms is None else {"X-Deadline-Ms": str(timeout_ms)}
        try:
            status, body = self.client.request("POST", f"{self.url}/invoke/{name}", payload, timeout, headers)
        except (socket.timeout, TimeoutError):
            raise InvokeTimeout(f"{name}: no answer within {timeout_ms} ms") from None
        except OSError as exc:
            raise UpstreamError(f"{name}: gateway unreachable: {exc}") from None
        if status == 200:
            return body
        message = f"{name}: {status} {body[:200]!r}"
        if status == 404:
            raise NotFoundError(message)
        if status == 504:
            raise InvokeTimeout(message)
        if status == 400:
            raise ProtocolError(message)
        raise UpstreamError(message)

    def invoke_many(self, calls, timeout_ms: float | None = None) -> list:
        def one(call):
            try:
                return self.invoke(call[0], call[1], timeout_ms)
            except (PlatformError, ProtocolError) as exc:
                return exc

        if len(calls) == 1:
            return [one(calls[0])]
        return list(self._pool.map(one, calls))

    def register(self, spec: FunctionSpec) -> None:
        status, body = self.client.post_json(self.url + "/register", spec.to_dict(), timeout=30)
        if status == 409:
            raise DuplicateFunctionError(body.get("error"))
        if status != 201:
            raise PlatformError(f"register {spec.name}: {status} {body}")

    def functions(self) -> list[dict]:
        return self.client.get_json(self.url + "/functions")

    def counters_document(self) -> dict:
        return self.client.get_json(self.url + "/counters")

    def replicas(self) -> list[dict]:
        return self.client.get_json(self.url + "/replicas")

    def close(self) -> None:
        self._pool.shutdown(wait=False)
        self.client.close()
