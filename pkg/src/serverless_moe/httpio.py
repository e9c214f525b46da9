"""Minimal HTTP/1.1 server and keep-alive client on top of the standard library."""
from __future__ import annotations

import http.client
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

log = logging.getLogger(__name__)


class Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    app = None  # set per server subclass

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def json_body(self):
        try:
            return json.loads(self.body() or b"null")
        except ValueError:
            return None

    def reply(self, status: int, body: bytes, ctype: str = "application/octet-stream"):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def reply_json(self, status: int, obj):
        self.reply(status, json.dumps(obj).encode(), "application/json")

    def reply_error(self, status: int, message: str):
        self.reply_json(status, {"error": message})


class Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def start_server(handler: type[Handler], app, host: str = "127.0.0.1", port: int = 0) -> Server:
    """Bind and serve ``app`` on a daemon thread. Port 0 picks a free port."""
    cls = type(handler.__name__, (handler,), {"app": app})
    server = Server((host, port), cls)
    threading.Thread(target=server.serve_forever, name=f"http-{server.server_address[1]}", daemon=True).start()
    return server


class HttpClient:
    """Thread-safe client keeping one persistent connection per thread and host."""

    def __init__(self):
        self._local = threading.local()

    def _conn(self, netloc: str, timeout: float | None, fresh: bool = False) -> http.client.HTTPConnection:
        pool = self._local.__dict__.setdefault("pool", {})
        conn = pool.get(netloc)
        if conn is None or fresh:
            if conn is not None:
                conn.close()
            host, _, port = netloc.partition(":")
            conn = pool[netloc] = http.client.HTTPConnection(host, int(port or 80), timeout=timeout)
        conn.timeout = timeout
        if conn.sock is not None:
            conn.sock.settimeout(timeout)
        return conn

    def request(self, method: str, url: str, body: bytes | None = None, timeout: float | None = None, headers=None):
        parts = urlsplit(url)
        path = parts.path + (f"?{parts.query}" if parts.query else "")
        headers = dict(headers or {})
        if body is not None:
            headers.setdefault("Content-Type", "application/octet-stream")
        for attempt in range(2):
            conn = self._conn(parts.netloc, timeout, fresh=attempt > 0)
            reused = conn.sock is not None
            try:
                conn.request(method, path, body=body, headers=headers)
                resp = conn.getresponse()
                return resp.status, resp.read()
            except (http.client.RemoteDisconnected, BrokenPipeError, ConnectionResetError):
                conn.close()
                if not reused or attempt:
                    raise
            except Exception:
                conn.close()
                raise
        raise AssertionError("unreachable")

    def get_json(self, url: str, timeout: float | None = 10.0):
        status, data = self.request("GET", url, timeout=timeout)
        if status != 200:
            raise RuntimeError(f"GET {url} -> {status}: {data[:200]!r}")
        return json.loads(data)

    def post_json(self, url: str, obj, timeout: float | None = None):
        status, data = self.request("POST", url, json.dumps(obj).encode(), timeout=timeout)
        return status, (json.loads(data) if data else None)

    def close(self):
        for conn in self._local.__dict__.get("pool", {}).values():
            conn.close()
