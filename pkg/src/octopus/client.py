"""Minimal MCP client over the HTTP transport, plus an SSE frame reader."""

from __future__ import annotations

import itertools
import json
import socket
import urllib.error
import urllib.request
from typing import Any, Iterator

from octopus.mcpserve import SESSION_HEADER


class EndpointUnreachable(Exception):
    pass


class McpError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class McpClient:
    def __init__(self, base_url: str, timeout_s: float = 30.0, client_name: str = "octopus-client"):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.client_name = client_name
        self.session_id: str | None = None
        self._ids = itertools.count(1)

    def post_raw(self, body: bytes) -> tuple[int, Any]:
        headers = {"Content-Type": "application/json"}
        if self.session_id:
            headers[SESSION_HEADER] = self.session_id
        req = urllib.request.Request(f"{self.base_url}/mcp", data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                sid = resp.headers.get(SESSION_HEADER)
                if sid:
                    self.session_id = sid
                data = resp.read()
                return resp.status, (json.loads(data) if data else None)
        except urllib.error.HTTPError as exc:
            raise EndpointUnreachable(f"HTTP {exc.code} from {self.base_url}") from exc
        except (urllib.error.URLError, ConnectionError, socket.timeout, OSError) as exc:
            raise EndpointUnreachable(f"cannot reach {self.base_url}: {exc}") from exc

    def request(self, method: str, params: dict | None = None) -> dict:
        """Send one request and return the raw JSON-RPC response object."""
        msg = {"jsonrpc": "2.0", "id": next(self._ids), "method": method}
        if params is not None:
            msg["params"] = params
        _, resp = self.post_raw(json.dumps(msg).encode("utf-8"))
        return resp

    def notify(self, method: str, params: dict | None = None) -> None:
        msg = {"jsonrpc": "2.0", "method": method}
        if params is not None:
            msg["params"] = params
        self.post_raw(json.dumps(msg).encode("utf-8"))

    def _result(self, resp: dict) -> Any:
        if "error" in resp:
            raise McpError(resp["error"]["code"], resp["error"]["message"])
        return resp["result"]

    def initialize(self) -> dict:
        result = self._result(
            self.request(
                "initialize",
                {
                    "protocolVersion": "2024-11-05",
                    "capabilities": {},
                    "clientInfo": {"name": self.client_name, "version": "0.1.0"},
                },
            )
        )
        self.notify("notifications/initialized")
        return result

    def list_tools(self) -> list[dict]:
        return self._result(self.request("tools/list"))["tools"]

    def call_tool(self, name: str, arguments: dict | None = None) -> dict:
        return self._result(self.request("tools/call", {"name": name, "arguments": arguments or {}}))

    def log(self, level: str, text: str, logger: str = "daemon") -> None:
        self.notify("notifications/message", {"level": level, "logger": logger, "data": text})

    def healthz(self) -> dict:
        try:
            with urllib.request.urlopen(f"{self.base_url}/healthz", timeout=self.timeout_s) as resp:
                return json.loads(resp.read())
        except (urllib.error.URLError, ConnectionError, socket.timeout, OSError, ValueError) as exc:
            raise EndpointUnreachable(f"cannot reach {self.base_url}: {exc}") from exc


def probe_health(base_url: str, timeout_s: float = 1.0) -> dict | None:
    try:
        return McpClient(base_url, timeout_s).healthz()
    except EndpointUnreachable:
        return None


def iter_sse(url: str, timeout_s: float = 30.0) -> Iterator[tuple[str, dict]]:
    """Yield (event, data) frames from an SSE endpoint until the stream ends.

    Raises EndpointUnreachable if the connection cannot be opened.
    """
    try:
        resp = urllib.request.urlopen(url, timeout=timeout_s)
    except (urllib.error.URLError, ConnectionError, socket.timeout, OSError) as exc:
        raise EndpointUnreachable(f"cannot open {url}: {exc}") from exc
    with resp:
        event, data_lines = "message", []
        while True:
            try:
                raw = resp.readline()
            except (socket.timeout, OSError, ValueError):
                return
            if not raw:
                return
            line = raw.decode("utf-8", "replace").rstrip("\r\n")
            if not line:
                if data_lines:
                    try:
                        payload = json.loads("\n".join(data_lines))
                    except json.JSONDecodeError:
                        payload = {"raw": "\n".join(data_lines)}
                    yield event, payload
                event, data_lines = "message", []
            elif line.startswith(":"):
                continue
            elif line.startswith("event:"):
                event = line[6:].strip()
            elif line.startswith("data:"):
                data_lines.append(line[5:].lstrip())
