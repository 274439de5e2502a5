"""Generic MCP runtime: serves a ServerManifest over JSON-RPC 2.0.

Transport: ``POST /mcp`` carries requests, ``GET /sse`` streams server
notifications (``event: log`` / ``event: heartbeat``), ``GET /healthz``
reports status. Device failures come back in-band as ``isError`` tool results;
JSON-RPC errors are reserved for protocol faults.
"""

from __future__ import annotations

import base64
import errno
import json
import logging
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Mapping

from octopus.bus import STEP_DEPENDENCIES, BusError, DependencyMissing, DeviceBus, DeviceNotFound, StepTimeout
from octopus.canonical import sha256_hex
from octopus.events import EventLog, LogEvent
from octopus.plan import (
    CaptureFrame,
    Delay,
    Expect,
    GpioSet,
    HandlerPlan,
    Open,
    Read,
    TemplateError,
    Write,
    render_bytes,
    resolve_int,
)
from octopus.toolgen import ManifestTampered, ServerManifest, ToolSchema, load_manifest, verify_manifest

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "2024-11-05"
SESSION_HEADER = "Mcp-Session-Id"

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
NOT_INITIALIZED = -32002


class PortInUse(Exception):
    pass


# -- plan execution ---------------------------------------------------------------


@dataclass
class ToolResult:
    is_error: bool
    content: list[dict]
    trace: list[str] = field(default_factory=list)
    error_kind: str | None = None
    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.is_error and not any(b.get("type") == "text" and b.get("text") for b in self.content):
            raise ValueError("error results need a diagnostic text block")

    @property
    def text(self) -> str:
        return "\n".join(b["text"] for b in self.content if b.get("type") == "text")

    @property
    def images(self) -> list[bytes]:
        return [base64.b64decode(b["data"]) for b in self.content if b.get("type") == "image"]

    def to_mcp(self) -> dict:
        return {"content": self.content, "isError": self.is_error, "_meta": {"trace": self.trace}}


def _error(text: str, kind: str, trace: list[str]) -> ToolResult:
    return ToolResult(True, [{"type": "text", "text": text}], trace, kind)


def _format(value: Any) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


class DeviceLocks:
    """One lock per device key."""

    def __init__(self) -> None:
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def __call__(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())


_default_locks = DeviceLocks()


def execute_plan(
    plan: HandlerPlan,
    tool: ToolSchema,
    args: Mapping[str, Any],
    bus: DeviceBus,
    locks: DeviceLocks | None = None,
    call_id: str | None = None,
) -> ToolResult:
    """Run ``plan`` against ``bus`` while holding the device lock.

    Every failure is folded into an ``is_error`` result whose trace ends at the
    failing step.
    """
    problems = tool.check_arguments(args)
    if problems:
        return _error("invalid arguments reached the executor: " + "; ".join(problems), "invalid_arguments", [])
    params = {p.name: p for p in tool.params}
    key = tool.device_key
    call_id = call_id or uuid.uuid4().hex
    trace: list[str] = []
    images: list[bytes] = []
    decoded: dict[str, Any] = {}
    last_read: bytes | None = None
    with (locks or _default_locks)(key):
        for i, step in enumerate(plan.steps, start=1):
            trace.append(step.op)
            try:
                dep = STEP_DEPENDENCIES.get(step.op)
                if dep is not None and not bus.dependency_present(*dep):
                    raise DependencyMissing(dep[0])
                if isinstance(step, Open):
                    bus.io(key, {"op": "open"}, call_id)
                elif isinstance(step, Write):
                    data = bytes(render_bytes(step.template, params, args, step.encode))
                    bus.io(key, {"op": "write", "data": data}, call_id)
                elif isinstance(step, Read):
                    last_read = bus.io(
                        key, {"op": "read", "length": step.length, "timeout_ms": step.timeout_ms, "index": i}, call_id
                    )
                    for dec in step.decode:
                        decoded[dec.name] = dec.apply(last_read)
                elif isinstance(step, Expect):
                    bus.note(key, "expect", call_id)
                    want = render_bytes(step.pattern, params, args, pattern=True)
                    got = last_read or b""
                    if len(got) < len(want) or any(w is not None and w != g for w, g in zip(want, got)):
                        shown = " ".join("??" if w is None else f"{w:02X}" for w in want)
                        return _error(
                            f"expect failed at step {i}: got {got.hex(' ').upper() or '(nothing)'}, expected {shown}",
                            "expect_failed",
                            trace,
                        )
                elif isinstance(step, CaptureFrame):
                    images.append(bus.io(key, {"op": "capture_frame", "index": i}, call_id))
                elif isinstance(step, GpioSet):
                    value = resolve_int(step.value, args)
                    bus.io(key, {"op": "gpio_set", "line": resolve_int(step.line, args), "value": 1 if value else 0}, call_id)
                elif isinstance(step, Delay):
                    bus.io(key, {"op": "delay", "ms": resolve_int(step.ms, args)}, call_id)
                else:
                    return _error(f"unsupported step {step.op} at step {i}", "plan_error", trace)
            except DeviceNotFound as exc:
                return _error(str(exc), "device_not_found", trace)
            except StepTimeout as exc:
                exc.step_index = i
                return _error(f"step {i} ({step.op}) timed out after {exc.timeout_ms} ms on {key}", "step_timeout", trace)
            except DependencyMissing as exc:
                return _error(f"{exc} (needed by {step.op} at step {i})", "missing_dependency", trace)
            except (TemplateError, BusError, ValueError, KeyError, IndexError) as exc:
                return _error(f"step {i} ({step.op}) failed: {exc}", "plan_error", trace)
    pc = plan.postcondition
    if pc is not None and not pc.holds(decoded, args):
        want = args.get(pc.param) if pc.param else pc.literal
        return _error(
            f"postcondition failed: {pc.value}={_format(decoded[pc.value])} vs {_format(want)} (tolerance {_format(pc.tolerance)})",
            "postcondition_failed",
            trace,
        )
    content: list[dict] = [
        {"type": "image", "data": base64.b64encode(img).decode("ascii"), "mimeType": "image/png"} for img in images
    ]
    if decoded:
        if len(decoded) == 1:
            text = _format(next(iter(decoded.values())))
        else:
            text = ", ".join(f"{k}={_format(v)}" for k, v in sorted(decoded.items()))
    else:
        text = "ok"
    content.append({"type": "text", "text": text})
    return ToolResult(False, content, trace, None, decoded)


# -- JSON-RPC runtime -----------------------------------------------------------------


@dataclass
class Session:
    session_id: str
    initialized: bool = False
    client_info: str = ""
    protocol_version: str = PROTOCOL_VERSION


class SseHub:
    """Non-blocking fan-out of server-sent events to every connected listener."""

    def __init__(self, maxsize: int = 2048):
        self._listeners: set[queue.Queue] = set()
        self._lock = threading.Lock()
        self.maxsize = maxsize

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(self.maxsize)
        with self._lock:
            self._listeners.add(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            self._listeners.discard(q)

    def broadcast(self, event: str, data: dict) -> None:
        with self._lock:
            listeners = list(self._listeners)
        for q in listeners:
            try:
                q.put_nowait((event, data))
            except queue.Full:
                pass

    def close(self) -> None:
        with self._lock:
            listeners = list(self._listeners)
        for q in listeners:
            try:
                q.put_nowait(None)
            except queue.Full:
                pass

    @property
    def listener_count(self) -> int:
        with self._lock:
            return len(self._listeners)


def _rpc_error(id_: Any, code: int, message: str) -> dict:
    return {"jsonrpc": "2.0", "id": id_, "error": {"code": code, "message": message}}


def _rpc_result(id_: Any, result: Any) -> dict:
    return {"jsonrpc": "2.0", "id": id_, "result": result}


class McpRuntime:
    """Transport-independent MCP request handling over one manifest and bus."""

    def __init__(self, manifest: ServerManifest, bus: DeviceBus, events: EventLog | None = None):
        self.manifest = manifest
        self.bus = bus
        self.events = events or EventLog(logger_name="octopus.server")
        self.locks = DeviceLocks()
        self.tools = {s.name: (s, p) for s, p in manifest.tools}
        self._sessions: dict[str, Session] = {}
        self._sessions_lock = threading.Lock()
        self.request_log: list[dict] = []
        self._log_lock = threading.Lock()

    def session(self, session_id: str | None) -> Session | None:
        if not session_id:
            return None
        with self._sessions_lock:
            return self._sessions.get(session_id)

    def handle_body(self, body: bytes, session_id: str | None) -> tuple[Any, str | None]:
        """Return (response payload or None for notifications, session id to advertise)."""
        try:
            msg = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return _rpc_error(None, PARSE_ERROR, "parse error"), session_id
        if isinstance(msg, list):
            if not msg:
                return _rpc_error(None, INVALID_REQUEST, "empty batch"), session_id
            out = []
            for m in msg:
                resp, session_id = self.handle_message(m, session_id)
                if resp is not None:
                    out.append(resp)
            return (out or None), session_id
        return self.handle_message(msg, session_id)

    def handle_message(self, msg: Any, session_id: str | None) -> tuple[dict | None, str | None]:
        if not isinstance(msg, dict):
            return _rpc_error(None, INVALID_REQUEST, "invalid request: expected a JSON object"), session_id
        id_ = msg.get("id")
        is_notification = "id" not in msg
        method = msg.get("method")
        if msg.get("jsonrpc") != "2.0" or not isinstance(method, str):
            return _rpc_error(id_, INVALID_REQUEST, "invalid request: need jsonrpc 2.0 and a method"), session_id
        if not is_notification and (isinstance(id_, (bool, dict, list)) ):
            return _rpc_error(None, INVALID_REQUEST, "invalid request: bad id"), session_id
        params = msg.get("params") if msg.get("params") is not None else {}
        with self._log_lock:
            self.request_log.append(
                {"at": time.time(), "method": method, "session": session_id, "tool": params.get("name") if isinstance(params, dict) else None}
            )
        if is_notification:
            self._notification(method, params)
            return None, session_id
        if method == "initialize":
            return self.handle_initialize(id_, params, session_id)
        if method == "ping":
            return _rpc_result(id_, {}), session_id
        if method in ("tools/list", "tools/call"):
            session = self.session(session_id)
            if session is None or not session.initialized:
                return _rpc_error(id_, NOT_INITIALIZED, "not initialized"), session_id
            if method == "tools/list":
                return self.handle_tools_list(id_), session_id
            return self.handle_tools_call(id_, params), session_id
        return _rpc_error(id_, METHOD_NOT_FOUND, f"method not found: {method}"), session_id

    def _notification(self, method: str, params: Any) -> None:
        if method == "notifications/message" and isinstance(params, dict):
            data = params.get("data")
            level = {"error": "error", "warning": "warn", "warn": "warn"}.get(str(params.get("level")), "info")
            text = data if isinstance(data, str) else json.dumps(data, sort_keys=True)
            if text:
                source = params.get("logger") if params.get("logger") in ("daemon", "pipeline", "bus") else "daemon"
                self.events.emit(LogEvent(source, level, text))

    def handle_initialize(self, id_: Any, params: Any, session_id: str | None) -> tuple[dict, str]:
        if not isinstance(params, dict):
            return _rpc_error(id_, INVALID_PARAMS, "initialize params must be an object"), session_id
        client = params.get("clientInfo") or {}
        session = self.session(session_id) or Session(uuid.uuid4().hex)
        session.client_info = f"{client.get('name', '?')}/{client.get('version', '?')}" if isinstance(client, dict) else "?"
        session.protocol_version = PROTOCOL_VERSION
        session.initialized = True
        with self._sessions_lock:
            self._sessions[session.session_id] = session
        result = {
            "protocolVersion": PROTOCOL_VERSION,
            "capabilities": {"tools": {"listChanged": False}, "logging": {}},
            "serverInfo": {"name": self.manifest.name, "version": self.manifest.version},
        }
        return _rpc_result(id_, result), session.session_id

    def handle_tools_list(self, id_: Any) -> dict:
        tools = [
            {"name": s.name, "description": s.description, "inputSchema": s.input_schema()}
            for s, _ in self.manifest.tools
        ]
        return _rpc_result(id_, {"tools": tools})

    def handle_tools_call(self, id_: Any, params: Any) -> dict:
        if not isinstance(params, dict) or not isinstance(params.get("name"), str):
            return _rpc_error(id_, INVALID_PARAMS, "tools/call needs a tool name")
        name = params["name"]
        entry = self.tools.get(name)
        if entry is None:
            return _rpc_error(id_, INVALID_PARAMS, f"unknown tool: {name}")
        schema, plan = entry
        args = params.get("arguments") or {}
        problems = schema.check_arguments(args)
        if problems:
            return _rpc_error(id_, INVALID_PARAMS, "; ".join(problems))
        call_id = uuid.uuid4().hex
        result = execute_plan(plan, schema, args, self.bus, self.locks, call_id)
        tags = {"tool": name, "device_key": schema.device_key, "call_id": call_id}
        if result.is_error:
            self.events.error("server", f"tools/call {name} failed: {result.text}", error_kind=result.error_kind or "", **tags)
        else:
            self.events.info("server", f"tools/call {name} ok", **tags)
        return _rpc_result(id_, result.to_mcp())


# -- HTTP transport -------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    server: "_HttpServer"
    server_version = "octopus-mcp"

    def log_message(self, fmt: str, *args: Any) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, payload: Any, headers: Mapping[str, str] | None = None) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:
        if self.path.split("?")[0] != "/mcp":
            self._send_json(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        payload, sid = self.server.runtime.handle_body(body, self.headers.get(SESSION_HEADER))
        headers = {SESSION_HEADER: sid} if sid else {}
        if payload is None:
            self.send_response(202)
            self.send_header("Content-Length", "0")
            for k, v in headers.items():
                self.send_header(k, v)
            self.end_headers()
            return
        self._send_json(200, payload, headers)

    def do_GET(self) -> None:
        path = self.path.split("?")[0]
        if path == "/healthz":
            self._send_json(200, self.server.health())
        elif path == "/sse":
            self._stream()
        else:
            self._send_json(404, {"error": "not found"})

    def _stream(self) -> None:
        hub = self.server.hub
        q = hub.subscribe()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.end_headers()
            self._emit("heartbeat", {"at": time.time()})
            while not self.server.stopping.is_set():
                try:
                    item = q.get(timeout=self.server.heartbeat_s)
                except queue.Empty:
                    self._emit("heartbeat", {"at": time.time()})
                    continue
                if item is None:
                    break
                self._emit(*item)
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            hub.unsubscribe(q)

    def _emit(self, event: str, data: dict) -> None:
        self.wfile.write(f"event: {event}\ndata: {json.dumps(data, sort_keys=True)}\n\n".encode("utf-8"))
        self.wfile.flush()


class _HttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128  # the stdlib default of 5 resets bursts of concurrent clients

    def __init__(self, addr, runtime: McpRuntime, hub: SseHub, heartbeat_s: float, manifest_path: Path | None):
        super().__init__(addr, _Handler)
        self.runtime = runtime
        self.hub = hub
        self.heartbeat_s = heartbeat_s
        self.manifest_path = manifest_path
        self.started = time.monotonic()
        self.stopping = threading.Event()
        self.manifest_ok = True

    def health(self) -> dict:
        return {
            "status": "ok" if self.manifest_ok else "degraded",
            "manifest_hash": self.runtime.manifest.manifest_hash,
            "uptime_s": round(time.monotonic() - self.started, 3),
            "tools": len(self.runtime.manifest.tools),
        }


class RunningEndpoint:
    """Handle to a server running on a background thread."""

    def __init__(self, server: _HttpServer, thread: threading.Thread, watcher: threading.Thread | None):
        self._server = server
        self._thread = thread
        self._watcher = watcher
        self.host, self.port = server.server_address[:2]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    @property
    def runtime(self) -> McpRuntime:
        return self._server.runtime

    @property
    def manifest(self) -> ServerManifest:
        return self._server.runtime.manifest

    @property
    def events(self) -> EventLog:
        return self._server.runtime.events

    @property
    def request_log(self) -> list[dict]:
        return list(self._server.runtime.request_log)

    def health(self) -> dict:
        return self._server.health()

    @property
    def running(self) -> bool:
        return self._thread.is_alive() and not self._server.stopping.is_set()

    def stop(self) -> None:
        if self._server.stopping.is_set():
            return
        self._server.stopping.set()
        self._server.hub.close()
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)
        if self._watcher is not None:
            self._watcher.join(timeout=5)


def _watch_manifest(server: _HttpServer, interval_s: float) -> None:
    """Re-verify the manifest file; a file that fails its own hash check is corruption."""
    path = server.manifest_path
    last_digest = None
    while not server.stopping.wait(interval_s):
        try:
            data = path.read_bytes()
        except OSError:
            continue
        digest = sha256_hex(data)
        if digest == last_digest:
            continue
        last_digest = digest
        try:
            on_disk = load_manifest(path)
        except ManifestTampered as exc:
            server.manifest_ok = False
            server.runtime.events.error("server", f"manifest hash mismatch: {path}: {exc}", path=str(path))
            continue
        server.manifest_ok = True
        if on_disk.manifest_hash != server.runtime.manifest.manifest_hash:
            server.runtime.events.info("server", f"manifest on disk superseded by {on_disk.manifest_hash[:12]}", path=str(path))


def start_server(
    manifest: ServerManifest,
    bus: DeviceBus,
    host: str = "127.0.0.1",
    port: int = 0,
    manifest_path: str | Path | None = None,
    events: EventLog | None = None,
    heartbeat_s: float = 15.0,
    integrity_interval_s: float = 0.25,
) -> RunningEndpoint:
    """Verify the manifest, bind, and serve on a background thread."""
    verify_manifest(manifest)
    runtime = McpRuntime(manifest, bus, events)
    hub = SseHub()
    runtime.events.subscribe(lambda e: hub.broadcast("log", e.to_dict()))
    try:
        server = _HttpServer((host, port), runtime, hub, heartbeat_s, Path(manifest_path) if manifest_path else None)
    except OSError as exc:
        if exc.errno in (errno.EADDRINUSE, errno.EACCES):
            raise PortInUse(f"{host}:{port} is not available: {exc}") from exc
        raise
    thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.1}, name="octopus-mcp", daemon=True)
    thread.start()
    watcher = None
    if server.manifest_path is not None:
        watcher = threading.Thread(target=_watch_manifest, args=(server, integrity_interval_s), name="octopus-integrity", daemon=True)
        watcher.start()
    endpoint = RunningEndpoint(server, thread, watcher)
    runtime.events.info("server", f"serving {len(manifest.tools)} tools at {endpoint.url}")
    return endpoint
