"""The coding-agent boundary.

Every call sends one rendered prompt (plus optional attachments) and gets back
structured JSON validated against a registered schema. Two implementations:

* :class:`StubAgent` answers from a script table and is fully deterministic.
* :class:`RemoteAgent` posts a generic chat-completion request over HTTP.

No other module talks to a model API.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import jsonschema

from octopus.specs import RenderedPrompt

log = logging.getLogger(__name__)

PURPOSES = ("identify_device", "draft_plan", "heal_plan", "caption_percept", "classify_log")

_PARAM = {
    "type": "object",
    "required": ["name", "type"],
    "properties": {
        "name": {"type": "string", "pattern": "^[a-z][a-z0-9_]*$"},
        "type": {"enum": ["integer", "number", "string", "boolean", "enum"]},
        "units": {"type": ["string", "null"]},
        "min": {"type": ["number", "null"]},
        "max": {"type": ["number", "null"]},
        "choices": {"type": "array"},
        "required": {"type": "boolean"},
    },
}

SCHEMAS: dict[str, dict] = {
    "identify_device": {
        "type": "object",
        "required": ["capabilities"],
        "properties": {
            "name": {"type": "string"},
            "note": {"type": "string"},
            "capabilities": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["verb", "kind"],
                    "properties": {
                        "verb": {"type": "string", "pattern": "^[a-z][a-z0-9_]*$"},
                        "kind": {"enum": ["actuator", "sensor", "comm", "meta"]},
                        "confidence": {"type": "number", "minimum": 0, "maximum": 1},
                        "params": {"type": "array", "items": _PARAM},
                    },
                },
            },
        },
    },
    "handler_plan": {
        "type": "object",
        "required": ["tool_name", "steps"],
        "properties": {
            "tool_name": {"type": "string"},
            "steps": {
                "type": "array",
                "minItems": 1,
                "items": {"type": "object", "required": ["op"], "properties": {"op": {"type": "string"}}},
            },
            "postcondition": {"type": ["object", "null"]},
        },
    },
    "percept_caption": {
        "type": "object",
        "required": ["note"],
        "properties": {"note": {"type": "string", "minLength": 1}},
    },
    "log_classification": {
        "type": "object",
        "required": ["failure_class", "confidence"],
        "properties": {
            "failure_class": {
                "enum": ["missing_dependency", "device_lost", "manifest_corrupt", "handler_error", "unknown"]
            },
            "confidence": {"type": "number", "minimum": 0, "maximum": 1},
            "target": {"type": "string"},
        },
    },
}

DEFAULT_SCHEMA = {
    "identify_device": "identify_device",
    "draft_plan": "handler_plan",
    "heal_plan": "handler_plan",
    "caption_percept": "percept_caption",
    "classify_log": "log_classification",
}


class AgentUnavailable(Exception):
    pass


@dataclass(frozen=True)
class AgentRequest:
    purpose: str
    prompt: RenderedPrompt
    attachments: tuple[tuple[str, str, bytes], ...] = ()
    response_schema_id: str = ""

    def __post_init__(self) -> None:
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown agent purpose {self.purpose!r}")
        if not self.response_schema_id:
            object.__setattr__(self, "response_schema_id", DEFAULT_SCHEMA[self.purpose])
        if self.response_schema_id not in SCHEMAS:
            raise ValueError(f"unregistered response schema {self.response_schema_id!r}")


@dataclass
class AgentResponse:
    raw: str
    parsed: Any
    agent_id: str
    latency_ms: int = 0
    diagnostics: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.diagnostics


class AgentPort(Protocol):
    agent_id: str

    def call(self, request: AgentRequest) -> AgentResponse: ...


_FENCE = re.compile(r"^\s*```(?:json)?\s*(.*?)\s*```\s*$", re.S)


def parse_and_validate(raw: str, schema_id: str) -> tuple[Any, list[str]]:
    m = _FENCE.match(raw)
    body = m.group(1) if m else raw
    try:
        value = json.loads(body)
    except (json.JSONDecodeError, TypeError) as exc:
        return None, [f"schema: response is not JSON ({exc})"]
    errors = sorted(
        jsonschema.Draft7Validator(SCHEMAS[schema_id]).iter_errors(value), key=lambda e: list(e.absolute_path)
    )
    if errors:
        return None, [f"schema: {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
    return value, []


# -- stub ---------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptEntry:
    purpose: str
    prompt_contains: str
    response: Any


def default_script_path() -> Path:
    return Path(str(resources.files("octopus") / "data" / "fixtures" / "agent_script.json"))


def load_script(path: str | Path | None = None) -> list[ScriptEntry]:
    data = json.loads(Path(path or default_script_path()).read_text(encoding="utf-8"))
    return [ScriptEntry(e["purpose"], e.get("prompt_contains", ""), e["response"]) for e in data]


def caption_from_frames(request: AgentRequest) -> dict:
    """Ground-truth caption for simulated frames: decode marker positions."""
    from octopus.simbus import estimate_pose

    frames = [blob for _, media, blob in request.attachments if media == "image/png"]
    if not frames:
        return {"note": "no frame available"}
    now = estimate_pose(frames[-1])
    pose = ", ".join(f"j{i}={a:.0f}" for i, a in enumerate(now, start=1))
    note = f"arm pose (deg): {pose}"
    if len(frames) > 1:
        before = estimate_pose(frames[0])
        moved = [
            f"j{i} {b:.0f}->{a:.0f}" for i, (b, a) in enumerate(zip(before, now), start=1) if abs(a - b) >= 1.0
        ]
        note += "; changed: " + ", ".join(moved) if moved else "; no visible change"
    return {"note": note}


class StubAgent:
    """Scripted agent. The first entry whose purpose matches and whose
    ``prompt_contains`` is a substring of the prompt wins; otherwise a purpose
    handler (if any) answers; otherwise the response carries "no script match"."""

    agent_id = "stub"

    def __init__(
        self,
        script: list[ScriptEntry] | None = None,
        handlers: Mapping[str, Callable[[AgentRequest], Any]] | None = None,
    ):
        self.script = list(script if script is not None else load_script())
        self.handlers = dict(handlers if handlers is not None else {"caption_percept": caption_from_frames})
        self.calls: list[AgentRequest] = []
        self._lock = threading.Lock()

    def call(self, request: AgentRequest) -> AgentResponse:
        with self._lock:
            self.calls.append(request)
        for entry in self.script:
            if entry.purpose == request.purpose and entry.prompt_contains in request.prompt.text:
                return self._respond(entry.response, request)
        handler = self.handlers.get(request.purpose)
        if handler is not None:
            return self._respond(handler(request), request)
        return AgentResponse("", None, self.agent_id, 0, ["no script match"])

    def _respond(self, response: Any, request: AgentRequest) -> AgentResponse:
        raw = response if isinstance(response, str) else json.dumps(response, sort_keys=True, separators=(",", ":"))
        parsed, diags = parse_and_validate(raw, request.response_schema_id)
        return AgentResponse(raw, parsed, self.agent_id, 0, diags)


# -- remote -------------------------------------------------------------------

SYSTEM_PROMPT = (
    "You are the coding agent of a hardware onboarding pipeline. "
    "Reply with a single JSON object and nothing else."
)


class RemoteAgent:
    """Generic chat-completion client.

    POSTs ``{"model", "messages", "response_format"}`` to ``url`` with a bearer
    key and reads ``choices[0].message.content``. Transport failures are
    retried twice with exponential backoff.
    """

    def __init__(
        self,
        url: str,
        key: str = "",
        model: str = "",
        retries: int = 2,
        backoff_s: float = 0.5,
        timeout_s: float = 120.0,
        max_in_flight: int = 4,
    ):
        self.url = url
        self.key = key
        self.model = model
        self.retries = retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.agent_id = f"remote:{model or 'default'}"
        self.attempts = 0

    def _payload(self, request: AgentRequest) -> bytes:
        content: list[dict] = [{"type": "text", "text": request.prompt.text}]
        for name, media, blob in request.attachments:
            if media.startswith("image/"):
                url = f"data:{media};base64,{base64.b64encode(blob).decode('ascii')}"
                content.append({"type": "image_url", "image_url": {"url": url}})
            else:
                content.append({"type": "text", "text": f"[{name}]\n{blob.decode('utf-8', 'replace')}"})
        body = {
            "model": self.model,
            "messages": [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": content}],
            "response_format": {"type": "json_object"},
        }
        return json.dumps(body).encode("utf-8")

    def _post(self, data: bytes) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def call(self, request: AgentRequest) -> AgentResponse:
        data = self._payload(request)
        last: Exception | None = None
        with self._slots:
            started = time.monotonic()
            for attempt in range(self.retries + 1):
                if attempt:
                    time.sleep(self.backoff_s * 2 ** (attempt - 1))
                self.attempts += 1
                try:
                    reply = self._post(data)
                    break
                except urllib.error.HTTPError as exc:
                    last = exc
                    if exc.code < 500:
                        raise AgentUnavailable(f"agent endpoint rejected request: HTTP {exc.code}") from exc
                except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                    last = exc
            else:
                raise AgentUnavailable(f"agent unreachable after {self.retries + 1} tries: {last}")
        latency = int((time.monotonic() - started) * 1000)
        try:
            raw = reply["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            return AgentResponse(json.dumps(reply), None, self.agent_id, latency, ["schema: no choices[0].message.content"])
        parsed, diags = parse_and_validate(raw, request.response_schema_id)
        return AgentResponse(raw, parsed, self.agent_id, latency, diags)


def agent_from_env(kind: str | None = None, env: Mapping[str, str] | None = None) -> AgentPort:
    """Build the agent selected by ``kind`` or ``OCTOPUS_AGENT`` (default stub)."""
    env = os.environ if env is None else env
    kind = kind or env.get("OCTOPUS_AGENT", "stub")
    if kind == "stub":
        return StubAgent(load_script(env.get("OCTOPUS_AGENT_SCRIPT") or None))
    if kind == "remote":
        url = env.get("OCTOPUS_AGENT_URL")
        if not url:
            raise ValueError("OCTOPUS_AGENT=remote needs OCTOPUS_AGENT_URL")
        return RemoteAgent(url, env.get("OCTOPUS_AGENT_KEY", ""), env.get("OCTOPUS_AGENT_MODEL", ""))
    raise ValueError(f"unknown agent kind {kind!r}")
