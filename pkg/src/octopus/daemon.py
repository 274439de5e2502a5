"""The living backend: watch, diagnose, heal, perceive.

The daemon talks to the server only through its SSE stream, its HTTP
endpoints and the files under ``state_dir``. Healing re-enters pipeline
stages through the :class:`~octopus.pipeline.Orchestrator`.

Time is read from an injectable clock. :class:`SimClock` fast-forwards
waits (backoff, quiet windows, perceive timers) so that the durations the
daemon reports are simulated seconds, while real work is counted 1:1.
"""

from __future__ import annotations

import base64
import collections
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

from octopus.agentport import AgentRequest
from octopus.canonical import write_pretty
from octopus.client import EndpointUnreachable, McpClient, McpError, iter_sse, probe_health
from octopus.deploy import check_dependencies, install_missing
from octopus.events import LogEvent
from octopus.platform import HardwareInventory
from octopus.specs import render_prompt
from octopus.toolgen import ManifestTampered, ServerManifest, assemble_manifest, load_manifest, request_plan

MODES = ("watching", "diagnosing", "healing", "perceiving", "degraded")
ALLOWED_TRANSITIONS = frozenset(
    {
        ("watching", "diagnosing"),
        ("diagnosing", "healing"),
        ("diagnosing", "degraded"),
        ("healing", "watching"),
        ("healing", "degraded"),
        ("watching", "perceiving"),
        ("perceiving", "watching"),
        ("degraded", "watching"),
    }
)
FAILURE_CLASSES = ("missing_dependency", "device_lost", "manifest_corrupt", "handler_error", "unknown")
ACTION_KINDS = ("reinstall_dependency", "reprobe_and_regenerate", "rewrite_manifest_from_specs", "restart_server", "none")
PLAYBOOK = {
    "missing_dependency": "reinstall_dependency",
    "device_lost": "reprobe_and_regenerate",
    "manifest_corrupt": "rewrite_manifest_from_specs",
    "handler_error": "restart_server",
}

BUFFER_SIZE = 1024
BACKOFF_BASE_S = 0.5
BACKOFF_CAP_S = 8.0
MAX_ATTEMPTS = 3
QUIET_WINDOW_S = 5.0
PERCEIVE_INTERVAL_S = 30.0
TIMEOUT_CLUSTER = 3
MAX_KEYFRAMES = 2

_NO_MODULE = re.compile(r"No module named '?([A-Za-z0-9_.\-]+)'?")
_MISSING_DEP = re.compile(r"missing dependenc(?:y|ies):?\s+'?([A-Za-z0-9_.\-]+)'?")
_NOT_FOUND = re.compile(r"device not found:?\s*(\S+)")
_TIMED_OUT = re.compile(r"timed out .* on (\S+)")
_HANDLER_KINDS = {"expect_failed", "postcondition_failed", "plan_error", "invalid_arguments"}


class IllegalTransition(RuntimeError):
    pass


class HealFailed(Exception):
    def __init__(self, action: "HealingAction", reason: str):
        super().__init__(f"{action.kind} on {action.target} failed after {action.attempts} attempts: {reason}")
        self.action = action
        self.reason = reason


# -- clocks -------------------------------------------------------------------


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(max(0.0, seconds))

    def pause(self, seconds: float) -> None:
        time.sleep(max(0.0, seconds))


class SimClock:
    """Simulated time = real elapsed time + time skipped by ``sleep``.

    ``sleep(dt)`` blocks for ``dt / speedup`` real seconds (so other threads
    get to run) and credits the remainder. ``pause`` is for helper threads:
    it waits the same scaled amount without crediting, so concurrent waits
    are not double counted.
    """

    def __init__(self, speedup: float = 20.0):
        if speedup < 1:
            raise ValueError("speedup must be >= 1")
        self.speedup = speedup
        self._t0 = time.monotonic()
        self._skipped = 0.0
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return time.monotonic() - self._t0 + self._skipped

    def sleep(self, seconds: float) -> None:
        if seconds <= 0:
            return
        real = seconds / self.speedup
        time.sleep(real)
        with self._lock:
            self._skipped += seconds - real

    def pause(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds / self.speedup)


# -- watch --------------------------------------------------------------------


class EventBuffer:
    """Bounded FIFO; when full the oldest event is dropped and counted."""

    def __init__(self, size: int = BUFFER_SIZE):
        self._q: collections.deque[LogEvent] = collections.deque()
        self.size = size
        self.dropped = 0
        self._lock = threading.Lock()

    def push(self, event: LogEvent) -> None:
        with self._lock:
            if len(self._q) >= self.size:
                self._q.popleft()
                self.dropped += 1
            self._q.append(event)

    def drain(self) -> list[LogEvent]:
        with self._lock:
            out = list(self._q)
            self._q.clear()
        return out

    def __len__(self) -> int:
        with self._lock:
            return len(self._q)


class LogWatcher:
    """Collects LogEvents from the server's SSE stream and the pipeline log.

    The SSE reader runs on its own thread and reconnects with exponential
    backoff (0.5 s doubling to 8 s). The pipeline log is tailed on
    :meth:`poll`; only lines appended after the watcher started are read.
    """

    def __init__(
        self,
        url: str | Callable[[], str] | None,
        pipeline_log: Path | None = None,
        clock=None,
        buffer_size: int = BUFFER_SIZE,
    ):
        self._url = url
        self.pipeline_log = Path(pipeline_log) if pipeline_log else None
        self.clock = clock or SystemClock()
        self.buffer = EventBuffer(buffer_size)
        self.heartbeats = 0
        self.connects = 0
        self.backoffs: list[float] = []
        self._connected = threading.Event()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._offset = self.pipeline_log.stat().st_size if self.pipeline_log and self.pipeline_log.exists() else 0

    @property
    def url(self) -> str | None:
        return self._url() if callable(self._url) else self._url

    @property
    def dropped(self) -> int:
        return self.buffer.dropped

    @property
    def connected(self) -> bool:
        return self._connected.is_set()

    def start(self) -> "LogWatcher":
        if self._url is not None and self._thread is None:
            self._thread = threading.Thread(target=self._run, name="octopus-watch", daemon=True)
            self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)

    def wait_connected(self, timeout_s: float = 5.0) -> bool:
        return self._connected.wait(timeout_s)

    def mark_disconnected(self) -> None:
        self._connected.clear()

    def wait_reconnected(self, after: int, timeout_s: float = 5.0) -> bool:
        """Wait for a connection newer than the ``after``-th one."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if self.connects > after and self._connected.is_set():
                return True
            time.sleep(0.01)
        return False

    def _run(self) -> None:
        delay = BACKOFF_BASE_S
        while not self._stop.is_set():
            try:
                for event, data in iter_sse(f"{self.url}/sse", timeout_s=60.0):
                    if self._stop.is_set():
                        return
                    if not self._connected.is_set():
                        self._connected.set()
                        self.connects += 1
                        delay = BACKOFF_BASE_S
                    if event == "heartbeat":
                        self.heartbeats += 1
                    elif event == "log":
                        try:
                            self.buffer.push(LogEvent.from_dict(data))
                        except (KeyError, TypeError, ValueError):
                            pass
            except EndpointUnreachable:
                pass
            self._connected.clear()
            if self._stop.is_set():
                return
            self.backoffs.append(delay)
            self.clock.pause(delay)
            delay = min(delay * 2, BACKOFF_CAP_S)

    def poll(self) -> None:
        """Read new pipeline-log lines into the buffer."""
        if self.pipeline_log is None or not self.pipeline_log.exists():
            return
        size = self.pipeline_log.stat().st_size
        if size < self._offset:
            self._offset = 0  # truncated or rotated
        if size == self._offset:
            return
        with self.pipeline_log.open("rb") as fh:
            fh.seek(self._offset)
            chunk = fh.read()
        end = chunk.rfind(b"\n") + 1
        self._offset += end
        for raw in chunk[:end].splitlines():
            try:
                self.buffer.push(LogEvent.from_dict(json.loads(raw)))
            except (ValueError, KeyError, TypeError):
                continue

    def drain(self) -> list[LogEvent]:
        self.poll()
        return self.buffer.drain()


# -- classify -----------------------------------------------------------------


@dataclass
class Diagnosis:
    failure_class: str
    evidence: tuple[LogEvent, ...]
    confidence: float
    context_excerpt: str
    target: str = ""

    def __post_init__(self) -> None:
        if self.failure_class not in FAILURE_CLASSES:
            raise ValueError(f"unknown failure class {self.failure_class!r}")
        if self.failure_class != "unknown" and not self.evidence:
            raise ValueError("a diagnosis needs evidence")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "failure_class": self.failure_class,
            "confidence": self.confidence,
            "target": self.target,
            "evidence": [e.to_dict() for e in self.evidence],
            "context_excerpt": self.context_excerpt,
        }


class ClassifierPort(Protocol):
    def classify(self, window: list[LogEvent]) -> Diagnosis: ...


def _excerpt(events: Iterable[LogEvent], limit: int = 20) -> str:
    lines = [f"[{e.source}/{e.severity}] {e.text}" for e in events]
    return "\n".join(lines[-limit:])


def _tag(e: LogEvent, key: str) -> str:
    return (e.structured or {}).get(key, "")


def _is_timeout(e: LogEvent) -> bool:
    return e.severity == "error" and (_tag(e, "error_kind") == "step_timeout" or bool(_TIMED_OUT.search(e.text)))


def _event_device(e: LogEvent) -> str:
    key = _tag(e, "device_key")
    if key:
        return key
    m = _NOT_FOUND.search(e.text) or _TIMED_OUT.search(e.text)
    return m.group(1) if m else ""


def classify(window: list[LogEvent], classifier: ClassifierPort | None = None) -> Diagnosis:
    """Rule-based signature matching; an optional classifier port overrides it."""
    if classifier is not None:
        return classifier.classify(window)
    return RuleClassifier().classify(window)


class RuleClassifier:
    """Priority: manifest_corrupt > missing_dependency > device_lost > handler_error."""

    def classify(self, window: list[LogEvent]) -> Diagnosis:
        window = [e for e in window if e.source != "daemon"]
        hits = [e for e in window if "manifest hash mismatch" in e.text]
        if hits:
            return Diagnosis("manifest_corrupt", tuple(hits), 0.95, _excerpt(hits), _tag(hits[-1], "path"))

        hits, target = [], ""
        for e in window:
            m = _NO_MODULE.search(e.text) or _MISSING_DEP.search(e.text)
            if m:
                hits.append(e)
                target = m.group(1)
        if hits:
            return Diagnosis("missing_dependency", tuple(hits), 0.95, _excerpt(hits), target)

        lost = [e for e in window if e.severity == "error" and "device not found" in e.text]
        if lost:
            return Diagnosis("device_lost", tuple(lost), 0.9, _excerpt(lost), _event_device(lost[-1]))
        errors = [e for e in window if e.severity == "error"]
        run_key, run = "", []
        for e in errors:  # trailing run of timeouts on one device
            if _is_timeout(e) and _event_device(e) == run_key:
                run.append(e)
            elif _is_timeout(e):
                run_key, run = _event_device(e), [e]
            elif _tag(e, "device_key") and _tag(e, "device_key") == run_key:
                run_key, run = "", []
        if len(run) >= TIMEOUT_CLUSTER:
            return Diagnosis("device_lost", tuple(run), 0.8, _excerpt(run), run_key)

        handler = [
            e
            for e in errors
            if _tag(e, "error_kind") in _HANDLER_KINDS or (e.text.startswith("tools/call") and not _is_timeout(e) and not _tag(e, "error_kind"))
        ]
        if handler:
            return Diagnosis("handler_error", tuple(handler), 0.7, _excerpt(handler), _tag(handler[-1], "tool"))
        return Diagnosis("unknown", (), 0.0, _excerpt(window))


class AgentClassifier:
    """Model-backed classifier through the agent port (purpose classify_log).

    Falls back to the rule classifier when the agent's answer is rejected.
    """

    def __init__(self, agent, spec):
        self.agent = agent
        self.spec = spec
        self.rules = RuleClassifier()

    def classify(self, window: list[LogEvent]) -> Diagnosis:
        base = self.rules.classify(window)
        resp = self.agent.call(AgentRequest("classify_log", render_prompt(self.spec, {"events": _excerpt(window, 50)})))
        if not resp.ok:
            return base
        cls, conf = resp.parsed["failure_class"], float(resp.parsed["confidence"])
        evidence = base.evidence or tuple(e for e in window if e.severity == "error")
        if cls != "unknown" and not evidence:
            return base
        return Diagnosis(cls, evidence if cls != "unknown" else (), conf, base.context_excerpt, resp.parsed.get("target", base.target))


# -- heal ---------------------------------------------------------------------


@dataclass
class HealingAction:
    kind: str
    target: str = ""
    attempts: int = 0
    outcome: str = "pending"
    max_attempts: int = MAX_ATTEMPTS
    detected_at: float = 0.0
    healed_at: float | None = None
    finished_at: float | None = None
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown healing action {self.kind!r}")

    @property
    def duration_s(self) -> float | None:
        """Detection to verified repair (endpoint healthy again), simulated seconds."""
        return None if self.healed_at is None else self.healed_at - self.detected_at

    def bump(self) -> None:
        if self.attempts >= self.max_attempts:
            raise ValueError("attempts exhausted")
        self.attempts += 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "attempts": self.attempts,
            "outcome": self.outcome,
            "duration_s": self.duration_s,
            "quiet_until": self.finished_at,
            "notes": list(self.notes),
        }


class AttemptFailed(Exception):
    pass


def _signature(d: Diagnosis) -> Callable[[LogEvent], bool]:
    """Predicate recognising a recurrence of the diagnosed failure."""
    if d.failure_class == "missing_dependency":
        return lambda e: bool(_NO_MODULE.search(e.text) or _MISSING_DEP.search(e.text))
    if d.failure_class == "manifest_corrupt":
        return lambda e: "manifest hash mismatch" in e.text
    if d.failure_class == "device_lost":
        return lambda e: e.severity == "error" and _event_device(e) == d.target and ("device not found" in e.text or _is_timeout(e))
    if d.failure_class == "handler_error":
        return lambda e: e.severity == "error" and _tag(e, "tool") == d.target
    return lambda e: False


# -- perceive -----------------------------------------------------------------


@dataclass(frozen=True)
class Keyframe:
    at: float
    digest: str
    ref: str


@dataclass(frozen=True)
class PerceptSummary:
    keyframes: tuple[Keyframe, ...]
    state_note: str
    based_on_tool: str

    def __post_init__(self) -> None:
        if len(self.keyframes) > MAX_KEYFRAMES:
            raise ValueError("a percept keeps at most two keyframes")
        if not self.state_note:
            raise ValueError("state_note must be non-empty")

    def to_dict(self) -> dict:
        return {
            "keyframes": [{"at": k.at, "digest": k.digest, "ref": k.ref} for k in self.keyframes],
            "state_note": self.state_note,
            "based_on_tool": self.based_on_tool,
        }


def camera_tool(manifest: ServerManifest | None) -> str | None:
    if manifest is None:
        return None
    for schema, plan in manifest.tools:
        if plan.uses("capture_frame") and not schema.params:
            return schema.name
    return None


# -- the daemon ---------------------------------------------------------------


class Daemon:
    """State machine over the orchestrator's installation.

    ``step()`` does one unit of work and returns; ``run()`` loops until
    stopped. Tests drive ``step()`` directly.
    """

    def __init__(
        self,
        orchestrator,
        url: str | None = None,
        clock=None,
        classifier: ClassifierPort | None = None,
        perceive_interval_s: float | None = PERCEIVE_INTERVAL_S,
        quiet_window_s: float = QUIET_WINDOW_S,
        max_attempts: int = MAX_ATTEMPTS,
        poll_interval_s: float = 0.25,
        retry_wait_s: float = 1.0,
        reprobe_interval_s: float = 30.0,
        connect_timeout_s: float = 5.0,
    ):
        self.orch = orchestrator
        self.state_dir = Path(orchestrator.state_dir)
        self._url = url
        self.clock = clock or SystemClock()
        self.classifier = classifier or RuleClassifier()
        self.perceive_interval_s = perceive_interval_s
        self.quiet_window_s = quiet_window_s
        self.max_attempts = max_attempts
        self.poll_interval_s = poll_interval_s
        self.retry_wait_s = retry_wait_s
        self.reprobe_interval_s = reprobe_interval_s
        self.connect_timeout_s = connect_timeout_s
        self.mode = "watching"
        self.transitions: list[tuple[str, str, float]] = []
        self.current_action: HealingAction | None = None
        self.history: list[HealingAction] = []
        self.diagnoses: list[Diagnosis] = []
        self.last_percept: PerceptSummary | None = None
        self.percept_failures = 0
        self.notifications: list[str] = []
        self.counters = {"attempted": 0, "healed": 0, "failed": 0}
        self.window: collections.deque[LogEvent] = collections.deque(maxlen=256)
        self.watcher = LogWatcher(lambda: self.url, orchestrator.state_dir / "pipeline.log", self.clock)
        self.good_manifest: ServerManifest | None = self._load_manifest_quietly()
        self._client: McpClient | None = None
        self._next_perceive = self.clock.now() + (perceive_interval_s or 0)
        self._next_reprobe = 0.0
        self._stop = threading.Event()
        self._connects_before = 0

    # -- plumbing

    @property
    def url(self) -> str:
        if self._url:
            return self._url
        rec = self.state_dir / "deployment.json"
        d = json.loads(rec.read_text(encoding="utf-8"))
        return f"http://{d['endpoint']['host']}:{d['endpoint']['port']}"

    @property
    def manifest_path(self) -> Path:
        return self.state_dir / "manifest.json"

    def _load_manifest_quietly(self) -> ServerManifest | None:
        try:
            return load_manifest(self.manifest_path)
        except ManifestTampered:
            return None

    def log(self, severity: str, text: str, **structured: str) -> None:
        self.orch.events.emit(LogEvent("daemon", severity, text, structured or None))

    def transition(self, new: str) -> None:
        if (self.mode, new) not in ALLOWED_TRANSITIONS:
            raise IllegalTransition(f"{self.mode} -> {new}")
        self.transitions.append((self.mode, new, self.clock.now()))
        self.mode = new
        self.write_status()

    def start(self) -> "Daemon":
        self.watcher.start()
        self.watcher.wait_connected(self.connect_timeout_s)
        self.write_status()
        return self

    def stop(self) -> None:
        self._stop.set()
        self.watcher.stop()
        self.write_status()

    def run(self, until: Callable[[], bool] | None = None) -> None:
        self.start()
        try:
            while not self._stop.is_set() and not (until and until()):
                self.step()
                self.clock.sleep(self.poll_interval_s)
        finally:
            self.stop()

    # -- main step

    def step(self) -> None:
        events = self.watcher.drain()
        if self.mode == "degraded":
            if self.clock.now() >= self._next_reprobe:
                self._try_recover()
            self.write_status()
            return
        self.window.extend(events)
        triggers = [e for e in events if e.severity == "error" and e.source != "daemon"]
        if triggers:
            self.diagnose_and_heal()
        elif self.perceive_interval_s and self.clock.now() >= self._next_perceive:
            self.perceive_cycle()
        self.write_status()

    def diagnose_and_heal(self) -> HealingAction | None:
        self.transition("diagnosing")
        detected_at = self.clock.now()
        d = classify(list(self.window), self.classifier)
        if d.failure_class == "unknown":
            self.clock.sleep(self.retry_wait_s)
            self.window.extend(self.watcher.drain())
            d = classify(list(self.window), self.classifier)
        self.diagnoses.append(d)
        self.log("info", f"diagnosis: {d.failure_class} ({d.confidence:.2f}) target={d.target or '-'}")
        if d.failure_class == "unknown":
            self._enter_degraded("unclassified failure")
            return None
        self.transition("healing")
        try:
            action = self.heal(d, detected_at)
        except HealFailed as exc:
            self.counters["failed"] += 1
            self.notify(f"heal failed: {exc}")
            self._enter_degraded(str(exc))
            return exc.action
        self.counters["healed"] += 1
        self.window.clear()
        self.transition("watching")
        return action

    def _enter_degraded(self, why: str) -> None:
        self.transition("degraded")
        self._next_reprobe = self.clock.now() + self.reprobe_interval_s
        self.log("warn", f"degraded: {why}")

    def _try_recover(self) -> None:
        """A successful re-probe with a healthy endpoint returns to watching."""
        self._next_reprobe = self.clock.now() + self.reprobe_interval_s
        try:
            self.orch.run_probe()
        except Exception as exc:
            self.log("warn", f"re-probe failed: {exc}")
            return
        body = probe_health(self.url)
        if body is not None and body.get("status") == "ok":
            self.window.clear()
            self.watcher.drain()
            self.transition("watching")

    def resume(self) -> None:
        if self.mode == "degraded":
            self.window.clear()
            self.transition("watching")

    def notify(self, text: str) -> None:
        self.notifications.append(text)
        try:
            McpClient(self.url, timeout_s=2.0).log("error", text, logger="daemon")
        except (EndpointUnreachable, OSError, ValueError):
            self.log("error", text)

    # -- heal

    def heal(self, d: Diagnosis, detected_at: float | None = None) -> HealingAction:
        action = HealingAction(PLAYBOOK[d.failure_class], d.target, max_attempts=self.max_attempts)
        action.detected_at = self.clock.now() if detected_at is None else detected_at
        self.current_action = action
        self.history.append(action)
        playbook = {
            "missing_dependency": self._heal_dependency,
            "device_lost": self._heal_device,
            "manifest_corrupt": self._heal_manifest,
            "handler_error": self._heal_handler,
        }[d.failure_class]
        reason = ""
        while action.attempts < action.max_attempts:
            action.bump()
            self.counters["attempted"] += 1
            try:
                action.healed_at = None
                playbook(d, action)
                self._verify(d, action)
            except AttemptFailed as exc:
                reason = str(exc)
            except Exception as exc:  # a playbook step blew up; count it as a failed attempt
                reason = f"{type(exc).__name__}: {exc}"
            else:
                action.outcome = "healed"
                action.finished_at = self.clock.now()
                self.good_manifest = self._load_manifest_quietly()
                self.log("info", f"healed {d.failure_class} via {action.kind} in {action.duration_s:.2f} s")
                return action
            action.notes.append(f"attempt {action.attempts}: {reason}")
            self.log("warn", f"heal attempt {action.attempts} for {d.failure_class} failed: {reason}")
            self.clock.sleep(float(action.attempts))
        action.outcome = "failed"
        action.finished_at = self.clock.now()
        raise HealFailed(action, reason)

    def _manifest_for_heal(self) -> ServerManifest:
        m = self._load_manifest_quietly()
        if m is None:
            m = self.good_manifest
        if m is None:
            raise AttemptFailed("no valid manifest to work from")
        return m

    def _redeploy(self, manifest: ServerManifest, force: bool = False) -> None:
        self._connects_before = self.watcher.connects
        self.orch.deployer.launch(manifest, self.orch.bus, skip_deps=self.orch.skip_deps, force=force)

    def _heal_dependency(self, d: Diagnosis, action: HealingAction) -> None:
        manifest = self._manifest_for_heal()
        report = check_dependencies(manifest, self.orch.bus)
        if not report.missing:
            action.notes.append("dependencies already present; restarting")
        elif self.orch.installer is None:
            raise AttemptFailed("no installer configured")
        else:
            report = install_missing(report, self.orch.installer, self.orch.bus)
            if report.missing:
                raise AttemptFailed(f"still missing after install: {', '.join(report.missing_names)}")
        self._redeploy(manifest, force=True)

    def _heal_device(self, d: Diagnosis, action: HealingAction) -> None:
        previous = self._manifest_for_heal()
        inventory, diff = self.orch.reprobe()
        present = inventory.by_key()
        if d.target and d.target not in present:
            raise AttemptFailed(f"device {d.target} still absent")
        changed = set(diff.added) | set(diff.changed) | set(diff.removed)
        if d.target:
            changed.add(d.target)
        action.notes.append(f"inventory diff: added={list(diff.added)} removed={list(diff.removed)} changed={list(diff.changed)}")
        manifest = self.orch.regenerate(inventory, changed, previous)
        self._redeploy(manifest)
        lost = sorted(set(previous.tool_names) - set(manifest.tool_names))
        if lost and not diff.removed:
            raise AttemptFailed(f"regenerated manifest lacks tools {lost}")

    def _heal_manifest(self, d: Diagnosis, action: HealingAction) -> None:
        inventory = HardwareInventory.load(self.orch.inventory_path)
        manifest = self.orch.regenerate(inventory, None, None)
        self._redeploy(manifest)

    def _heal_handler(self, d: Diagnosis, action: HealingAction) -> None:
        manifest = self._manifest_for_heal()
        try:
            schema, _ = manifest.tool(d.target)
        except KeyError:
            raise AttemptFailed(f"tool {d.target!r} is not in the manifest") from None
        record = HardwareInventory.load(self.orch.inventory_path).by_key().get(schema.device_key)
        context = {
            "tool_name": schema.name,
            "device_key": schema.device_key,
            "failure_class": d.failure_class,
            "context_excerpt": d.context_excerpt or "(none)",
            "tool_schema_json": json.dumps(schema.input_schema(), sort_keys=True, indent=2),
            "device_description": record.description if record else "",
            "validation_errors": "(none)",
        }
        plan, problems = request_plan(self.orch.agent, "heal_plan", self.orch.specs["heal"], context, schema)
        if plan is None or problems:
            raise AttemptFailed("replacement plan rejected: " + "; ".join(problems))
        tools = [(s, plan if s.name == schema.name else p) for s, p in manifest.tools]
        inventory = HardwareInventory.load(self.orch.inventory_path)
        new = assemble_manifest(tools, inventory, self.orch.specs, manifest.endpoint, self.orch.agent.agent_id, manifest.cap, manifest.name)
        new.save(self.manifest_path)
        self._redeploy(new)

    def _verify(self, d: Diagnosis, action: HealingAction) -> None:
        """Healthy endpoint serving the on-disk manifest, stream re-attached,
        and no recurrence of the failure signature for the quiet window."""
        manifest = load_manifest(self.manifest_path)
        body = probe_health(self.url, timeout_s=2.0)
        if body is None or body.get("status") != "ok":
            raise AttemptFailed(f"endpoint not healthy: {body}")
        if body.get("manifest_hash") != manifest.manifest_hash:
            raise AttemptFailed("endpoint serves a different manifest than the file")
        if d.failure_class == "missing_dependency" and check_dependencies(manifest, self.orch.bus).missing:
            raise AttemptFailed("dependency check still reports missing entries")
        if d.failure_class == "manifest_corrupt" and self.good_manifest is not None:
            if dict(manifest.provenance.spec_hashes) != dict(self.good_manifest.provenance.spec_hashes):
                raise AttemptFailed("rebuilt manifest pins different specs")
        if not self.watcher.wait_reconnected(self._connects_before, self.connect_timeout_s):
            raise AttemptFailed("log stream did not reconnect")
        action.healed_at = self.clock.now()
        healed_wall = time.time()
        self.watcher.drain()  # evidence from before the repair is stale
        matches = _signature(d)
        deadline = self.clock.now() + self.quiet_window_s
        while self.clock.now() < deadline:
            self.clock.sleep(min(self.poll_interval_s, max(deadline - self.clock.now(), 0.0)))
            fresh = [e for e in self.watcher.drain() if e.at >= healed_wall]
            recurred = [e for e in fresh if e.source != "daemon" and matches(e)]
            if recurred:
                raise AttemptFailed(f"signature recurred: {recurred[0].text}")
            self.window.extend(e for e in fresh if e.source != "daemon")

    # -- perceive

    def _mcp(self) -> McpClient:
        if self._client is None or self._client.base_url != self.url:
            self._client = McpClient(self.url, timeout_s=10.0, client_name="octopus-daemon")
            self._client.initialize()
        return self._client

    def _call(self, name: str, args: dict | None = None) -> dict:
        try:
            return self._mcp().call_tool(name, args)
        except McpError as exc:
            if exc.code != -32002:
                raise
            self._client = None  # server restarted; the session is gone
            return self._mcp().call_tool(name, args)

    def perceive_cycle(self) -> PerceptSummary | None:
        """Capture through the MCP endpoint, keep the two newest keyframes,
        and ask the agent for a state note."""
        if self.perceive_interval_s:
            self._next_perceive = self.clock.now() + self.perceive_interval_s
        tool = camera_tool(self.good_manifest or self._load_manifest_quietly())
        if tool is None:
            return None
        self.transition("perceiving")
        try:
            return self._perceive(tool)
        finally:
            self.transition("watching")

    def _perceive(self, tool: str) -> PerceptSummary | None:
        try:
            result = self._call(tool)
            if result.get("isError"):
                raise RuntimeError(" ".join(b.get("text", "") for b in result.get("content", [])))
            png = next(base64.b64decode(b["data"]) for b in result["content"] if b.get("type") == "image")
        except (EndpointUnreachable, McpError, RuntimeError, StopIteration, KeyError, ValueError) as exc:
            self.percept_failures += 1
            self.log("warn", f"perceive: capture via {tool} failed: {exc}", tool=tool)
            return self.last_percept
        digest = hashlib.sha256(png).hexdigest()
        frames_dir = self.state_dir / "keyframes"
        frames_dir.mkdir(parents=True, exist_ok=True)
        ref = frames_dir / f"{digest}.png"
        ref.write_bytes(png)
        previous = self.last_percept.keyframes if self.last_percept else ()
        keyframes = (previous + (Keyframe(self.clock.now(), digest, str(ref)),))[-MAX_KEYFRAMES:]
        for old in previous:
            if old.digest not in {k.digest for k in keyframes}:
                Path(old.ref).unlink(missing_ok=True)
        attachments = tuple((Path(k.ref).name, "image/png", Path(k.ref).read_bytes()) for k in keyframes)
        prev_note = self.last_percept.state_note if self.last_percept else "(none)"
        prompt = render_prompt(
            self.orch.specs["perceive"],
            {"tool_name": tool, "keyframe_count": str(len(keyframes)), "previous_note": prev_note},
        )
        resp = self.orch.agent.call(AgentRequest("caption_percept", prompt, attachments))
        note = resp.parsed["note"] if resp.ok else f"captured {digest[:12]}; caption unavailable ({'; '.join(resp.diagnostics)})"
        self.last_percept = PerceptSummary(keyframes, note, tool)
        return self.last_percept

    # -- status

    def status(self) -> dict:
        last = self.diagnoses[-1] if self.diagnoses else None
        return {
            "mode": self.mode,
            "current_action": self.current_action.to_dict() if self.current_action else None,
            "last_diagnosis": (
                {"failure_class": last.failure_class, "confidence": last.confidence, "target": last.target} if last else None
            ),
            "last_percept": self.last_percept.to_dict() if self.last_percept else None,
            "heal_counters": dict(self.counters),
            "events_dropped": self.watcher.dropped,
            "watch_connected": self.watcher.connected,
            "updated_at": time.time(),
        }

    def write_status(self) -> None:
        write_pretty(self.state_dir / "daemon.json", self.status())
